"""Fine-tuned CNN classification of chest CT scans with Grad-CAM and t-SNE explanations."""

__version__ = "0.1.0"
