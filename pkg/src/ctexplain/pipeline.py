"""Per-image preprocessing chain and the torch dataset that feeds training/eval."""

from __future__ import annotations

import numpy as np
import torch
from torch.utils.data import Dataset

from .dataset import DatasetManifest, ImageRecord, load_image
from .preprocess import (
    IMAGENET_STATS,
    AugmentationConfig,
    CanvasSpec,
    NormalizationStats,
    augment,
    canvas_embed,
    normalize,
    replicate_channels,
)


def prepare_image(gray: np.ndarray, canvas: CanvasSpec, aug: AugmentationConfig | None = None,
                  rng: np.random.Generator | None = None,
                  stats: NormalizationStats = IMAGENET_STATS) -> np.ndarray:
    """augment -> canvas_embed -> replicate -> normalize, giving a 3×H×W float32 array.

    Augmentation runs on the un-padded gray image so crops only see real content.
    """
    if aug is not None and aug.enabled:
        if rng is None:
            raise ValueError("augmentation requires an rng")
        gray = augment(gray, aug, rng)
    return normalize(replicate_channels(canvas_embed(gray, canvas)), stats)


def sample_rng(seed: int, epoch: int, index: int) -> np.random.Generator:
    """Independent stream per (seed, epoch, sample) so worker scheduling cannot change results."""
    return np.random.default_rng(np.random.SeedSequence([seed, epoch, index]))


class CTImageDataset(Dataset):
    def __init__(self, records: DatasetManifest | list[ImageRecord], canvas: CanvasSpec,
                 aug: AugmentationConfig | None = None, seed: int = 0,
                 stats: NormalizationStats = IMAGENET_STATS):
        self.records = list(records.records if isinstance(records, DatasetManifest) else records)
        self.canvas = canvas
        self.aug = aug
        self.seed = seed
        self.stats = stats
        self.epoch = 0

    def __len__(self) -> int:
        return len(self.records)

    def __getitem__(self, index: int) -> tuple[torch.Tensor, torch.Tensor]:
        rec = self.records[index]
        rng = sample_rng(self.seed, self.epoch, index) if self.aug is not None and self.aug.enabled else None
        x = prepare_image(load_image(rec), self.canvas, self.aug, rng, self.stats)
        return torch.from_numpy(x), torch.tensor(float(int(rec.label)))
