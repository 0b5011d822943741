"""Gradient-weighted class activation maps and heat-map overlays."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .preprocess import Placement

COLORMAP = "inferno"


@dataclass(frozen=True)
class SaliencyMap:
    values: np.ndarray     # H'×W' at the target layer's resolution
    upsampled: np.ndarray  # canvas resolution
    target_class: int = 1


def cam_from_activations(activations: torch.Tensor, gradients: torch.Tensor) -> torch.Tensor:
    """ReLU(sum_k alpha_k A_k) with alpha_k the spatial mean of dScore/dA_k, min-max normalized.

    Takes K×H×W tensors and returns an H×W map in [0, 1]. A constant map
    carries no localization and comes back all-zero.
    """
    if activations.numel() == 0:
        raise ValueError("zero-size activation")
    if activations.shape != gradients.shape or activations.ndim != 3:
        raise ValueError(f"expected matching K×H×W tensors, got {tuple(activations.shape)} "
                         f"and {tuple(gradients.shape)}")
    alpha = gradients.mean(dim=(1, 2))
    cam = F.relu(torch.einsum("k,khw->hw", alpha, activations))
    lo, hi = cam.min(), cam.max()
    if hi <= lo:
        return torch.zeros_like(cam)
    return (cam - lo) / (hi - lo)


def available_layers(model: nn.Module) -> list[str]:
    return [name for name, _ in model.named_modules() if name]


def grad_cam(model: nn.Module, input: torch.Tensor, target_layer: str | None = None,
             target_class: int = 1) -> SaliencyMap:
    """Explain the positive-class logit of ``model`` on one 3×H×W input.

    ``target_layer`` is a dotted module name; it defaults to the model spec's
    ``gradcam_layer``. For ``target_class=0`` the negated logit is explained.
    """
    if target_layer is None:
        target_layer = model.spec.gradcam_layer
    try:
        layer = model.get_submodule(target_layer)
    except AttributeError:
        raise KeyError(f"layer {target_layer!r} not found; available taps: {', '.join(available_layers(model))}") from None

    x = input.unsqueeze(0) if input.ndim == 3 else input
    x = x.to(next(model.parameters()).device)
    if x.shape[0] != 1:
        raise ValueError("grad_cam explains a single input")
    captured: dict[str, torch.Tensor] = {}

    def hook(_module, _inputs, output):
        out = output.clone()
        # cloning decouples the hooked value from later in-place ops (e.g. DenseNet's relu_)
        out.register_hook(lambda g: captured.__setitem__("grad", g.detach()))
        captured["act"] = out.detach()
        return out

    was_training = model.training
    model.eval()
    handle = layer.register_forward_hook(hook)
    try:
        with torch.enable_grad():
            x = x.detach().requires_grad_(True)
            logit = model(x).reshape(-1)[0]
            score = logit if target_class == 1 else -logit
            model.zero_grad(set_to_none=True)
            score.backward()
    finally:
        handle.remove()
        model.train(was_training)
        model.zero_grad(set_to_none=True)

    act, grad = captured["act"][0].cpu(), captured["grad"][0].cpu()
    cam = cam_from_activations(act, grad)
    up = F.interpolate(cam[None, None], size=tuple(x.shape[-2:]), mode="bilinear", align_corners=False)[0, 0]
    return SaliencyMap(cam.numpy(), up.clamp(0, 1).numpy(), target_class)


def crop_to_content(smap: SaliencyMap, placement: Placement) -> np.ndarray:
    """The upsampled map restricted to the non-padded content rectangle."""
    return smap.upsampled[placement.top:placement.bottom, placement.left:placement.right]


def overlay(heat: SaliencyMap | np.ndarray, image: np.ndarray, alpha: float = 0.4) -> np.ndarray:
    """(1 - alpha) * image + alpha * colormap(map), for an H×W×3 image in [0, 1]."""
    from matplotlib import colormaps

    grid = heat.upsampled if isinstance(heat, SaliencyMap) else np.asarray(heat)
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must be in [0, 1], got {alpha}")
    if image.ndim == 2:
        image = np.repeat(image[..., None], 3, axis=2)
    if grid.shape != image.shape[:2]:
        raise ValueError(f"map shape {grid.shape} does not match image shape {image.shape[:2]}")
    colored = colormaps[COLORMAP](np.clip(grid, 0, 1))[..., :3]
    out = (1.0 - alpha) * image + alpha * colored
    return np.clip(out, 0.0, 1.0)


def map_to_csv(values: np.ndarray, path: str | Path | None = None, config_hash: str = "") -> str:
    buf = io.StringIO()
    if config_hash:
        buf.write(f"# config_hash={config_hash}\n")
    writer = csv.writer(buf, lineterminator="\n")
    for row in np.asarray(values):
        writer.writerow([f"{v:.6f}" for v in row])
    text = buf.getvalue()
    if path is not None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(text, encoding="utf-8")
    return text


def save_rgb(image: np.ndarray, path: str | Path) -> Path:
    from PIL import Image

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray((np.clip(image, 0, 1) * 255).round().astype(np.uint8)).save(path)
    return path
