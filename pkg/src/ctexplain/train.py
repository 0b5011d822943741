"""Fine-tuning loop: stepped learning-rate schedule, BCE loss and LAMB updates."""

from __future__ import annotations

import bisect
import csv
import io
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import torch
import torch.nn as nn
from torch.utils.data import DataLoader

from .dataset import DatasetManifest, FoldPlan
from .lamb import Lamb, LambHyper
from .modelzoo import ClassifierModel, save_checkpoint
from .pipeline import CTImageDataset
from .preprocess import AugmentationConfig

logger = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


DEFAULT_MILESTONES = ((50, 1e-4), (70, 3e-5), (80, 1e-5), (90, 3e-6))


@dataclass(frozen=True)
class LrSchedule:
    base_lr: float = 3e-4
    milestones: tuple[tuple[int, float], ...] = DEFAULT_MILESTONES

    def __post_init__(self):
        epochs = [e for e, _ in self.milestones]
        if any(b <= a for a, b in zip(epochs, epochs[1:])):
            raise ValueError(f"milestone epochs must be strictly increasing, got {epochs}")
        if self.base_lr <= 0 or any(lr <= 0 for _, lr in self.milestones):
            raise ValueError("learning rates must be positive")


def lr_at_epoch(schedule: LrSchedule, epoch: int) -> float:
    """Learning rate for a 0-indexed epoch; a milestone takes effect at its own epoch."""
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    epochs = [e for e, _ in schedule.milestones]
    i = bisect.bisect_right(epochs, epoch)
    return schedule.base_lr if i == 0 else schedule.milestones[i - 1][1]


def bce_loss(logits, labels) -> torch.Tensor:
    """Mean binary cross-entropy on raw logits, max(z,0) - z*y + log1p(exp(-|z|))."""
    z = torch.as_tensor(logits)
    y = torch.as_tensor(labels, dtype=z.dtype if z.is_floating_point() else torch.float64)
    if not z.is_floating_point():
        z = z.to(y.dtype)
    if z.numel() == 0:
        raise ValueError("bce_loss needs at least one sample")
    if z.shape != y.shape:
        raise ValueError(f"logits shape {tuple(z.shape)} != labels shape {tuple(y.shape)}")
    return (z.clamp(min=0) - z * y + torch.log1p(torch.exp(-z.abs()))).mean()


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 32
    hyper: LambHyper = LambHyper()
    schedule: LrSchedule = LrSchedule()
    seed: int = 0
    fold_index: int = 0
    aug: AugmentationConfig = AugmentationConfig()
    checkpoint_every: int = 0
    num_workers: int = 0
    bn_recalibrate: bool = False
    device: str = "cpu"

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    loss: float
    accuracy: float
    lr: float


@dataclass
class EpochHistory:
    records: list[EpochRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def __getitem__(self, i: int) -> EpochRecord:
        return self.records[i]

    def to_csv(self, path: str | Path | None = None, config_hash: str | None = None) -> str:
        buf = io.StringIO()
        if config_hash:
            buf.write(f"# config_hash={config_hash}\n")
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(("epoch", "loss", "accuracy", "lr"))
        for r in self.records:
            writer.writerow((r.epoch, repr(r.loss), repr(r.accuracy), repr(r.lr)))
        text = buf.getvalue()
        if path is not None:
            Path(path).parent.mkdir(parents=True, exist_ok=True)
            Path(path).write_text(text, encoding="utf-8")
        return text


def resolve_device(name: str) -> torch.device:
    if name == "auto":
        return torch.device("cuda" if torch.cuda.is_available() else "cpu")
    return torch.device(name)


def _epoch_order(n: int, seed: int, epoch: int) -> list[int]:
    gen = torch.Generator().manual_seed(seed * 100003 + epoch)
    return torch.randperm(n, generator=gen).tolist()


def train_fold(model: ClassifierModel, manifest: DatasetManifest, fold_plan: FoldPlan, fold_index: int,
               config: TrainConfig, checkpoint_dir: str | Path | None = None, config_hash: str = "",
               progress: Callable[[str], None] | None = print) -> tuple[ClassifierModel, EpochHistory]:
    """Train ``model`` in place on every record outside ``fold_index``.

    Returns the final-epoch model; no validation-based selection is done.
    """
    train_idx = fold_plan.train_indices(fold_index)
    if not train_idx:
        raise TrainingError(f"fold {fold_index}: empty training split")
    history = EpochHistory()
    if config.epochs == 0:
        return model, history

    records = [manifest.records[i] for i in train_idx]
    dataset = CTImageDataset(records, model.spec.custom_input, config.aug, seed=config.seed)

    named = [(n, p) for n, p in model.named_parameters() if p.requires_grad]
    optimizer = Lamb([p for _, p in named], config.hyper, names=[n for n, _ in named])

    device = resolve_device(config.device)
    model.to(device)
    torch.manual_seed(config.seed)
    checkpoint_dir = Path(checkpoint_dir) if checkpoint_dir else None
    for epoch in range(config.epochs):
        lr = lr_at_epoch(config.schedule, epoch)
        for group in optimizer.param_groups:
            group["lr"] = lr
        dataset.epoch = epoch
        loader = DataLoader(dataset, batch_size=config.batch_size,
                            sampler=_epoch_order(len(dataset), config.seed, epoch),
                            num_workers=config.num_workers)
        model.train()
        total_loss = 0.0
        correct = 0
        seen = 0
        for batch_idx, (x, y) in enumerate(loader):
            x, y = x.to(device), y.to(device)
            optimizer.zero_grad(set_to_none=True)
            logits = model(x)
            loss = bce_loss(logits, y)
            if not torch.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {batch_idx}")
            loss.backward()
            try:
                optimizer.step()
            except FloatingPointError as exc:
                raise TrainingError(f"epoch {epoch}, batch {batch_idx}: {exc}") from exc
            total_loss += loss.item() * len(y)
            correct += int(((logits.detach() >= 0).float() == y).sum())
            seen += len(y)

        rec = EpochRecord(epoch, total_loss / seen, correct / seen, lr)
        history.records.append(rec)
        if progress is not None:
            progress(f"epoch {epoch + 1}/{config.epochs} loss={rec.loss:.4f} acc={rec.accuracy:.4f} lr={lr:g}")

        last = epoch == config.epochs - 1
        if last and config.bn_recalibrate:
            recalibrate_batchnorm(model, CTImageDataset(records, model.spec.custom_input, aug=None),
                                  config.batch_size, config.num_workers)
        if checkpoint_dir is not None and (last or config.checkpoint_every and (epoch + 1) % config.checkpoint_every == 0):
            name = "model.pt" if last else f"epoch{epoch + 1:03d}.pt"
            save_checkpoint(model, checkpoint_dir / name, epoch=epoch + 1, fold=fold_index, config_hash=config_hash)
    return model, history


def recalibrate_batchnorm(model: ClassifierModel, dataset: CTImageDataset, batch_size: int = 32,
                          num_workers: int = 0) -> None:
    """Replace BatchNorm running statistics by exact averages under the current weights.

    Only buffers change. Short runs need this because the exponential running
    average still carries statistics from much earlier weights.
    """
    norms = [m for m in model.modules() if isinstance(m, nn.modules.batchnorm._BatchNorm)]
    if not norms:
        return
    momenta = [m.momentum for m in norms]
    for m in norms:
        m.reset_running_stats()
        m.momentum = None
    model.train()
    loader = DataLoader(dataset, batch_size=batch_size, shuffle=False, num_workers=num_workers)
    device = next(model.parameters()).device
    with torch.no_grad():
        for x, _ in loader:
            model(x.to(device))
    for m, momentum in zip(norms, momenta):
        m.momentum = momentum


def predict_logits(model: ClassifierModel, dataset: CTImageDataset, batch_size: int = 32,
                   num_workers: int = 0) -> torch.Tensor:
    model.eval()
    loader = DataLoader(dataset, batch_size=batch_size, shuffle=False, num_workers=num_workers)
    device = next(model.parameters()).device
    out: list[torch.Tensor] = []
    with torch.no_grad():
        for x, _ in loader:
            out.append(model(x.to(device)).cpu())
    return torch.cat(out) if out else torch.empty(0)
