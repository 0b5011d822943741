"""t-SNE projection of penultimate features and the train/test scatter figure."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from sklearn.manifold import TSNE

from .dataset import Label

# (label, split) -> color; COVID red/blue, NonCOVID yellow/green for train/test
GROUP_COLORS = {
    (Label.COVID, "train"): "red",
    (Label.COVID, "test"): "blue",
    (Label.NonCOVID, "train"): "gold",
    (Label.NonCOVID, "test"): "green",
}


@dataclass(frozen=True)
class TsneParams:
    perplexity: float = 30.0
    iterations: int = 1000
    learning_rate: float | str = "auto"
    seed: int = 0
    early_exaggeration: float = 12.0
    n_jobs: int | None = None

    def validate(self, n: int) -> None:
        if self.iterations < 250:
            raise ValueError(f"iterations must be >= 250, got {self.iterations}")
        if not 1 <= self.perplexity < (n - 1) / 3:
            raise ValueError(f"perplexity {self.perplexity} infeasible for N={n}: need 1 <= perplexity < {(n - 1) / 3:g}")


@dataclass(frozen=True)
class Embedding2D:
    coords: np.ndarray
    labels: np.ndarray
    splits: np.ndarray

    def __post_init__(self):
        if self.coords.ndim != 2 or self.coords.shape[1] != 2:
            raise ValueError(f"coords must be N×2, got {self.coords.shape}")
        if not (len(self.labels) == len(self.splits) == len(self.coords)):
            raise ValueError("coords, labels and splits must have equal length")

    def to_csv(self, path: str | Path | None = None, config_hash: str = "") -> str:
        buf = io.StringIO()
        if config_hash:
            buf.write(f"# config_hash={config_hash}\n")
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(("x", "y", "label", "split"))
        for (x, y), lab, split in zip(self.coords, self.labels, self.splits):
            writer.writerow((repr(float(x)), repr(float(y)), Label(int(lab)).name, split))
        text = buf.getvalue()
        if path is not None:
            Path(path).parent.mkdir(parents=True, exist_ok=True)
            Path(path).write_text(text, encoding="utf-8")
        return text


def tsne_embed(features: np.ndarray, params: TsneParams = TsneParams(),
               labels: Sequence[int] | None = None, splits: Sequence[str] | None = None) -> Embedding2D:
    """Barnes-Hut t-SNE with PCA initialization.

    The first 250 iterations use early exaggeration. Single-threaded runs with the
    same seed are bitwise reproducible; ``n_jobs`` only parallelizes the neighbor
    search.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 5 or x.shape[1] < 2:
        raise ValueError(f"need an N×D matrix with N >= 5 and D >= 2, got shape {x.shape}")
    n = x.shape[0]
    params.validate(n)
    tsne = TSNE(
        n_components=2,
        perplexity=params.perplexity,
        early_exaggeration=params.early_exaggeration,
        learning_rate=params.learning_rate,
        max_iter=params.iterations,
        init="pca",
        random_state=params.seed,
        n_jobs=params.n_jobs,
    )
    coords = tsne.fit_transform(x)
    labels = np.asarray(labels if labels is not None else np.zeros(n, dtype=np.int64))
    splits = np.asarray(splits if splits is not None else ["train"] * n)
    return Embedding2D(coords, labels, splits)


def scatter_figure(embedding: Embedding2D):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 5))
    for (label, split), color in GROUP_COLORS.items():
        mask = (embedding.labels == int(label)) & (embedding.splits == split)
        if not mask.any():
            continue
        pts = embedding.coords[mask]
        ax.scatter(pts[:, 0], pts[:, 1], s=8, c=color, label=f"{label.name} ({split})", alpha=0.8)
    ax.legend(loc="best", markerscale=2)
    ax.set_xticks([])
    ax.set_yticks([])
    fig.tight_layout()
    return fig


def scatter_plot(embedding: Embedding2D, out_path: str | Path) -> Path:
    import matplotlib.pyplot as plt

    out_path = Path(out_path)
    fig = scatter_figure(embedding)
    try:
        fig.savefig(out_path, dpi=120)
    finally:
        plt.close(fig)
    return out_path
