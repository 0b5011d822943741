"""Confusion matrices, classification metrics and cross-fold reporting.

COVID is the positive class. Ratios with a zero denominator are reported as 0
and listed in ``MetricsRow.degenerate``.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

METRIC_NAMES = ("accuracy", "precision", "recall", "specificity", "f1")
METRIC_HEADERS = ("Accuracy", "Precision", "Recall", "Specificity", "F1-score")


class EvaluationError(RuntimeError):
    pass


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int
    tn: int
    fp: int
    fn: int

    def __post_init__(self):
        if min(self.tp, self.tn, self.fp, self.fn) < 0:
            raise ValueError(f"negative count in {self}")

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn

    def as_array(self) -> np.ndarray:
        """2×2 array, rows = actual (COVID, NonCOVID), columns = predicted."""
        return np.array([[self.tp, self.fn], [self.fp, self.tn]])


@dataclass(frozen=True)
class MetricsRow:
    accuracy: float
    precision: float
    recall: float
    specificity: float
    f1: float
    degenerate: tuple[str, ...] = ()

    def values(self) -> np.ndarray:
        return np.array([getattr(self, n) for n in METRIC_NAMES], dtype=np.float64)


@dataclass(frozen=True)
class FoldSummary:
    per_fold: tuple[MetricsRow, ...]
    mean: MetricsRow
    std: MetricsRow
    ddof: int = 1

    def format_cell(self, metric: str) -> str:
        return format_mean_std(getattr(self.mean, metric), getattr(self.std, metric))


def confusion(predictions: Sequence[int], labels: Sequence[int]) -> ConfusionMatrix:
    pred = np.asarray(predictions).astype(np.int64).ravel()
    lab = np.asarray(labels).astype(np.int64).ravel()
    if pred.shape != lab.shape:
        raise ValueError(f"{pred.size} predictions but {lab.size} labels")
    if pred.size == 0:
        raise ValueError("confusion matrix needs at least one sample")
    if not (np.isin(pred, (0, 1)).all() and np.isin(lab, (0, 1)).all()):
        raise ValueError("predictions and labels must be 0 or 1")
    return ConfusionMatrix(
        tp=int(np.sum((pred == 1) & (lab == 1))),
        tn=int(np.sum((pred == 0) & (lab == 0))),
        fp=int(np.sum((pred == 1) & (lab == 0))),
        fn=int(np.sum((pred == 0) & (lab == 1))),
    )


def _ratio(num: float, den: float, name: str, degenerate: list[str]) -> float:
    if den == 0:
        degenerate.append(name)
        return 0.0
    return num / den


def metrics_from_confusion(cm: ConfusionMatrix) -> MetricsRow:
    if cm.total < 1:
        raise ValueError("confusion matrix is empty")
    bad: list[str] = []
    accuracy = (cm.tp + cm.tn) / cm.total
    precision = _ratio(cm.tp, cm.tp + cm.fp, "precision", bad)
    recall = _ratio(cm.tp, cm.tp + cm.fn, "recall", bad)
    specificity = _ratio(cm.tn, cm.tn + cm.fp, "specificity", bad)
    f1 = _ratio(2 * precision * recall, precision + recall, "f1", bad)
    return MetricsRow(accuracy, precision, recall, specificity, f1, tuple(bad))


def aggregate_folds(rows: Sequence[MetricsRow], ddof: int = 1) -> FoldSummary:
    """Component-wise mean and standard deviation (sample std by default)."""
    if len(rows) < 2:
        raise ValueError(f"need at least 2 folds to aggregate, got {len(rows)}")
    values = np.stack([r.values() for r in rows])
    mean = values.mean(axis=0)
    std = values.std(axis=0, ddof=ddof)
    flagged = tuple(sorted({name for r in rows for name in r.degenerate}))
    return FoldSummary(tuple(rows), MetricsRow(*mean.tolist(), degenerate=flagged), MetricsRow(*std.tolist()), ddof)


def format_mean_std(mean: float, std: float) -> str:
    """Percentages with one decimal, e.g. ``99.4 ± 0.4``."""
    return f"{100 * mean:.1f} ± {100 * std:.1f}"


def mean_confusion(cms: Sequence[ConfusionMatrix]) -> np.ndarray:
    """Average 2×2 counts across folds (same layout as ``ConfusionMatrix.as_array``)."""
    return np.mean([cm.as_array() for cm in cms], axis=0)


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

def fold_record(dataset: str, model: str, fold: int, cm: ConfusionMatrix, row: MetricsRow,
                config_hash: str = "") -> dict:
    return {
        "dataset": dataset, "model": model, "fold": fold, "config_hash": config_hash,
        "confusion": asdict(cm), "metrics": {n: getattr(row, n) for n in METRIC_NAMES},
        "degenerate": list(row.degenerate),
    }


def rows_from_records(records: Sequence[dict]) -> list[MetricsRow]:
    return [MetricsRow(**{n: float(r["metrics"][n]) for n in METRIC_NAMES},
                       degenerate=tuple(r.get("degenerate", ()))) for r in records]


def summary_record(dataset: str, model: str, summary: FoldSummary, config_hash: str = "") -> dict:
    return {
        "dataset": dataset, "model": model, "summary": True, "folds": len(summary.per_fold),
        "config_hash": config_hash, "std_ddof": summary.ddof,
        "mean": {n: getattr(summary.mean, n) for n in METRIC_NAMES},
        "std": {n: getattr(summary.std, n) for n in METRIC_NAMES},
        "degenerate": list(summary.mean.degenerate),
    }


def write_json(obj, path: str | Path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


@dataclass
class TableRow:
    dataset: str
    model: str
    summary: FoldSummary
    notes: list[str] = field(default_factory=list)


def render_markdown(rows: Sequence[TableRow], config_hash: str = "") -> str:
    lines = ["| Dataset | Model | " + " | ".join(METRIC_HEADERS) + " |",
             "|---|---|" + "---|" * len(METRIC_HEADERS)]
    for r in rows:
        cells = [r.summary.format_cell(n) for n in METRIC_NAMES]
        lines.append(f"| {r.dataset} | {r.model} | " + " | ".join(cells) + " |")
    flagged = [r for r in rows if r.summary.mean.degenerate]
    for r in flagged:
        lines.append("")
        lines.append(f"degenerate ratios for {r.dataset}/{r.model}: {', '.join(r.summary.mean.degenerate)} "
                     "(reported as 0)")
    if config_hash:
        lines += ["", f"<!-- config_hash={config_hash} -->"]
    return "\n".join(lines) + "\n"


def render_csv(rows: Sequence[TableRow], config_hash: str = "") -> str:
    buf = io.StringIO()
    if config_hash:
        buf.write(f"# config_hash={config_hash}\n")
    writer = csv.writer(buf, lineterminator="\n")
    header = ["dataset", "model"]
    for n in METRIC_NAMES:
        header += [f"{n}_mean", f"{n}_std"]
    writer.writerow(header)
    for r in rows:
        line = [r.dataset, r.model]
        for n in METRIC_NAMES:
            line += [f"{getattr(r.summary.mean, n):.6f}", f"{getattr(r.summary.std, n):.6f}"]
        writer.writerow(line)
    return buf.getvalue()


def confusion_csv(avg: np.ndarray, config_hash: str = "") -> str:
    buf = io.StringIO()
    if config_hash:
        buf.write(f"# config_hash={config_hash}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(("actual", "pred_COVID", "pred_NonCOVID"))
    writer.writerow(("COVID", f"{avg[0, 0]:.1f}", f"{avg[0, 1]:.1f}"))
    writer.writerow(("NonCOVID", f"{avg[1, 0]:.1f}", f"{avg[1, 1]:.1f}"))
    return buf.getvalue()


def plot_confusion(avg: np.ndarray, out_path: str | Path, title: str = "") -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(4, 3.5))
    ax.imshow(avg, cmap="Blues")
    classes = ("COVID", "NonCOVID")
    ax.set_xticks([0, 1], classes)
    ax.set_yticks([0, 1], classes)
    ax.set_xlabel("Predicted")
    ax.set_ylabel("Actual")
    threshold = avg.max() / 2 if avg.size else 0
    for i in range(2):
        for j in range(2):
            ax.text(j, i, f"{avg[i, j]:.1f}", ha="center", va="center",
                    color="white" if avg[i, j] > threshold else "black")
    if title:
        ax.set_title(title)
    fig.tight_layout()
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path


# ---------------------------------------------------------------------------
# Model evaluation
# ---------------------------------------------------------------------------

def evaluate_fold(model, manifest, fold_plan, fold_index: int, batch_size: int = 32,
                  num_workers: int = 0) -> tuple[ConfusionMatrix, MetricsRow]:
    """Deterministic inference on one test fold, thresholding sigmoid(logit) at 0.5."""
    from .pipeline import CTImageDataset
    from .train import predict_logits

    idx = fold_plan.test_indices(fold_index)
    if not idx:
        raise EvaluationError(f"fold {fold_index}: empty test split")
    records = [manifest.records[i] for i in idx]
    dataset = CTImageDataset(records, model.spec.custom_input, aug=None)
    logits = predict_logits(model, dataset, batch_size=batch_size, num_workers=num_workers)
    preds = (logits >= 0).long().numpy()
    labels = np.array([int(r.label) for r in records])
    cm = confusion(preds, labels)
    return cm, metrics_from_confusion(cm)
