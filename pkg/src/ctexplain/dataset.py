"""Dataset enumeration, manifests and stratified fold planning.

Expected on-disk layout::

    root/
      COVID/        *.png (or .jpg)
      non-COVID/    *.png (or .jpg)

A few common folder aliases are accepted (``CT_COVID``, ``CT_NonCOVID``,
``NonCOVID``) since the public releases of the two datasets differ.
"""

from __future__ import annotations

import csv
import enum
import io
import logging
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError

logger = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")


class DatasetError(Exception):
    """Structural problem with a dataset tree, manifest or fold plan."""


class Label(enum.IntEnum):
    NonCOVID = 0
    COVID = 1

    @classmethod
    def parse(cls, value: str | int) -> "Label":
        if isinstance(value, (int, np.integer)):
            return cls(int(value))
        try:
            return cls[value]
        except KeyError:
            raise DatasetError(f"unknown label {value!r}; expected one of {[m.name for m in cls]}") from None


class DatasetId(str, enum.Enum):
    SARS_COV_2_CT = "SARS-CoV-2-CT"
    COVID19_CT = "COVID19-CT"


CLASS_DIRS: dict[Label, tuple[str, ...]] = {
    Label.COVID: ("COVID", "CT_COVID"),
    Label.NonCOVID: ("non-COVID", "NonCOVID", "CT_NonCOVID"),
}


@dataclass(frozen=True)
class ImageRecord:
    path: Path
    label: Label
    width: int
    height: int
    dataset_id: DatasetId = DatasetId.SARS_COV_2_CT

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise DatasetError(f"{self.path}: invalid dimensions {self.width}x{self.height}")


@dataclass(frozen=True)
class DatasetManifest:
    records: tuple[ImageRecord, ...]
    dataset_id: DatasetId = DatasetId.SARS_COV_2_CT
    skipped: int = 0
    counts: dict[Label, int] = field(init=False)

    def __post_init__(self):
        paths = [r.path for r in self.records]
        if len(set(paths)) != len(paths):
            dupes = [p for p, n in Counter(paths).items() if n > 1]
            raise DatasetError(f"duplicate paths in manifest: {dupes[:3]}")
        counts = Counter(r.label for r in self.records)
        object.__setattr__(self, "counts", {lab: counts.get(lab, 0) for lab in Label})

    def __len__(self) -> int:
        return len(self.records)

    @property
    def labels(self) -> np.ndarray:
        return np.array([int(r.label) for r in self.records], dtype=np.int64)

    def subset(self, indices: Iterable[int]) -> "DatasetManifest":
        return DatasetManifest(tuple(self.records[i] for i in indices), self.dataset_id)


@dataclass(frozen=True)
class FoldPlan:
    k: int
    seed: int
    assignments: tuple[int, ...]

    def __post_init__(self):
        if any(not 0 <= a < self.k for a in self.assignments):
            raise DatasetError(f"fold index outside [0, {self.k})")

    def test_indices(self, fold: int) -> list[int]:
        self._check_fold(fold)
        return [i for i, a in enumerate(self.assignments) if a == fold]

    def train_indices(self, fold: int) -> list[int]:
        self._check_fold(fold)
        return [i for i, a in enumerate(self.assignments) if a != fold]

    def fold_counts(self, manifest: DatasetManifest) -> dict[Label, list[int]]:
        """Per-label number of members in each fold."""
        out = {lab: [0] * self.k for lab in Label}
        for rec, fold in zip(manifest.records, self.assignments):
            out[rec.label][fold] += 1
        return out

    def _check_fold(self, fold: int) -> None:
        if not 0 <= fold < self.k:
            raise DatasetError(f"fold {fold} outside [0, {self.k})")


def _find_class_dir(root: Path, label: Label) -> Path:
    for name in CLASS_DIRS[label]:
        candidate = root / name
        if candidate.is_dir():
            return candidate
    raise DatasetError(f"{root}: missing class directory for {label.name} (tried {', '.join(CLASS_DIRS[label])})")


def _probe(path: Path) -> tuple[int, int] | None:
    try:
        with Image.open(path) as img:
            img.load()
            return img.size
    except (OSError, UnidentifiedImageError, ValueError) as exc:
        logger.warning("skipping undecodable image %s: %s", path, exc)
        return None


def scan_dataset(root: str | Path, dataset_id: DatasetId | str = DatasetId.SARS_COV_2_CT,
                 workers: int = 4) -> DatasetManifest:
    """Enumerate every decodable image under ``root``.

    Records are ordered lexicographically by path. Files that fail to decode are
    logged and counted in ``DatasetManifest.skipped`` rather than aborting the scan.
    """
    root = Path(root)
    dataset_id = DatasetId(dataset_id)
    if not root.is_dir():
        raise DatasetError(f"dataset root does not exist: {root}")

    candidates: list[tuple[Path, Label]] = []
    for label in Label:
        class_dir = _find_class_dir(root, label)
        for p in class_dir.iterdir():
            if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES:
                candidates.append((p, label))
    candidates.sort(key=lambda item: item[0].as_posix())

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        sizes = list(pool.map(_probe, [p for p, _ in candidates]))

    records = []
    skipped = 0
    for (path, label), size in zip(candidates, sizes):
        if size is None:
            skipped += 1
            continue
        records.append(ImageRecord(path, label, size[0], size[1], dataset_id))
    return DatasetManifest(tuple(records), dataset_id, skipped)


def stratified_folds(manifest: DatasetManifest, k: int = 5, seed: int = 0) -> FoldPlan:
    """Shuffle each class with ``seed`` and deal its members round-robin into ``k`` folds."""
    if k < 2:
        raise DatasetError(f"k must be >= 2, got {k}")
    for label, n in manifest.counts.items():
        if n < k:
            raise DatasetError(f"class {label.name} has {n} members, fewer than k={k}")

    rng = np.random.default_rng(seed)
    labels = manifest.labels
    assignments = np.full(len(manifest), -1, dtype=np.int64)
    for label in Label:
        members = np.flatnonzero(labels == int(label))
        members = members[rng.permutation(len(members))]
        assignments[members] = np.arange(len(members)) % k
    return FoldPlan(k, seed, tuple(int(a) for a in assignments))


def load_image(record: ImageRecord | str | Path) -> np.ndarray:
    """Decode an image as a float32 H×W array in [0, 1].

    Multi-channel sources are reduced by averaging their color channels; an
    alpha channel is dropped.
    """
    path = Path(record.path if isinstance(record, ImageRecord) else record)
    try:
        with Image.open(path) as img:
            img.load()
            arr = np.asarray(img)
            mode = img.mode
    except (OSError, UnidentifiedImageError, ValueError) as exc:
        raise OSError(f"cannot decode image {path}: {exc}") from exc

    if mode in ("I;16", "I;16B", "I;16L", "I"):
        scale = 65535.0
    elif mode == "F":
        scale = 1.0
    elif mode == "1":
        arr, scale = arr.astype(np.float32), 1.0
    else:
        scale = 255.0
    arr = arr.astype(np.float64)
    if arr.ndim == 3:
        if arr.shape[2] in (2, 4):
            arr = arr[..., :-1]
        arr = arr.mean(axis=2)
    return np.clip(arr / scale, 0.0, 1.0).astype(np.float32)


# ---------------------------------------------------------------------------
# CSV persistence
# ---------------------------------------------------------------------------

MANIFEST_COLUMNS = ("path", "label", "width", "height")


def _write_csv(path: Path | None, header: Sequence[str], rows: Iterable[Sequence], meta: dict[str, str]) -> str:
    buf = io.StringIO()
    for key, value in meta.items():
        buf.write(f"# {key}={value}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    text = buf.getvalue()
    if path is not None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(text, encoding="utf-8")
    return text


def read_csv_with_meta(path: str | Path) -> tuple[dict[str, str], list[dict[str, str]]]:
    """Read a CSV written by this package: ``# key=value`` lines, then a header row."""
    meta: dict[str, str] = {}
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    body = []
    for line in lines:
        if line.startswith("# ") and not body:
            key, _, value = line[2:].partition("=")
            meta[key] = value
        else:
            body.append(line)
    return meta, list(csv.DictReader(body))


def write_manifest(manifest: DatasetManifest, path: str | Path | None, config_hash: str | None = None) -> str:
    meta = {"dataset_id": manifest.dataset_id.value, "skipped": str(manifest.skipped)}
    if config_hash:
        meta["config_hash"] = config_hash
    rows = ((r.path.as_posix(), r.label.name, r.width, r.height) for r in manifest.records)
    return _write_csv(Path(path) if path else None, MANIFEST_COLUMNS, rows, meta)


def read_manifest(path: str | Path) -> DatasetManifest:
    if not Path(path).is_file():
        raise DatasetError(f"manifest not found: {path}")
    meta, rows = read_csv_with_meta(path)
    dataset_id = DatasetId(meta.get("dataset_id", DatasetId.SARS_COV_2_CT.value))
    records = tuple(
        ImageRecord(Path(r["path"]), Label.parse(r["label"]), int(r["width"]), int(r["height"]), dataset_id)
        for r in rows
    )
    return DatasetManifest(records, dataset_id, int(meta.get("skipped", 0)))


def write_fold_plan(plan: FoldPlan, manifest: DatasetManifest, path: str | Path | None,
                    config_hash: str | None = None) -> str:
    if len(plan.assignments) != len(manifest):
        raise DatasetError("fold plan and manifest have different lengths")
    meta = {"k": str(plan.k), "seed": str(plan.seed)}
    if config_hash:
        meta["config_hash"] = config_hash
    rows = ((r.path.as_posix(), fold) for r, fold in zip(manifest.records, plan.assignments))
    return _write_csv(Path(path) if path else None, ("path", "fold"), rows, meta)


def read_fold_plan(path: str | Path, manifest: DatasetManifest) -> FoldPlan:
    if not Path(path).is_file():
        raise DatasetError(f"fold plan not found: {path}")
    meta, rows = read_csv_with_meta(path)
    by_path = {r["path"]: int(r["fold"]) for r in rows}
    try:
        assignments = tuple(by_path[r.path.as_posix()] for r in manifest.records)
    except KeyError as exc:
        raise DatasetError(f"fold plan {path} has no entry for {exc.args[0]}") from None
    return FoldPlan(int(meta["k"]), int(meta["seed"]), assignments)
