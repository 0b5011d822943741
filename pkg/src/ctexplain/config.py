"""Pipeline configuration: a TOML file with documented defaults.

Example (every key except ``dataset.root`` and ``model.name`` is optional)::

    [dataset]
    root = "data/sars-cov-2"
    dataset_id = "SARS-CoV-2-CT"

    [split]
    k = 5
    seed = 0

    [model]
    name = "ResNet18"
    pretrained = true

    [train]
    epochs = 100
    batch_size = 32
    base_lr = 0.0003
    milestones = [[50, 0.0001], [70, 0.00003], [80, 0.00001], [90, 0.000003]]
    weight_decay = 1.0

    [train.augment]
    blur_probability = 0.25

    [explain]
    perplexity = 30
    fold = 0

    [output]
    dir = "runs/sars-resnet18"
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

import tomli

from .dataset import DatasetId
from .embedding import TsneParams
from .lamb import LambHyper
from .modelzoo import registry_lookup
from .preprocess import AugmentationConfig
from .train import DEFAULT_MILESTONES, LrSchedule, TrainConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DatasetSection:
    root: Path
    dataset_id: DatasetId = DatasetId.SARS_COV_2_CT


@dataclass(frozen=True)
class SplitSection:
    k: int = 5
    seed: int = 0


@dataclass(frozen=True)
class ModelSection:
    name: str
    pretrained: bool = True
    seed: int = 0
    cache_dir: Path | None = None


@dataclass(frozen=True)
class TrainSection:
    epochs: int = 100
    batch_size: int = 32
    base_lr: float = 3e-4
    milestones: tuple[tuple[int, float], ...] = DEFAULT_MILESTONES
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-6
    weight_decay: float = 1.0
    seed: int = 0
    checkpoint_every: int = 0
    num_workers: int = 0
    bn_recalibrate: bool = False
    device: str = "cpu"
    augment: AugmentationConfig = AugmentationConfig()

    def train_config(self, fold_index: int) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            hyper=LambHyper(self.beta1, self.beta2, self.epsilon, self.weight_decay, self.base_lr),
            schedule=LrSchedule(self.base_lr, self.milestones),
            seed=self.seed,
            fold_index=fold_index,
            aug=self.augment,
            checkpoint_every=self.checkpoint_every,
            num_workers=self.num_workers,
            bn_recalibrate=self.bn_recalibrate,
            device=self.device,
        )


@dataclass(frozen=True)
class ExplainSection:
    perplexity: float = 30.0
    iterations: int = 1000
    learning_rate: float | str = "auto"
    seed: int = 0
    fold: int = 0
    gradcam_layer: str | None = None
    alpha: float = 0.4
    crop_to_content: bool = False
    max_images: int = 8

    @property
    def tsne(self) -> TsneParams:
        return TsneParams(self.perplexity, self.iterations, self.learning_rate, self.seed)


@dataclass(frozen=True)
class OutputSection:
    dir: Path = Path("runs")
    formats: tuple[str, ...] = ("json", "md", "csv")


@dataclass(frozen=True)
class PipelineConfig:
    dataset: DatasetSection
    model: ModelSection
    split: SplitSection = SplitSection()
    train: TrainSection = TrainSection()
    explain: ExplainSection = ExplainSection()
    output: OutputSection = OutputSection()
    source: Path | None = field(default=None, compare=False)

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d.pop("source")
        return json.loads(json.dumps(d, default=_jsonable))

    @property
    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:12]


def _jsonable(obj):
    if isinstance(obj, Path):
        return obj.as_posix()
    if isinstance(obj, DatasetId):
        return obj.value
    raise TypeError(f"not serializable: {obj!r}")


_SECTIONS = {
    "dataset": DatasetSection, "split": SplitSection, "model": ModelSection,
    "train": TrainSection, "explain": ExplainSection, "output": OutputSection,
}
_REQUIRED = {"dataset": ("root",), "model": ("name",)}
_FORMATS = {"json", "md", "csv"}


def _check_type(key: str, value: Any, expected: type | tuple) -> Any:
    # bool is an int subclass; keep them apart
    if isinstance(value, bool) and bool not in (expected if isinstance(expected, tuple) else (expected,)):
        raise ConfigError(f"{key}: expected {expected}, got boolean")
    if float in (expected if isinstance(expected, tuple) else (expected,)) and isinstance(value, int) \
            and not isinstance(value, bool):
        return float(value)
    if not isinstance(value, expected):
        raise ConfigError(f"{key}: expected {getattr(expected, '__name__', expected)}, got {type(value).__name__}")
    return value


_TYPES: dict[str, dict[str, type | tuple]] = {
    "dataset": {"root": str, "dataset_id": str},
    "split": {"k": int, "seed": int},
    "model": {"name": str, "pretrained": bool, "seed": int, "cache_dir": str},
    "train": {"epochs": int, "batch_size": int, "base_lr": float, "milestones": list, "beta1": float,
              "beta2": float, "epsilon": float, "weight_decay": float, "seed": int, "checkpoint_every": int,
              "num_workers": int, "bn_recalibrate": bool, "device": str, "augment": dict},
    "explain": {"perplexity": float, "iterations": int, "learning_rate": (float, str), "seed": int, "fold": int,
                "gradcam_layer": str, "alpha": float, "crop_to_content": bool, "max_images": int},
    "output": {"dir": str, "formats": list},
}
_AUG_TYPES = {f.name: (bool if f.name == "enabled" else list if "range" in f.name else float)
              for f in fields(AugmentationConfig)}


def _resolve(base: Path, value: str) -> Path:
    p = Path(value).expanduser()
    return p if p.is_absolute() else (base / p)


def parse_config(data: dict[str, Any], base_dir: Path = Path("."), source: Path | None = None) -> PipelineConfig:
    unknown = set(data) - set(_SECTIONS)
    if unknown:
        raise ConfigError(f"unknown config section(s): {', '.join(sorted(unknown))}")
    sections: dict[str, Any] = {}
    for name, cls in _SECTIONS.items():
        raw = data.get(name, {})
        if not isinstance(raw, dict):
            raise ConfigError(f"{name}: expected a table")
        types = _TYPES[name]
        values: dict[str, Any] = {}
        for key, value in raw.items():
            dotted = f"{name}.{key}"
            if key not in types:
                raise ConfigError(f"unknown config key {dotted!r}")
            values[key] = _check_type(dotted, value, types[key])
        for key in _REQUIRED.get(name, ()):
            if key not in values:
                raise ConfigError(f"missing required key '{name}.{key}'")
        try:
            sections[name] = _build_section(name, cls, values, base_dir)
        except ConfigError:
            raise
        except (ValueError, KeyError, TypeError) as exc:
            msg = exc.args[0] if exc.args else str(exc)
            raise ConfigError(f"{name}: {msg}") from None
    cfg = PipelineConfig(source=source, **sections)
    _semantic_checks(cfg)
    return cfg


def _build_section(name: str, cls: type, values: dict[str, Any], base: Path):
    if name == "dataset":
        values["root"] = _resolve(base, values["root"])
        if "dataset_id" in values:
            values["dataset_id"] = DatasetId(values["dataset_id"])
    elif name == "model":
        values["name"] = registry_lookup(values["name"]).name
        if "cache_dir" in values:
            values["cache_dir"] = _resolve(base, values["cache_dir"])
    elif name == "train":
        if "milestones" in values:
            ms = []
            for item in values["milestones"]:
                if not (isinstance(item, list) and len(item) == 2):
                    raise ConfigError("train.milestones: expected a list of [epoch, lr] pairs")
                ms.append((int(_check_type("train.milestones", item[0], int)),
                           float(_check_type("train.milestones", item[1], float))))
            values["milestones"] = tuple(ms)
        if "augment" in values:
            aug = {}
            for key, value in values["augment"].items():
                dotted = f"train.augment.{key}"
                if key not in _AUG_TYPES:
                    raise ConfigError(f"unknown config key {dotted!r}")
                value = _check_type(dotted, value, _AUG_TYPES[key])
                aug[key] = tuple(float(v) for v in value) if isinstance(value, list) else value
            values["augment"] = AugmentationConfig(**aug)
        section = cls(**values)
        section.train_config(0)  # validates LAMB / schedule / train fields
        return section
    elif name == "output":
        if "dir" in values:
            values["dir"] = _resolve(base, values["dir"])
        if "formats" in values:
            bad = set(values["formats"]) - _FORMATS
            if bad:
                raise ConfigError(f"output.formats: unsupported {sorted(bad)}; choose from {sorted(_FORMATS)}")
            values["formats"] = tuple(values["formats"])
    return cls(**values)


def _semantic_checks(cfg: PipelineConfig) -> None:
    if cfg.split.k < 2:
        raise ConfigError(f"split.k: must be >= 2 for cross-validation, got {cfg.split.k}")
    if not 0 <= cfg.explain.fold < cfg.split.k:
        raise ConfigError(f"explain.fold: must be in [0, {cfg.split.k}), got {cfg.explain.fold}")
    if cfg.explain.iterations < 250:
        raise ConfigError("explain.iterations: must be >= 250")
    if not 0.0 <= cfg.explain.alpha <= 1.0:
        raise ConfigError("explain.alpha: must be in [0, 1]")
    if isinstance(cfg.explain.learning_rate, str) and cfg.explain.learning_rate != "auto":
        raise ConfigError("explain.learning_rate: must be a number or \"auto\"")
    out = cfg.output.dir
    existing = next((p for p in [out, *out.parents] if p.exists()), None)
    if existing is not None and not existing.is_dir():
        raise ConfigError(f"output.dir: {out} is not creatable ({existing} is not a directory)")


def validate_config(path: str | Path) -> PipelineConfig:
    """Parse and validate a config file, filling every documented default."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror or exc}") from None
    try:
        data = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: parse error: {exc}") from None
    return parse_config(data, path.parent.resolve(), path)
