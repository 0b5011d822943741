"""Registry of backbone architectures and the binary classifier built on them.

Backbones come from torchvision (and timm for Xception); only their final
ImageNet classifier is replaced. Input geometry and size metadata follow the
architecture table used for these experiments.
"""

from __future__ import annotations

import hashlib
import os
import re
import shutil
import tempfile
import urllib.error
import urllib.request
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import torch
import torch.nn as nn
import torchvision.models as tvm

from .preprocess import CanvasSpec

CACHE_ENV = "CTX_CACHE"


class WeightFetchError(RuntimeError):
    """Pretrained weights could not be obtained."""


class NetworkUnavailableError(WeightFetchError):
    pass


class ChecksumMismatchError(WeightFetchError):
    pass


@dataclass(frozen=True)
class ModelSpec:
    name: str
    default_input: CanvasSpec
    custom_input: CanvasSpec
    feature_dim: int
    param_count_m: float
    layer_count: int
    model_size_mb: float
    gradcam_layer: str
    weights_url: str

    @property
    def input_shape(self) -> tuple[int, int, int]:
        """Expected (C, H, W) of one network input."""
        return 3, self.custom_input.height, self.custom_input.width


def _spec(name, default, custom, feature_dim, params, layers, size_mb, gradcam_layer, url):
    return ModelSpec(name, CanvasSpec(*default), CanvasSpec(*custom), feature_dim, params, layers, size_mb,
                     gradcam_layer, url)


_TV = "https://download.pytorch.org/models/"

# Canvas sizes are (width, height).
REGISTRY: dict[str, ModelSpec] = {s.name: s for s in (
    _spec("SqueezeNet", (227, 227), (335, 255), 512, 0.73, 18, 3.0, "backbone.features",
          _TV + "squeezenet1_0-b66bff10.pth"),
    _spec("ShuffleNet", (224, 224), (321, 225), 1024, 0.34, 51, 1.5, "backbone.conv5",
          _TV + "shufflenetv2_x0.5-f707e7126e.pth"),
    _spec("ResNet18", (224, 224), (349, 253), 512, 11.17, 18, 44.8, "backbone.layer4",
          _TV + "resnet18-f37072fd.pth"),
    _spec("ResNet50", (224, 224), (349, 253), 2048, 23.51, 50, 94.3, "backbone.layer4",
          _TV + "resnet50-0676ba61.pth"),
    _spec("ResNet101", (224, 224), (349, 253), 2048, 42.50, 101, 170.6, "backbone.layer4",
          _TV + "resnet101-63fe2227.pth"),
    _spec("ResNeXt50", (224, 224), (349, 253), 2048, 22.98, 50, 92.3, "backbone.layer4",
          _TV + "resnext50_32x4d-7cdf4587.pth"),
    _spec("ResNeXt101", (224, 224), (349, 253), 2048, 86.74, 101, 347.9, "backbone.layer4",
          _TV + "resnext101_32x8d-8ba56ff5.pth"),
    _spec("InceptionV3", (299, 299), (331, 267), 2048, 21.79, 48, 87.4, "backbone.Mixed_7c",
          _TV + "inception_v3_google-0cc3c7bd.pth"),
    _spec("Xception", (299, 299), (327, 231), 2048, 20.81, 37, 83.5, "backbone.act4",
          "https://github.com/rwightman/pytorch-image-models/releases/download/v0.1-cadene/xception-43020ad28.pth"),
    _spec("DenseNet121", (224, 224), (349, 253), 1024, 6.95, 121, 28.3, "backbone.features",
          _TV + "densenet121-a639ec97.pth"),
    _spec("DenseNet169", (224, 224), (349, 253), 1664, 12.48, 169, 50.8, "backbone.features",
          _TV + "densenet169-b2777c0a.pth"),
    _spec("DenseNet201", (224, 224), (349, 253), 1920, 18.09, 201, 73.6, "backbone.features",
          _TV + "densenet201-c1103571.pth"),
)}


def registry_lookup(name: str) -> ModelSpec:
    for key, spec in REGISTRY.items():
        if key.lower() == name.lower():
            return spec
    raise KeyError(f"unknown architecture {name!r}; valid names: {', '.join(REGISTRY)}")


def smallest_model() -> ModelSpec:
    return min(REGISTRY.values(), key=lambda s: s.param_count_m)


# ---------------------------------------------------------------------------
# Backbone construction
# ---------------------------------------------------------------------------

def _squeezenet(pretrained_state):
    net = tvm.squeezenet1_0(weights=None)
    if pretrained_state is not None:
        net.load_state_dict(pretrained_state)
    return nn.Sequential(OrderedDict(
        features=net.features, pool=nn.AdaptiveAvgPool2d(1), flatten=nn.Flatten(1)))


def _with_fc_removed(factory: Callable[..., nn.Module], attr: str = "fc", **kwargs):
    def build(pretrained_state):
        net = factory(weights=None, **kwargs)
        if pretrained_state is not None:
            net.load_state_dict(pretrained_state)
        setattr(net, attr, nn.Identity())
        return net
    return build


def _inception(pretrained_state):
    # inputs are already ImageNet-normalized, so no transform_input remapping
    net = tvm.inception_v3(weights=None, aux_logits=True, init_weights=True, transform_input=False)
    if pretrained_state is not None:
        net.load_state_dict(pretrained_state)
    net.aux_logits = False
    net.AuxLogits = None
    net.fc = nn.Identity()
    return net


_DENSENET_KEY = re.compile(r"^(.*denselayer\d+\.(?:norm|relu|conv))\.((?:[12])\.(?:weight|bias|running_mean|running_var))$")


def _densenet(factory):
    def build(pretrained_state):
        net = factory(weights=None)
        if pretrained_state is not None:
            fixed = OrderedDict()
            for key, value in pretrained_state.items():
                m = _DENSENET_KEY.match(key)
                fixed[m.group(1) + m.group(2) if m else key] = value
            net.load_state_dict(fixed)
        net.classifier = nn.Identity()
        return net
    return build


def _xception(pretrained_state):
    import timm

    net = timm.create_model("legacy_xception", pretrained=False)
    if pretrained_state is not None:
        net.load_state_dict(pretrained_state)
    net.reset_classifier(0)
    return net


_BUILDERS = {
    "SqueezeNet": _squeezenet,
    "ShuffleNet": _with_fc_removed(tvm.shufflenet_v2_x0_5),
    "ResNet18": _with_fc_removed(tvm.resnet18),
    "ResNet50": _with_fc_removed(tvm.resnet50),
    "ResNet101": _with_fc_removed(tvm.resnet101),
    "ResNeXt50": _with_fc_removed(tvm.resnext50_32x4d),
    "ResNeXt101": _with_fc_removed(tvm.resnext101_32x8d),
    "InceptionV3": _inception,
    "Xception": _xception,
    "DenseNet121": _densenet(tvm.densenet121),
    "DenseNet169": _densenet(tvm.densenet169),
    "DenseNet201": _densenet(tvm.densenet201),
}


class ClassifierModel(nn.Module):
    """Pretrained backbone producing pooled features, followed by a single-logit head."""

    def __init__(self, backbone: nn.Module, head: nn.Linear, spec: ModelSpec):
        super().__init__()
        self.backbone = backbone
        self.head = head
        self.spec = spec

    def features(self, x: torch.Tensor) -> torch.Tensor:
        return torch.flatten(self.backbone(x), 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.features(x)).squeeze(1)


def build_model(spec: ModelSpec | str, pretrained: bool = True, seed: int = 0,
                cache_dir: str | Path | None = None) -> ClassifierModel:
    """Build a fully trainable classifier.

    With ``pretrained`` the backbone gets ImageNet weights from the local cache,
    fetching them on first use. The head and any randomly initialized backbone
    are drawn from a generator seeded with ``seed``; the global torch RNG state
    is left untouched.
    """
    if isinstance(spec, str):
        spec = registry_lookup(spec)
    state = load_pretrained_state(spec, cache_dir) if pretrained else None
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        backbone = _BUILDERS[spec.name](state)
        head = nn.Linear(spec.feature_dim, 1)
    model = ClassifierModel(backbone, head, spec)
    for p in model.parameters():
        p.requires_grad_(True)
    return model


def extract_features(model: ClassifierModel, batch: torch.Tensor) -> torch.Tensor:
    """Penultimate (pooled, pre-head) activations as an N×feature_dim matrix."""
    expected = model.spec.input_shape
    if batch.ndim != 4 or tuple(batch.shape[1:]) != expected:
        raise ValueError(f"expected batch of shape (N, {', '.join(map(str, expected))}), got {tuple(batch.shape)}")
    device = next(model.parameters()).device
    with torch.no_grad():
        return model.features(batch.to(device)).cpu()


# ---------------------------------------------------------------------------
# Weight cache: <cache>/<arch>/<sha256>.bin plus <cache>/index.txt
# ---------------------------------------------------------------------------

def default_cache_dir() -> Path:
    env = os.environ.get(CACHE_ENV)
    if env:
        return Path(env)
    return Path.home() / ".cache" / "ctexplain" / "weights"


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _url_hash_prefix(url: str) -> str | None:
    m = re.search(r"-([0-9a-f]{8,})\.pth$", url)
    return m.group(1) if m else None


def read_cache_index(cache_dir: Path) -> dict[str, str]:
    index = cache_dir / "index.txt"
    entries = {}
    if index.is_file():
        for line in index.read_text(encoding="utf-8").splitlines():
            parts = line.split()
            if len(parts) >= 2 and not line.startswith("#"):
                entries[parts[0]] = parts[1]
    return entries


def _write_cache_index(cache_dir: Path, entries: dict[str, str]) -> None:
    lines = ["# arch sha256"] + [f"{arch} {digest}" for arch, digest in sorted(entries.items())]
    (cache_dir / "index.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")


def register_weights(cache_dir: str | Path, arch: str, source: str | Path) -> Path:
    """Copy a weight file into the content-addressed cache and index it."""
    cache_dir = Path(cache_dir)
    digest = _sha256(Path(source))
    target = cache_dir / arch / f"{digest}.bin"
    target.parent.mkdir(parents=True, exist_ok=True)
    if Path(source).resolve() != target.resolve():
        shutil.copyfile(source, target)
    entries = read_cache_index(cache_dir)
    entries[arch] = digest
    _write_cache_index(cache_dir, entries)
    return target


def _download(url: str, dest: Path, timeout: float = 60.0) -> None:
    try:
        with urllib.request.urlopen(url, timeout=timeout) as resp, open(dest, "wb") as out:
            shutil.copyfileobj(resp, out)
    except (urllib.error.URLError, OSError, TimeoutError) as exc:
        raise NetworkUnavailableError(f"cannot fetch weights from {url}: {exc}") from exc


def cached_weights_path(spec: ModelSpec, cache_dir: str | Path | None = None) -> Path:
    """Path to verified weights for ``spec``, downloading them if absent."""
    cache_dir = Path(cache_dir) if cache_dir else default_cache_dir()
    digest = read_cache_index(cache_dir).get(spec.name)
    if digest:
        path = cache_dir / spec.name / f"{digest}.bin"
        if path.is_file():
            actual = _sha256(path)
            if actual != digest:
                raise ChecksumMismatchError(f"{path}: sha256 {actual} does not match index entry {digest}")
            return path

    cache_dir.mkdir(parents=True, exist_ok=True)
    with tempfile.TemporaryDirectory(dir=cache_dir) as tmp:
        tmp_file = Path(tmp) / "download.part"
        _download(spec.weights_url, tmp_file)
        actual = _sha256(tmp_file)
        prefix = _url_hash_prefix(spec.weights_url)
        if prefix and not actual.startswith(prefix):
            raise ChecksumMismatchError(
                f"weights for {spec.name} from {spec.weights_url} have sha256 {actual}, expected prefix {prefix}")
        return register_weights(cache_dir, spec.name, tmp_file)


def load_pretrained_state(spec: ModelSpec, cache_dir: str | Path | None = None) -> dict[str, torch.Tensor]:
    path = cached_weights_path(spec, cache_dir)
    return torch.load(path, map_location="cpu", weights_only=True)


# ---------------------------------------------------------------------------
# Checkpoints: <name>.pt (state dict) + <name>.meta.txt
# ---------------------------------------------------------------------------

def save_checkpoint(model: ClassifierModel, path: str | Path, *, epoch: int, fold: int,
                    config_hash: str = "") -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(model.state_dict(), path)
    meta = {"arch": model.spec.name, "epoch": epoch, "fold": fold, "config_hash": config_hash}
    path.with_suffix(".meta.txt").write_text("".join(f"{k}={v}\n" for k, v in meta.items()), encoding="utf-8")
    return path


def read_checkpoint_meta(path: str | Path) -> dict[str, str]:
    meta_path = Path(path).with_suffix(".meta.txt")
    out = {}
    for line in meta_path.read_text(encoding="utf-8").splitlines():
        key, _, value = line.partition("=")
        out[key] = value
    return out


def load_checkpoint(path: str | Path) -> ClassifierModel:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    meta = read_checkpoint_meta(path)
    model = build_model(meta["arch"], pretrained=False)
    model.load_state_dict(torch.load(path, map_location="cpu", weights_only=True))
    return model
