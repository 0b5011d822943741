import urllib.error

import pytest
import torch
import torchvision.models as tvm

from ctexplain import modelzoo
from ctexplain.modelzoo import (
    REGISTRY,
    ChecksumMismatchError,
    NetworkUnavailableError,
    build_model,
    default_cache_dir,
    extract_features,
    load_checkpoint,
    read_cache_index,
    read_checkpoint_meta,
    register_weights,
    registry_lookup,
    save_checkpoint,
    smallest_model,
)

# name: (default WxH, custom WxH, layers, params (M), size (MB)) transcribed from the architecture table
TABLE = {
    "SqueezeNet": ((227, 227), (335, 255), 18, 0.73, 3.0),
    "ShuffleNet": ((224, 224), (321, 225), 51, 0.34, 1.5),
    "ResNet18": ((224, 224), (349, 253), 18, 11.17, 44.8),
    "ResNet50": ((224, 224), (349, 253), 50, 23.51, 94.3),
    "ResNet101": ((224, 224), (349, 253), 101, 42.50, 170.6),
    "ResNeXt50": ((224, 224), (349, 253), 50, 22.98, 92.3),
    "ResNeXt101": ((224, 224), (349, 253), 101, 86.74, 347.9),
    "InceptionV3": ((299, 299), (331, 267), 48, 21.79, 87.4),
    "Xception": ((299, 299), (327, 231), 37, 20.81, 83.5),
    "DenseNet121": ((224, 224), (349, 253), 121, 6.95, 28.3),
    "DenseNet169": ((224, 224), (349, 253), 169, 12.48, 50.8),
    "DenseNet201": ((224, 224), (349, 253), 201, 18.09, 73.6),
}

FEATURE_DIMS = {
    "SqueezeNet": 512, "ShuffleNet": 1024, "ResNet18": 512, "ResNet50": 2048, "ResNet101": 2048,
    "ResNeXt50": 2048, "ResNeXt101": 2048, "InceptionV3": 2048, "Xception": 2048,
    "DenseNet121": 1024, "DenseNet169": 1664, "DenseNet201": 1920,
}


def _batch(spec, n, seed=0):
    g = torch.Generator().manual_seed(seed)
    return torch.randn(n, *spec.input_shape, generator=g)


class TestRegistry:
    def test_matches_table(self):
        assert set(REGISTRY) == set(TABLE)
        for name, (default, custom, layers, params, size) in TABLE.items():
            spec = REGISTRY[name]
            assert (spec.default_input.width, spec.default_input.height) == default
            assert (spec.custom_input.width, spec.custom_input.height) == custom
            assert (spec.layer_count, spec.param_count_m, spec.model_size_mb) == (layers, params, size)
            assert spec.feature_dim == FEATURE_DIMS[name]

    def test_inception_lookup(self):
        spec = registry_lookup("InceptionV3")
        assert (spec.default_input.width, spec.default_input.height) == (299, 299)
        assert (spec.custom_input.width, spec.custom_input.height) == (331, 267)
        assert spec.feature_dim == 2048
        assert spec.input_shape == (3, 267, 331)

    def test_densenet169_lookup(self):
        spec = registry_lookup("densenet169")
        assert spec.name == "DenseNet169"
        assert (spec.custom_input.width, spec.custom_input.height, spec.feature_dim) == (349, 253, 1664)

    def test_unknown_lists_names(self):
        with pytest.raises(KeyError) as info:
            registry_lookup("AlexNet")
        assert "AlexNet" in str(info.value) and "ResNet18" in str(info.value)

    def test_smallest(self):
        assert smallest_model().name == "ShuffleNet"


class TestBuild:
    def test_seeded_build_is_deterministic(self):
        a = build_model("ShuffleNet", pretrained=False, seed=3)
        b = build_model("ShuffleNet", pretrained=False, seed=3)
        for (na, pa), (nb, pb) in zip(a.state_dict().items(), b.state_dict().items()):
            assert na == nb
            torch.testing.assert_close(pa, pb, rtol=0, atol=0)

    def test_build_leaves_global_rng_alone(self):
        torch.manual_seed(11)
        expected = torch.rand(3)
        torch.manual_seed(11)
        build_model("ShuffleNet", pretrained=False, seed=0)
        torch.testing.assert_close(torch.rand(3), expected)

    def test_resnet18_head(self):
        model = build_model("ResNet18", pretrained=False)
        assert model.head.in_features == 512 and model.head.out_features == 1
        assert all(p.requires_grad for p in model.parameters())

    def test_forward_two_inputs(self):
        model = build_model("ShuffleNet", pretrained=False).eval()
        with torch.no_grad():
            logits = model(_batch(model.spec, 2))
        assert logits.shape == (2,)
        assert torch.isfinite(logits).all()

    @pytest.mark.parametrize("name", sorted(TABLE))
    def test_architecture(self, name):
        model = build_model(name, pretrained=False, seed=0).eval()
        backbone_params = sum(p.numel() for p in model.backbone.parameters()) / 1e6
        assert backbone_params == pytest.approx(TABLE[name][3], abs=0.01)
        x = _batch(model.spec, 1)
        feats = extract_features(model, x)
        assert feats.shape == (1, FEATURE_DIMS[name])
        with torch.no_grad():
            torch.testing.assert_close(model.head(feats), model(x)[:, None], rtol=0, atol=1e-5)


class TestFeatures:
    def test_inception_batch_of_four(self):
        model = build_model("InceptionV3", pretrained=False).eval()
        assert extract_features(model, _batch(model.spec, 4)).shape == (4, 2048)

    def test_densenet169_single(self):
        model = build_model("DenseNet169", pretrained=False).eval()
        assert extract_features(model, _batch(model.spec, 1)).shape == (1, 1664)

    def test_identical_rows(self):
        model = build_model("ShuffleNet", pretrained=False).eval()
        x = _batch(model.spec, 1).repeat(2, 1, 1, 1)
        feats = extract_features(model, x)
        torch.testing.assert_close(feats[0], feats[1])

    def test_shape_mismatch(self):
        model = build_model("ShuffleNet", pretrained=False).eval()
        with pytest.raises(ValueError, match=r"\(N, 3, 225, 321\).*\(1, 3, 224, 224\)"):
            extract_features(model, torch.zeros(1, 3, 224, 224))


@pytest.fixture
def shufflenet_weights(tmp_path):
    torch.manual_seed(5)
    net = tvm.shufflenet_v2_x0_5(weights=None)
    path = tmp_path / "shufflenet.pth"
    torch.save(net.state_dict(), path)
    return path, net


class TestWeightCache:
    def test_cached_weights_are_loaded(self, tmp_path, shufflenet_weights, monkeypatch):
        path, net = shufflenet_weights
        cache = tmp_path / "cache"
        register_weights(cache, "ShuffleNet", path)
        monkeypatch.setattr(modelzoo, "_download", lambda *a, **k: pytest.fail("cache miss"))
        model = build_model("ShuffleNet", pretrained=True, cache_dir=cache)
        torch.testing.assert_close(model.backbone.conv1[0].weight, net.conv1[0].weight)
        assert "ShuffleNet" in read_cache_index(cache)

    def test_corrupted_cache_is_a_checksum_error(self, tmp_path, shufflenet_weights):
        path, _ = shufflenet_weights
        cache = tmp_path / "cache"
        stored = register_weights(cache, "ShuffleNet", path)
        stored.write_bytes(stored.read_bytes()[:-10] + b"0123456789")
        with pytest.raises(ChecksumMismatchError):
            build_model("ShuffleNet", pretrained=True, cache_dir=cache)

    def test_offline_is_a_network_error(self, tmp_path, monkeypatch):
        def refuse(*args, **kwargs):
            raise urllib.error.URLError("no route to host")

        monkeypatch.setattr(modelzoo.urllib.request, "urlopen", refuse)
        with pytest.raises(NetworkUnavailableError):
            build_model("ShuffleNet", pretrained=True, cache_dir=tmp_path / "cache")

    def test_bad_download_is_a_checksum_error(self, tmp_path, monkeypatch):
        monkeypatch.setattr(modelzoo, "_download", lambda url, dest, timeout=60.0: dest.write_bytes(b"junk"))
        with pytest.raises(ChecksumMismatchError, match="expected prefix"):
            build_model("ShuffleNet", pretrained=True, cache_dir=tmp_path / "cache")
        assert read_cache_index(tmp_path / "cache") == {}

    def test_cache_dir_env(self, tmp_path, monkeypatch):
        monkeypatch.setenv("CTX_CACHE", str(tmp_path))
        assert default_cache_dir() == tmp_path


def test_checkpoint_roundtrip(tmp_path):
    model = build_model("ShuffleNet", pretrained=False, seed=1)
    with torch.no_grad():
        model.head.bias.fill_(0.25)
    path = save_checkpoint(model, tmp_path / "fold0" / "model.pt", epoch=7, fold=0, config_hash="abc123")
    meta = read_checkpoint_meta(path)
    assert meta == {"arch": "ShuffleNet", "epoch": "7", "fold": "0", "config_hash": "abc123"}
    again = load_checkpoint(path)
    for a, b in zip(model.state_dict().values(), again.state_dict().values()):
        torch.testing.assert_close(a, b, rtol=0, atol=0)
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / "missing.pt")
