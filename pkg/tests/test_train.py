import math

import numpy as np
import pytest
import torch
from PIL import Image

from ctexplain.dataset import FoldPlan, scan_dataset, stratified_folds
from ctexplain.lamb import LambHyper
from ctexplain.modelzoo import build_model
from ctexplain.pipeline import CTImageDataset
from ctexplain.train import (
    DEFAULT_MILESTONES,
    LrSchedule,
    TrainConfig,
    TrainingError,
    bce_loss,
    lr_at_epoch,
    predict_logits,
    train_fold,
)

from oracles import bce_naive


def _constant_tree(root, per_class, size=(40, 48)):
    for name, value in (("COVID", 255), ("non-COVID", 0)):
        (root / name).mkdir(parents=True)
        for i in range(per_class):
            Image.fromarray(np.full(size, value, np.uint8)).save(root / name / f"{i:03d}.png")
    return scan_dataset(root)


class TestSchedule:
    @pytest.mark.parametrize("epoch, lr", [(0, 3e-4), (49, 3e-4), (50, 1e-4), (69, 1e-4), (70, 3e-5),
                                           (80, 1e-5), (90, 3e-6), (99, 3e-6)])
    def test_default_schedule(self, epoch, lr):
        assert lr_at_epoch(LrSchedule(), epoch) == lr

    def test_defaults(self):
        assert LrSchedule().milestones == DEFAULT_MILESTONES
        cfg = TrainConfig()
        assert (cfg.epochs, cfg.batch_size, cfg.hyper.weight_decay, cfg.schedule.base_lr) == (100, 32, 1.0, 3e-4)

    def test_no_milestones(self):
        assert lr_at_epoch(LrSchedule(0.01, ()), 1000) == 0.01

    def test_negative_epoch(self):
        with pytest.raises(ValueError):
            lr_at_epoch(LrSchedule(), -1)

    def test_unsorted_milestones(self):
        with pytest.raises(ValueError):
            LrSchedule(milestones=((70, 1e-4), (50, 1e-5)))


class TestBce:
    def test_zero_logit(self):
        assert bce_loss(torch.tensor([0.0]), torch.tensor([1.0])).item() == pytest.approx(math.log(2), abs=1e-6)

    def test_ninety_percent(self):
        z = math.log(0.9 / 0.1)
        loss = bce_loss(torch.tensor([z], dtype=torch.float64), torch.tensor([1.0], dtype=torch.float64))
        assert loss.item() == pytest.approx(-math.log(0.9), abs=1e-12)
        assert loss.item() == pytest.approx(0.105361, abs=1e-6)

    def test_saturation(self):
        z = torch.tensor([40.0, -40.0, 100.0, -100.0], dtype=torch.float64)
        y = torch.ones(4, dtype=torch.float64)
        per = [bce_loss(z[i:i + 1], y[i:i + 1]).item() for i in range(4)]
        assert all(math.isfinite(v) for v in per)
        assert per[0] == pytest.approx(0.0, abs=1e-16)
        assert per[1] == pytest.approx(40.0)
        assert per[3] == pytest.approx(100.0)

    def test_matches_naive(self):
        rng = np.random.default_rng(0)
        z = rng.uniform(-20, 20, 200)
        y = rng.integers(0, 2, 200).astype(float)
        for zi, yi in zip(z, y):
            got = bce_loss(torch.tensor([zi]), torch.tensor([yi])).item()
            assert got == pytest.approx(bce_naive(zi, yi), abs=1e-9)

    def test_gradient_is_sigmoid_minus_label(self):
        z = torch.tensor([-3.0, 0.5, 2.0], dtype=torch.float64, requires_grad=True)
        y = torch.tensor([1.0, 0.0, 1.0], dtype=torch.float64)
        bce_loss(z, y).backward()
        torch.testing.assert_close(z.grad, (torch.sigmoid(z.detach()) - y) / 3)

    def test_errors(self):
        with pytest.raises(ValueError):
            bce_loss(torch.tensor([]), torch.tensor([]))
        with pytest.raises(ValueError):
            bce_loss(torch.zeros(2), torch.zeros(3))


@pytest.fixture
def small_set(tmp_path):
    manifest = _constant_tree(tmp_path / "data", per_class=4)
    return manifest, stratified_folds(manifest, 2, seed=0)


def _quiet(**kwargs):
    kwargs.setdefault("batch_size", 4)
    return TrainConfig(**kwargs)


class TestTrainFold:
    def test_zero_epochs_is_noop(self, small_set):
        manifest, plan = small_set
        model = build_model("ShuffleNet", pretrained=False)
        before = {k: v.clone() for k, v in model.state_dict().items()}
        out, history = train_fold(model, manifest, plan, 0, _quiet(epochs=0), progress=None)
        assert len(history) == 0
        for k, v in out.state_dict().items():
            torch.testing.assert_close(v, before[k], rtol=0, atol=0)

    def test_history_and_checkpoints(self, small_set, tmp_path):
        manifest, plan = small_set
        cfg = _quiet(epochs=2, schedule=LrSchedule(1e-3, ((1, 5e-4),)), checkpoint_every=1)
        lines = []
        _, history = train_fold(build_model("ShuffleNet", pretrained=False), manifest, plan, 0, cfg,
                                checkpoint_dir=tmp_path / "ckpt", config_hash="h1", progress=lines.append)
        assert [r.epoch for r in history.records] == [0, 1]
        assert [r.lr for r in history.records] == [1e-3, 5e-4]
        assert all(math.isfinite(r.loss) and 0 <= r.accuracy <= 1 for r in history.records)
        assert lines[0].startswith("epoch 1/2 loss=")
        assert (tmp_path / "ckpt" / "epoch001.pt").is_file() and (tmp_path / "ckpt" / "model.pt").is_file()
        csv_text = history.to_csv(config_hash="h1")
        assert csv_text.splitlines()[:2] == ["# config_hash=h1", "epoch,loss,accuracy,lr"]

    def test_same_seed_same_weights(self, small_set):
        manifest, plan = small_set
        cfg = _quiet(epochs=1, seed=4)
        a, _ = train_fold(build_model("ShuffleNet", pretrained=False), manifest, plan, 1, cfg, progress=None)
        b, _ = train_fold(build_model("ShuffleNet", pretrained=False), manifest, plan, 1, cfg, progress=None)
        for pa, pb in zip(a.parameters(), b.parameters()):
            torch.testing.assert_close(pa, pb, rtol=0, atol=0)

    def test_empty_training_split(self, small_set):
        manifest, _ = small_set
        plan = FoldPlan(2, 0, (0,) * len(manifest))
        with pytest.raises(TrainingError, match="empty training split"):
            train_fold(build_model("ShuffleNet", pretrained=False), manifest, plan, 0, _quiet(epochs=1),
                       progress=None)

    def test_non_finite_loss_reports_batch(self, small_set):
        manifest, plan = small_set
        model = build_model("ShuffleNet", pretrained=False)
        with torch.no_grad():
            model.head.bias.fill_(float("inf"))
        with pytest.raises(TrainingError, match="batch 0"):
            train_fold(model, manifest, plan, 0, _quiet(epochs=1), progress=None)

    def test_toy_problem_is_overfit(self, tmp_path):
        # 32 white images labelled COVID, 32 black labelled NonCOVID; every image is in training
        manifest = _constant_tree(tmp_path / "toy", per_class=32)
        plan = FoldPlan(2, 0, (1,) * len(manifest))
        cfg = TrainConfig(epochs=5, batch_size=8, hyper=LambHyper(base_lr=0.01), schedule=LrSchedule(0.01, ()),
                          bn_recalibrate=True)
        model, history = train_fold(build_model("ShuffleNet", pretrained=False), manifest, plan, 0, cfg,
                                    progress=None)
        assert len(history) == 5
        logits = predict_logits(model, CTImageDataset(manifest, model.spec.custom_input), batch_size=16)
        preds = (logits >= 0).long().numpy()
        np.testing.assert_array_equal(preds, manifest.labels)
