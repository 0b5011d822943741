from pathlib import Path

import numpy as np
import pytest
from PIL import Image

from ctexplain.dataset import DatasetId, DatasetManifest, ImageRecord, Label


def write_textures(root: Path, per_class: int, seed: int = 0, bright: float = 0.72, dark: float = 0.28,
                   size_range=(60, 120)) -> Path:
    """Two-class PNG tree: bright textures under COVID/, dark ones under non-COVID/."""
    rng = np.random.default_rng(seed)
    for name, mu in (("COVID", bright), ("non-COVID", dark)):
        (root / name).mkdir(parents=True, exist_ok=True)
        for i in range(per_class):
            h, w = rng.integers(*size_range, size=2)
            tex = np.clip(mu + 0.15 * rng.standard_normal((h, w)), 0, 1)
            Image.fromarray((tex * 255).astype(np.uint8)).save(root / name / f"img{i:03d}.png")
    return root


def synthetic_manifest(n_covid: int, n_non: int, dataset_id=DatasetId.SARS_COV_2_CT) -> DatasetManifest:
    """Manifest of fake records (files need not exist)."""
    records = [ImageRecord(Path(f"/fake/COVID/{i:05d}.png"), Label.COVID, 10, 10, dataset_id) for i in range(n_covid)]
    records += [ImageRecord(Path(f"/fake/non-COVID/{i:05d}.png"), Label.NonCOVID, 10, 10, dataset_id)
                for i in range(n_non)]
    records.sort(key=lambda r: r.path.as_posix())
    return DatasetManifest(tuple(records), dataset_id)


@pytest.fixture
def texture_tree(tmp_path):
    return write_textures(tmp_path / "data", per_class=6)


_ACCEPTANCE_RESULTS: list[tuple[str, str, str]] = []


def pytest_runtest_logreport(report):
    if "test_acceptance.py" not in report.nodeid or "::test_criterion_" not in report.nodeid:
        return
    name = report.nodeid.split("::")[-1]
    detail = "; ".join(str(v) for k, v in report.user_properties if k == "detail")
    if report.when == "call":
        status = "PASS" if report.passed else "SKIP" if report.skipped else "FAIL"
        if report.skipped and not detail:
            detail = str(report.longrepr[-1]) if isinstance(report.longrepr, tuple) else ""
        _ACCEPTANCE_RESULTS.append((name, status, detail))
    elif report.when == "setup" and report.skipped:
        reason = report.longrepr[-1] if isinstance(report.longrepr, tuple) else ""
        _ACCEPTANCE_RESULTS.append((name, "SKIP", str(reason)))
    elif report.when == "setup" and report.failed:
        _ACCEPTANCE_RESULTS.append((name, "FAIL", "setup error"))


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, status, detail in _ACCEPTANCE_RESULTS:
        terminalreporter.write_line(f"{status:4s}  {name}" + (f"  ({detail})" if detail else ""))
