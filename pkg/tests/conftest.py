import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from rgbd_vsod import data
from rgbd_vsod.config import RunConfig

settings.register_profile("ci", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("ci")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_suite(tmp_path_factory):
    """Six 6-frame training sequences and two validation sequences at 64x64."""
    root = tmp_path_factory.mktemp("suite")
    data.generate_suite(root / "train", 6, 6, 64, seed=3, prefix="train")
    data.generate_suite(root / "val", 2, 6, 64, seed=4, prefix="val")
    return root


@pytest.fixture
def small_cfg(tiny_suite, tmp_path):
    """A narrow network that trains a step in well under a second."""
    return RunConfig(widths=(16, 24, 32, 48), heads=(1, 1, 2, 2), decoder_widths=(8, 8, 12, 16),
                     batch_size=2, clip_len=3, steps=4, seed=11,
                     train_root=str(tiny_suite / "train"), val_root=str(tiny_suite / "val"),
                     out_dir=str(tmp_path / "run"))


ACCEPTANCE_LINES: dict[int, str] = {}


@pytest.fixture
def criterion():
    """Record one acceptance line: ``criterion(n, ok, detail)``; fails the test when ``ok`` is false."""
    def record(number: int, ok: bool, detail: str) -> None:
        line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES[number] = line
        print(line)
        assert ok, line
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
