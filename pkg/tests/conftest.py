import os
from pathlib import Path

import numpy as np
import pytest

from i2icodec.config import load_config
from i2icodec.data import generate_dataset
from i2icodec.model import Model
from i2icodec.networks import NetConfig
from i2icodec.training import run_training

ROOT = Path(__file__).resolve().parents[1]
SMOKE_CONFIG = ROOT / "configs" / "smoke.yaml"

TINY = dict(image_size=16, stages=2, base_width=8, max_width=16, latent_channels=4,
            hyper_channels=4, style_dim=8, seed_dim=4, mapping_hidden=16, style_hidden=16,
            disc_base_width=8)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_cfg() -> NetConfig:
    return NetConfig(**TINY)


@pytest.fixture(scope="session")
def tiny_model(tiny_cfg) -> Model:
    return Model.initialize(tiny_cfg, seed=3)


@pytest.fixture(scope="session")
def smoke_cfg():
    return load_config(SMOKE_CONFIG)


@pytest.fixture(scope="session")
def smoke_data(smoke_cfg):
    return generate_dataset(smoke_cfg.data, seed=smoke_cfg.data_seed)


@pytest.fixture(scope="session")
def smoke_run(tmp_path_factory, smoke_cfg, smoke_data) -> Path:
    """A finished smoke training run; its checkpoint counts as a trained model."""
    out = tmp_path_factory.mktemp("smoke_run")
    run_training(smoke_cfg, smoke_data.train, out)
    return out


@pytest.fixture(scope="session")
def smoke_model(smoke_run) -> Model:
    return Model.load(smoke_run / "model.i2p")


def artifact_dir() -> Path:
    return Path(os.environ.get("I2ICODEC_ARTIFACTS", ROOT / "artifacts"))


# -- acceptance summary: one pass/fail line per criterion ------------------------------

_criteria: dict[int, tuple[str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


def pytest_runtest_logreport(report):
    marker = getattr(report, "criterion", None)
    if marker is None:
        return
    number, title = marker
    failed = report.failed
    if report.when == "call" or failed:
        prev = _criteria.get(number, (title, "PASS"))[1]
        status = "FAIL" if failed or prev == "FAIL" else ("SKIP" if report.skipped else "PASS")
        _criteria[number] = (title, status)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    m = item.get_closest_marker("criterion")
    if m is not None:
        report.criterion = tuple(m.args)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        title, status = _criteria[number]
        terminalreporter.write_line(f"criterion {number:2d} {status}: {title}")
