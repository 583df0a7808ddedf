from __future__ import annotations

import numpy as np
import pytest

from lcdg.adapter import AdapterConfig, ConditionAdapter
from lcdg.data import gen_dataset
from lcdg.diffusion import make_schedule
from lcdg.unet import DenoiserModel, UNetConfig


ACCEPTANCE_DETAILS: dict[int, str] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance: end-to-end acceptance criteria (slow, cached training)")


def pytest_terminal_summary(terminalreporter):
    """One PASS/FAIL line per acceptance criterion, in criterion order."""
    lines = {}
    for outcome in ("passed", "failed", "error", "xfailed", "xpassed"):
        for rep in terminalreporter.stats.get(outcome, []):
            name = getattr(rep, "nodeid", "").rsplit("::", 1)[-1]
            if not name.startswith("test_criterion_") or rep.when not in ("call", "setup"):
                continue
            k = int(name.split("_")[2])
            if rep.when == "setup" and rep.passed:
                continue
            # a known shortfall is marked xfail so the run stays green; it still reads FAIL here
            status = "PASS" if outcome in ("passed", "xpassed") else "FAIL"
            if outcome == "xfailed":
                status += " (expected, see notes)"
            lines[k] = f"criterion {k:2d}: {status}  {ACCEPTANCE_DETAILS.get(k, '(no result recorded)')}"
    if lines:
        terminalreporter.section("acceptance criteria")
        for k in sorted(lines):
            terminalreporter.write_line(lines[k])


@pytest.fixture
def record():
    def _record(k: int, detail: str) -> None:
        ACCEPTANCE_DETAILS[k] = detail

    return _record


@pytest.fixture(scope="session")
def sched():
    return make_schedule(1000, 1e-4, 0.02)


@pytest.fixture(scope="session")
def short_sched():
    return make_schedule(40, 1e-4, 0.2)


@pytest.fixture(scope="session")
def tiny_cfg():
    return UNetConfig(image_size=16, base_channels=4, channel_mults=(1, 2), blocks_per_stage=1, pe_dim=8)


@pytest.fixture
def tiny_model(tiny_cfg):
    return DenoiserModel(tiny_cfg, seed=0)


@pytest.fixture
def tiny_adapter(tiny_model):
    return ConditionAdapter.for_model(tiny_model, 1, widths=(6, 4), seed=0)


@pytest.fixture(scope="session")
def tiny_data():
    return gen_dataset(48, seed=3, channels=1, size=16)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def small_adapter_config(**kw) -> AdapterConfig:
    base = dict(in_channels=5, cond_channels=1, widths=(6, 4), pe_dim=8, emb_dim=8)
    base.update(kw)
    return AdapterConfig(**base)
