from __future__ import annotations

import os
import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import settings

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile("default", deadline=None, max_examples=40)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

DATA = Path(__file__).parent / "data"


@pytest.fixture
def fixture_corpus() -> list[str]:
    return (DATA / "fixture_corpus.txt").read_text(encoding="utf-8").splitlines()


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


def small_config(**overrides):
    """64-bit, dropout-free, 2-block config for exact checks."""
    from adaptive_lm.config import RunConfig

    values = {
        "model.n_blocks": 2,
        "model.heads": 2,
        "model.model_dim": 16,
        "model.ffn_dim": 32,
        "model.adaptive_dim": 16,
        "model.adaptive_cutoffs": (4, 10),
        "model.input_dim": 8,
        "model.output_dim": 8,
        "model.char_dim": 4,
        "model.char_filters": ((1, 4), (2, 6)),
        "model.dropout": 0.0,
        "model.attn_dropout": 0.0,
        "model.relu_dropout": 0.0,
        "model.dtype": "float64",
        "data.block_size": 8,
        "data.token_budget": 64,
        "eval.block_size": 16,
        "eval.token_budget": 64,
    }
    values.update(overrides)
    return RunConfig(values)


# -- acceptance reporting -------------------------------------------------------

_CRITERIA: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion checked by this test")


def pytest_runtest_logreport(report):
    marker = getattr(report, "criterion", None)
    if marker is None:
        return
    number, title = marker
    entry = _CRITERIA.setdefault(number, {"title": title, "ok": True, "seconds": 0.0})
    entry["seconds"] += report.duration
    if report.failed or (report.when == "call" and report.skipped):
        entry["ok"] = False


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    marker = item.get_closest_marker("criterion")
    if marker is not None:
        outcome.get_result().criterion = tuple(marker.args)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        e = _CRITERIA[number]
        terminalreporter.write_line(
            f"criterion {number:2d}: {'PASS' if e['ok'] else 'FAIL'}  {e['title']}  ({e['seconds']:.1f}s)"
        )
