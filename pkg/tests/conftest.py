import sys

import numpy as np
import pytest
import torch

from textloc.config import RunConfig
from textloc.dataset import build_dataset

TINY = {
    "data": {"extent_m": [50.0, 50.0], "instance_count_range": [24, 24], "extras_per_anchor": 4,
             "min_nearby_instances": 4},
    "model": {"dim": 16, "heads": 2, "ffn_hidden": 32, "query_count": 6},
    "coarse": {"epochs": 2, "decay_epoch": 1, "batch_size": 8},
    "fine": {"epochs": 2, "batch_size": 8},
    "eval": {"ablation_seeds": [0], "ablation_query_counts": [4, 6], "ablation_variants": ["naive", "rowcol"]},
}


def tiny_config(**overrides) -> RunConfig:
    raw = {k: dict(v) for k, v in TINY.items()}
    for section, values in overrides.items():
        if isinstance(values, dict):
            raw.setdefault(section, {}).update(values)
        else:
            raw[section] = values
    return RunConfig.from_dict(raw)


@pytest.fixture(scope="session")
def tiny_cfg():
    return tiny_config()


@pytest.fixture(scope="session")
def tiny_dataset(tiny_cfg):
    return build_dataset(tiny_cfg.data)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _seed_torch():
    torch.manual_seed(0)


def pytest_terminal_summary(terminalreporter):
    acceptance = sys.modules.get("test_acceptance")
    lines = getattr(acceptance, "RESULTS", None)
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(lines):
        terminalreporter.write_line(lines[n])
