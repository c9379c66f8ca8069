"""Shared fixtures: scenario results are computed once per session."""

import numpy as np
import pytest

from fpcost import harness
from fpcost.harness import SCENARIOS, ExperimentConfig


@pytest.fixture(scope="session")
def scenario():
    """Memoized scenario runner: ``scenario(name)`` -> result dict."""
    cache = {}

    def run(name, **overrides):
        key = (name, tuple(sorted(overrides.items())))
        if key not in cache:
            overrides.setdefault("n", 128)
            cfg = ExperimentConfig(scenario=name, **overrides)
            cache[key] = SCENARIOS[name](cfg)
        return cache[key]

    return run


def checks(result):
    """Check dicts of a scenario result keyed by name."""
    return {c["name"]: c for c in result["checks"]}


@pytest.fixture(scope="session")
def small_grid():
    from fpcost import make_grid
    return make_grid(1, 32, h_max=0.25)


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(20260826)
