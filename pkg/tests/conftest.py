from __future__ import annotations

import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from drivebench.roadnet import build_town  # noqa: E402
from drivebench.routegen import generate_routes  # noqa: E402


@pytest.fixture(scope="session")
def town():
    """Desk-sized town used across module tests."""
    return build_town(11, 5, (50.0, 70.0), drop_prob=0.2)


@pytest.fixture(scope="session")
def grid3():
    """Full 3x3 grid with no dropped streets."""
    return build_town(3, 3, (80.0, 120.0))


@pytest.fixture(scope="session")
def tiny_routes(town):
    return generate_routes(town, "tiny", 12, seed=5)


@pytest.fixture(scope="session")
def short_routes(town):
    return generate_routes(town, "short", 6, seed=5)


@pytest.fixture(scope="session")
def small_dataset(town, tiny_routes):
    from drivebench.expert import collect_dataset

    return collect_dataset({town.town_seed: town}, tiny_routes, 400, seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
