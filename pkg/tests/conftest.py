import numpy as np
import pytest

from habitree import AdaptedProcess, Asset, EventTree, MarketSpec


@pytest.fixture
def binary_one_period():
    """Two-state one-period tree with equal probabilities."""
    return EventTree.from_edges([("r", None, 1.0), ("u", "r", 0.5), ("d", "r", 0.5)], 1)


@pytest.fixture
def binary_market(binary_one_period):
    """Complete market: bond at r=0 and one risky asset with payoffs {3, 4}."""
    tree = binary_one_period
    prices = AdaptedProcess.from_depth_arrays(tree, [np.array([3.5]), np.array([3.0, 4.0])])
    zeros = AdaptedProcess.constant(tree, 0.0)
    return MarketSpec(tree, (Asset("s", prices, zeros),), AdaptedProcess.constant(tree, 0.0))


def make_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(seed)
