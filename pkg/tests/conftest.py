"""Shared helpers: random connected instances for both cost families."""

import numpy as np
import pytest

from rbj.cost import QuadraticCost, RobustCost
from rbj.graph import build_graph


def random_graph(rng, num_agents, max_dim=3, extra_edges=2):
    """Random connected bidirected graph: a spanning tree plus a few chords."""
    edges = {(int(rng.integers(0, k)), k) for k in range(1, num_agents)}
    for _ in range(extra_edges):
        i, j = rng.integers(0, num_agents, size=2)
        if i != j:
            edges.add((min(int(i), int(j)), max(int(i), int(j))))
    dims = [int(rng.integers(1, max_dim + 1)) for _ in range(num_agents)]
    return build_graph(num_agents, sorted(edges), dims)


def random_instance(seed, family="quadratic", num_agents=5, max_dim=3, nu=1e-2):
    """Random separable cost with full-rank stacked measurements.

    Each agent measures its own block plus every neighbor block with a few
    extra rows, which makes the stacked matrix full column rank with
    probability one.
    """
    rng = np.random.default_rng(seed)
    g = random_graph(rng, num_agents, max_dim=max_dim)
    y, A, W = [], {}, []
    for i in range(g.num_agents):
        hood = g.closed_neighborhood(i)
        m_i = sum(g.block_dims[j] for j in hood) + 2
        y.append(rng.standard_normal(m_i))
        for j in hood:
            A[i, j] = rng.standard_normal((m_i, g.block_dims[j]))
        W.append(np.diag(rng.uniform(0.5, 2.0, size=m_i)))
    if family == "quadratic":
        return g, QuadraticCost(g, y, A, W)
    return g, RobustCost(g, y, A, nu=nu)


def blocks_of(g, x):
    return g.split(np.asarray(x, dtype=float))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
