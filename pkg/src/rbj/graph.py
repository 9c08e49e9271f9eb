"""Partition-based communication topology.

Agents are the vertices of a bidirected, strongly connected graph; agent i
owns a state block of dimension ``block_dims[i]``. Neighbor sets are kept in
ascending-id order so that every neighborhood sum is evaluated in a fixed,
reproducible order.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

__all__ = [
    "PartitionedGraph",
    "build_graph",
    "neighbors",
    "load_graph",
    "save_graph",
]


@dataclass(frozen=True)
class PartitionedGraph:
    """Immutable communication topology over ``num_agents`` agents.

    Invariants (enforced by :func:`build_graph`):

    * bidirected: ``j in neighbor_sets[i]`` iff ``i in neighbor_sets[j]``;
    * no self loops;
    * strongly connected;
    * every block dimension is a positive integer.
    """

    num_agents: int
    neighbor_sets: tuple[tuple[int, ...], ...]
    block_dims: tuple[int, ...]

    @property
    def total_dim(self) -> int:
        """Global state dimension n = sum of the block dimensions."""
        return sum(self.block_dims)

    @property
    def offsets(self) -> tuple[int, ...]:
        """Start offset of each agent's block in the stacked global vector."""
        off, acc = [], 0
        for d in self.block_dims:
            off.append(acc)
            acc += d
        return tuple(off)

    def block_slice(self, i: int) -> slice:
        """Slice of agent i's block inside the stacked global vector."""
        o = self.offsets[i]
        return slice(o, o + self.block_dims[i])

    def closed_neighborhood(self, i: int) -> tuple[int, ...]:
        """Neighbors of i plus i itself, ascending."""
        return tuple(sorted(self.neighbor_sets[i] + (i,)))

    def split(self, x: np.ndarray) -> dict[int, np.ndarray]:
        """Split a stacked global vector into per-agent blocks."""
        x = np.asarray(x, dtype=float)
        if x.shape != (self.total_dim,):
            raise ValueError(f"expected global vector of length {self.total_dim}, got shape {x.shape}")
        return {i: x[self.block_slice(i)] for i in range(self.num_agents)}

    def join(self, blocks: dict[int, np.ndarray]) -> np.ndarray:
        """Stack per-agent blocks into the global vector."""
        return np.concatenate([np.asarray(blocks[i], dtype=float) for i in range(self.num_agents)])


def _bfs_reach(adj: tuple[tuple[int, ...], ...], source: int) -> int:
    seen = {source}
    queue = deque([source])
    while queue:
        u = queue.popleft()
        for v in adj[u]:
            if v not in seen:
                seen.add(v)
                queue.append(v)
    return len(seen)


def build_graph(num_agents, edges, block_dims) -> PartitionedGraph:
    """Build a validated topology from an unordered edge list.

    Parameters
    ----------
    num_agents : int
        Number of agents N; ids are 0..N-1.
    edges : iterable of (i, j)
        Unordered agent pairs; each is expanded to both directions.
    block_dims : sequence of int
        Per-agent state dimensions, all positive.

    Raises
    ------
    ValueError
        On invalid ids, self loops, non-positive dimensions, or if the
        resulting graph is not strongly connected.
    """
    if num_agents < 1:
        raise ValueError(f"num_agents must be >= 1, got {num_agents}")
    dims = tuple(int(d) for d in block_dims)
    if len(dims) != num_agents:
        raise ValueError(f"expected {num_agents} block dims, got {len(dims)}")
    if any(d <= 0 for d in dims):
        raise ValueError(f"block dimensions must be positive, got {dims}")

    nbrs: list[set[int]] = [set() for _ in range(num_agents)]
    for i, j in edges:
        i, j = int(i), int(j)
        if not (0 <= i < num_agents and 0 <= j < num_agents):
            raise ValueError(f"edge ({i},{j}) references an invalid agent id")
        if i == j:
            raise ValueError(f"self loop ({i},{i}) is not allowed")
        nbrs[i].add(j)
        nbrs[j].add(i)

    neighbor_sets = tuple(tuple(sorted(s)) for s in nbrs)
    # Bidirected by construction, so strong connectivity is equivalent to
    # undirected reachability from any single node.
    if num_agents > 1 and _bfs_reach(neighbor_sets, 0) != num_agents:
        raise ValueError("graph is not strongly connected")
    return PartitionedGraph(num_agents=num_agents, neighbor_sets=neighbor_sets, block_dims=dims)


def neighbors(g: PartitionedGraph, i: int) -> tuple[int, ...]:
    """Neighbor set N_i in ascending-id order."""
    if not 0 <= i < g.num_agents:
        raise ValueError(f"invalid agent id {i} for graph with {g.num_agents} agents")
    return g.neighbor_sets[i]


def validate(g: PartitionedGraph) -> bool:
    """Re-check all structural invariants of an existing graph."""
    try:
        rebuilt = build_graph(
            g.num_agents,
            [(i, j) for i in range(g.num_agents) for j in g.neighbor_sets[i] if i < j],
            g.block_dims,
        )
    except ValueError:
        return False
    return rebuilt.neighbor_sets == g.neighbor_sets


def load_graph(path) -> PartitionedGraph:
    """Load a topology from a plain-text edge-list file.

    Format (whitespace separated, ``#`` starts a comment)::

        N <num_agents>
        i j          # one line per undirected edge
        ...
        dims d_0 d_1 ... d_{N-1}
    """
    num_agents = None
    dims = None
    edges = []
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            tok = line.split()
            if tok[0] == "N":
                num_agents = int(tok[1])
            elif tok[0] == "dims":
                dims = [int(t) for t in tok[1:]]
            else:
                if len(tok) != 2:
                    raise ValueError(f"{path}:{lineno}: expected 'i j' edge line, got {raw!r}")
                edges.append((int(tok[0]), int(tok[1])))
    if num_agents is None:
        raise ValueError(f"{path}: missing 'N <num_agents>' line")
    if dims is None:
        raise ValueError(f"{path}: missing 'dims ...' line")
    return build_graph(num_agents, edges, dims)


def save_graph(g: PartitionedGraph, path) -> None:
    """Write a topology in the format accepted by :func:`load_graph`."""
    with open(path, "w") as fh:
        fh.write(f"N {g.num_agents}\n")
        for i in range(g.num_agents):
            for j in g.neighbor_sets[i]:
                if i < j:
                    fh.write(f"{i} {j}\n")
        fh.write("dims " + " ".join(str(d) for d in g.block_dims) + "\n")
