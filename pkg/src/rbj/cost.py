"""Separable convex costs with per-neighbor derivative blocks.

A cost is a sum of local terms J_i, each depending only on the blocks of the
closed neighborhood of agent i. Agents exchange two derivative quantities:

* rho block: ``rho_block(c, i, j, x)`` is the partial gradient of J_i with
  respect to x_j, computed by the owner of J_i and destined for agent j;
* xi block: ``xi_block(c, i, j, x)`` is the diagonal Hessian block of J_i
  with respect to x_j.

Summing the received blocks over the closed neighborhood gives each agent its
gradient block and its local preconditioner.

Two families are provided: a weighted least-squares cost and a smoothed
1-norm cost for outlier-robust regression. Both keep the convention that the
rho blocks are true gradients, so descent directions reduce the cost.
"""

from __future__ import annotations

import numpy as np

from .graph import PartitionedGraph

__all__ = [
    "SeparableCost",
    "QuadraticCost",
    "RobustCost",
    "finite_diff_oracle",
    "save_problem",
    "load_problem",
]


class SeparableCost:
    """Interface shared by the concrete cost families.

    ``x_blocks`` arguments are mappings from agent id to state block; they
    must contain (at least) every member of the closed neighborhood of the
    agent being evaluated, with matching dimensions.
    """

    graph: PartitionedGraph

    def __init__(self, graph: PartitionedGraph):
        self.graph = graph

    # -- mandatory surface -------------------------------------------------
    def local_value(self, i: int, x_blocks) -> float:
        raise NotImplementedError

    def rho_blocks(self, i: int, x_blocks) -> dict[int, np.ndarray]:
        """All rho blocks of J_i at once (one residual evaluation)."""
        raise NotImplementedError

    def xi_blocks(self, i: int, x_blocks) -> dict[int, np.ndarray]:
        """All xi blocks of J_i at once."""
        raise NotImplementedError

    def rho_block(self, i: int, j: int, x_blocks) -> np.ndarray:
        """Partial gradient of J_i with respect to x_j (j in N_i^+)."""
        self._check_member(i, j)
        return self.rho_blocks(i, x_blocks)[j]

    def xi_block(self, i: int, j: int, x_blocks) -> np.ndarray:
        """Diagonal Hessian block of J_i with respect to x_j (j in N_i^+)."""
        self._check_member(i, j)
        return self.xi_blocks(i, x_blocks)[j]

    def global_value(self, x_blocks) -> float:
        """Sum of the local terms over all agents."""
        return float(sum(self.local_value(i, x_blocks) for i in range(self.graph.num_agents)))

    def stacked_value(self, x: np.ndarray) -> float:
        """Global cost evaluated from the stacked vector (fast path)."""
        raise NotImplementedError

    # -- shared helpers ----------------------------------------------------
    def _check_member(self, i, j):
        if j != i and j not in self.graph.neighbor_sets[i]:
            raise ValueError(f"agent {j} is not in the closed neighborhood of agent {i}")

    def _gather(self, i: int, x_blocks) -> np.ndarray:
        """Concatenate the closed-neighborhood blocks in ascending order."""
        dims = self.graph.block_dims
        parts = []
        for j in self.graph.closed_neighborhood(i):
            try:
                xj = x_blocks[j]
            except KeyError:
                raise ValueError(f"missing block {j} when evaluating agent {i}") from None
            xj = np.asarray(xj, dtype=float)
            if xj.shape != (dims[j],):
                raise ValueError(
                    f"block {j} has shape {xj.shape}, expected ({dims[j]},) when evaluating agent {i}"
                )
            parts.append(xj)
        return np.concatenate(parts)


def _as_spd(mat: np.ndarray, what: str) -> np.ndarray:
    mat = np.asarray(mat, dtype=float)
    if mat.ndim != 2 or mat.shape[0] != mat.shape[1]:
        raise ValueError(f"{what} must be square, got shape {mat.shape}")
    if not np.allclose(mat, mat.T, atol=1e-12):
        raise ValueError(f"{what} must be symmetric")
    try:
        np.linalg.cholesky(mat)
    except np.linalg.LinAlgError:
        raise ValueError(f"{what} must be positive definite") from None
    return mat


class _StackedCost(SeparableCost):
    """Common storage for costs of the form residual(i) = y_i - sum_j A_ij x_j."""

    def __init__(self, graph, y, A):
        super().__init__(graph)
        dims = graph.block_dims
        self.y = [np.asarray(yi, dtype=float).ravel() for yi in y]
        if len(self.y) != graph.num_agents:
            raise ValueError(f"expected {graph.num_agents} measurement vectors, got {len(self.y)}")
        self.m = [yi.shape[0] for yi in self.y]
        self.A = {}
        for i in range(graph.num_agents):
            hood = graph.closed_neighborhood(i)
            for j in hood:
                try:
                    block = np.asarray(A[i, j], dtype=float)
                except KeyError:
                    raise ValueError(f"missing measurement block A[{i},{j}]") from None
                if block.shape != (self.m[i], dims[j]):
                    raise ValueError(
                        f"A[{i},{j}] has shape {block.shape}, expected ({self.m[i]}, {dims[j]})"
                    )
                self.A[i, j] = block
        extra = set(A) - set(self.A)
        if extra:
            raise ValueError(f"measurement blocks outside any closed neighborhood: {sorted(extra)}")
        # concatenated [A_ij]_{j in N_i^+} for the one-matmul residual path
        self._A_cat = {
            i: np.ascontiguousarray(np.hstack([self.A[i, j] for j in graph.closed_neighborhood(i)]))
            for i in range(graph.num_agents)
        }
        self._flat = None

    def residual(self, i: int, x_blocks) -> np.ndarray:
        """r_i = y_i - sum_{j in N_i^+} A_ij x_j."""
        return self.y[i] - self._A_cat[i] @ self._gather(i, x_blocks)

    def stacked(self):
        """Assemble (A, y) with rows in agent order and columns in block order."""
        if self._flat is None:
            g = self.graph
            n = g.total_dim
            M = sum(self.m)
            A = np.zeros((M, n))
            yv = np.concatenate(self.y)
            row = 0
            for i in range(g.num_agents):
                for j in g.closed_neighborhood(i):
                    A[row : row + self.m[i], g.block_slice(j)] = self.A[i, j]
                row += self.m[i]
            self._flat = (A, yv)
        return self._flat


class QuadraticCost(_StackedCost):
    """Weighted least-squares cost.

    J_i(x) = 1/2 || y_i - sum_{j in N_i^+} A_ij x_j ||^2_{W_i} with W_i
    symmetric positive definite. The global cost is strictly convex and
    radially unbounded iff the stacked A has full column rank, which the
    constructor verifies; all derivatives are polynomial in x, hence smooth.

    Parameters
    ----------
    graph : PartitionedGraph
    y : sequence of per-agent measurement vectors
    A : mapping (i, j) -> array of shape (m_i, n_j), one entry per closed
        neighborhood pair
    W : sequence of per-agent SPD weight matrices, or None for identity
    """

    family = "quadratic"

    def __init__(self, graph, y, A, W=None):
        super().__init__(graph, y, A)
        if W is None:
            W = [np.eye(m) for m in self.m]
        self.W = []
        for i, Wi in enumerate(W):
            Wi = np.asarray(Wi, dtype=float)
            if Wi.ndim == 1:  # diagonal shorthand
                Wi = np.diag(Wi)
            if Wi.shape != (self.m[i], self.m[i]):
                raise ValueError(f"W[{i}] has shape {Wi.shape}, expected ({self.m[i]}, {self.m[i]})")
            self.W.append(_as_spd(Wi, f"W[{i}]"))
        # constant derivative pieces: rho_i^(j) = AtW[i,j] @ (A_i x - y_i),
        # xi_i^(j) = A_ij^T W_i A_ij
        self._AtW = {
            (i, j): np.ascontiguousarray(self.A[i, j].T @ self.W[i]) for (i, j) in self.A
        }
        self._Xi = {(i, j): self._AtW[i, j] @ self.A[i, j] for (i, j) in self.A}
        self._check_full_rank()
        self._w_diag = None
        if all(np.count_nonzero(Wi - np.diag(np.diag(Wi))) == 0 for Wi in self.W):
            self._w_diag = np.concatenate([np.diag(Wi) for Wi in self.W])

    def _check_full_rank(self):
        g = self.graph
        H = np.zeros((g.total_dim, g.total_dim))
        for i in range(g.num_agents):
            for j in g.closed_neighborhood(i):
                for k in g.closed_neighborhood(i):
                    H[g.block_slice(j), g.block_slice(k)] += self._AtW[i, j] @ self.A[i, k]
        try:
            np.linalg.cholesky(H)
        except np.linalg.LinAlgError:
            raise ValueError(
                "stacked measurement matrix is rank deficient: the cost is not strictly convex"
            ) from None

    def local_value(self, i, x_blocks):
        r = self.residual(i, x_blocks)
        return 0.5 * float(r @ (self.W[i] @ r))

    def rho_block(self, i, j, x_blocks):
        self._check_member(i, j)
        return self._AtW[i, j] @ (-self.residual(i, x_blocks))

    def rho_blocks(self, i, x_blocks):
        s = -self.residual(i, x_blocks)  # A_i x - y_i
        return {j: self._AtW[i, j] @ s for j in self.graph.closed_neighborhood(i)}

    def xi_block(self, i, j, x_blocks=None):
        self._check_member(i, j)
        return self._Xi[i, j]

    def xi_blocks(self, i, x_blocks=None):
        # constant in x; x_blocks accepted for interface symmetry
        return {j: self._Xi[i, j] for j in self.graph.closed_neighborhood(i)}

    def stacked_value(self, x):
        A, y = self.stacked()
        r = y - A @ x
        if self._w_diag is not None:
            return 0.5 * float(r @ (self._w_diag * r))
        off = 0
        total = 0.0
        for i, Wi in enumerate(self.W):
            ri = r[off : off + self.m[i]]
            total += ri @ (Wi @ ri)
            off += self.m[i]
        return 0.5 * float(total)


class RobustCost(_StackedCost):
    """Smoothed 1-norm cost for outlier-robust regression.

    J_i(x) = sum_k sqrt(r_k^2 + nu) with r = y_i - sum_j A_ij x_j and
    nu > 0. Each term is smooth (infinitely differentiable) and strictly
    convex in r_k; global strict convexity and radial unboundedness follow
    when the stacked A has full column rank, which the constructor verifies.
    Smaller nu approximates the 1-norm more closely.
    """

    family = "robust"

    def __init__(self, graph, y, A, nu):
        super().__init__(graph, y, A)
        if not nu > 0:
            raise ValueError(f"smoothing parameter nu must be > 0, got {nu}")
        self.nu = float(nu)
        try:
            np.linalg.cholesky(self._gram())
        except np.linalg.LinAlgError:
            raise ValueError(
                "stacked measurement matrix is rank deficient: the cost is not strictly convex"
            ) from None

    def _gram(self):
        g = self.graph
        G = np.zeros((g.total_dim, g.total_dim))
        for i in range(g.num_agents):
            for j in g.closed_neighborhood(i):
                for k in g.closed_neighborhood(i):
                    G[g.block_slice(j), g.block_slice(k)] += self.A[i, j].T @ self.A[i, k]
        return G

    def local_value(self, i, x_blocks):
        r = self.residual(i, x_blocks)
        return float(np.sum(np.sqrt(r * r + self.nu)))

    def rho_block(self, i, j, x_blocks):
        self._check_member(i, j)
        r = self.residual(i, x_blocks)
        return -(self.A[i, j].T @ (r / np.sqrt(r * r + self.nu)))

    def rho_blocks(self, i, x_blocks):
        # gradient of sum_k sqrt(r_k^2 + nu) w.r.t. x_j is -A_ij^T (r / sqrt(r^2 + nu))
        r = self.residual(i, x_blocks)
        u = r / np.sqrt(r * r + self.nu)
        return {j: -(self.A[i, j].T @ u) for j in self.graph.closed_neighborhood(i)}

    def xi_block(self, i, j, x_blocks):
        self._check_member(i, j)
        r = self.residual(i, x_blocks)
        d = self.nu / np.power(r * r + self.nu, 1.5)
        Aij = self.A[i, j]
        return Aij.T @ (d[:, None] * Aij)

    def xi_blocks(self, i, x_blocks):
        r = self.residual(i, x_blocks)
        d = self.nu / np.power(r * r + self.nu, 1.5)
        out = {}
        for j in self.graph.closed_neighborhood(i):
            Aij = self.A[i, j]
            out[j] = Aij.T @ (d[:, None] * Aij)
        return out

    def stacked_value(self, x):
        A, y = self.stacked()
        r = y - A @ x
        return float(np.sum(np.sqrt(r * r + self.nu)))


def finite_diff_oracle(c: SeparableCost, i: int, j: int, x_blocks, order: int, step=None):
    """Central-difference approximation of a rho or xi block of J_i.

    Used as an independent check of the analytic derivative blocks; it only
    ever evaluates ``local_value``. ``order=1`` returns the gradient of J_i
    w.r.t. x_j, ``order=2`` the Hessian block. Default steps balance
    truncation against round-off: 1e-6*(1+|x_j|_inf) for gradients and
    1e-4*(1+|x_j|_inf) for Hessians.
    """
    c._check_member(i, j)
    base = {k: np.asarray(v, dtype=float).copy() for k, v in x_blocks.items()}
    xj = base[j]
    nj = xj.shape[0]
    if step is None:
        scale = 1.0 + float(np.max(np.abs(xj))) if nj else 1.0
        step = (1e-6 if order == 1 else 1e-4) * scale
    if not step > 0:
        raise ValueError(f"step must be > 0, got {step}")

    def val(delta):
        probe = dict(base)
        probe[j] = xj + delta
        return c.local_value(i, probe)

    if order == 1:
        grad = np.zeros(nj)
        for a in range(nj):
            e = np.zeros(nj)
            e[a] = step
            grad[a] = (val(e) - val(-e)) / (2 * step)
        return grad
    if order == 2:
        hess = np.zeros((nj, nj))
        for a in range(nj):
            for b in range(a, nj):
                ea, eb = np.zeros(nj), np.zeros(nj)
                ea[a] = step
                eb[b] = step
                h = (val(ea + eb) - val(ea - eb) - val(eb - ea) + val(-ea - eb)) / (4 * step * step)
                hess[a, b] = hess[b, a] = h
        return hess
    raise ValueError(f"order must be 1 or 2, got {order}")


def save_problem(cost: SeparableCost, path) -> None:
    """Write a cost to a plain-text problem file.

    Per-agent sections list y_i, the diagonal of W_i (quadratic family only;
    non-diagonal weights are not representable in this format) and each block
    A_ij in row-major order under a header ``A i j m_i n_j``.
    """
    g = cost.graph
    lines = [f"family {cost.family}", f"agents {g.num_agents}"]
    if isinstance(cost, RobustCost):
        lines.append(f"nu {cost.nu!r}")
    for i in range(g.num_agents):
        lines.append(f"agent {i} m {cost.m[i]}")
        lines.append("y " + " ".join(repr(float(v)) for v in cost.y[i]))
        if isinstance(cost, QuadraticCost):
            Wi = cost.W[i]
            if np.count_nonzero(Wi - np.diag(np.diag(Wi))):
                raise ValueError(f"W[{i}] is not diagonal; cannot serialize to the problem file format")
            lines.append("W " + " ".join(repr(float(v)) for v in np.diag(Wi)))
        for j in g.closed_neighborhood(i):
            block = cost.A[i, j]
            lines.append(f"A {i} {j} {block.shape[0]} {block.shape[1]}")
            for row in block:
                lines.append(" ".join(repr(float(v)) for v in row))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_problem(path, graph: PartitionedGraph) -> SeparableCost:
    """Read a cost written by :func:`save_problem`, bound to ``graph``."""
    with open(path) as fh:
        tokens = []
        for raw in fh:
            line = raw.split("#", 1)[0].strip()
            if line:
                tokens.append(line.split())
    it = iter(tokens)

    def expect(tag):
        tok = next(it)
        if tok[0] != tag:
            raise ValueError(f"{path}: expected '{tag}' line, got {' '.join(tok)!r}")
        return tok

    family = expect("family")[1]
    num_agents = int(expect("agents")[1])
    if num_agents != graph.num_agents:
        raise ValueError(f"{path}: file has {num_agents} agents, graph has {graph.num_agents}")
    nu = None
    if family == "robust":
        nu = float(expect("nu")[1])
    y, W, A = [], [], {}
    for tok in it:
        if tok[0] == "agent":
            i = int(tok[1])
        elif tok[0] == "y":
            y.append(np.array([float(v) for v in tok[1:]]))
        elif tok[0] == "W":
            W.append(np.diag([float(v) for v in tok[1:]]))
        elif tok[0] == "A":
            i, j, mi, nj = int(tok[1]), int(tok[2]), int(tok[3]), int(tok[4])
            rows = [next(it) for _ in range(mi)]
            A[i, j] = np.array([[float(v) for v in row] for row in rows]).reshape(mi, nj)
        else:
            raise ValueError(f"{path}: unexpected line {' '.join(tok)!r}")
    if family == "quadratic":
        return QuadraticCost(graph, y, A, W if W else None)
    if family == "robust":
        return RobustCost(graph, y, A, nu)
    raise ValueError(f"{path}: unknown cost family {family!r}")
