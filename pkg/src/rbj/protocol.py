"""Per-agent state machine for resilient block Jacobi iterations.

Each agent cycles through three atomic actions: transmit, receive, update.
Transmit evaluates the derivative blocks destined for the neighbors at the
last cached neighbor states and broadcasts one message; receive overwrites
the per-sender caches with a delivered payload; update recomputes the own
derivative blocks and takes one preconditioned step using whatever the
caches currently hold. Lost packets simply leave caches at their previous
values, which is the entire resilience mechanism.

Three variants share the machinery:

* ``rbj``  - full scheme, second-order blocks exchanged every round;
* ``rgd``  - first-order only, the preconditioner is the identity;
* ``rwls`` - quadratic costs, whose second-order blocks are constant and can
  be exchanged reliably once (:func:`rwls_handshake`), after which messages
  shrink to the first-order payload.

The legal action order per agent is ``(transmit -> receive* -> update)*``;
zero receptions before an update are allowed (an agent that hears nothing
still updates from its caches). Illegal calls raise :class:`ProtocolError`
and leave the state untouched.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
from scipy.linalg.lapack import dpocon

from .cost import QuadraticCost, SeparableCost
from .graph import PartitionedGraph

__all__ = [
    "VARIANTS",
    "AgentState",
    "BroadcastMessage",
    "ProtocolError",
    "SingularUpdateError",
    "init_agent",
    "act_transmit",
    "act_receive",
    "act_update",
    "sync_round",
    "rwls_handshake",
]

VARIANTS = ("rbj", "rgd", "rwls")

# preconditioner sums with a condition estimate above this are treated as
# singular (genuine ill-posedness rather than float noise)
COND_LIMIT = 1e12


class ProtocolError(RuntimeError):
    """An action was invoked while its enabling flag was down."""


class SingularUpdateError(RuntimeError):
    """The summed second-order blocks are numerically singular.

    Signals violated convexity or a corrupted cache; carries a diagnostic of
    the offending agent and, when raised through the simulator, the round.
    """


@dataclass(frozen=True)
class BroadcastMessage:
    """Immutable broadcast payload: sender id, state, per-destination blocks.

    ``rho_out[j]`` is the first-order block computed by the sender for
    neighbor j; ``xi_out`` is None when the variant omits second-order
    payloads (rgd always, rwls after the handshake). Treat the contained
    arrays as read-only.
    """

    sender: int
    x_sender: np.ndarray
    rho_out: dict[int, np.ndarray]
    xi_out: dict[int, np.ndarray] | None

    def to_bytes(self) -> bytes:
        """Serialize to the canonical wire layout.

        All integers are little-endian uint32, all floats little-endian
        binary64, destinations in ascending id order::

            sender | nx, x[nx] | n_rho, (dest, len, block)* | has_xi,
            [n_xi, (dest, dim, block_row_major)*]
        """
        out = [struct.pack("<I", self.sender)]
        x = np.asarray(self.x_sender, dtype="<f8")
        out.append(struct.pack("<I", x.size))
        out.append(x.tobytes())
        out.append(struct.pack("<I", len(self.rho_out)))
        for dest in sorted(self.rho_out):
            blk = np.asarray(self.rho_out[dest], dtype="<f8")
            out.append(struct.pack("<II", dest, blk.size))
            out.append(blk.tobytes())
        if self.xi_out is None:
            out.append(struct.pack("<I", 0))
        else:
            out.append(struct.pack("<I", 1))
            out.append(struct.pack("<I", len(self.xi_out)))
            for dest in sorted(self.xi_out):
                blk = np.asarray(self.xi_out[dest], dtype="<f8")
                out.append(struct.pack("<II", dest, blk.shape[0]))
                out.append(blk.tobytes())
        return b"".join(out)

    @classmethod
    def from_bytes(cls, data: bytes) -> "BroadcastMessage":
        """Parse the layout written by :meth:`to_bytes`."""
        off = 0

        def u32():
            nonlocal off
            (v,) = struct.unpack_from("<I", data, off)
            off += 4
            return v

        def floats(count):
            nonlocal off
            arr = np.frombuffer(data, dtype="<f8", count=count, offset=off).astype(float)
            off += 8 * count
            return arr

        sender = u32()
        x = floats(u32())
        rho = {}
        for _ in range(u32()):
            dest = u32()
            rho[dest] = floats(u32())
        xi = None
        if u32():
            xi = {}
            for _ in range(u32()):
                dest = u32()
                dim = u32()
                xi[dest] = floats(dim * dim).reshape(dim, dim)
        return cls(sender=sender, x_sender=x, rho_out=rho, xi_out=xi)


@dataclass
class AgentState:
    """Mutable per-agent state: own block, neighbor caches, action flags."""

    id: int
    x: np.ndarray
    epsilon: float
    variant: str
    neighbors: tuple[int, ...]
    cache_x: dict[int, np.ndarray]
    cache_rho: dict[int, np.ndarray]
    cache_xi: dict[int, np.ndarray] | None
    flag_transmission: bool = True
    flag_reception: bool = False
    flag_update: bool = False
    xi_settled: bool = False
    # cached Cholesky of the constant preconditioner sum (quadratic costs)
    _chol: tuple | None = field(
        default=None, repr=False, compare=False
    )
    _xi_version: int = field(default=0, repr=False, compare=False)
    _chol_version: int = field(default=-1, repr=False, compare=False)


def init_agent(graph: PartitionedGraph, agent_id: int, x0, epsilon: float, variant: str = "rbj") -> AgentState:
    """Create an agent with zeroed caches and identity second-order caches.

    The transmission flag starts raised. The rgd variant allocates no
    second-order storage at all.
    """
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    if not epsilon > 0:
        raise ValueError(f"step size epsilon must be > 0, got {epsilon}")
    if not 0 <= agent_id < graph.num_agents:
        raise ValueError(f"invalid agent id {agent_id}")
    n_i = graph.block_dims[agent_id]
    x0 = np.asarray(x0, dtype=float).copy()
    if x0.shape != (n_i,):
        raise ValueError(f"x0 has shape {x0.shape}, expected ({n_i},)")
    nbrs = graph.neighbor_sets[agent_id]
    return AgentState(
        id=agent_id,
        x=x0,
        epsilon=float(epsilon),
        variant=variant,
        neighbors=nbrs,
        cache_x={j: np.zeros(graph.block_dims[j]) for j in nbrs},
        cache_rho={j: np.zeros(n_i) for j in nbrs},
        cache_xi=None if variant == "rgd" else {j: np.eye(n_i) for j in nbrs},
    )


def act_transmit(agent: AgentState, cost: SeparableCost) -> BroadcastMessage:
    """Evaluate outgoing blocks at the cached states and emit one message.

    Clears the transmission flag and enables reception and update (an update
    with zero intervening receptions is legal).
    """
    if not agent.flag_transmission:
        raise ProtocolError(f"agent {agent.id}: transmit called with transmission flag down")
    blocks = dict(agent.cache_x)
    blocks[agent.id] = agent.x
    rho_all = cost.rho_blocks(agent.id, blocks)
    rho_out = {j: rho_all[j] for j in agent.neighbors}
    if agent.variant == "rgd" or (agent.variant == "rwls" and agent.xi_settled):
        xi_out = None
    else:
        xi_all = cost.xi_blocks(agent.id, blocks)
        xi_out = {j: xi_all[j] for j in agent.neighbors}
    agent.flag_transmission = False
    agent.flag_reception = True
    agent.flag_update = True
    return BroadcastMessage(sender=agent.id, x_sender=agent.x, rho_out=rho_out, xi_out=xi_out)


def act_receive(agent: AgentState, msg: BroadcastMessage) -> None:
    """Overwrite the caches indexed by the sender with the delivered payload."""
    if not agent.flag_reception:
        raise ProtocolError(f"agent {agent.id}: receive called with reception flag down")
    s = msg.sender
    if s not in agent.cache_x:
        raise ValueError(f"agent {agent.id}: sender {s} is not a neighbor")
    if agent.id not in msg.rho_out:
        raise ValueError(f"agent {agent.id}: message from {s} carries no block for this agent")
    agent.cache_x[s] = msg.x_sender
    agent.cache_rho[s] = msg.rho_out[agent.id]
    if msg.xi_out is not None and agent.cache_xi is not None:
        agent.cache_xi[s] = msg.xi_out[agent.id]
        agent._xi_version += 1
    agent.flag_update = True


def act_update(agent: AgentState, cost: SeparableCost, freeze: bool = False) -> None:
    """Recompute the own blocks and take one preconditioned step.

    ``freeze`` performs the flag transitions without moving the state (used
    to observe the cache dynamics alone). Never mutates ``x`` in place, so
    previously emitted messages keep their snapshots.
    """
    if not agent.flag_update:
        raise ProtocolError(f"agent {agent.id}: update called with update flag down")
    if not freeze:
        blocks = dict(agent.cache_x)
        blocks[agent.id] = agent.x
        grad = cost.rho_block(agent.id, agent.id, blocks)
        for r in agent.cache_rho.values():
            grad = grad + r
        if agent.variant == "rgd":
            agent.x = agent.x - agent.epsilon * grad
        else:
            step = _solve_preconditioned(agent, cost, blocks, grad)
            agent.x = agent.x - agent.epsilon * step
    agent.flag_update = False
    agent.flag_reception = False
    agent.flag_transmission = True


def _solve_preconditioned(agent, cost, blocks, grad):
    """Solve (sum of second-order blocks) * step = grad with a cond guard."""
    xi_constant = isinstance(cost, QuadraticCost)
    if xi_constant and agent._chol is not None and agent._chol_version == agent._xi_version:
        return scipy.linalg.cho_solve(agent._chol, grad, check_finite=False)
    S = cost.xi_block(agent.id, agent.id, blocks)
    for m in agent.cache_xi.values():
        S = S + m
    if not np.all(np.isfinite(S)):
        raise SingularUpdateError(f"agent {agent.id}: preconditioner sum contains non-finite entries")
    try:
        fac = scipy.linalg.cho_factor(S, lower=True, check_finite=False)
    except scipy.linalg.LinAlgError as exc:
        raise SingularUpdateError(
            f"agent {agent.id}: preconditioner sum is not positive definite ({exc})"
        ) from None
    anorm = float(np.max(np.sum(np.abs(S), axis=0)))
    rcond, info = dpocon(fac[0], anorm, uplo="L")
    if info != 0 or rcond < 1.0 / COND_LIMIT:
        cond = np.inf if rcond == 0 else 1.0 / rcond
        raise SingularUpdateError(
            f"agent {agent.id}: preconditioner condition estimate {cond:.3e} exceeds {COND_LIMIT:.0e}"
        )
    if xi_constant:
        agent._chol = fac
        agent._chol_version = agent._xi_version
    return scipy.linalg.cho_solve(fac, grad, check_finite=False)


def sync_round(agents: list[AgentState], cost: SeparableCost) -> None:
    """One synchronous two-round block Jacobi iteration (lossless baseline).

    Round one exchanges fresh states, every agent evaluates all derivative
    blocks at them, round two exchanges the blocks, then every block moves
    simultaneously by ``x_i - eps * D_i(x)^{-1} grad_i(x)``. Communication
    is implicit (idealized reliable network); the asynchronous caches and
    flags are left untouched.
    """
    g = cost.graph
    blocks = {a.id: a.x for a in agents}
    rho_all = {a.id: cost.rho_blocks(a.id, blocks) for a in agents}
    xi_all = {a.id: cost.xi_blocks(a.id, blocks) for a in agents}
    new_x = {}
    for a in agents:
        hood = g.closed_neighborhood(a.id)
        grad = sum(rho_all[j][a.id] for j in hood)
        D = sum(xi_all[j][a.id] for j in hood)
        new_x[a.id] = a.x - a.epsilon * np.linalg.solve(D, grad)
    for a in agents:
        a.x = new_x[a.id]


def rwls_handshake(agents: list[AgentState], cost: SeparableCost) -> None:
    """Reliable one-time exchange of the constant second-order blocks.

    Models the preliminary lossless phase of the rwls variant: every agent's
    constant blocks are delivered to all neighbors, after which broadcast
    messages omit the second-order payload entirely.
    """
    if not isinstance(cost, QuadraticCost):
        raise TypeError("rwls requires a quadratic cost (constant second-order blocks)")
    by_id = {a.id: a for a in agents}
    for a in agents:
        if a.variant != "rwls":
            raise ValueError(f"agent {a.id} has variant {a.variant!r}; handshake applies to rwls only")
    for a in agents:
        xi_all = cost.xi_blocks(a.id)
        for j in a.neighbors:
            by_id[j].cache_xi[a.id] = xi_all[j]
            by_id[j]._xi_version += 1
    for a in agents:
        a.xi_settled = True
