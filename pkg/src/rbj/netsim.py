"""Deterministic discrete-event simulation of lossy broadcast rounds.

Per-link packet losses are independent Bernoulli draws from a counter-based
(Philox) generator, so a (seed, config) pair fully determines a run. On top
of the random losses the simulator enforces persistent communication: after
``window_t - 1`` consecutive drops on a directed link, the next transmission
on that link is force-delivered, so every window of ``window_t`` consecutive
transmissions contains at least one delivery. Enforcement can be disabled to
observe the raw Bernoulli behavior.

Two schedulers are provided. The ``round`` scheduler runs one global round
per step: all agents transmit, all delivered messages are received, all
agents update. The ``randomized`` scheduler activates one uniformly chosen
agent action per tick and buffers undelivered-but-pending messages in
per-agent mailboxes (latest message per sender wins).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .cost import SeparableCost
from .graph import PartitionedGraph
from .protocol import (
    AgentState,
    SingularUpdateError,
    act_receive,
    act_transmit,
    act_update,
    rwls_handshake,
)

__all__ = [
    "LossModel",
    "RunTrace",
    "run",
    "staleness",
    "export_trace_csv",
    "write_summary_csv",
]


@dataclass(frozen=True)
class LossModel:
    """Per-link loss probability plus the persistent-communication window."""

    p_loss: float
    window_t: int
    rng_seed: int
    enforce_window: bool = True

    def __post_init__(self):
        if not 0 <= self.p_loss < 1:
            raise ValueError(f"p_loss must be in [0, 1), got {self.p_loss}")
        if self.window_t < 1:
            raise ValueError(f"window_t must be a positive integer, got {self.window_t}")


@dataclass
class RunTrace:
    """Complete record of one simulated run.

    Rows are indexed by round, with row 0 the initial condition. ``links``
    lists the directed links as (receiver, sender) pairs in canonical order;
    ``deliveries`` has one row per simulated round, ``staleness`` additionally
    includes the round-0 row of zeros.
    """

    num_rounds: int
    scheduler: str
    seed: int
    links: tuple[tuple[int, int], ...]
    J: np.ndarray
    xs: np.ndarray | None = None
    err_inf: np.ndarray | None = None
    deliveries: np.ndarray | None = None
    staleness_counters: np.ndarray | None = None
    x_star: np.ndarray | None = None
    link_index: dict[tuple[int, int], int] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if not self.link_index:
            self.link_index = {lk: k for k, lk in enumerate(self.links)}

    @property
    def diverged(self) -> bool:
        """True when the cost blew past 1e6 x its initial value or went non-finite."""
        if not np.all(np.isfinite(self.J)):
            return True
        if self.xs is not None and not np.all(np.isfinite(self.xs)):
            return True
        scale = max(abs(self.J[0]), 1.0)
        return bool(np.max(self.J) > 1e6 * scale)

    def normalized_cost(self, j_star: float) -> np.ndarray:
        """(J(t) - J*) / (J(0) - J*), the declared convergence metric."""
        denom = self.J[0] - j_star
        if denom <= 0:
            raise ValueError("initial cost must exceed the optimal cost to normalize")
        return (self.J - j_star) / denom

    def max_staleness(self) -> np.ndarray:
        """Per-round maximum staleness over all links (zeros when no links)."""
        if self.staleness_counters is None or self.staleness_counters.shape[1] == 0:
            return np.zeros(self.J.shape[0], dtype=int)
        return self.staleness_counters.max(axis=1)


def staleness(trace: RunTrace, i: int, j: int, t: int) -> int:
    """Rounds elapsed since agent i last received from neighbor j, at round t.

    Under the round scheduler with window enforcement this never exceeds the
    persistence window.
    """
    if (i, j) not in trace.link_index:
        raise ValueError(f"({i}, {j}) is not a directed link of this trace")
    if not 0 <= t < trace.staleness_counters.shape[0]:
        raise ValueError(f"round {t} outside trace of {trace.staleness_counters.shape[0]} rows")
    return int(trace.staleness_counters[t, trace.link_index[i, j]])


def _canonical_links(graph: PartitionedGraph) -> tuple[tuple[int, int], ...]:
    # (receiver, sender) pairs, ascending; fixed order drives all RNG draws
    return tuple((i, j) for i in range(graph.num_agents) for j in graph.neighbor_sets[i])


def run(
    agents: list[AgentState],
    cost: SeparableCost,
    graph: PartitionedGraph,
    loss: LossModel,
    scheduler: str = "round",
    num_rounds: int = 1,
    x_star=None,
    record_states: bool = True,
    freeze_states: bool = False,
) -> RunTrace:
    """Advance the coupled agent/network system and record the full trace.

    Agents must be freshly initialized (or at least ready to transmit) and
    indexed by id. Messages are dropped per directed link with probability
    ``loss.p_loss``, subject to forced delivery. rwls agents that have not
    yet exchanged their constant second-order blocks do so reliably before
    the lossy rounds begin.
    """
    if num_rounds < 1:
        raise ValueError(f"num_rounds must be >= 1, got {num_rounds}")
    if scheduler not in ("round", "randomized"):
        raise ValueError(f"unknown scheduler {scheduler!r}")
    if len(agents) != graph.num_agents or any(a.id != i for i, a in enumerate(agents)):
        raise ValueError("agents must be a list indexed by agent id")

    if all(a.variant == "rwls" for a in agents) and not all(a.xi_settled for a in agents):
        rwls_handshake(agents, cost)

    links = _canonical_links(graph)
    L = len(links)
    out_links = {
        s: [k for k, (_, snd) in enumerate(links) if snd == s] for s in range(graph.num_agents)
    }
    n = graph.total_dim

    ss = np.random.SeedSequence(loss.rng_seed)
    loss_ss, sched_ss = ss.spawn(2)
    rng_loss = np.random.Generator(np.random.Philox(loss_ss))
    rng_sched = np.random.Generator(np.random.Philox(sched_ss))

    xs = np.zeros((num_rounds + 1, n)) if record_states else None
    J = np.zeros(num_rounds + 1)
    err = np.zeros(num_rounds + 1) if x_star is not None else None
    if x_star is not None:
        x_star = np.asarray(x_star, dtype=float)
    deliveries = np.zeros((num_rounds, L), dtype=bool)
    stal = np.zeros((num_rounds + 1, L), dtype=np.int32)
    drops = np.zeros(L, dtype=np.int64)  # consecutive drops per link

    def snapshot(t):
        row = np.concatenate([a.x for a in agents]) if agents else np.zeros(0)
        if xs is not None:
            xs[t] = row
        with np.errstate(over="ignore", invalid="ignore"):
            J[t] = cost.stacked_value(row)
        if err is not None:
            err[t] = np.max(np.abs(row - x_star))

    def decide(link_ids, t):
        """Delivery decision per link id; draws one uniform per link."""
        u = rng_loss.random(len(link_ids))
        delivered = []
        for u_k, k in zip(u, link_ids):
            forced = loss.enforce_window and drops[k] >= loss.window_t - 1
            if forced or u_k >= loss.p_loss:
                drops[k] = 0
                deliveries[t - 1, k] = True
                delivered.append(k)
            else:
                drops[k] += 1
        return delivered

    snapshot(0)
    mailbox: list[dict[int, object]] = [dict() for _ in agents]
    try:
        # divergent runs overflow on purpose; they are flagged, not raised
        with np.errstate(over="ignore", invalid="ignore"):
            for t in range(1, num_rounds + 1):
                if scheduler == "round":
                    msgs = [act_transmit(a, cost) for a in agents]
                    delivered = decide(list(range(L)), t)
                    for k in delivered:
                        i, j = links[k]
                        act_receive(agents[i], msgs[j])
                    for a in agents:
                        act_update(a, cost, freeze=freeze_states)
                else:
                    a = agents[rng_sched.integers(len(agents))]
                    if a.flag_transmission:
                        msg = act_transmit(a, cost)
                        for k in decide(out_links[a.id], t):
                            mailbox[links[k][0]][a.id] = msg
                    elif mailbox[a.id]:
                        sender = min(mailbox[a.id])
                        act_receive(a, mailbox[a.id].pop(sender))
                    else:
                        act_update(a, cost, freeze=freeze_states)
                stal[t] = stal[t - 1] + 1
                stal[t, deliveries[t - 1]] = 0
                snapshot(t)
    except SingularUpdateError as exc:
        raise SingularUpdateError(f"round {t}: {exc}") from exc

    return RunTrace(
        num_rounds=num_rounds,
        scheduler=scheduler,
        seed=loss.rng_seed,
        links=links,
        J=J,
        xs=xs,
        err_inf=err,
        deliveries=deliveries,
        staleness_counters=stal,
        x_star=x_star,
    )


def _fmt(v) -> str:
    return f"{v:.17g}"


def export_trace_csv(trace: RunTrace, path, j_star=None) -> None:
    """Write one run as CSV rows: round, J, J_normalized, err_inf, max_staleness.

    Normalized cost and error columns are nan when the oracle solution was
    not supplied. Output is byte-reproducible for identical traces.
    """
    norm = trace.normalized_cost(j_star) if j_star is not None else np.full_like(trace.J, np.nan)
    err = trace.err_inf if trace.err_inf is not None else np.full_like(trace.J, np.nan)
    ms = trace.max_staleness()
    with open(path, "w") as fh:
        fh.write("round,J,J_normalized,err_inf,max_staleness\n")
        for t in range(trace.J.shape[0]):
            fh.write(f"{t},{_fmt(trace.J[t])},{_fmt(norm[t])},{_fmt(err[t])},{ms[t]}\n")


def write_summary_csv(traces: list[RunTrace], path, j_star=None) -> None:
    """Aggregate replicas: per-round mean and std of J and normalized cost."""
    if not traces:
        raise ValueError("no traces to aggregate")
    rounds = traces[0].J.shape[0]
    if any(tr.J.shape[0] != rounds for tr in traces):
        raise ValueError("traces must share the same number of rounds")
    Js = np.stack([tr.J for tr in traces])
    if j_star is not None:
        norms = np.stack([tr.normalized_cost(j_star) for tr in traces])
    else:
        norms = np.full_like(Js, np.nan)
    with np.errstate(over="ignore", invalid="ignore"):  # diverged replicas hold inf
        with open(path, "w") as fh:
            fh.write("round,J_mean,J_std,J_normalized_mean,J_normalized_std\n")
            for t in range(rounds):
                fh.write(
                    f"{t},{_fmt(Js[:, t].mean())},{_fmt(Js[:, t].std())},"
                    f"{_fmt(norms[:, t].mean())},{_fmt(norms[:, t].std())}\n"
                )
