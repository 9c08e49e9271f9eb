"""Partition-based power-grid state-estimation instances.

Builds synthetic radial distribution feeders (the root/PCC bus is fixed and
known, so it is excluded from the estimation state), takes noisy voltage and
current measurements with sparse outliers, partitions the buses into
contiguous areas, and assembles the corresponding separable cost whose
communication graph is the area adjacency.

Estimation works in rectangular coordinates: a complex n-bus network becomes
a real problem of dimension 2n via the block matrix
[[Re L, -Im L], [Im L, Re L]].
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass

import numpy as np

from .cost import QuadraticCost, RobustCost, SeparableCost
from .graph import PartitionedGraph, build_graph

__all__ = [
    "Feeder",
    "MeasurementSet",
    "rectangularize",
    "synth_feeder",
    "measure",
    "partition_buses",
    "area_state_indices",
    "area_row_indices",
    "build_area_cost",
    "flat_start",
    "save_feeder",
    "load_feeder",
    "save_measurements",
    "load_measurements",
]

# weight floor for measured magnitudes used as variance proxies, in p.u.
MAGNITUDE_FLOOR = 1e-4


@dataclass(frozen=True)
class Feeder:
    """Grid model: complex bus admittance (Laplacian) and true voltages.

    ``complex_laplacian`` is the grounded weighted Laplacian over the
    ``num_buses`` estimated buses (the PCC row and column are folded into the
    diagonal of the bus it attaches to). Currents follow from Kirchhoff's
    law, so they are consistent with the model by construction.
    """

    num_buses: int
    complex_laplacian: np.ndarray
    true_voltages: np.ndarray

    @property
    def currents(self) -> np.ndarray:
        """Complex nodal currents i = L v."""
        return self.complex_laplacian @ self.true_voltages

    @property
    def rect_voltage(self) -> np.ndarray:
        """Stacked [Re v; Im v] of the true voltages."""
        v = self.true_voltages
        return np.concatenate([v.real, v.imag])

    @property
    def rect_current(self) -> np.ndarray:
        i = self.currents
        return np.concatenate([i.real, i.imag])

    def bus_adjacency(self) -> list[tuple[int, ...]]:
        """Physically connected bus pairs, from the Laplacian sparsity."""
        L = self.complex_laplacian
        return [
            tuple(b2 for b2 in range(self.num_buses) if b2 != b1 and L[b1, b2] != 0)
            for b1 in range(self.num_buses)
        ]


@dataclass
class MeasurementSet:
    """Noisy rectangular measurements of voltages and currents.

    ``outlier_mask`` flags exactly the corrupted entries over the stacked
    [y_v; y_ic] layout. ``partition`` (bus -> area id) is filled in by
    :func:`build_area_cost`.
    """

    y_v: np.ndarray
    y_ic: np.ndarray
    sigma_v: float
    sigma_ic: float
    outlier_mask: np.ndarray
    partition: np.ndarray | None = None


def rectangularize(feeder: Feeder) -> np.ndarray:
    """Real 2n x 2n matrix acting on [Re v; Im v] as the complex Laplacian acts on v."""
    L = feeder.complex_laplacian
    if not np.all(np.isfinite(L)):
        raise ValueError("complex Laplacian contains non-finite entries")
    return np.block([[L.real, -L.imag], [L.imag, L.real]])


def synth_feeder(num_buses: int, seed: int = 0) -> Feeder:
    """Random radial feeder with a voltage profile near 1 p.u.

    The tree is grown by random attachment over the estimated buses; the PCC
    attaches to bus 0 with degree one, so the estimated-bus graph stays
    connected (required for contiguous partitions to yield a connected area
    graph). Line impedances have positive resistance; voltage magnitudes lie
    in [0.95, 1.05] p.u. with angles in [-0.05, 0.05] rad.
    """
    if num_buses < 2:
        raise ValueError(f"num_buses must be >= 2, got {num_buses}")
    rng = np.random.default_rng(seed)
    n = num_buses
    parents = [int(rng.integers(0, k)) for k in range(1, n)]  # bus k attaches to parents[k-1]

    def line_admittance():
        # p.u. series impedance of a distribution branch on a load base
        r = rng.uniform(0.05, 0.25)
        x = rng.uniform(0.05, 0.25)
        return 1.0 / complex(r, x)

    L = np.zeros((n, n), dtype=complex)
    for k, p in enumerate(parents, start=1):
        y = line_admittance()
        L[k, k] += y
        L[p, p] += y
        L[k, p] -= y
        L[p, k] -= y
    L[0, 0] += line_admittance()  # PCC line, folded into the root diagonal

    mag = rng.uniform(0.95, 1.05, size=n)
    ang = rng.uniform(-0.05, 0.05, size=n)
    v = mag * np.exp(1j * ang)
    return Feeder(num_buses=n, complex_laplacian=L, true_voltages=v)


def measure(
    feeder: Feeder,
    sigma_v: float = 1e-3,
    sigma_ic: float = 1e-1,
    outlier_frac: float = 0.10,
    seed: int = 0,
    outlier_sign: str = "symmetric",
) -> MeasurementSet:
    """Take noisy rectangular measurements with sparse outliers.

    Noise is zero-mean Gaussian with per-entry variance sigma^2 * |value|.
    Each of the 4n entries independently carries an outlier with probability
    ``outlier_frac``; outlier magnitudes are uniform multiples of the
    respective pre-corruption measurement, in [1/100, 1/80] for voltage
    entries and [1/2, 1] for current entries, with a uniformly random sign
    (``outlier_sign="positive"`` disables the sign flip).
    """
    if sigma_v <= 0 or sigma_ic <= 0:
        raise ValueError("noise scales must be positive")
    if not 0 <= outlier_frac < 1:
        raise ValueError(f"outlier_frac must be in [0, 1), got {outlier_frac}")
    if outlier_sign not in ("symmetric", "positive"):
        raise ValueError(f"unknown outlier_sign {outlier_sign!r}")
    rng = np.random.default_rng(seed)
    v = feeder.rect_voltage
    ic = feeder.rect_current
    y_v = v + sigma_v * np.sqrt(np.abs(v)) * rng.standard_normal(v.shape)
    y_ic = ic + sigma_ic * np.sqrt(np.abs(ic)) * rng.standard_normal(ic.shape)

    total = v.shape[0] + ic.shape[0]
    mask = rng.random(total) < outlier_frac
    scale = np.concatenate(
        [rng.uniform(0.01, 0.0125, v.shape[0]), rng.uniform(0.5, 1.0, ic.shape[0])]
    )
    sign = rng.choice([-1.0, 1.0], size=total) if outlier_sign == "symmetric" else np.ones(total)
    y = np.concatenate([y_v, y_ic])
    y = y + mask * sign * scale * np.abs(y)
    return MeasurementSet(
        y_v=y[: v.shape[0]],
        y_ic=y[v.shape[0] :],
        sigma_v=float(sigma_v),
        sigma_ic=float(sigma_ic),
        outlier_mask=mask,
    )


def partition_buses(feeder: Feeder, num_areas: int, seed: int = 0) -> np.ndarray:
    """Contiguous, balanced bus partition by seeded region growing.

    Roots are drawn at random; the currently smallest area claims the
    lowest-id unassigned bus on its frontier, so areas stay connected and end
    up near-equal in size. Deterministic for a fixed seed.
    """
    n = feeder.num_buses
    if not 1 <= num_areas <= n:
        raise ValueError(f"num_areas must be in [1, {n}], got {num_areas}")
    adj = feeder.bus_adjacency()
    rng = np.random.default_rng(seed)
    roots = sorted(int(r) for r in rng.choice(n, size=num_areas, replace=False))
    area = np.full(n, -1, dtype=int)
    frontiers: list[list[int]] = [[] for _ in range(num_areas)]
    sizes = [0] * num_areas
    for a, r in enumerate(roots):
        area[r] = a
        sizes[a] = 1
        for b in adj[r]:
            heapq.heappush(frontiers[a], b)
    assigned = num_areas
    while assigned < n:
        progressed = False
        for a in sorted(range(num_areas), key=lambda a: (sizes[a], a)):
            while frontiers[a] and area[frontiers[a][0]] != -1:
                heapq.heappop(frontiers[a])  # stale entry, already claimed
            if not frontiers[a]:
                continue
            b = heapq.heappop(frontiers[a])
            area[b] = a
            sizes[a] += 1
            assigned += 1
            for b2 in adj[b]:
                if area[b2] == -1:
                    heapq.heappush(frontiers[a], b2)
            progressed = True
            break
        if not progressed:
            raise ValueError("bus graph is disconnected; cannot grow contiguous areas")
    return area


def area_state_indices(partition: np.ndarray, num_areas: int) -> list[np.ndarray]:
    """Columns of the rectangular state owned by each area: [Re buses; Im buses]."""
    n = partition.shape[0]
    out = []
    for a in range(num_areas):
        buses = np.flatnonzero(partition == a)
        out.append(np.concatenate([buses, n + buses]))
    return out


def area_row_indices(partition: np.ndarray, num_areas: int) -> list[np.ndarray]:
    """Rows of the stacked [y_v; y_ic] measurement vector owned by each area."""
    n = partition.shape[0]
    out = []
    for a in range(num_areas):
        buses = np.flatnonzero(partition == a)
        out.append(np.concatenate([buses, n + buses, 2 * n + buses, 3 * n + buses]))
    return out


def flat_start(num_buses: int) -> np.ndarray:
    """Rectangular flat-start profile: 1 p.u. magnitude at zero angle."""
    return np.concatenate([np.ones(num_buses), np.zeros(num_buses)])


def build_area_cost(
    feeder: Feeder,
    meas: MeasurementSet,
    num_areas: int,
    family: str = "quadratic",
    nu: float = 1e-4,
    seed: int = 0,
) -> tuple[PartitionedGraph, SeparableCost]:
    """Partition the feeder and assemble the per-area separable cost.

    Areas communicate iff an electric line crosses their boundary; the
    measurement matrix [I; L] then has nonzero area blocks only inside closed
    neighborhoods, which is what makes the cost separable. The quadratic
    family weighs rows by the inverse noise variance, with the measured
    magnitude standing in for the true one (floored at MAGNITUDE_FLOOR to
    keep near-zero readings from dominating). Writes the computed bus ->
    area map back into ``meas.partition``.
    """
    partition = partition_buses(feeder, num_areas, seed)
    meas.partition = partition
    n = feeder.num_buses
    L2 = rectangularize(feeder)
    A_flat = np.vstack([np.eye(2 * n), L2])
    y_flat = np.concatenate([meas.y_v, meas.y_ic])

    cols = area_state_indices(partition, num_areas)
    rows = area_row_indices(partition, num_areas)

    edges = set()
    L = feeder.complex_laplacian
    for b1 in range(n):
        for b2 in range(b1 + 1, n):
            if L[b1, b2] != 0 and partition[b1] != partition[b2]:
                edges.add((int(partition[b1]), int(partition[b2])))
    dims = [2 * int(np.sum(partition == a)) for a in range(num_areas)]
    graph = build_graph(num_areas, sorted(edges), dims)

    y = [y_flat[rows[a]] for a in range(num_areas)]
    A = {}
    for i in range(num_areas):
        for j in graph.closed_neighborhood(i):
            A[i, j] = A_flat[np.ix_(rows[i], cols[j])]

    if family == "quadratic":
        w_flat = np.concatenate(
            [
                1.0 / (meas.sigma_v**2 * np.maximum(np.abs(meas.y_v), MAGNITUDE_FLOOR)),
                1.0 / (meas.sigma_ic**2 * np.maximum(np.abs(meas.y_ic), MAGNITUDE_FLOOR)),
            ]
        )
        W = [np.diag(w_flat[rows[a]]) for a in range(num_areas)]
        return graph, QuadraticCost(graph, y, A, W)
    if family == "robust":
        return graph, RobustCost(graph, y, A, nu=nu)
    raise ValueError(f"unknown cost family {family!r}")


def save_feeder(feeder: Feeder, path) -> None:
    """Write a feeder as plain text: bus count, line list ``i j R X``, voltages.

    Bus id 0 is the PCC; estimated buses are 1..n. Line impedances are
    recovered from the Laplacian (the diagonal excess of a bus is its PCC
    line admittance).
    """
    L = feeder.complex_laplacian
    n = feeder.num_buses
    lines = []
    for b1 in range(n):
        excess = L[b1].sum()
        if abs(excess) > 1e-9 * abs(L[b1, b1]):
            z = 1.0 / excess
            lines.append((0, b1 + 1, z.real, z.imag))
        for b2 in range(b1 + 1, n):
            if L[b1, b2] != 0:
                z = -1.0 / L[b1, b2]
                lines.append((b1 + 1, b2 + 1, z.real, z.imag))
    with open(path, "w") as fh:
        fh.write(f"buses {n}\n")
        for f, t, r, x in lines:
            fh.write(f"line {f} {t} {float(r)!r} {float(x)!r}\n")
        for v in feeder.true_voltages:
            fh.write(f"voltage {float(v.real)!r} {float(v.imag)!r}\n")


def load_feeder(path) -> Feeder:
    """Read a feeder file written by :func:`save_feeder` (or user-supplied data)."""
    n = None
    lines = []
    volts = []
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            tok = line.split()
            if tok[0] == "buses":
                n = int(tok[1])
            elif tok[0] == "line":
                lines.append((int(tok[1]), int(tok[2]), float(tok[3]), float(tok[4])))
            elif tok[0] == "voltage":
                volts.append(complex(float(tok[1]), float(tok[2])))
            else:
                raise ValueError(f"{path}:{lineno}: unexpected line {raw!r}")
    if n is None:
        raise ValueError(f"{path}: missing 'buses <n>' line")
    if len(volts) != n:
        raise ValueError(f"{path}: expected {n} voltage lines, got {len(volts)}")
    full = np.zeros((n + 1, n + 1), dtype=complex)
    for f, t, r, x in lines:
        if not 0 <= f <= n and 0 <= t <= n:
            raise ValueError(f"{path}: line ({f},{t}) references an unknown bus")
        y = 1.0 / complex(r, x)
        full[f, f] += y
        full[t, t] += y
        full[f, t] -= y
        full[t, f] -= y
    return Feeder(num_buses=n, complex_laplacian=full[1:, 1:], true_voltages=np.array(volts))


def save_measurements(meas: MeasurementSet, path) -> None:
    """Write a measurement set as CSV with the noise scales in header comments."""
    with open(path, "w") as fh:
        fh.write(f"# sigma_v={meas.sigma_v!r}\n")
        fh.write(f"# sigma_ic={meas.sigma_ic!r}\n")
        fh.write("channel,index,value,outlier\n")
        half = meas.y_v.shape[0]
        for k, v in enumerate(meas.y_v):
            fh.write(f"v,{k},{float(v)!r},{int(meas.outlier_mask[k])}\n")
        for k, v in enumerate(meas.y_ic):
            fh.write(f"ic,{k},{float(v)!r},{int(meas.outlier_mask[half + k])}\n")


def load_measurements(path) -> MeasurementSet:
    """Read a measurement CSV written by :func:`save_measurements`."""
    sigma = {}
    rows = {"v": [], "ic": []}
    flags = {"v": [], "ic": []}
    with open(path) as fh:
        for raw in fh:
            line = raw.strip()
            if line.startswith("#"):
                key, val = line[1:].split("=", 1)
                sigma[key.strip()] = float(val)
                continue
            if not line or line.startswith("channel"):
                continue
            ch, idx, val, flag = line.split(",")
            rows[ch].append((int(idx), float(val)))
            flags[ch].append((int(idx), int(flag)))
    y = {ch: np.array([v for _, v in sorted(rows[ch])]) for ch in rows}
    mask = np.concatenate(
        [np.array([f for _, f in sorted(flags[ch])], dtype=bool) for ch in ("v", "ic")]
    )
    return MeasurementSet(
        y_v=y["v"],
        y_ic=y["ic"],
        sigma_v=sigma["sigma_v"],
        sigma_ic=sigma["sigma_ic"],
        outlier_mask=mask,
    )
