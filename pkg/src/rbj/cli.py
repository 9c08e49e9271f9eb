"""Experiment runner: scenario configs, Monte-Carlo replicas, sweeps.

A scenario is a flat key=value config describing a grid instance, an
algorithm variant, a loss model, and a replica count. Running it produces
one CSV trace per replica plus an aggregate summary, all byte-reproducible
for a fixed config.

Normalized cost is (J(x(t)) - J*) / (J(x(0)) - J*), with J* from the
centralized oracle; curves from different area counts are then directly
comparable. A run is flagged divergent when its cost exceeds 1e6 times the
initial cost or any state becomes non-finite.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
from dataclasses import dataclass

import numpy as np

from . import grid, netsim, oracle
from .cost import QuadraticCost
from .netsim import LossModel, RunTrace
from .protocol import VARIANTS, SingularUpdateError, init_agent

__all__ = [
    "ScenarioConfig",
    "save_config",
    "load_config",
    "build_scenario",
    "run_scenario",
    "sweep",
    "compare_variants",
    "find_max_epsilon",
    "rounds_to_threshold",
    "main",
]

THRESHOLD = 0.1  # normalized-cost level used for rounds-to-threshold reporting


@dataclass(frozen=True)
class ScenarioConfig:
    """Validated description of one experiment.

    ``feeder_file`` overrides synthetic generation; ``seed`` drives
    measurements, partitioning, and (together with the replica index) the
    per-replica loss process.
    """

    buses: int = 30
    feeder_seed: int = 0
    feeder_file: str | None = None
    num_areas: int = 6
    family: str = "quadratic"
    nu: float = 1e-4
    variant: str = "rwls"
    epsilon: float = 0.05
    p_loss: float = 0.3
    window_t: int = 10
    scheduler: str = "round"
    num_rounds: int = 2000
    num_replicas: int = 10
    seed: int = 0
    sigma_v: float = 1e-3
    sigma_ic: float = 0.1
    outlier_frac: float = 0.1
    output_dir: str = "out"

    def __post_init__(self):
        if self.buses < 2:
            raise ValueError(f"buses must be >= 2, got {self.buses}")
        if self.num_areas < 1:
            raise ValueError(f"num_areas must be >= 1, got {self.num_areas}")
        if self.family not in ("quadratic", "robust"):
            raise ValueError(f"unknown family {self.family!r}")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.variant == "rwls" and self.family != "quadratic":
            raise ValueError("the rwls variant requires the quadratic family")
        if not self.nu > 0:
            raise ValueError(f"nu must be > 0, got {self.nu}")
        if not self.epsilon > 0:
            raise ValueError(f"epsilon must be > 0, got {self.epsilon}")
        if not 0 <= self.p_loss < 1:
            raise ValueError(f"p_loss must be in [0, 1), got {self.p_loss}")
        if self.window_t < 1:
            raise ValueError(f"window_t must be >= 1, got {self.window_t}")
        if self.scheduler not in ("round", "randomized"):
            raise ValueError(f"unknown scheduler {self.scheduler!r}")
        if self.num_rounds < 0:
            raise ValueError(f"num_rounds must be >= 0, got {self.num_rounds}")
        if self.num_replicas < 1:
            raise ValueError(f"num_replicas must be >= 1, got {self.num_replicas}")
        if self.sigma_v <= 0 or self.sigma_ic <= 0:
            raise ValueError("noise scales must be positive")
        if not 0 <= self.outlier_frac < 1:
            raise ValueError(f"outlier_frac must be in [0, 1), got {self.outlier_frac}")


def _cfg_text(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def save_config(cfg: ScenarioConfig, path) -> None:
    """Write a config as flat key=value text (one key per line)."""
    with open(path, "w") as fh:
        for f in dataclasses.fields(cfg):
            fh.write(f"{f.name}={_cfg_text(getattr(cfg, f.name))}\n")


def load_config(path) -> ScenarioConfig:
    """Read a key=value config file; unknown keys are rejected."""
    raw = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key=value, got {line!r}")
            k, v = line.split("=", 1)
            raw[k.strip()] = v.strip()
    known = {f.name: f for f in dataclasses.fields(ScenarioConfig)}
    unknown = set(raw) - set(known)
    if unknown:
        raise ValueError(f"{path}: unknown config keys {sorted(unknown)}")
    kwargs = {}
    for name, text in raw.items():
        if text == "none":
            kwargs[name] = None
        elif name in ("buses", "feeder_seed", "num_areas", "window_t", "num_rounds", "num_replicas", "seed"):
            kwargs[name] = int(text)
        elif name in ("nu", "epsilon", "p_loss", "sigma_v", "sigma_ic", "outlier_frac"):
            kwargs[name] = float(text)
        else:
            kwargs[name] = text
    return ScenarioConfig(**kwargs)


def replica_loss_seed(cfg: ScenarioConfig, replica: int) -> int:
    """Deterministic per-replica seed for the loss process."""
    return cfg.seed * 1_000_003 + replica


def build_scenario(cfg: ScenarioConfig) -> dict:
    """Materialize feeder, measurements, partitioned cost, oracle, and x0."""
    if cfg.feeder_file is not None:
        feeder = grid.load_feeder(cfg.feeder_file)
    else:
        feeder = grid.synth_feeder(cfg.buses, cfg.feeder_seed)
    meas = grid.measure(
        feeder,
        sigma_v=cfg.sigma_v,
        sigma_ic=cfg.sigma_ic,
        outlier_frac=cfg.outlier_frac,
        seed=cfg.seed,
    )
    graph, cost = grid.build_area_cost(
        feeder, meas, cfg.num_areas, family=cfg.family, nu=cfg.nu, seed=cfg.seed
    )
    cols = grid.area_state_indices(meas.partition, cfg.num_areas)
    x0_rect = grid.flat_start(feeder.num_buses)
    x0_blocks = [x0_rect[c] for c in cols]
    if cfg.family == "quadratic":
        sol = oracle.solve_wls(cost)
    else:
        sol = oracle.solve_newton(cost, np.concatenate(x0_blocks))
    return {
        "feeder": feeder,
        "meas": meas,
        "graph": graph,
        "cost": cost,
        "solution": sol,
        "x0_blocks": x0_blocks,
    }


def _run_replica(cfg: ScenarioConfig, scen: dict, replica: int, record_states=False) -> RunTrace:
    agents = [
        init_agent(scen["graph"], i, scen["x0_blocks"][i], cfg.epsilon, cfg.variant)
        for i in range(scen["graph"].num_agents)
    ]
    loss = LossModel(cfg.p_loss, cfg.window_t, rng_seed=replica_loss_seed(cfg, replica))
    return netsim.run(
        agents,
        scen["cost"],
        scen["graph"],
        loss,
        scheduler=cfg.scheduler,
        num_rounds=cfg.num_rounds,
        x_star=scen["solution"].x_star,
        record_states=record_states,
    )


def rounds_to_threshold(norm_curve: np.ndarray, threshold: float = THRESHOLD):
    """First round at which the normalized cost drops to the threshold, or None."""
    hits = np.flatnonzero(norm_curve <= threshold)
    return int(hits[0]) if hits.size else None


def run_scenario(cfg: ScenarioConfig) -> dict:
    """Run all replicas, write per-replica traces plus aggregate files.

    Returns a summary record with the oracle solution, the traces, the
    per-replica rate fits, and the rounds-to-threshold of the mean
    normalized-cost curve.
    """
    scen = build_scenario(cfg)
    os.makedirs(cfg.output_dir, exist_ok=True)
    j_star = scen["solution"].j_star
    traces, fits = [], []
    for r in range(cfg.num_replicas):
        trace = _run_replica(cfg, scen, r)
        traces.append(trace)
        fits.append(oracle.fit_rate(trace))
        netsim.export_trace_csv(trace, os.path.join(cfg.output_dir, f"trace_{r:03d}.csv"), j_star)
    netsim.write_summary_csv(traces, os.path.join(cfg.output_dir, "summary.csv"), j_star)
    with np.errstate(over="ignore", invalid="ignore"):  # diverged replicas hold inf
        mean_norm = np.mean([tr.normalized_cost(j_star) for tr in traces], axis=0)
    hit = rounds_to_threshold(mean_norm)
    with open(os.path.join(cfg.output_dir, "summary.txt"), "w") as fh:
        for f in dataclasses.fields(cfg):
            fh.write(f"{f.name}={getattr(cfg, f.name)}\n")
        fh.write(f"j_star={j_star!r}\n")
        fh.write(f"rounds_to_threshold_{THRESHOLD}={hit}\n")
        for r, (tr, fit) in enumerate(zip(traces, fits)):
            fh.write(
                f"replica {r}: diverged={tr.diverged} fit_ok={fit.ok} C={fit.c!r} rho={fit.rho!r}\n"
            )
    return {
        "config": cfg,
        "scenario": scen,
        "j_star": j_star,
        "traces": traces,
        "fits": fits,
        "mean_normalized": mean_norm,
        "rounds_to_threshold": hit,
        "diverged": any(tr.diverged for tr in traces),
    }


_SWEEP_FIELDS = {"epsilon": "epsilon", "areas": "num_areas", "loss": "p_loss"}


def sweep(cfg: ScenarioConfig, param: str, values) -> list[dict]:
    """Re-run the scenario across parameter values; report rate or divergence.

    Each value runs in its own subdirectory of ``cfg.output_dir``. A value
    whose runs diverge (including singular-preconditioner aborts) is reported
    with status "diverged" instead of a rounds-to-threshold figure.
    """
    if param not in _SWEEP_FIELDS:
        raise ValueError(f"unknown sweep parameter {param!r}; expected one of {sorted(_SWEEP_FIELDS)}")
    field = _SWEEP_FIELDS[param]
    records = []
    for v in values:
        v = int(v) if field == "num_areas" else float(v)
        sub = os.path.join(cfg.output_dir, f"{param}_{v}")
        cfg_v = dataclasses.replace(cfg, **{field: v, "output_dir": sub})
        try:
            rec = run_scenario(cfg_v)
            diverged = rec["diverged"]
            hit = rec["rounds_to_threshold"]
        except SingularUpdateError:
            diverged, hit = True, None
        records.append(
            {
                "param": param,
                "value": v,
                "status": "diverged" if diverged else "ok",
                "rounds_to_threshold": None if diverged else hit,
            }
        )
    with open(os.path.join(cfg.output_dir, "sweep.csv"), "w") as fh:
        fh.write("param,value,status,rounds_to_threshold\n")
        for rec in records:
            hit = rec["rounds_to_threshold"]
            fh.write(f"{rec['param']},{rec['value']},{rec['status']},{'' if hit is None else hit}\n")
    return records


def compare_variants(cfg: ScenarioConfig) -> list[dict]:
    """Run rbj, rgd, and rwls on the same quadratic instance and seeds.

    Reports the geometric rate fitted to the mean error curve of each
    variant. A zero-round config yields an empty table.
    """
    if cfg.num_rounds == 0:
        return []
    rows = []
    for variant in VARIANTS:
        cfg_v = dataclasses.replace(
            cfg,
            family="quadratic",
            variant=variant,
            output_dir=os.path.join(cfg.output_dir, f"variant_{variant}"),
        )
        scen = build_scenario(cfg_v)
        traces = [_run_replica(cfg_v, scen, r) for r in range(cfg_v.num_replicas)]
        mean_err = np.mean([tr.err_inf for tr in traces], axis=0)
        fit = oracle.fit_rate(mean_err)
        rows.append(
            {
                "variant": variant,
                "ok": fit.ok,
                "rho": fit.rho,
                "c": fit.c,
                "diverged": any(tr.diverged for tr in traces),
            }
        )
    os.makedirs(cfg.output_dir, exist_ok=True)
    with open(os.path.join(cfg.output_dir, "compare.csv"), "w") as fh:
        fh.write("variant,ok,rho,c,diverged\n")
        for row in rows:
            fh.write(f"{row['variant']},{row['ok']},{row['rho']!r},{row['c']!r},{row['diverged']}\n")
    return rows


def find_max_epsilon(
    cfg: ScenarioConfig,
    p_loss: float,
    num_seeds: int = 10,
    eps0: float = 1e-3,
    bisect_iters: int = 8,
    max_growth: int = 24,
) -> float:
    """Largest step size whose runs converge on every seed, by log bisection.

    A run counts as convergent when it neither diverges nor ends with a cost
    above its initial value. The returned value is the lower end of the final
    bracket, i.e. the largest step size observed to converge.
    """
    cfg = dataclasses.replace(cfg, p_loss=p_loss)
    scen = build_scenario(cfg)

    def convergent(eps: float) -> bool:
        cfg_e = dataclasses.replace(cfg, epsilon=eps)
        for r in range(num_seeds):
            try:
                trace = _run_replica(cfg_e, scen, r)
            except SingularUpdateError:
                return False
            if trace.diverged or not trace.J[-1] < trace.J[0]:
                return False
        return True

    lo = eps0
    while not convergent(lo):
        lo /= 4.0
        if lo < 1e-12:
            raise ValueError("no convergent step size found above 1e-12")
    hi = lo * 4.0
    for _ in range(max_growth):
        if not convergent(hi):
            break
        lo, hi = hi, hi * 4.0
    else:
        return lo  # never found a divergent step size within the growth cap
    for _ in range(bisect_iters):
        mid = float(np.sqrt(lo * hi))
        if convergent(mid):
            lo = mid
        else:
            hi = mid
    return lo


def main(argv=None) -> int:
    """Entry point for the ``rbj`` command."""
    parser = argparse.ArgumentParser(prog="rbj", description="resilient block Jacobi experiments")
    sub = parser.add_subparsers(dest="verb", required=True)
    p_run = sub.add_parser("run", help="run one scenario config")
    p_run.add_argument("--config", required=True)
    p_run.add_argument("--output-dir", default=None, help="override the config's output_dir")
    p_sweep = sub.add_parser("sweep", help="sweep one parameter over values")
    p_sweep.add_argument("--config", required=True)
    p_sweep.add_argument("--param", required=True, choices=sorted(_SWEEP_FIELDS))
    p_sweep.add_argument("--values", required=True, help="comma-separated values")
    p_sweep.add_argument("--output-dir", default=None)
    p_cmp = sub.add_parser("compare", help="compare rbj/rgd/rwls on one instance")
    p_cmp.add_argument("--config", required=True)
    p_cmp.add_argument("--output-dir", default=None)
    args = parser.parse_args(argv)

    cfg = load_config(args.config)
    if args.output_dir is not None:
        cfg = dataclasses.replace(cfg, output_dir=args.output_dir)

    if args.verb == "run":
        rec = run_scenario(cfg)
        hit = rec["rounds_to_threshold"]
        print(f"j_star={rec['j_star']!r}")
        print(f"diverged={rec['diverged']}")
        print(f"rounds_to_threshold_{THRESHOLD}={hit}")
        for r, fit in enumerate(rec["fits"]):
            print(f"replica {r}: fit_ok={fit.ok} C={fit.c!r} rho={fit.rho!r}")
    elif args.verb == "sweep":
        records = sweep(cfg, args.param, args.values.split(","))
        for rec in records:
            print(
                f"{rec['param']}={rec['value']}: {rec['status']}"
                + ("" if rec["rounds_to_threshold"] is None else f" rounds={rec['rounds_to_threshold']}")
            )
    else:
        rows = compare_variants(cfg)
        if not rows:
            print("empty table (zero rounds)")
        for row in rows:
            print(f"{row['variant']}: ok={row['ok']} rho={row['rho']!r} c={row['c']!r}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
