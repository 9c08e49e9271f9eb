#!/usr/bin/env python3
"""Step-size sweep at a fixed partition.

Larger steps converge in fewer rounds until the iteration destabilizes; the
sweep reports "diverged" past that point. Packet loss stays at 30%.
"""

import argparse

from rbj.cli import ScenarioConfig, sweep


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--buses", type=int, default=122)
    ap.add_argument("--areas", type=int, default=13)
    ap.add_argument("--epsilons", type=float, nargs="+", default=[4e-4, 8e-3, 0.16, 3.2])
    ap.add_argument("--replicas", type=int, default=5)
    ap.add_argument("--rounds", type=int, default=3600)
    ap.add_argument("--out", default="out/eps_sweep")
    args = ap.parse_args()

    cfg = ScenarioConfig(
        buses=args.buses,
        feeder_seed=11,
        num_areas=args.areas,
        family="quadratic",
        variant="rwls",
        epsilon=args.epsilons[0],
        p_loss=0.3,
        window_t=10,
        num_rounds=args.rounds,
        num_replicas=args.replicas,
        seed=12,
        sigma_v=1e-3,
        sigma_ic=0.01,
        outlier_frac=0.1,
        output_dir=args.out,
    )
    for rec in sweep(cfg, "epsilon", args.epsilons):
        hit = rec["rounds_to_threshold"]
        print(f"eps={rec['value']:<8g}: {rec['status']}" + ("" if hit is None else f", rounds to 0.1: {hit}"))


if __name__ == "__main__":
    main()
