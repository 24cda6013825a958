"""Command-line harness for running simulated conferencing experiments."""
from __future__ import annotations

import argparse
import sys

from .agent import AgentParams
from .domain import NodeId
from .harness import RunConfig, export_metrics, run_experiment
from .scenarios import ScenarioSpec, build_scenario

FAMILIES = (
    "structured-small",
    "structured-medium",
    "structured-large",
    "random",
    "real-world",
)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="moray",
        description="Simulate decentralized multicast-tree construction for video conferencing.",
    )
    p.add_argument("--scenario", choices=FAMILIES, required=True)
    p.add_argument("--protocol", choices=("moray", "star", "optimal"), default="moray")
    p.add_argument("--rounds", type=int, default=300)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--alpha", type=float, default=0.7)
    p.add_argument("--epsilon", type=float, default=0.1)
    p.add_argument("--eta", type=float, default=None)
    p.add_argument("--eta-prime", type=float, default=None)
    p.add_argument("--bonus", type=float, default=1.0)
    p.add_argument("--trigger-ms", type=float, default=5000.0)
    p.add_argument("--cutoff-secs", type=float, default=300.0,
                   help="time budget for the optimal baseline's solver")
    p.add_argument("--sources", default="",
                   help="comma-separated source nodes (e.g. 'c0' or city names)")
    p.add_argument("--sfus", type=int, default=10, help="SFU count for --scenario random")
    p.add_argument("--clients", type=int, default=50,
                   help="client count (incl. source) for --scenario random")
    p.add_argument("--out", default=None, help="output path base for metric exports")
    p.add_argument("--format", choices=("csv", "json"), default="csv")
    p.add_argument("--trace", default=None, help="write a per-event trace to this path")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    sources = tuple(t for t in args.sources.split(",") if t.strip())
    spec = ScenarioSpec(
        family=args.scenario,
        seed=args.seed,
        alpha=args.alpha,
        trigger_ms=args.trigger_ms,
        rounds=args.rounds,
        sources=sources,
        n_sfus=args.sfus,
        n_clients=args.clients,
    )
    scenario = build_scenario(spec)
    trace = [] if args.trace else None
    run = RunConfig(
        protocol=args.protocol,
        rounds=args.rounds,
        seed=args.seed,
        trigger_ms=args.trigger_ms,
        agent_params=AgentParams(
            eta=args.eta,
            eta_prime=args.eta_prime,
            epsilon=args.epsilon,
            bonus_coefficient=args.bonus,
        ),
        optimal_cutoff=args.cutoff_secs,
        trace=trace,
    )
    results = run_experiment(scenario.topo, scenario.configs, run)

    multi = len(results) > 1
    for src in sorted(results):
        m = results[src]
        label = scenario.cities.get(src, str(src)) if scenario.cities else str(src)
        print(
            f"source {label}: gateway {m.gateway}, "
            f"final-50 mean latency {m.mean_latency():.2f} ms, "
            f"mean layers {sum(r.avg_layers for r in m.per_round[-50:]) / min(50, len(m.per_round)):.2f}, "
            f"convergence round {m.convergence_round}"
        )
        if args.out:
            base = f"{args.out}.{src}" if multi else args.out
            if args.format == "json" and not base.endswith(".json"):
                base += ".json"
            export_metrics(m, base, args.format)
    if trace is not None:
        with open(args.trace, "w") as fh:
            fh.write("\n".join(trace) + "\n")
    return 0


if __name__ == "__main__":
    sys.exit(main())
