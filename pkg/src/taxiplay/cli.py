"""Command-line entry point: ``taxiplay <subcommand> ...``."""

from __future__ import annotations

import argparse
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import harness
from .ambiguity import q_valid_radius, wasserstein1, wasserstein1_lp
from .benchmarks import oracle_cost
from .demand import (DEFAULT_MAX_COUNT, ScriptedArrivals, estimate_model, load_request_log, save_model)
from .dynamics import Request, initial_state, run_episode


def _config(args) -> harness.ExperimentConfig:
    if getattr(args, "config", None):
        with open(args.config) as f:
            cfg = harness.load_config(f)
    else:
        cfg = harness.ExperimentConfig()
    over = {k: getattr(args, k, None) for k in ("graph", "demand", "horizon", "agents", "episodes", "seed",
                                                  "trajectories", "truncation", "weights", "library", "output",
                                                  "tss_samples")}
    if getattr(args, "policies", None):
        over["policies"] = tuple(args.policies.split(","))
    return cfg.replace(**over)


def _experiment_flags(p, policies: bool = True):
    p.add_argument("--config", help="key = value experiment file")
    p.add_argument("--graph", help="edge-list file or grid:RxC")
    p.add_argument("--demand", help="demand model file or table:low|medium|high")
    p.add_argument("--horizon", type=int)
    p.add_argument("--agents", type=int)
    p.add_argument("--episodes", type=int)
    p.add_argument("--trajectories", type=int, help="Monte-Carlo trajectories per candidate control")
    p.add_argument("--truncation", type=int, help="base-policy steps before the terminal estimate")
    p.add_argument("--tss-samples", type=int, dest="tss_samples")
    p.add_argument("--weights", help="approximator weights file")
    p.add_argument("--seed", type=int)
    p.add_argument("--output", "--out", dest="output", help="output directory")
    if policies:
        p.add_argument("--policies", help="comma-separated subset of " + ",".join(harness.POLICY_NAMES))


# --- subcommands ------------------------------------------------------------------

def cmd_estimate_demand(args) -> int:
    g = harness.resolve_graph(args.graph)
    with open(args.log) as f:
        log = load_request_log(f)
    dm = estimate_model(log, g.n, args.horizon, args.max_count, args.label)
    if args.out:
        with open(args.out, "w") as f:
            save_model(dm, f)
    else:
        save_model(dm, sys.stdout)
    return 0


def cmd_gen_labels(args) -> int:
    from .approximator.training import generate_training_set
    from .policies import RolloutConfig

    g = harness.resolve_graph(args.graph)
    dm = harness.resolve_demand(args.demand, g.n)
    data = generate_training_set(dm, g, RolloutConfig(args.trajectories, args.truncation, args.seed),
                                 args.count, args.agents, seed=args.seed, warmup_max=args.warmup)
    data.save(args.out)
    print(f"{len(data)} labels written to {args.out}")
    return 0


def cmd_train(args) -> int:
    from .approximator.policy import save_weights
    from .approximator.training import TrainConfig, TrainingSet, agreement, train

    g = harness.resolve_graph(args.graph)
    data = TrainingSet.load(args.labels)
    rng = np.random.default_rng(args.seed)
    order = rng.permutation(len(data))
    hold = int(round(args.holdout * len(data)))
    test, fit = data.subset(order[:hold]), data.subset(order[hold:])
    res = train(fit, g, TrainConfig(epochs=args.epochs, seed=args.seed), label=args.label)
    with open(args.out, "wb") as f:
        save_weights(res.policy, f)
    print(f"final loss: pickup {res.pickup_loss[-1] if res.pickup_loss else float('nan'):.4f}, "
          f"move {res.move_loss[-1] if res.move_loss else float('nan'):.4f}")
    print(f"agreement: train {agreement(res.policy, fit):.3f}"
          + (f", held-out {agreement(res.policy, test):.3f}" if hold else ""))
    return 0


def cmd_wasserstein(args) -> int:
    n = args.nodes
    a = harness.resolve_demand(args.first, n).eta
    b = harness.resolve_demand(args.second, n).eta
    print(f"{wasserstein1(a, b):.12g}")
    if args.lp:
        print(f"lp {wasserstein1_lp(a, b):.12g}")
    return 0


def cmd_radius(args) -> int:
    base = math.e if args.natural_log else args.log_base
    print(f"{q_valid_radius(args.q, args.samples, args.diameter, base):.12g}")
    return 0


def cmd_simulate(args) -> int:
    cfg = _config(args)
    g = harness.resolve_graph(cfg.graph)
    if args.requests:
        with open(args.requests) as f:
            reqs = [Request(p, d, k) for k, p, d in load_request_log(f).entries]
        arrivals = ScriptedArrivals.from_requests(reqs)
    else:
        arrivals = harness.resolve_demand(cfg.demand, g.n)
        reqs = None
    if args.locations:
        s0 = initial_state([int(x) for x in args.locations.split(",")])
    else:
        s0 = harness.starting_states(g, cfg.agents, 1, cfg.seed)[0]
    if args.policy == "oracle":
        if reqs is None:
            reqs = harness.sample_requests(arrivals, cfg.horizon, cfg.seed)
        res = oracle_cost(s0, reqs, g, cfg.horizon, cfg.oracle_budget)
        print(f"oracle cost {res.cost} ({'exact' if res.exact else 'inexact: best found'})")
        return 0
    pol = harness.make_policy(args.policy, cfg, g, arrivals)
    cost, trace = run_episode(s0, pol, arrivals, cfg.horizon, g, seed=cfg.seed)
    if args.trace:
        with open(args.trace, "w") as f:
            harness.save_trace(trace, f)
    print(f"{pol.name} cost {cost}")
    return 0


def cmd_evaluate(args) -> int:
    cfg = _config(args)
    table = harness.run_experiment(cfg)
    paths = harness.write_report(table, cfg.output, "results", f"{cfg.demand}, m={cfg.agents}, N={cfg.horizon}")
    sys.stdout.write(table.to_text())
    for p in paths:
        print(f"wrote {p}")
    return 0


def cmd_switch_eval(args) -> int:
    cfg = _config(args)
    g = harness.resolve_graph(cfg.graph)
    library = harness.build_library(cfg, g)
    labels = [e.label for e in library]
    active = labels.index(args.active or cfg.active or labels[0])
    eval_dm = harness.resolve_demand(cfg.demand, g.n)
    res = harness.run_switching_experiment(cfg, library, eval_dm, g, active, not args.no_rollout)
    out = Path(cfg.output)
    paths = harness.write_report(res.table, out, "switching", f"switching on {cfg.demand}")
    (out / "switch_events.txt").write_text(
        "".join(f"episode {e}\n{harness.format_events(evs)}" for e, evs in enumerate(res.events)))
    sys.stdout.write(res.table.to_text())
    print(f"relative improvement of switching: {100 * res.relative_improvement():.1f}%")
    for p in paths:
        print(f"wrote {p}")
    return 0


def cmd_audit(args) -> int:
    with open(args.trace) as f:
        summary = harness.load_trace(f)
    try:
        report = harness.audit_trace(summary)
    except harness.AuditError as exc:
        print(f"audit failed: {exc}", file=sys.stderr)
        return 1
    sys.stdout.write(report.to_text())
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="taxiplay", description="Multiagent taxi routing by rollout and online play")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("estimate-demand", help="fit a demand model to a request log")
    p.add_argument("--log", required=True, help="CSV minute,pickup,dropoff")
    p.add_argument("--graph", required=True)
    p.add_argument("--horizon", type=int, required=True, help="minutes covered by the log")
    p.add_argument("--max-count", type=int, default=DEFAULT_MAX_COUNT)
    p.add_argument("--label", default="")
    p.add_argument("--out")
    p.set_defaults(func=cmd_estimate_demand)

    p = sub.add_parser("gen-labels", help="rollout-labelled training states")
    p.add_argument("--graph", default="grid:5x5")
    p.add_argument("--demand", default="table:medium")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--agents", type=int, default=2)
    p.add_argument("--trajectories", type=int, default=1024)
    p.add_argument("--truncation", type=int, default=5)
    p.add_argument("--warmup", type=int, default=20, help="max greedy warm-up minutes per state")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_labels)

    p = sub.add_parser("train", help="fit the pickup and move networks")
    p.add_argument("--graph", default="grid:5x5")
    p.add_argument("--labels", required=True)
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--holdout", type=float, default=0.1)
    p.add_argument("--label", default="")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("wasserstein", help="distance between two request-count distributions")
    p.add_argument("first")
    p.add_argument("second")
    p.add_argument("--nodes", type=int, default=25, help="node count for table:* models")
    p.add_argument("--lp", action="store_true", help="also solve the transport LP")
    p.set_defaults(func=cmd_wasserstein)

    p = sub.add_parser("radius", help="q-valid ambiguity radius")
    p.add_argument("--q", type=float, default=0.54)
    p.add_argument("--samples", type=int, default=5000)
    p.add_argument("--diameter", type=float, default=6)
    p.add_argument("--log-base", type=float, default=10.0)
    p.add_argument("--natural-log", action="store_true")
    p.set_defaults(func=cmd_radius)

    p = sub.add_parser("simulate", help="one episode with one policy")
    _experiment_flags(p, policies=False)
    p.add_argument("--policy", required=True, choices=harness.POLICY_NAMES)
    p.add_argument("--requests", help="scripted request CSV instead of sampling")
    p.add_argument("--locations", help="comma-separated starting nodes")
    p.add_argument("--trace", help="write the episode trace here")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("evaluate", help="paired comparison of several policies")
    _experiment_flags(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("switch-eval", help="online play with and without approximator switching")
    _experiment_flags(p, policies=False)
    p.add_argument("--library", help="manifest: label model_file weights_file per line")
    p.add_argument("--active", help="label of the initially active model")
    p.add_argument("--no-rollout", action="store_true")
    p.set_defaults(func=cmd_switch_eval)

    p = sub.add_parser("audit", help="re-derive a trace's cost from request waits")
    p.add_argument("--trace", required=True)
    p.set_defaults(func=cmd_audit)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (harness.ConfigError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
