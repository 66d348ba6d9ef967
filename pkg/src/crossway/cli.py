"""Command-line front end: simulate, collect, train, evaluate, benchmark, sweep.

Every subcommand writes its outputs into ``--out`` and finishes by writing a
``COMPLETE`` marker file; consumers should treat a directory without the
marker as a failed or interrupted run.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import dataclasses
import os
import sys

from . import harness
from .errors import CrosswayError, InputError
from .policies import FeatureBounds, make_policy


def _load_scenario(args) -> harness.Scenario:
    if args.scenario:
        sc = harness.load_scenario(args.scenario)
    else:
        sc = harness.toy_scenario()
    if getattr(args, "dt", None):
        sc = dataclasses.replace(sc, dt=args.dt)
    return sc


def _outdir(args) -> str:
    os.makedirs(args.out, exist_ok=True)
    marker = os.path.join(args.out, "COMPLETE")
    if os.path.exists(marker):
        os.remove(marker)
    return args.out


def _mark_complete(out: str):
    with open(os.path.join(out, "COMPLETE"), "w") as fh:
        fh.write("ok\n")


def _policy(spec: str, scenario: harness.Scenario):
    policy = make_policy(spec, FeatureBounds.from_scenario(scenario))
    policy.cli_spec = spec  # lets parallel workers rebuild the same policy
    return policy


def cmd_simulate(args) -> int:
    sc = _load_scenario(args)
    out = _outdir(args)
    policy = _policy(args.policy, sc)
    log = harness.run_audited(sc, policy, seed=args.seed)
    harness.save_log(log, os.path.join(out, "log.jsonl"))
    report = harness.evaluate([policy], sc, [args.seed], audit=False)
    report.to_csv(os.path.join(out, "metrics.csv"))
    _mark_complete(out)
    return 0


def cmd_collect(args) -> int:
    from .learning import OUNoise, Trainer, TrainerConfig, collect_buffer

    sc = _load_scenario(args)
    out = _outdir(args)
    cfg = TrainerConfig(n_robots=args.pad)
    trainer = Trainer(cfg, seed=args.seed)
    noise = OUNoise(dim=args.pad, seed=args.seed)
    bounds = FeatureBounds.from_scenario(sc)
    buf = collect_buffer(sc, trainer, bounds, n_phases=args.phases, seed=args.seed, noise=noise)
    buf.save(os.path.join(out, "buffer.txt"))
    _mark_complete(out)
    return 0


def cmd_train(args) -> int:
    from .learning import ReplayBuffer, TrainerConfig, cml_train

    out = _outdir(args)
    buffers = [ReplayBuffer.load(path) for path in args.buffers]
    cfg = TrainerConfig(n_robots=buffers[0].n_robots, actor_lr=args.actor_lr)
    trainer, curve = cml_train(buffers, iterations=args.iters, seed=args.seed, cfg=cfg)
    trainer.actor.save(os.path.join(out, "actor.txt"))
    with open(os.path.join(out, "curve.csv"), "w") as fh:
        fh.write("iteration,critic_loss,mean_batch_reward\n")
        for it, loss, mr in curve:
            fh.write(f"{it},{loss!r},{mr!r}\n")
    _mark_complete(out)
    return 0


def cmd_evaluate(args) -> int:
    sc = _load_scenario(args)
    out = _outdir(args)
    policies = [_policy(spec, sc) for spec in args.policies]
    seeds = list(range(args.seed, args.seed + args.streams))
    if args.jobs > 1:
        report = _evaluate_parallel(policies, sc, seeds, args.jobs)
    else:
        report = harness.evaluate(policies, sc, seeds)
    report.to_csv(os.path.join(out, "comparison.csv"))
    _mark_complete(out)
    return 0


def _eval_task(payload):
    scenario, spec, seed = payload
    policy = _policy(spec, scenario)
    log = harness.run_audited(scenario, policy, seed=seed)
    return harness.stream_metrics(log, scenario)


def _evaluate_parallel(policies, scenario, seeds, jobs) -> harness.MetricsReport:
    """Same pairing semantics as harness.evaluate, fanned out per (policy, seed)."""
    keyed = []
    seen: dict[str, int] = {}
    for p in policies:
        n = seen.get(p.name, 0)
        seen[p.name] = n + 1
        keyed.append((p.name if n == 0 else f"{p.name}#{n + 1}", p))
    specs = {key: getattr(p, "cli_spec", p.name) for key, p in keyed}
    tasks = [(scenario, specs[key], seed) for key, _ in keyed for seed in seeds]
    with concurrent.futures.ProcessPoolExecutor(max_workers=jobs) as pool:
        results = list(pool.map(_eval_task, tasks))
    stats = {}
    i = 0
    for key, _ in keyed:
        per_stream = results[i : i + len(seeds)]
        i += len(seeds)
        stats[key] = harness._aggregate(key, seeds, per_stream, scenario)
    ref = keyed[0][0]
    E, B = {}, {}
    for key, s in stats.items():
        E[key], B[key] = harness.relative_metrics(stats[ref], s)
    return harness.MetricsReport(scenario.name, ref, stats, E, B)


def cmd_benchmark(args) -> int:
    sc = _load_scenario(args)
    out = _outdir(args)
    study = harness.optgap_study(
        sc, max_pending=args.max_pending, n_instances=args.instances, seed=args.seed
    )
    study.to_csv(os.path.join(out, "optgap.csv"))
    _mark_complete(out)
    return 0


def cmd_sweep(args) -> int:
    sc = _load_scenario(args)
    out = _outdir(args)
    policy = _policy(args.policy, sc)
    seeds = list(range(args.seed, args.seed + args.streams))
    results = harness.buffer_sweep(sc, policy, seeds)
    with open(os.path.join(out, "buffer_sweep.csv"), "w") as fh:
        fh.write("buffer_b,throughput\n")
        for b, thr in results:
            fh.write(f"{b!r},{thr!r}\n")
    _mark_complete(out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="crossway",
        description="Intersection-crossing coordination: simulation, training and benchmarks.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--scenario", help="scenario config file (default: built-in toy)")
        p.add_argument("--out", default="out", help="output directory")
        p.add_argument("--dt", type=float, help="override the time step")
        p.add_argument("--jobs", type=int, default=1)

    p = sub.add_parser("simulate", help="run one policy on one stream")
    common(p)
    p.add_argument("--policy", default="fcfs")
    p.set_defaults(fn=cmd_simulate)

    p = sub.add_parser("collect", help="collect a replay buffer from exploring streams")
    common(p)
    p.add_argument("--phases", type=int, default=1000)
    p.add_argument("--pad", type=int, default=20, help="padded robot-count of the state")
    p.set_defaults(fn=cmd_collect)

    p = sub.add_parser("train", help="offline training on merged replay buffers")
    common(p)
    p.add_argument("--buffers", nargs="+", required=True)
    p.add_argument("--iters", type=int, default=20000)
    p.add_argument("--actor-lr", type=float, default=1e-4)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("evaluate", help="paired multi-policy comparison")
    common(p)
    p.add_argument("--policies", nargs="+", required=True)
    p.add_argument("--streams", type=int, default=20)
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("benchmark", help="optimality-gap and timing study")
    common(p)
    p.add_argument("--max-pending", type=int, default=3)
    p.add_argument("--instances", type=int, default=60)
    p.set_defaults(fn=cmd_benchmark)

    p = sub.add_parser("sweep", help="tracking-buffer throughput sweep")
    common(p)
    p.add_argument("--policy", default="ttr")
    p.add_argument("--streams", type=int, default=5)
    p.set_defaults(fn=cmd_sweep)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (CrosswayError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
