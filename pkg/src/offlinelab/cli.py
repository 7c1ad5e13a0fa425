"""Command-line entry point: ``offlinelab <command> ...``.

Exit codes: 0 on success, 1 on invalid input or config, 2 when a ``verify``
run completes but its check fails.
"""
from __future__ import annotations

import argparse
import json
import math
import sys

from . import bounds, estimation, experiments, io as lab_io, ope
from .mdp import exact_occupancy, occupancy_stats, sample_paths
from .rng import stream

EXIT_OK, EXIT_INPUT, EXIT_FAILED = 0, 1, 2


def _dump(obj) -> str:
    return json.dumps(experiments._jsonable(obj), indent=1, sort_keys=True)


def _load_problem(args, need_target=False, need_behavior=False):
    mdp = lab_io.load_mdp(args.mdp)
    target = lab_io.load_policy(args.target) if getattr(args, "target", None) else None
    behavior = lab_io.load_policy(args.behavior) if getattr(args, "behavior", None) else None
    if need_target and target is None:
        raise ValueError("--target is required")
    if need_behavior and behavior is None:
        raise ValueError("--behavior is required")
    for name, pol in (("target", target), ("behavior", behavior)):
        if pol is not None and pol.probs.shape != (mdp.num_states, mdp.num_actions):
            raise ValueError(f"{name} policy shape {pol.probs.shape} does not match the MDP")
    return mdp, target, behavior


def cmd_sample(args) -> int:
    mdp = lab_io.load_mdp(args.mdp)
    policy = lab_io.load_policy(args.policy)
    data = sample_paths(mdp, policy, args.n_paths, stream(args.seed, "cli/sample"))
    lab_io.save_dataset(data, args.out)
    print(f"wrote {data.n_paths} paths ({data.n_steps} steps) to {args.out}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    if args.method == "is":
        if not args.behavior:
            raise ValueError("--behavior is required for importance sampling")
        target, behavior = lab_io.load_policy(args.target), lab_io.load_policy(args.behavior)
        if target.probs.shape != behavior.probs.shape:
            raise ValueError("target and behavior policies have different shapes")
        S, A = target.probs.shape
        data = lab_io.load_dataset(args.dataset, S, A)
        v = ope.importance_sampling_evaluate(data, target, behavior)
    else:
        if not args.mdp:
            raise ValueError("--mdp is required for model-based evaluation (it supplies gamma and rewards)")
        mdp, target, _ = _load_problem(args, need_target=True)
        data = lab_io.load_dataset(args.dataset, mdp.num_states, mdp.num_actions)
        v = ope.model_based_evaluate(data, target, mdp.gamma, mdp.rewards, args.mode, mdp.initial_state)
    print(_dump({"method": args.method, "estimate": v, "n_paths": data.n_paths}))
    return EXIT_OK


def cmd_optimize(args) -> int:
    mdp = lab_io.load_mdp(args.mdp)
    data = lab_io.load_dataset(args.dataset, mdp.num_states, mdp.num_actions)
    pi, v = ope.model_based_optimize(data, mdp.gamma, mdp.rewards, args.mode, mdp.initial_state)
    if args.out:
        lab_io.save_policy(pi, args.out)
    print(_dump({"model_value": v, "actions": pi.probs.argmax(axis=1).tolist()}))
    return EXIT_OK


def _parse_grid(text: str | None):
    if text is None:
        return bounds.DEFAULT_BETA_GRID
    grid = tuple(float(t) for t in text.split(","))
    if any(not 0.0 <= b <= 1.0 for b in grid):
        raise ValueError("beta values must lie in [0, 1]")
    return grid


def cmd_bounds(args) -> int:
    mdp, target, behavior = _load_problem(args, need_target=True, need_behavior=True)
    S, A, g = mdp.num_states, mdp.num_actions, mdp.gamma
    xt = exact_occupancy(mdp, target).x
    sb = occupancy_stats(mdp, behavior)
    q = bounds.BoundQuery(S, A, g, args.epsilon, args.delta, xt, sb.x, sb.rho, _parse_grid(args.beta_grid))
    t1 = bounds.theorem1_path_bound(q)
    c1 = bounds.corollary1_path_bound(S, A, g, args.epsilon, args.delta, sb.x, sb.rho)
    is_stats = bounds.is_log_ratio_stats(target, behavior, g)
    is_paths = bounds.is_sample_bound(is_stats["kl_bound"], is_stats["std_bound"], args.is_c)
    out = {
        "evaluation": t1.to_dict(),
        "optimization": c1.to_dict(),
        "importance_sampling": {**is_stats, **is_paths},
    }
    print(_dump(out))
    print()
    rows = [("evaluation (model-based)", t1.required_paths),
            ("optimization (model-based)", c1.required_paths),
            ("importance sampling", is_paths["paths"])]
    width = max(len(r[0]) for r in rows)
    for name, n in rows:
        print(f"{name:<{width}}  {n:>14.4g}")
    if t1.beta is not None:
        print(f"{'best beta':<{width}}  {t1.beta:>14.2f}")
    return EXIT_OK


def cmd_certificate(args) -> int:
    mdp, target, behavior = _load_problem(args, need_target=True, need_behavior=True)
    data = lab_io.load_dataset(args.dataset, mdp.num_states, mdp.num_actions)
    cert = bounds.accuracy_certificate(data, target, behavior, mdp.gamma, mdp.rewards, args.delta)
    print(_dump({"estimate": cert.estimate, "epsilon": cert.epsilon, "delta": args.delta,
                 "finite": math.isfinite(cert.epsilon)}))
    return EXIT_OK


def _report(res: experiments.ExperimentResult) -> None:
    s = {k: v for k, v in res.summary.items() if k != "table"}
    print(_dump({"experiment": res.config.experiment, "summary": s, "files": res.files}))
    if "table" in res.summary:
        print()
        print(f"{'paths':>8} {'estimator':>9} {'median':>12} {'q25':>12} {'q75':>12} {'q99':>12}")
        for r in res.summary["table"]:
            print(f"{r['n_paths']:>8} {r['estimator']:>9} {r['median']:>12.5g} {r['q25']:>12.5g} "
                  f"{r['q75']:>12.5g} {r['q99']:>12.5g}")
    print("PASS" if res.passed else "FAIL")


def cmd_verify(args) -> int:
    if args.config:
        cfg = experiments.ExperimentConfig.load(args.config, args.experiment)
    elif args.experiment:
        cfg = experiments.ExperimentConfig.from_dict({"experiment": args.experiment})
    else:
        raise experiments.ConfigError("give --experiment or --config")
    if args.trials is not None:
        cfg.trials = args.trials
    if args.seed is not None:
        cfg.seed = args.seed
    cfg.validate()
    outdir = args.output or cfg.output or "results"
    res = experiments.run_experiment(cfg, outdir, force=args.force, workers=args.workers or cfg.workers)
    _report(res)
    return EXIT_OK if res.passed else EXIT_FAILED


def cmd_bias_curve(args) -> int:
    cfg = experiments.ExperimentConfig.from_dict({
        "experiment": "bias_curve",
        "seed": args.seed,
        "params": {"sigma_min": args.sigma_min, "sigma_max": args.sigma_max, "steps": args.steps,
                   "mc_trials": args.mc_trials},
    })
    if not 0.0 < args.sigma_min <= args.sigma_max < 1.0 or args.steps < 1:
        raise experiments.ConfigError("need 0 < sigma-min <= sigma-max < 1 and steps >= 1")
    res = experiments.run_experiment(cfg, args.output, force=args.force, workers=args.workers)
    _report(res)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="offlinelab", description="Offline evaluation and optimization for tabular MDPs.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("sample", help="sample behavior paths into a JSONL dataset")
    s.add_argument("--mdp", required=True)
    s.add_argument("--policy", required=True)
    s.add_argument("--n-paths", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_sample)

    s = sub.add_parser("evaluate", help="estimate a target policy's value from a dataset")
    s.add_argument("--method", choices=("model", "is"), default="model")
    s.add_argument("--mdp", help="MDP file; needed by the model-based method for gamma and rewards")
    s.add_argument("--dataset", required=True)
    s.add_argument("--target", required=True)
    s.add_argument("--behavior")
    s.add_argument("--mode", choices=estimation.MODES, default="renormalized")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("optimize", help="optimal policy of the estimated model")
    s.add_argument("--mdp", required=True)
    s.add_argument("--dataset", required=True)
    s.add_argument("--mode", choices=estimation.MODES, default="renormalized")
    s.add_argument("--out")
    s.set_defaults(func=cmd_optimize)

    s = sub.add_parser("bounds", help="sample-size bounds for evaluation, optimization and importance sampling")
    s.add_argument("--mdp", required=True)
    s.add_argument("--target", required=True)
    s.add_argument("--behavior", required=True)
    s.add_argument("--epsilon", type=float, required=True)
    s.add_argument("--delta", type=float, required=True)
    s.add_argument("--beta-grid", help="comma-separated beta values in [0, 1]")
    s.add_argument("--is-c", type=float, default=1.0, help="std multiplier in the importance-sampling bound")
    s.set_defaults(func=cmd_bounds)

    s = sub.add_parser("certificate", help="data-dependent accuracy certificate")
    s.add_argument("--mdp", required=True)
    s.add_argument("--dataset", required=True)
    s.add_argument("--target", required=True)
    s.add_argument("--behavior", required=True)
    s.add_argument("--delta", type=float, default=0.1)
    s.set_defaults(func=cmd_certificate)

    s = sub.add_parser("verify", help="run a Monte Carlo experiment and report pass/fail")
    s.add_argument("--experiment", help=", ".join(sorted(experiments.EXPERIMENTS)))
    s.add_argument("--config", help="JSON experiment config")
    s.add_argument("--workers", type=int)
    s.add_argument("--trials", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--output", help="output directory (default: results)")
    s.add_argument("--force", action="store_true", help="overwrite outputs written by a different config")
    s.set_defaults(func=cmd_verify)

    s = sub.add_parser("bias-curve", help="tabulate and plot the single-path bias curve")
    s.add_argument("--sigma-min", type=float, default=0.01)
    s.add_argument("--sigma-max", type=float, default=0.99)
    s.add_argument("--steps", type=int, default=99)
    s.add_argument("--mc-trials", type=int, default=100_000)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--workers", type=int, default=1)
    s.add_argument("--output", default="results")
    s.add_argument("--force", action="store_true")
    s.set_defaults(func=cmd_bias_curve)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError, KeyError, experiments.OutputConflict) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT

if __name__ == "__main__":
    sys.exit(main())
