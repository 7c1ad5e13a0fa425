"""Config-driven Monte Carlo experiments that check each probabilistic claim.

Every experiment is a ``setup`` (fixed problem instance), a per-trial
function fed its own keyed random stream, and a ``summarize`` step.  Trials
are independent, so they can be farmed out to a process pool; results are
merged by trial id and the CSV is identical for any worker count.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from copy import deepcopy
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from scipy import stats

from . import bounds, estimation, io as lab_io, ope
from .mdp import (
    Dataset,
    Policy,
    TabularMdp,
    exact_occupancy,
    exact_value,
    first_visit_prob,
    make_figure1_mdp,
    occupancy_stats,
    random_mdp,
    random_policy,
    return_prob,
    sample_paths,
    single_state_mdp,
)
from .rng import stream

SCHEMA_VERSION = 1
OUTPUT_ENV = "OFFLINELAB_OUTPUT_DIR"


class ConfigError(ValueError):
    pass


class OutputConflict(RuntimeError):
    """The output file exists and was produced by a different config."""


# ---------------------------------------------------------------- config

DEFAULTS: dict[str, dict] = {
    "bias_curve": {
        "trials": 1,
        "params": {"sigma_min": 0.01, "sigma_max": 0.99, "steps": 99, "mc_trials": 1_000_000,
                   "mc_sigmas": None, "fine_step": 1e-4},
    },
    "lemma2_coverage": {
        "trials": 2000,
        "params": {"epsilon_prime": 0.3, "delta_prime": 0.1, "pair": [0, 0]},
        "mdp": {"figure1": {"sigma": 0.3, "gamma": 0.9}},
        "behavior": {"kind": "uniform"},
    },
    "lemma3_coverage": {
        "trials": 2000,
        "params": {"gamma": 0.9, "rho": 0.5, "N_prime": 20, "delta_prime": 0.1, "pair": [0, 0]},
    },
    "lemma4_coverage": {
        "trials": 2000,
        "params": {"gamma": 0.9, "lambda": 0.8, "k": 50, "delta_prime": 0.1, "pair": [0, 0]},
    },
    "theorem1_coverage": {
        "trials": 200,
        "params": {"epsilon": 1.0, "delta": 0.1, "max_paths": 200_000, "n_paths": None},
        "mdp": {"generator": {"num_states": 3, "num_actions": 2, "gamma": 0.5, "concentration": 1.0}},
        "behavior": {"kind": "uniform"},
        "target": {"kind": "random"},
    },
    "corollary1_coverage": {
        "trials": 100,
        "params": {"epsilon": None, "epsilon_horizon_fraction": 0.1, "delta": 0.1, "max_paths": 200_000,
                   "n_paths": 100_000, "resample_mdp": True},
        "mdp": {"generator": {"num_states": 5, "num_actions": 2, "gamma": 0.9, "concentration": 1.0}},
        "behavior": {"kind": "uniform"},
    },
    "theorem2_mse": {
        "trials": 10,
        "params": {"p": [0.95, 0.05], "N": 100, "resamples_per_trial": 100_000},
    },
    "is_unbiasedness": {
        "trials": 2000,
        "params": {"n_paths": 100},
        "mdp": {"generator": {"num_states": 4, "num_actions": 3, "gamma": 0.95, "concentration": 1.0}},
        "behavior": {"kind": "uniform"},
        "target": {"kind": "deterministic"},
    },
    "ope_sweep": {
        "trials": 200,
        "params": {"n_grid": [100, 1000, 10000, 40000], "estimators": ["model", "is"], "mode": "renormalized"},
        "mdp": {"generator": {"num_states": 4, "num_actions": 2, "gamma": 0.9, "concentration": 1.0}},
        "behavior": {"kind": "uniform"},
        "target": {"kind": "deterministic"},
    },
    "certificate_coverage": {
        "trials": 400,
        "params": {"n_paths": 10_000, "delta": 0.1, "resample_mdp": True},
        "mdp": {"generator": {"num_states": 4, "num_actions": 2, "gamma": 0.9, "concentration": 1.0}},
        "behavior": {"kind": "uniform"},
        "target": {"kind": "random"},
    },
}

ALIASES = {
    "lemma2": "lemma2_coverage",
    "lemma3": "lemma3_coverage",
    "lemma4": "lemma4_coverage",
    "theorem1": "theorem1_coverage",
    "corollary1": "corollary1_coverage",
    "theorem2": "theorem2_mse",
    "is": "is_unbiasedness",
    "bias": "bias_curve",
    "ope": "ope_sweep",
    "certificate": "certificate_coverage",
}


@dataclass
class ExperimentConfig:
    experiment: str
    trials: int
    seed: int = 0
    params: dict = field(default_factory=dict)
    mdp: dict | None = None
    target: dict | None = None
    behavior: dict | None = None
    output: str | None = None
    workers: int = 1
    schema_version: int = SCHEMA_VERSION

    @classmethod
    def from_dict(cls, d: dict, experiment: str | None = None) -> "ExperimentConfig":
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        d = dict(d)
        kind = experiment or d.get("experiment")
        if kind is None:
            raise ConfigError("config names no experiment")
        kind = ALIASES.get(kind, kind)
        if d.get("experiment") and ALIASES.get(d["experiment"], d["experiment"]) != kind:
            raise ConfigError(f"config is for {d['experiment']!r}, not {kind!r}")
        if kind not in DEFAULTS:
            raise ConfigError(f"unknown experiment {kind!r}; expected one of {sorted(DEFAULTS)}")
        version = d.get("schema_version", SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            raise ConfigError(f"unsupported schema_version {version}")
        unknown = set(d) - {"experiment", "trials", "seed", "params", "mdp", "target", "behavior",
                            "output", "workers", "schema_version"}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        base = deepcopy(DEFAULTS[kind])
        params = base.get("params", {})
        extra = set(d.get("params", {})) - set(params)
        if extra:
            raise ConfigError(f"unknown params for {kind}: {sorted(extra)}")
        params.update(d.get("params", {}))
        cfg = cls(
            experiment=kind,
            trials=int(d.get("trials", base["trials"])),
            seed=int(d.get("seed", 0)),
            params=params,
            mdp=d.get("mdp", base.get("mdp")),
            target=d.get("target", base.get("target")),
            behavior=d.get("behavior", base.get("behavior")),
            output=d.get("output"),
            workers=int(d.get("workers", 1)),
        )
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path, experiment: str | None = None) -> "ExperimentConfig":
        try:
            d = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read config {path}: {e}") from None
        return cls.from_dict(d, experiment)

    def validate(self) -> None:
        if self.trials < 1:
            raise ConfigError("trials must be at least 1")
        if self.workers < 1:
            raise ConfigError("workers must be at least 1")
        if self.mdp is not None:
            keys = set(self.mdp) & {"file", "generator", "figure1", "inline"}
            if len(keys) != 1:
                raise ConfigError("mdp needs exactly one of 'file', 'generator', 'figure1', 'inline'")
        for name in ("target", "behavior"):
            spec = getattr(self, name)
            if spec is not None and len(set(spec) & {"file", "probs", "kind"}) != 1:
                raise ConfigError(f"{name} policy needs exactly one of 'file', 'probs', 'kind'")

    def canonical(self) -> dict:
        """Everything that determines results; output location and worker count are excluded."""
        return {
            "schema_version": self.schema_version,
            "experiment": self.experiment,
            "trials": self.trials,
            "seed": self.seed,
            "params": self.params,
            "mdp": self.mdp,
            "target": self.target,
            "behavior": self.behavior,
        }

    def config_hash(self) -> str:
        blob = json.dumps(self.canonical(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass
class TrialResult:
    trial_id: int
    stream_id: str
    metrics: dict
    wall_time: float = 0.0


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    trials: list[TrialResult]
    summary: dict
    files: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return bool(self.summary.get("passed", True))


# ---------------------------------------------------------------- problem construction


def build_mdp(spec: dict, rng: np.random.Generator) -> TabularMdp:
    if "file" in spec:
        return lab_io.load_mdp(spec["file"])
    if "inline" in spec:
        return lab_io.mdp_from_dict(spec["inline"])
    if "figure1" in spec:
        f = spec["figure1"]
        return make_figure1_mdp(f["sigma"], f["gamma"], tuple(f.get("rewards", (0.0, 1.0))))
    g = spec["generator"]
    return random_mdp(g["num_states"], g["num_actions"], g["gamma"], rng, g.get("concentration", 1.0))


def build_policy(spec: dict, S: int, A: int, rng: np.random.Generator) -> Policy:
    if "file" in spec:
        pol = lab_io.load_policy(spec["file"])
    elif "probs" in spec:
        pol = Policy(spec["probs"])
    else:
        kind = spec["kind"]
        if kind == "uniform":
            pol = Policy.uniform(S, A)
        elif kind == "deterministic":
            acts = spec.get("actions")
            if acts is None:
                acts = list(rng.integers(0, A, size=S))
            pol = Policy.deterministic(acts, A)
        elif kind == "random":
            pol = random_policy(S, A, rng, spec.get("concentration", 1.0))
        else:
            raise ConfigError(f"unknown policy kind {kind!r}")
    if pol.probs.shape != (S, A):
        raise ConfigError(f"policy shape {pol.probs.shape} does not match MDP ({S}, {A})")
    return pol


def build_problem(cfg: ExperimentConfig, rng: np.random.Generator) -> tuple[TabularMdp, Policy | None, Policy | None]:
    mdp = build_mdp(cfg.mdp, rng)
    S, A = mdp.num_states, mdp.num_actions
    behavior = build_policy(cfg.behavior, S, A, rng) if cfg.behavior else None
    target = build_policy(cfg.target, S, A, rng) if cfg.target else None
    return mdp, target, behavior


def action_prob_for_first_visit(rho: float, gamma: float) -> float:
    """On a one-state MDP, the action probability that gives first-visit probability ``rho``."""
    return rho * (1.0 - gamma) / (1.0 - gamma * rho)


def _two_action_single_state(p: float, gamma: float) -> tuple[TabularMdp, Policy]:
    mdp = single_state_mdp(gamma, num_actions=2)
    return mdp, Policy(np.array([[p, 1.0 - p], [0.5, 0.5]]))


# ---------------------------------------------------------------- statistics


def wilson_interval(failures: int, total: int, confidence: float = 0.99) -> tuple[float, float]:
    if total == 0:
        return 0.0, 1.0
    z = stats.norm.ppf(0.5 + confidence / 2.0)
    phat = failures / total
    denom = 1.0 + z**2 / total
    centre = (phat + z**2 / (2 * total)) / denom
    half = z * math.sqrt(phat * (1 - phat) / total + z**2 / (4 * total**2)) / denom
    return max(0.0, centre - half), min(1.0, centre + half)


def coverage_summary(failures: np.ndarray, delta: float, confidence: float = 0.99) -> dict:
    """One-sided check: pass unless the failure rate is confidently above ``delta``."""
    failures = np.asarray(failures, dtype=bool)
    k, n = int(failures.sum()), failures.size
    lo, hi = map(float, wilson_interval(k, n, confidence))
    return {
        "failures": k,
        "trials": n,
        "failure_rate": k / n,
        "wilson_low": lo,
        "wilson_high": hi,
        "confidence": confidence,
        "delta": delta,
        "passed": lo <= delta,
    }


# ---------------------------------------------------------------- dataset helpers


def _pair_nonabsorbing_per_path(dataset: Dataset, s: int, a: int) -> np.ndarray:
    hit = (dataset.states == s) & (dataset.actions == a) & (dataset.next_states != dataset.absorbing_state)
    return np.bincount(dataset.path_ids[hit], minlength=dataset.n_paths)


def _sample_until(mdp, policy, rng, enough: Callable[[Dataset], int | None], batch: int) -> Dataset:
    """Sample batches of paths until ``enough`` returns a path count to keep."""
    data = None
    while True:
        new = sample_paths(mdp, policy, batch, rng)
        data = new if data is None else data.concat(new)
        keep = enough(data)
        if keep is not None:
            return data.head(keep)
        batch *= 2


# ---------------------------------------------------------------- experiments


def _bias_setup(cfg):
    p = cfg.params
    grid = np.linspace(p["sigma_min"], p["sigma_max"], int(p["steps"]))
    mc = p["mc_sigmas"]
    mc_set = set(np.round(grid, 12)) if mc is None else set(np.round(np.asarray(mc, dtype=float), 12))
    return {"grid": grid, "mc_set": mc_set, "mc_trials": int(p["mc_trials"])}


def _bias_rows(cfg, ctx) -> list[tuple[int, dict]]:
    return list(range(len(ctx["grid"])))


def _bias_trial(tid, rng, ctx):
    sigma = float(ctx["grid"][tid])
    analytic = estimation.expected_sigma_hat_single_path(sigma)
    row = {"sigma": sigma, "analytic": analytic, "bias": analytic - sigma, "mc_mean": math.nan, "mc_se": math.nan}
    if round(sigma, 12) in ctx["mc_set"] and ctx["mc_trials"] > 0:
        k = rng.geometric(sigma, size=ctx["mc_trials"])
        est = 1.0 / k
        row["mc_mean"] = float(est.mean())
        row["mc_se"] = float(est.std(ddof=1) / math.sqrt(est.size))
    return row


def fine_grid_max_bias(step: float = 1e-4) -> tuple[float, float]:
    grid = np.arange(step, 1.0, step)
    bias = np.array([estimation.expected_sigma_hat_single_path(s) - s for s in grid])
    i = int(np.argmax(bias))
    return float(bias[i]), float(grid[i])


def _bias_summary(cfg, ctx, results):
    rows = [r.metrics for r in results]
    mc = [r for r in rows if not math.isnan(r["mc_mean"])]
    z = [abs(r["mc_mean"] - r["analytic"]) / r["mc_se"] for r in mc if r["mc_se"] > 0]
    max_bias, argmax = fine_grid_max_bias(cfg.params["fine_step"])
    # 3 SE per point; with many points, widen to keep the family-wise rate at that of one 3 SE check
    z_limit = max(3.0, float(stats.norm.isf(stats.norm.sf(3.0) / max(len(z), 1)))) if len(z) > 5 else 3.0
    return {
        "max_bias": max_bias,
        "argmax_sigma": argmax,
        "max_abs_z": max(z) if z else 0.0,
        "mc_points": len(mc),
        "claim": "single-path bias can reach about 0.22",
        "consistent_with_claim": abs(round(max_bias, 2) - 0.22) <= 0.005,
        "z_limit": z_limit,
        "passed": abs(max_bias - 0.216) <= 0.002 and (max(z) if z else 0.0) <= z_limit,
    }


def _lemma2_setup(cfg):
    rng = stream(cfg.seed, cfg.experiment + "/problem")
    mdp = build_mdp(cfg.mdp, rng)
    behavior = build_policy(cfg.behavior, mdp.num_states, mdp.num_actions, rng)
    p = cfg.params
    s, a = p["pair"]
    threshold = bounds.lemma2_threshold(mdp.num_states, p["epsilon_prime"], p["delta_prime"])
    x = exact_occupancy(mdp, behavior).x[s, a]
    return {"mdp": mdp, "behavior": behavior, "pair": (s, a), "threshold": threshold,
            "per_path": max(x * mdp.gamma, 1e-6), "delta": p["delta_prime"], "eps": p["epsilon_prime"]}


def _lemma2_trial(tid, rng, ctx):
    mdp, (s, a), need = ctx["mdp"], ctx["pair"], ctx["threshold"]

    def enough(data):
        cum = np.cumsum(_pair_nonabsorbing_per_path(data, s, a))
        if cum.size == 0 or cum[-1] < need:
            return None
        return int(np.searchsorted(cum, need)) + 1

    batch = int(1.2 * need / ctx["per_path"]) + 10
    data = _sample_until(mdp, ctx["behavior"], rng, enough, batch)
    counts = estimation.accumulate_counts(data)
    model = estimation.build_model(counts, mdp.gamma, mdp.rewards)
    l1 = float(np.abs(model.mdp.transitions[s, a] - mdp.transitions[s, a]).sum())
    return {"n_paths": data.n_paths, "samples": int(counts.nonabsorbing_totals[s, a]), "l1_error": l1,
            "radius": mdp.gamma * ctx["eps"], "failed": int(l1 > mdp.gamma * ctx["eps"])}


def _coverage_from_rows(cfg, ctx, results):
    out = coverage_summary([r.metrics["failed"] for r in results], ctx["delta"])
    out.update({k: v for k, v in ctx.items() if k in ("threshold", "N", "N_prime", "rho", "lambda")})
    return out


def _lemma3_setup(cfg):
    p = cfg.params
    s, a = p["pair"]
    if cfg.mdp is not None:
        rng = stream(cfg.seed, cfg.experiment + "/problem")
        mdp = build_mdp(cfg.mdp, rng)
        behavior = build_policy(cfg.behavior or {"kind": "uniform"}, mdp.num_states, mdp.num_actions, rng)
    else:
        mdp, behavior = _two_action_single_state(action_prob_for_first_visit(p["rho"], p["gamma"]), p["gamma"])
    rho = first_visit_prob(mdp, behavior, s, a)
    N = int(bounds.lemma3_path_count(mdp.gamma, rho, p["N_prime"], p["delta_prime"]))
    return {"mdp": mdp, "behavior": behavior, "pair": (s, a), "rho": rho, "N": N,
            "N_prime": p["N_prime"], "delta": p["delta_prime"]}


def _lemma3_trial(tid, rng, ctx):
    s, a = ctx["pair"]
    data = sample_paths(ctx["mdp"], ctx["behavior"], ctx["N"], rng)
    hits = int((_pair_nonabsorbing_per_path(data, s, a) > 0).sum())
    return {"paths_with_sample": hits, "failed": int(hits < ctx["N_prime"])}


def _lemma4_setup(cfg):
    p = cfg.params
    s, a = p["pair"]
    if cfg.mdp is not None:
        rng = stream(cfg.seed, cfg.experiment + "/problem")
        mdp = build_mdp(cfg.mdp, rng)
        behavior = build_policy(cfg.behavior or {"kind": "uniform"}, mdp.num_states, mdp.num_actions, rng)
    else:
        rho_from_s0 = p["lambda"] / p["gamma"]
        mdp, behavior = _two_action_single_state(action_prob_for_first_visit(rho_from_s0, p["gamma"]), p["gamma"])
    lam = return_prob(mdp, behavior, s, a)
    n_prime = int(bounds.lemma4_path_count(p["k"], lam, p["delta_prime"]))
    rho = first_visit_prob(mdp, behavior, s, a)
    return {"mdp": mdp, "behavior": behavior, "pair": (s, a), "lambda": lam, "N_prime": n_prime,
            "k": p["k"], "delta": p["delta_prime"], "per_path": max(rho * mdp.gamma, 1e-6)}


def _lemma4_trial(tid, rng, ctx):
    s, a = ctx["pair"]
    need = ctx["N_prime"]

    def enough(data):
        hit = np.flatnonzero(_pair_nonabsorbing_per_path(data, s, a) > 0)
        return None if hit.size < need else int(hit[need - 1]) + 1

    data = _sample_until(ctx["mdp"], ctx["behavior"], rng, enough, int(1.5 * need / ctx["per_path"]) + 10)
    total = int(_pair_nonabsorbing_per_path(data, s, a).sum())
    return {"paths": data.n_paths, "samples": total, "failed": int(total < ctx["k"])}


def _problem_stats(mdp, target, behavior):
    xt = exact_occupancy(mdp, target).x
    sb = occupancy_stats(mdp, behavior)
    return xt, sb


def _theorem1_setup(cfg):
    rng = stream(cfg.seed, cfg.experiment + "/problem")
    mdp, target, behavior = build_problem(cfg, rng)
    p = cfg.params
    xt, sb = _problem_stats(mdp, target, behavior)
    q = bounds.BoundQuery(mdp.num_states, mdp.num_actions, mdp.gamma, p["epsilon"], p["delta"], xt, sb.x, sb.rho)
    report = bounds.theorem1_path_bound(q)
    formula_n = report.required_paths
    n = p["n_paths"] if p["n_paths"] is not None else min(formula_n, p["max_paths"])
    return {"mdp": mdp, "target": target, "behavior": behavior, "N": int(math.ceil(n)),
            "formula_N": formula_n, "at_formula": n >= formula_n, "true_value": exact_value(mdp, target)[0],
            "delta": p["delta"], "epsilon": p["epsilon"]}


def _theorem1_trial(tid, rng, ctx):
    mdp = ctx["mdp"]
    data = sample_paths(mdp, ctx["behavior"], ctx["N"], rng)
    est = ope.model_based_evaluate(data, ctx["target"], mdp.gamma, mdp.rewards)
    err = abs(est - ctx["true_value"])
    return {"estimate": est, "error": err, "failed": int(err > ctx["epsilon"])}


def _theorem1_summary(cfg, ctx, results):
    out = coverage_summary([r.metrics["failed"] for r in results], ctx["delta"])
    out.update({"N": ctx["N"], "formula_N": ctx["formula_N"], "at_formula": bool(ctx["at_formula"])})
    return out


def _corollary1_setup(cfg):
    p = cfg.params
    ctx = {"delta": p["delta"], "resample": bool(p["resample_mdp"]), "cfg": cfg}
    if not ctx["resample"]:
        ctx["problem"] = build_problem(cfg, stream(cfg.seed, cfg.experiment + "/problem"))
    return ctx


def _corollary1_trial(tid, rng, ctx):
    cfg = ctx["cfg"]
    p = cfg.params
    mdp, _, behavior = build_problem(cfg, rng) if ctx["resample"] else ctx["problem"]
    eps = p["epsilon"] if p["epsilon"] is not None else p["epsilon_horizon_fraction"] / (1.0 - mdp.gamma)
    sb = occupancy_stats(mdp, behavior)
    formula = bounds.corollary1_path_bound(mdp.num_states, mdp.num_actions, mdp.gamma, eps, p["delta"],
                                           sb.x, sb.rho).required_paths
    n = p["n_paths"] if p["n_paths"] is not None else min(formula, p["max_paths"])
    data = sample_paths(mdp, behavior, int(math.ceil(n)), rng)
    pi, v_hat = ope.model_based_optimize(data, mdp.gamma, mdp.rewards)
    v_star = float(ope.value_iteration(mdp)[mdp.initial_state])
    v_pi = float(exact_value(mdp, pi)[mdp.initial_state])
    gap = v_star - v_pi
    return {"n_paths": int(math.ceil(n)), "formula_N": formula, "epsilon": eps, "v_star": v_star,
            "v_policy": v_pi, "v_model": v_hat, "gap": gap, "failed": int(gap > eps)}


def _corollary1_summary(cfg, ctx, results):
    out = coverage_summary([r.metrics["failed"] for r in results], ctx["delta"])
    out["success_rate"] = 1.0 - out["failure_rate"]
    out["max_gap_fraction"] = max(r.metrics["gap"] / r.metrics["epsilon"] for r in results)
    out["at_formula"] = all(r.metrics["n_paths"] >= r.metrics["formula_N"] for r in results)
    return out


def df_mse_exact(p: float, N: int) -> tuple[float, float]:
    """Exact MSE of the deterministic-favored and sample-mean estimates of ``p`` for a two-valued variable."""
    k = np.arange(N + 1)
    pmf = stats.binom.pmf(k, N, p)
    root = math.sqrt(N)
    # value 0 is the mode when k >= N - k (ties to the lowest index)
    df = np.where(k >= N - k, (k + root) / (N + root), k / (N + root))
    return float(pmf @ (df - p) ** 2), p * (1.0 - p) / N


def theorem2_bound(p: float, N: int) -> float:
    return N * (1.0 - p) / (N + math.sqrt(N)) ** 2 + math.exp(-((2 * p - 1) ** 2) * N / (12.0 * (1.0 - p)))


def df_crossover(N: int, grid_step: float = 1e-4) -> float:
    """Smallest ``p`` above 1/2 from which the favored estimator's exact MSE stays at or below the sample mean's."""
    ps = np.arange(0.5 + grid_step, 1.0, grid_step)
    better = np.array([df_mse_exact(p, N)[0] <= df_mse_exact(p, N)[1] for p in ps])
    bad = np.flatnonzero(~better)
    return float(ps[bad[-1] + 1]) if bad.size and bad[-1] + 1 < ps.size else float(ps[0] if not bad.size else 1.0)


def _theorem2_setup(cfg):
    p = np.asarray(cfg.params["p"], dtype=float)
    if abs(p.sum() - 1.0) > 1e-12 or np.any(p < 0):
        raise ConfigError("p must be a probability vector")
    return {"p": p, "N": int(cfg.params["N"]), "m": int(cfg.params["resamples_per_trial"]),
            "i": int(np.argmax(p))}


def _theorem2_trial(tid, rng, ctx):
    p, N, i = ctx["p"], ctx["N"], ctx["i"]
    counts = rng.multinomial(N, p, size=ctx["m"])
    root = math.sqrt(N)
    d = counts.argmax(axis=1)
    df = (counts[:, i] + root * (d == i)) / (N + root)
    sm = counts[:, i] / N
    e_df = (df - p[i]) ** 2
    e_sm = (sm - p[i]) ** 2
    return {"n": int(ctx["m"]), "sum_df": float(e_df.sum()), "sumsq_df": float((e_df**2).sum()),
            "sum_sm": float(e_sm.sum()), "sumsq_sm": float((e_sm**2).sum())}


def _theorem2_summary(cfg, ctx, results):
    n = sum(r.metrics["n"] for r in results)

    def moments(key):
        m1 = sum(r.metrics["sum_" + key] for r in results) / n
        m2 = sum(r.metrics["sumsq_" + key] for r in results) / n
        return m1, math.sqrt(max(m2 - m1 * m1, 0.0) / n)

    mse_df, se_df = moments("df")
    mse_sm, se_sm = moments("sm")
    pi, N = float(ctx["p"][ctx["i"]]), ctx["N"]
    bound = theorem2_bound(pi, N) if pi > 0.5 else math.inf
    out = {
        "p_i": pi, "N": N, "resamples": n,
        "mse_df": mse_df, "se_df": se_df, "mse_sm": mse_sm, "se_sm": se_sm,
        "mse_sm_exact": pi * (1.0 - pi) / N, "bound": bound,
        "crossover_p": df_crossover(N),
        "passed": mse_df <= bound + 3 * se_df and mse_df < pi * (1.0 - pi) / N,
    }
    if ctx["p"].size == 2:
        out["mse_df_exact"] = df_mse_exact(pi, N)[0]
    return out


def _eval_setup(cfg):
    rng = stream(cfg.seed, cfg.experiment + "/problem")
    mdp, target, behavior = build_problem(cfg, rng)
    return {"mdp": mdp, "target": target, "behavior": behavior, "true_value": float(exact_value(mdp, target)[0]),
            "ratio": bounds.is_log_ratio_stats(target, behavior, mdp.gamma)["max_ratio"]}


def _is_trial(tid, rng, ctx):
    mdp = ctx["mdp"]
    data = sample_paths(mdp, ctx["behavior"], ctx["cfg_n"], rng)
    v_is = ope.importance_sampling_evaluate(data, ctx["target"], ctx["behavior"])
    v_mb = ope.model_based_evaluate(data, ctx["target"], mdp.gamma, mdp.rewards)
    return {"is_estimate": v_is, "mb_estimate": v_mb,
            "is_error": abs(v_is - ctx["true_value"]), "mb_error": abs(v_mb - ctx["true_value"])}


def _is_setup(cfg):
    ctx = _eval_setup(cfg)
    ctx["cfg_n"] = int(cfg.params["n_paths"])
    return ctx


def _is_summary(cfg, ctx, results):
    est = np.array([r.metrics["is_estimate"] for r in results])
    is_err = np.array([r.metrics["is_error"] for r in results])
    mb_err = np.array([r.metrics["mb_error"] for r in results])
    se = float(est.std(ddof=1) / math.sqrt(est.size)) if est.size > 1 else math.inf
    z = (est.mean() - ctx["true_value"]) / se if se > 0 else 0.0
    q_is, q_mb = float(np.quantile(is_err, 0.99)), float(np.quantile(mb_err, 0.99))
    rate = ope.is_second_moment_rate(ctx["mdp"], ctx["target"], ctx["behavior"])
    finite = rate < 1.0
    unbiased = bool(abs(z) <= 4.0)
    out = {
        "true_value": ctx["true_value"], "is_mean": float(est.mean()), "is_se": se, "z": float(z),
        "unbiased_within_4se": unbiased,
        "second_moment_rate": rate, "variance_finite": bool(finite),
        "max_ratio": ctx["ratio"], "gamma": ctx["mdp"].gamma,
        "is_q99_error": q_is, "mb_q99_error": q_mb, "is_tail_heavier": bool(q_is > q_mb),
    }
    if finite:
        out["passed"] = unbiased and q_is > q_mb
    else:
        # a standard-error test is meaningless without a finite variance
        out["unbiasedness_check"] = "skipped: importance weights have infinite variance"
        out["passed"] = bool(q_is > q_mb)
    return out


def _sweep_setup(cfg):
    ctx = _eval_setup(cfg)
    ctx["grid"] = sorted(int(n) for n in cfg.params["n_grid"])
    ctx["estimators"] = list(cfg.params["estimators"])
    ctx["mode"] = cfg.params["mode"]
    return ctx


def _sweep_trial(tid, rng, ctx):
    """One replication: a single dataset of the largest size, evaluated on nested prefixes."""
    mdp = ctx["mdp"]
    data = sample_paths(mdp, ctx["behavior"], ctx["grid"][-1], rng)
    row = {}
    for n in ctx["grid"]:
        sub = data.head(n)
        for est in ctx["estimators"]:
            if est == "model":
                v = ope.model_based_evaluate(sub, ctx["target"], mdp.gamma, mdp.rewards, ctx["mode"])
            elif est == "is":
                v = ope.importance_sampling_evaluate(sub, ctx["target"], ctx["behavior"])
            else:
                raise ConfigError(f"unknown estimator {est!r}")
            row[f"{est}_{n}"] = abs(v - ctx["true_value"])
    return row


def sweep_table(ctx, results) -> list[dict]:
    table = []
    for n in ctx["grid"]:
        for est in ctx["estimators"]:
            err = np.array([r.metrics[f"{est}_{n}"] for r in results])
            table.append({
                "n_paths": n, "estimator": est,
                "median": float(np.median(err)),
                "q25": float(np.quantile(err, 0.25)),
                "q75": float(np.quantile(err, 0.75)),
                "q99": float(np.quantile(err, 0.99)),
            })
    return table


def _sweep_summary(cfg, ctx, results):
    table = sweep_table(ctx, results)
    med = {n: r["median"] for n in ctx["grid"] for r in table if r["n_paths"] == n and r["estimator"] == "model"}
    ns = ctx["grid"]
    monotone = all(med[a] > med[b] for a, b in zip(ns, ns[1:]))
    out = {"true_value": ctx["true_value"], "max_ratio": ctx["ratio"], "table": table, "model_monotone": monotone}
    if len(ns) >= 2 and ns[-1] == 4 * ns[-2]:
        out["last_ratio"] = med[ns[-1]] / med[ns[-2]]
    if "model" in ctx["estimators"]:
        out["passed"] = monotone and 0.3 <= out.get("last_ratio", 0.5) <= 0.8
    return out


def _cert_setup(cfg):
    p = cfg.params
    ctx = {"cfg": cfg, "delta": p["delta"], "n": int(p["n_paths"]), "resample": bool(p["resample_mdp"])}
    if not ctx["resample"]:
        ctx["problem"] = build_problem(cfg, stream(cfg.seed, cfg.experiment + "/problem"))
    return ctx


def _cert_trial(tid, rng, ctx):
    mdp, target, behavior = build_problem(ctx["cfg"], rng) if ctx["resample"] else ctx["problem"]
    data = sample_paths(mdp, behavior, ctx["n"], rng)
    cert = bounds.accuracy_certificate(data, target, behavior, mdp.gamma, mdp.rewards, ctx["delta"])
    v = float(exact_value(mdp, target)[0])
    err = abs(v - cert.estimate)
    return {"estimate": cert.estimate, "true_value": v, "error": err, "certified_epsilon": cert.epsilon,
            "finite": int(math.isfinite(cert.epsilon)), "failed": int(err > cert.epsilon)}


def _cert_summary(cfg, ctx, results):
    out = coverage_summary([r.metrics["failed"] for r in results], ctx["delta"])
    out["coverage"] = 1.0 - out["failure_rate"]
    out["finite_fraction"] = float(np.mean([r.metrics["finite"] for r in results]))
    out["passed"] = out["coverage"] >= 1.0 - ctx["delta"]
    return out


@dataclass
class Experiment:
    setup: Callable
    trial: Callable
    summarize: Callable
    columns: tuple[str, ...] | None = None


EXPERIMENTS: dict[str, Experiment] = {
    "bias_curve": Experiment(_bias_setup, _bias_trial, _bias_summary),
    "lemma2_coverage": Experiment(_lemma2_setup, _lemma2_trial, _coverage_from_rows),
    "lemma3_coverage": Experiment(_lemma3_setup, _lemma3_trial, _coverage_from_rows),
    "lemma4_coverage": Experiment(_lemma4_setup, _lemma4_trial, _coverage_from_rows),
    "theorem1_coverage": Experiment(_theorem1_setup, _theorem1_trial, _theorem1_summary),
    "corollary1_coverage": Experiment(_corollary1_setup, _corollary1_trial, _corollary1_summary),
    "theorem2_mse": Experiment(_theorem2_setup, _theorem2_trial, _theorem2_summary),
    "is_unbiasedness": Experiment(_is_setup, _is_trial, _is_summary),
    "ope_sweep": Experiment(_sweep_setup, _sweep_trial, _sweep_summary),
    "certificate_coverage": Experiment(_cert_setup, _cert_trial, _cert_summary),
}


# ---------------------------------------------------------------- runner


def _run_one(args) -> TrialResult:
    kind, seed, tid, ctx = args
    t0 = time.perf_counter()
    metrics = EXPERIMENTS[kind].trial(tid, stream(seed, kind, tid), ctx)
    return TrialResult(tid, f"{seed}/{kind}/{tid}", metrics, time.perf_counter() - t0)


def run_trials(cfg: ExperimentConfig, ctx: dict, n_trials: int, workers: int | None = None) -> list[TrialResult]:
    workers = workers or cfg.workers
    jobs = [(cfg.experiment, cfg.seed, tid, ctx) for tid in range(n_trials)]
    if workers == 1:
        results = [_run_one(j) for j in jobs]
    else:
        chunk = max(1, n_trials // (4 * workers))
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_one, jobs, chunksize=chunk))
    return sorted(results, key=lambda r: r.trial_id)


def trials_csv(cfg: ExperimentConfig, results: list[TrialResult]) -> str:
    buf = io.StringIO()
    buf.write(f"# config_hash={cfg.config_hash()} experiment={cfg.experiment} schema_version={SCHEMA_VERSION}\n")
    columns = list(results[0].metrics) if results else []
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["trial", "stream"] + columns)
    for r in results:
        w.writerow([r.trial_id, r.stream_id] + [_fmt(r.metrics[c]) for c in columns])
    return buf.getvalue()


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


def _existing_hash(path: Path) -> str | None:
    if not path.exists():
        return None
    first = path.open().readline()
    for tok in first.split():
        if tok.startswith("config_hash="):
            return tok.split("=", 1)[1]
    return ""


def output_dir(cfg: ExperimentConfig) -> Path | None:
    if cfg.output:
        return Path(cfg.output)
    env = os.environ.get(OUTPUT_ENV)
    return Path(env) if env else None


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        f = float(obj)
        return f if math.isfinite(f) else str(f)
    return obj


def write_outputs(cfg: ExperimentConfig, results, summary, ctx, outdir: Path, force: bool = False,
                  figures: bool = True) -> dict:
    outdir.mkdir(parents=True, exist_ok=True)
    h = cfg.config_hash()
    csv_path = outdir / f"{cfg.experiment}.csv"
    json_path = outdir / f"{cfg.experiment}.json"
    old = _existing_hash(csv_path)
    if old is not None and old != h and not force:
        raise OutputConflict(f"{csv_path} was written by config {old or '<unknown>'}, not {h}; use --force")
    csv_path.write_text(trials_csv(cfg, results))
    files = {"csv": str(csv_path), "json": str(json_path)}
    if cfg.experiment == "ope_sweep":
        table_path = outdir / "ope_sweep_table.csv"
        buf = io.StringIO()
        buf.write(f"# config_hash={h} experiment=ope_sweep\n")
        w = csv.DictWriter(buf, fieldnames=["n_paths", "estimator", "median", "q25", "q75", "q99"],
                           lineterminator="\n")
        w.writeheader()
        for row in summary["table"]:
            w.writerow({k: _fmt(v) for k, v in row.items()})
        table_path.write_text(buf.getvalue())
        files["table"] = str(table_path)
    if figures:
        from . import plotting

        fig = plotting.experiment_figure(cfg.experiment, results, summary, outdir / f"{cfg.experiment}.png")
        if fig:
            files["figure"] = str(fig)
    json_path.write_text(json.dumps(_jsonable({
        "config_hash": h,
        "config": cfg.canonical(),
        "summary": summary,
        "files": files,
    }), indent=1, sort_keys=True))
    return files


def run_experiment(cfg: ExperimentConfig, outdir: Path | str | None = None, force: bool = False,
                   workers: int | None = None, figures: bool = True) -> ExperimentResult:
    exp = EXPERIMENTS[cfg.experiment]
    ctx = exp.setup(cfg)
    n = len(ctx["grid"]) if cfg.experiment == "bias_curve" else cfg.trials
    results = run_trials(cfg, ctx, n, workers)
    summary = exp.summarize(cfg, ctx, results)
    summary.setdefault("passed", True)
    summary["config_hash"] = cfg.config_hash()
    outdir = Path(outdir) if outdir is not None else output_dir(cfg)
    files = write_outputs(cfg, results, summary, ctx, outdir, force, figures) if outdir is not None else {}
    return ExperimentResult(cfg, results, summary, files)
