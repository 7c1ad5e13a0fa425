"""Closed-form sample-complexity bounds and the data-driven accuracy certificate.

All logarithms are natural.  ``S`` counts every state including the absorbing
one; reports say so explicitly.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .estimation import TransitionCounts, accumulate_counts, build_model
from .mdp import Dataset, OccupancyStats, Policy, exact_value
from .ope import robust_occupancy_upper

DEFAULT_BETA_GRID = tuple(round(0.1 * i, 1) for i in range(11))
LOG_NOTE = "natural logarithms; S includes the absorbing state"


def _ceil(x: float) -> float:
    """Ceiling that ignores float noise just above an integer (8*1000*0.2 -> 1600)."""
    if not math.isfinite(x):
        return x
    return float(math.ceil(x - 1e-9 * max(1.0, abs(x))))


def lemma1_gap(alpha: float, beta: float, S: int, A: int, gamma: float) -> float:
    """Value-gap bound when every row error is at most ``alpha / x(s,a)**beta``."""
    if alpha < 0 or not 0.0 <= beta <= 1.0:
        raise ValueError("need alpha >= 0 and beta in [0, 1]")
    return alpha * (S * A) ** beta / (1.0 - gamma) ** (2.0 - beta)


def lemma2_threshold(S: int, epsilon_prime: float, delta_prime: float) -> float:
    """Non-absorbing samples from one pair that make the row's L1 error at most ``gamma * epsilon_prime``."""
    if not 0.0 < epsilon_prime < 1.0:
        raise ValueError("epsilon' must lie in (0, 1)")
    if not 0.0 < delta_prime < 1.0:
        raise ValueError("delta' must lie in (0, 1)")
    return _ceil(
        40.0 * S / epsilon_prime**2 * math.log(1.0 / epsilon_prime) * math.log(5.0 / (3.0 * delta_prime))
    )


def lemma2_radius_from_count(S: int, count: int, delta_prime: float, gamma: float = 1.0) -> float:
    """Anytime L1 radius ``gamma * c`` for a row estimated from ``count`` non-absorbing samples.

    ``c = sqrt(2/mu * (2 log mu + log(2**S * 5 / (3 delta'))))`` holds
    uniformly over the random sample count ``mu``.
    """
    if count < 1:
        raise ValueError("count must be at least 1")
    mu = float(count)
    c = math.sqrt(2.0 / mu * (2.0 * math.log(mu) + S * math.log(2.0) + math.log(5.0 / (3.0 * delta_prime))))
    return gamma * c


def lemma2_radii(counts: TransitionCounts, gamma: float, delta: float) -> np.ndarray:
    """Per-pair radii holding simultaneously with probability ``1 - delta`` (union over non-absorbing pairs).

    Pairs with no non-absorbing samples get the vacuous radius ``2 gamma``;
    absorbing rows are known exactly and get 0.
    """
    S, A, _ = counts.n.shape
    m = counts.nonabsorbing_totals
    per_pair = delta / ((S - 1) * A)
    radii = np.zeros((S, A))
    for s in range(S - 1):
        for a in range(A):
            if m[s, a] >= 1:
                radii[s, a] = min(2.0 * gamma, lemma2_radius_from_count(S, int(m[s, a]), per_pair, gamma))
            else:
                radii[s, a] = 2.0 * gamma
    return radii


def lemma3_path_count(gamma: float, rho_b: float, N_prime: float, delta_prime: float) -> float:
    """Paths needed so that at least ``N_prime`` of them leave ``(s, a)`` to a non-absorbing state."""
    if rho_b <= 0:
        return math.inf
    return _ceil(6.0 / (gamma * rho_b) * max(N_prime, math.log(1.0 / delta_prime)))


def lemma4_path_count(k: float, lambda_b: float, delta_prime: float) -> float:
    """Paths-with-a-sample needed for at least ``k`` non-absorbing samples from the pair."""
    if not 0.0 <= lambda_b < 1.0:
        raise ValueError("return probability must lie in [0, 1)")
    return _ceil(max(8.0 * k * (1.0 - lambda_b), math.log(1.0 / delta_prime)))


@dataclass
class BoundQuery:
    S: int
    A: int
    gamma: float
    epsilon: float
    delta: float
    x_target: np.ndarray
    x_behavior: np.ndarray
    rho_behavior: np.ndarray
    beta_grid: tuple[float, ...] = DEFAULT_BETA_GRID

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if not 0.0 < self.delta < 1.0:
            raise ValueError("delta must lie in (0, 1)")
        if any(not 0.0 <= b <= 1.0 for b in self.beta_grid):
            raise ValueError("beta values must lie in [0, 1]")


@dataclass
class BoundReport:
    required_paths: float
    beta: float | None
    pair: tuple[int, int] | None
    form: str
    per_beta: list[dict] = field(default_factory=list)
    d_mask: np.ndarray | None = None
    terms: dict = field(default_factory=dict)
    log_note: str = LOG_NOTE
    notes: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "required_paths": self.required_paths,
            "beta": self.beta,
            "pair": list(self.pair) if self.pair is not None else None,
            "form": self.form,
            "per_beta": self.per_beta,
            "d_mask": None if self.d_mask is None else self.d_mask.astype(int).tolist(),
            "terms": self.terms,
            "log_note": self.log_note,
            "notes": self.notes,
        }


def d_cutoff(beta: float, epsilon: float, gamma: float, S: int, A: int) -> float:
    """Target-occupancy threshold for membership in D; pairs below it need no samples."""
    if beta == 0:
        return 0.0
    return (epsilon / 2.0) ** (1.0 / beta) * (1.0 - gamma) ** ((2.0 - beta) / beta) / (S * A)


def _alt_cutoff(beta: float, epsilon: float, gamma: float, S: int, A: int) -> float:
    if beta == 0:
        return 0.0
    return (epsilon / 2.0) ** (1.0 / beta) * (1.0 - gamma) ** ((1.0 - beta) / beta) / (S * A)


def _safe_div(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(den > 0, num / np.where(den > 0, den, 1.0), np.inf)
    return out


def theorem1_terms(q: BoundQuery, beta: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """``(term1, term2, D mask)`` over non-absorbing pairs for one beta."""
    S, A, g, eps, dl = q.S, q.A, q.gamma, q.epsilon, q.delta
    xt = np.asarray(q.x_target, dtype=float)[: S - 1]
    xb = np.asarray(q.x_behavior, dtype=float)[: S - 1]
    rb = np.asarray(q.rho_behavior, dtype=float)[: S - 1]
    const = (
        1920.0 * S ** (beta + 1) * A**beta * g / ((1.0 - g) ** (4.0 - 2.0 * beta) * eps**2)
        * math.log(g * S * A / ((1.0 - g) ** 3 * eps))
        * math.log(5.0 * S * A / dl)
    )
    const = max(const, 0.0)
    term1 = const * _safe_div(xt ** (2.0 * beta), xb)
    term2 = 6.0 * math.log(3.0 * S * A / dl) * _safe_div(np.ones_like(rb), g * rb)
    mask = np.ones_like(xt, dtype=bool) if beta == 0 else xt >= d_cutoff(beta, eps, g, S, A)
    return term1, term2, mask


def theorem1_path_bound(q: BoundQuery) -> BoundReport:
    """Explicit-constant path bound for model-based evaluation, minimized over the beta grid."""
    best = None
    per_beta = []
    for beta in q.beta_grid:
        t1, t2, mask = theorem1_terms(q, beta)
        req = np.maximum(t1, t2)
        if mask.any():
            masked = np.where(mask, req, -np.inf)
            flat = int(np.argmax(masked))
            s, a = divmod(flat, q.A)
            n_req = float(masked.flat[flat])
            pair = (s, a)
        else:
            n_req, pair = 0.0, None
        entry = {
            "beta": beta,
            "required_paths": n_req,
            "pair": list(pair) if pair else None,
            "d_size": int(mask.sum()),
            "d_empty": not mask.any(),
            "cutoff": d_cutoff(beta, q.epsilon, q.gamma, q.S, q.A),
            "alt_cutoff": _alt_cutoff(beta, q.epsilon, q.gamma, q.S, q.A),
            "term1": float(t1.flat[flat]) if pair else 0.0,
            "term2": float(t2.flat[flat]) if pair else 0.0,
        }
        per_beta.append(entry)
        if best is None or n_req < best[0]:
            best = (n_req, beta, pair, mask, entry)
    n_req, beta, pair, mask, entry = best
    notes = []
    if not math.isfinite(n_req):
        notes.append("a pair in D has zero behavior occupancy or first-visit probability")
    notes.append("D follows the theorem statement (x >= cutoff); alt_cutoff is the proof's closing display")
    return BoundReport(
        required_paths=n_req,
        beta=beta,
        pair=pair,
        form="explicit-constant form (theorem 1)",
        per_beta=per_beta,
        d_mask=mask,
        terms={"term1": entry["term1"], "term2": entry["term2"]},
        notes=notes,
    )


def corollary1_terms(S, A, gamma, epsilon, delta, x_behavior, rho_behavior) -> tuple[np.ndarray, np.ndarray]:
    xb = np.asarray(x_behavior, dtype=float)[: S - 1]
    rb = np.asarray(rho_behavior, dtype=float)[: S - 1]
    const = (
        7680.0 * S * gamma / ((1.0 - gamma) ** 5 * epsilon**2)
        * math.log(gamma / ((1.0 - gamma) ** 3 * epsilon))
        * math.log(10.0 * S * A / delta)
    )
    term1 = max(const, 0.0) * _safe_div(np.ones_like(xb), xb)
    term2 = 6.0 * math.log(6.0 * S * A / delta) * _safe_div(np.ones_like(rb), gamma * rb)
    return term1, term2


def corollary1_path_bound(S, A, gamma, epsilon, delta, x_behavior, rho_behavior) -> BoundReport:
    """Explicit-constant path bound for model-based optimization (uniform coverage)."""
    t1, t2 = corollary1_terms(S, A, gamma, epsilon, delta, x_behavior, rho_behavior)
    req = np.maximum(t1, t2)
    flat = int(np.argmax(req))
    pair = divmod(flat, A)
    n_req = float(req.flat[flat])
    notes = [] if math.isfinite(n_req) else ["a pair has zero behavior occupancy or first-visit probability"]
    return BoundReport(
        required_paths=n_req,
        beta=0.0,
        pair=pair,
        form="explicit-constant form (corollary 1)",
        per_beta=[],
        d_mask=np.ones_like(t1, dtype=bool),
        terms={"term1": float(t1.flat[flat]), "term2": float(t2.flat[flat])},
        notes=notes,
    )


def is_log_ratio_stats(
    target_policy: Policy,
    behavior_policy: Policy,
    gamma: float,
    occupancy: OccupancyStats | np.ndarray | None = None,
) -> dict:
    """Upper bounds on the mean and spread of the path log-likelihood ratio.

    Returns ``kl_bound``, ``std_bound``, ``max_ratio`` and, when the target
    occupancy is supplied, the exact path KL divergence ``kl_exact``.
    """
    pt = target_policy.probs[:-1]
    pb = behavior_policy.probs[:-1]
    support = pt > 0
    if np.any(support & (pb <= 0)):
        raise ValueError("behavior policy must cover every action the target policy takes")
    max_ratio = float(np.max(pt[support] / pb[support]))
    log_r = math.log(max_ratio)
    out = {
        "kl_bound": log_r / (1.0 - gamma),
        "std_bound": math.sqrt(2.0) * log_r / (1.0 - gamma),
        "max_ratio": max_ratio,
    }
    if occupancy is not None:
        x = occupancy.x if isinstance(occupancy, OccupancyStats) else np.asarray(occupancy)
        logs = np.zeros_like(pt)
        logs[support] = np.log(pt[support] / pb[support])
        out["kl_exact"] = float(np.sum(x[:-1] * logs))
    return out


def is_sample_bound(kl_bound: float, std_bound: float, c: float = 1.0) -> dict:
    """``exp(kl + c * std)`` paths; ``c`` stands in for the unspecified big-O constant."""
    if c < 0:
        raise ValueError("c must be nonnegative")
    exponent = kl_bound + c * std_bound
    try:
        n = math.exp(exponent)
    except OverflowError:
        n = math.inf
    return {"paths": n, "exponent": exponent, "c": c}


def empirical_bernstein_lower(samples: np.ndarray, value_range: float, delta: float) -> float:
    """One-sided empirical Bernstein lower confidence bound on the mean (Maurer-Pontil form)."""
    samples = np.asarray(samples, dtype=float)
    n = samples.size
    if n < 2:
        return 0.0
    log_term = math.log(2.0 / delta)
    var = float(np.var(samples, ddof=1))
    lower = samples.mean() - math.sqrt(2.0 * var * log_term / n) - 7.0 * value_range * log_term / (3.0 * (n - 1))
    return max(lower, 0.0)


def per_path_visits(dataset: Dataset) -> np.ndarray:
    """Visit counts of every pair in every path, shape (n_paths, S, A)."""
    S, A = dataset.num_states, dataset.num_actions
    flat = dataset.path_ids * (S * A) + dataset.states * A + dataset.actions
    return np.bincount(flat, minlength=dataset.n_paths * S * A).reshape(dataset.n_paths, S, A)


def behavior_lower_bounds(dataset: Dataset, delta: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Lower confidence bounds on behavior ``x`` and ``rho`` from per-path visits.

    ``delta`` is split evenly between the two statistics and across
    non-absorbing pairs.  The visit-count range is taken as twice the largest
    observed count (visit counts are unbounded, only subexponential).
    """
    S, A = dataset.num_states, dataset.num_actions
    visits = per_path_visits(dataset)
    per = delta / (2.0 * (S - 1) * A)
    x_lo = np.zeros((S, A))
    rho_lo = np.zeros((S, A))
    ranges = np.zeros((S, A))
    for s in range(S - 1):
        for a in range(A):
            v = visits[:, s, a]
            rng_ = 2.0 * float(v.max()) if v.size else 0.0
            ranges[s, a] = rng_
            x_lo[s, a] = empirical_bernstein_lower(v, max(rng_, 1.0), per)
            rho_lo[s, a] = empirical_bernstein_lower((v > 0).astype(float), 1.0, per)
    return x_lo, rho_lo, ranges


@dataclass
class Certificate:
    epsilon: float
    estimate: float
    n_paths: int
    delta: float
    x_target_upper: np.ndarray
    x_behavior_lower: np.ndarray
    rho_behavior_lower: np.ndarray
    report: BoundReport | None
    notes: list[str] = field(default_factory=list)


def accuracy_certificate(
    dataset: Dataset,
    target_policy: Policy,
    behavior_policy: Policy,
    gamma: float,
    rewards: np.ndarray,
    delta: float,
    beta_grid: tuple[float, ...] = DEFAULT_BETA_GRID,
    iters: int = 60,
) -> Certificate:
    """Smallest accuracy the available paths provably support, at confidence ``1 - delta``.

    The confidence budget is split in thirds: row radii, behavior occupancy
    lower bounds, and the path bound itself.  Returns ``inf`` when even the
    trivial accuracy ``1/(1-gamma)`` is not certified.
    """
    S, A = dataset.num_states, dataset.num_actions
    counts = accumulate_counts(dataset)
    model = build_model(counts, gamma, rewards)
    estimate = float(exact_value(model.mdp, target_policy)[0])
    radii = lemma2_radii(counts, gamma, delta / 3.0)
    x_t = robust_occupancy_upper(model, target_policy, radii)
    x_b, rho_b, ranges = behavior_lower_bounds(dataset, delta / 3.0)
    N = dataset.n_paths
    notes = [f"visit-count range truncated at 2x observed max: {ranges[:-1].max() if N else 0:.0f}"]

    def required(eps: float) -> BoundReport:
        q = BoundQuery(S, A, gamma, eps, delta / 3.0, x_t, x_b, rho_b, beta_grid)
        return theorem1_path_bound(q)

    hi = 1.0 / (1.0 - gamma)
    rep_hi = required(hi)
    if not rep_hi.required_paths <= N:
        return Certificate(math.inf, estimate, N, delta, x_t, x_b, rho_b, rep_hi, notes + ["insufficient paths"])
    lo = 0.0
    rep = rep_hi
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        r = required(mid)
        if r.required_paths <= N:
            hi, rep = mid, r
        else:
            lo = mid
    return Certificate(hi, estimate, N, delta, x_t, x_b, rho_b, rep, notes)
