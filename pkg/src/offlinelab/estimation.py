"""Transition counting, model construction and categorical estimators."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .mdp import Dataset, SamplePath, TabularMdp

MODES = ("renormalized", "l2_projected")


@dataclass
class TransitionCounts:
    n: np.ndarray  # (S, A, S) integer counts

    @property
    def totals(self) -> np.ndarray:
        return self.n.sum(axis=2)

    @property
    def nonabsorbing_totals(self) -> np.ndarray:
        """Per-pair count of transitions that did not end the path."""
        return self.n[:, :, :-1].sum(axis=2)

    def __add__(self, other: "TransitionCounts") -> "TransitionCounts":
        return TransitionCounts(self.n + other.n)


@dataclass
class EstimatedModel:
    mdp: TabularMdp
    counts: TransitionCounts
    projection_mode: str


@dataclass
class CategoricalEstimate:
    probs: np.ndarray
    estimator: str
    mode_index: int | None = None


def accumulate_counts(dataset: Dataset | Iterable[SamplePath], num_states: int | None = None,
                      num_actions: int | None = None) -> TransitionCounts:
    """Count every observed transition ``(s, a, q)``, including moves into the absorbing state."""
    if not isinstance(dataset, Dataset):
        dataset = Dataset.from_paths(dataset, num_states, num_actions)
    S, A = dataset.num_states, dataset.num_actions
    flat = (dataset.states * A + dataset.actions) * S + dataset.next_states
    n = np.bincount(flat, minlength=S * A * S).reshape(S, A, S)
    return TransitionCounts(n)


def project_scaled_simplex(v: np.ndarray, mass: float) -> np.ndarray:
    """Euclidean projection of ``v`` onto ``{p >= 0, sum(p) = mass}``.

    A uniform shift followed by clipping at zero; the shift is found from the
    sorted entries so the result is exact rather than iterated.
    """
    v = np.asarray(v, dtype=float)
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - mass
    k = np.arange(1, v.size + 1)
    cond = u - css / k > 0
    rho = k[cond][-1]
    theta = css[rho - 1] / rho
    return np.maximum(v - theta, 0.0)


def build_model(
    counts: TransitionCounts,
    gamma: float,
    rewards: np.ndarray,
    mode: str = "renormalized",
    initial_state: int = 0,
) -> EstimatedModel:
    """Estimated MDP with the leak to the absorbing state pinned at ``1 - gamma``.

    ``renormalized`` scales the non-absorbing empirical frequencies to mass
    ``gamma``; ``l2_projected`` projects the full empirical row onto the rows
    with the prescribed leak.  Pairs without non-absorbing samples self-loop
    with probability ``gamma``.
    """
    if mode not in MODES:
        raise ValueError(f"unknown projection mode {mode!r}; expected one of {MODES}")
    if not 0.0 < gamma < 1.0:
        raise ValueError("gamma must lie in (0, 1)")
    n = counts.n.astype(float)
    S, A, _ = n.shape
    end = S - 1
    P = np.zeros_like(n)
    sub = n[:end, :, :end]
    m = sub.sum(axis=2)
    seen = m > 0
    if mode == "renormalized":
        P[:end, :, :end] = np.where(seen[..., None], gamma * sub / np.where(seen, m, 1.0)[..., None], 0.0)
    else:
        tot = n[:end].sum(axis=2)
        for s in range(end):
            for a in range(A):
                if seen[s, a]:
                    P[s, a, :end] = project_scaled_simplex(sub[s, a] / tot[s, a], gamma)
    for s in range(end):
        P[s, ~seen[s], s] = gamma
    P[:end, :, end] = 1.0 - gamma
    P[end, :, end] = 1.0
    mdp = TabularMdp(gamma, P, np.asarray(rewards, dtype=float).copy(), initial_state)
    return EstimatedModel(mdp, counts, mode)


def _check_counts(counts) -> np.ndarray:
    counts = np.asarray(counts)
    if counts.ndim != 1 or np.any(counts < 0):
        raise ValueError("counts must be a vector of nonnegative integers")
    if counts.sum() == 0:
        raise ValueError("at least one sample is required (N = 0)")
    return counts


def sample_mean_categorical(counts) -> CategoricalEstimate:
    counts = _check_counts(counts)
    return CategoricalEstimate(counts / counts.sum(), "sample_mean")


def df_categorical(counts) -> CategoricalEstimate:
    """Deterministic-favored estimate: ``sqrt(N)`` pseudo-counts go to the most frequent value.

    Ties for the mode go to the lowest index.
    """
    counts = _check_counts(counts)
    N = counts.sum()
    root = math.sqrt(N)
    d = int(np.argmax(counts))
    boosted = counts.astype(float)
    boosted[d] += root
    return CategoricalEstimate(boosted / (N + root), "deterministic_favored", d)


def expected_sigma_hat_single_path(sigma: float, tol: float = 1e-12) -> float:
    """Expected sample-mean estimate of the leaving probability from one path with no discounting.

    With a geometric number ``K`` of transitions out of ``s0`` the estimate is
    ``1/K``; the expectation is summed term by term until the remaining tail
    is below ``tol``.
    """
    if not 0.0 < sigma < 1.0:
        raise ValueError(f"sigma must lie in (0, 1), got {sigma}")
    q = 1.0 - sigma
    total = 0.0
    start = 1
    chunk = 4096
    while True:
        k = np.arange(start, start + chunk, dtype=float)
        total += float(np.sum(sigma * q ** (k - 1) / k))
        start += chunk
        # remaining terms are bounded by q**(start-1) / start
        if q ** (start - 1) / start < tol:
            return total
        chunk = min(chunk * 2, 1 << 20)
