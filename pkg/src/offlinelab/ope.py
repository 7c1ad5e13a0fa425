"""Off-policy evaluation and optimization, plus robust value and occupancy bounds."""
from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .estimation import EstimatedModel, accumulate_counts, build_model
from .mdp import Dataset, Policy, TabularMdp, exact_value

VI_TOL = 1e-10
VI_MAX_ITER = 1_000_000


class ConvergenceError(RuntimeError):
    pass


class SupportError(ValueError):
    """A logged action has zero behavior probability but positive target probability."""


@dataclass
class ValueInterval:
    lower: float
    upper: float
    radii: np.ndarray
    delta: float | None = None

    def contains(self, value: float, tol: float = 1e-9) -> bool:
        return self.lower - tol <= value <= self.upper + tol


@dataclass
class DeltaMdpPair:
    upper: TabularMdp
    lower: TabularMdp
    delta_pairs: list[tuple[int, int]]  # Delta state index (offset by S-1) -> origin pair

    def extend_policy(self, policy: Policy) -> Policy:
        """Lift a policy on the original states to the augmented state space."""
        n = policy.probs.shape[0] - 1
        A = policy.probs.shape[1]
        probs = np.vstack([policy.probs[:n], np.full((len(self.delta_pairs) + 1, A), 1.0 / A)])
        return Policy(probs)


def model_based_evaluate(
    dataset: Dataset,
    target_policy: Policy,
    gamma: float,
    rewards: np.ndarray,
    mode: str = "renormalized",
    initial_state: int = 0,
) -> float:
    model = build_model(accumulate_counts(dataset), gamma, rewards, mode, initial_state)
    return float(exact_value(model.mdp, target_policy)[initial_state])


def value_iteration(mdp: TabularMdp, tol: float = VI_TOL, max_iter: int = VI_MAX_ITER) -> np.ndarray:
    """Optimal values on ``mdp``; stops when the sup-norm change is at most ``tol``."""
    P, r = mdp.transitions, mdp.rewards
    v = np.zeros(mdp.num_states)
    for _ in range(max_iter):
        new = (r + P @ v).max(axis=1)
        new[-1] = 0.0
        if np.max(np.abs(new - v)) <= tol:
            return new
        v = new
    raise ConvergenceError("value iteration did not converge")


def greedy_policy(mdp: TabularMdp, v: np.ndarray) -> Policy:
    q = mdp.rewards + mdp.transitions @ v
    return Policy.deterministic(q.argmax(axis=1), mdp.num_actions)


def model_based_optimize(
    dataset: Dataset,
    gamma: float,
    rewards: np.ndarray,
    mode: str = "renormalized",
    initial_state: int = 0,
) -> tuple[Policy, float]:
    """Optimal deterministic policy for the estimated model, with its estimated value at ``s0``.

    No pessimism is applied.
    """
    model = build_model(accumulate_counts(dataset), gamma, rewards, mode, initial_state)
    v = value_iteration(model.mdp)
    pi = greedy_policy(model.mdp, v)
    return pi, float(exact_value(model.mdp, pi)[initial_state])


def best_deterministic_value(mdp: TabularMdp) -> tuple[float, tuple[int, ...]]:
    """Exhaustive search over deterministic policies; only viable for tiny MDPs."""
    n = mdp.num_states - 1
    best, arg = -np.inf, ()
    for acts in itertools.product(range(mdp.num_actions), repeat=n):
        pi = Policy.deterministic(list(acts) + [0], mdp.num_actions)
        v = exact_value(mdp, pi)[mdp.initial_state]
        if v > best:
            best, arg = v, acts
    return float(best), arg


def path_weights(dataset: Dataset, target_policy: Policy, behavior_policy: Policy) -> np.ndarray:
    """Per-path likelihood ratio; transition factors cancel so only policy ratios remain."""
    pt = target_policy.probs[dataset.states, dataset.actions]
    pb = behavior_policy.probs[dataset.states, dataset.actions]
    bad = (pb == 0) & (pt > 0)
    if np.any(bad):
        i = int(np.argmax(bad))
        raise SupportError(
            f"behavior probability is zero for logged action {dataset.actions[i]} at state {dataset.states[i]}"
        )
    ratio = np.divide(pt, pb, out=np.zeros_like(pt), where=pb > 0)
    if dataset.n_paths == 0:
        return np.zeros(0)
    return np.multiply.reduceat(ratio, dataset.path_starts[:-1])


def path_returns(dataset: Dataset) -> np.ndarray:
    if dataset.n_paths == 0:
        return np.zeros(0)
    return np.add.reduceat(dataset.rewards, dataset.path_starts[:-1])


def importance_sampling_evaluate(dataset: Dataset, target_policy: Policy, behavior_policy: Policy) -> float:
    if dataset.n_paths == 0:
        raise ValueError("importance sampling needs at least one path")
    w = path_weights(dataset, target_policy, behavior_policy)
    return float(np.mean(w * path_returns(dataset)))


def is_second_moment_rate(mdp: TabularMdp, target_policy: Policy, behavior_policy: Policy) -> float:
    """Spectral radius governing growth of the squared importance weight.

    The weighted return has finite variance exactly when this is below 1;
    at or above 1 the sample mean of IS estimates converges too slowly for a
    standard-error check to mean anything.
    """
    n = mdp.num_states - 1
    pt, pb = target_policy.probs[:n], behavior_policy.probs[:n]
    if np.any((pb == 0) & (pt > 0)):
        return float("inf")
    sq = np.divide(pt**2, pb, out=np.zeros_like(pt), where=pb > 0)
    M = np.einsum("sa,saq->sq", sq, mdp.transitions[:n, :, :n])
    return float(np.max(np.abs(np.linalg.eigvals(M))))


def construct_delta_mdps(
    P_a: np.ndarray, P_b: np.ndarray, gamma: float, rewards: np.ndarray, initial_state: int = 0
) -> DeltaMdpPair:
    """Optimistic/pessimistic MDPs that sandwich the values of both kernels.

    Each non-absorbing pair keeps the common mass ``min(P_a, P_b)`` and sends
    the disagreement mass ``sum|P_a - P_b| / 2`` to its own sink state, which
    self-loops with probability ``gamma`` and pays reward 1 (upper) or 0
    (lower).  Sink states sit between the original states and the absorbing
    state, which stays last.
    """
    P_a = np.asarray(P_a, dtype=float)
    P_b = np.asarray(P_b, dtype=float)
    S, A, _ = P_a.shape
    end = S - 1
    if not np.allclose(P_a[:end, :, end], P_b[:end, :, end], atol=1e-12, rtol=0):
        raise ValueError("kernels disagree on the leak into the absorbing state")
    pairs = [(s, a) for s in range(end) for a in range(A)]
    n_aug = end + len(pairs) + 1
    new_end = n_aug - 1
    P = np.zeros((n_aug, A, n_aug))
    common = np.minimum(P_a[:end], P_b[:end])
    P[:end, :, :end] = common[:, :, :end]
    P[:end, :, new_end] = common[:, :, end]
    gap = np.abs(P_a[:end] - P_b[:end]).sum(axis=2) / 2.0
    for k, (s, a) in enumerate(pairs):
        P[s, a, end + k] = gap[s, a]
        P[end + k, :, end + k] = gamma
        P[end + k, :, new_end] = 1.0 - gamma
    P[new_end, :, new_end] = 1.0
    r_hi = np.zeros((n_aug, A))
    r_hi[:end] = rewards[:end]
    r_lo = r_hi.copy()
    r_hi[end:new_end] = 1.0
    return DeltaMdpPair(
        TabularMdp(gamma, P, r_hi, initial_state),
        TabularMdp(gamma, P.copy(), r_lo, initial_state),
        pairs,
    )


def _robust_rows(P_sub: np.ndarray, half_radius: np.ndarray, V: np.ndarray, upper: bool) -> np.ndarray:
    """Worst/best successor distributions inside per-row L1 balls.

    ``P_sub`` has shape (R, n) (non-absorbing part of each row, mass gamma),
    ``half_radius`` shape (R,), ``V`` shape (K, n).  Returns (K, R, n): for
    each value vector, mass ``half_radius`` (as far as available) is moved
    from the lowest-value successors onto the single highest-value one, or
    the reverse when ``upper`` is False.
    """
    order = np.argsort(V if upper else -V, axis=1, kind="stable")  # ascending "worse first"
    K = V.shape[0]
    Ps = np.take_along_axis(np.broadcast_to(P_sub, (K,) + P_sub.shape), order[:, None, :], axis=2)
    best = Ps[:, :, -1]
    move = np.minimum(half_radius[None, :], Ps[:, :, :-1].sum(axis=2))
    cum_before = np.cumsum(Ps, axis=2) - Ps
    removed = np.clip(move[:, :, None] - cum_before, 0.0, Ps)
    removed[:, :, -1] = 0.0
    new = Ps - removed
    new[:, :, -1] = best + move
    out = np.empty_like(new)
    np.put_along_axis(out, order[:, None, :], new, axis=2)
    return out


def robust_policy_values(
    mdp: TabularMdp,
    policy: Policy,
    radii: np.ndarray,
    reward_sets: np.ndarray,
    upper: bool,
    tol: float = VI_TOL,
    max_iter: int = VI_MAX_ITER,
) -> np.ndarray:
    """Robust policy evaluation over rectangular L1 sets around ``mdp``'s kernel.

    ``reward_sets`` has shape (K, S, A); returns values of shape (K, S).  The
    leak to the absorbing state is never perturbed, so the ball acts on the
    non-absorbing sub-row only.
    """
    n = mdp.num_states - 1
    A = mdp.num_actions
    gamma = mdp.gamma
    P_sub = mdp.transitions[:n, :, :n].reshape(n * A, n)
    half = np.clip(np.asarray(radii, dtype=float)[:n].reshape(n * A), 0.0, 2.0 * gamma) / 2.0
    pi = policy.probs[:n]
    R = np.asarray(reward_sets, dtype=float)[:, :n, :]
    K = R.shape[0]
    V = np.zeros((K, n))
    for _ in range(max_iter):
        rows = _robust_rows(P_sub, half, V, upper)  # (K, nA, n)
        cont = np.einsum("krn,kn->kr", rows, V).reshape(K, n, A)
        new = np.einsum("sa,ksa->ks", pi, R + cont)
        if np.max(np.abs(new - V)) <= tol:
            out = np.zeros((K, mdp.num_states))
            out[:, :n] = new
            return out
        V = new
    raise ConvergenceError(f"robust value iteration did not converge in {max_iter} iterations")


def value_interval_from_radii(
    model: EstimatedModel | TabularMdp,
    target_policy: Policy,
    radii: np.ndarray,
    delta: float | None = None,
) -> ValueInterval:
    """Pessimistic and optimistic values of ``target_policy`` over the L1 uncertainty set.

    If every true row lies within its radius of the estimate, the true value
    at ``s0`` lies in the returned interval.  Radii above ``2 gamma`` are
    clipped.
    """
    mdp = model.mdp if isinstance(model, EstimatedModel) else model
    radii = np.asarray(radii, dtype=float)
    if np.any(radii < 0):
        raise ValueError("radii must be nonnegative")
    radii = np.minimum(radii, 2.0 * mdp.gamma)
    R = mdp.rewards[None]
    lo = robust_policy_values(mdp, target_policy, radii, R, upper=False)[0, mdp.initial_state]
    hi = robust_policy_values(mdp, target_policy, radii, R, upper=True)[0, mdp.initial_state]
    return ValueInterval(float(lo), float(hi), radii, delta)


def robust_occupancy_upper(model: EstimatedModel | TabularMdp, target_policy: Policy, radii: np.ndarray) -> np.ndarray:
    """Largest occupancy of each pair over the uncertainty set (indicator-reward robust values)."""
    mdp = model.mdp if isinstance(model, EstimatedModel) else model
    n = mdp.num_states - 1
    A = mdp.num_actions
    R = np.zeros((n * A, mdp.num_states, A))
    R[np.arange(n * A), np.repeat(np.arange(n), A), np.tile(np.arange(A), n)] = 1.0
    v = robust_policy_values(mdp, target_policy, radii, R, upper=True)
    x = np.zeros((mdp.num_states, A))
    x[:n] = v[:, mdp.initial_state].reshape(n, A)
    return x
