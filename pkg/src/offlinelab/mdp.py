"""Tabular MDPs with an absorbing final state, path sampling and exact solvers.

Discounting is encoded as termination: every non-absorbing state leaks to the
absorbing state with probability ``1 - gamma`` under every action, so values
are undiscounted expected totals over finite paths.  By convention the
absorbing state is the last index.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Iterator

import numpy as np

ROW_TOL = 1e-12
SOLVE_TOL = 1e-10


class SolverError(RuntimeError):
    """A linear solve missed its residual tolerance."""


@dataclass
class TabularMdp:
    gamma: float
    transitions: np.ndarray  # (S, A, S)
    rewards: np.ndarray  # (S, A) mean rewards in [0, 1]
    initial_state: int = 0

    def __post_init__(self):
        self.transitions = np.asarray(self.transitions, dtype=float)
        self.rewards = np.asarray(self.rewards, dtype=float)
        if self.transitions.ndim != 3 or self.transitions.shape[0] != self.transitions.shape[2]:
            raise ValueError(f"transitions must have shape (S, A, S), got {self.transitions.shape}")
        if self.rewards.shape != self.transitions.shape[:2]:
            raise ValueError(f"rewards shape {self.rewards.shape} does not match transitions")

    @property
    def num_states(self) -> int:
        return self.transitions.shape[0]

    @property
    def num_actions(self) -> int:
        return self.transitions.shape[1]

    @property
    def absorbing_state(self) -> int:
        return self.num_states - 1

    @property
    def nonabsorbing(self) -> np.ndarray:
        return np.arange(self.num_states - 1)

    def with_transitions(self, transitions: np.ndarray) -> "TabularMdp":
        return TabularMdp(self.gamma, transitions, self.rewards.copy(), self.initial_state)


@dataclass
class Policy:
    probs: np.ndarray  # (S, A)

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=float)
        if self.probs.ndim != 2:
            raise ValueError("policy probabilities must be an (S, A) matrix")
        if np.any(self.probs < 0) or np.any(np.abs(self.probs.sum(axis=1) - 1.0) > ROW_TOL):
            raise ValueError("policy rows must be nonnegative and sum to 1")

    @classmethod
    def uniform(cls, num_states: int, num_actions: int) -> "Policy":
        return cls(np.full((num_states, num_actions), 1.0 / num_actions))

    @classmethod
    def deterministic(cls, actions: Iterable[int], num_actions: int) -> "Policy":
        actions = np.asarray(list(actions), dtype=int)
        probs = np.zeros((actions.size, num_actions))
        probs[np.arange(actions.size), actions] = 1.0
        return cls(probs)


@dataclass
class SamplePath:
    """One episode: ``(state, action, reward)`` steps, the last of which moved into the absorbing state."""

    steps: list[tuple[int, int, float]]
    terminal: bool = True

    def __len__(self) -> int:
        return len(self.steps)


@dataclass
class Dataset:
    """Logged paths stored as flat step arrays; ``path_starts`` has ``n_paths + 1`` offsets."""

    num_states: int
    num_actions: int
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    path_starts: np.ndarray

    @property
    def absorbing_state(self) -> int:
        return self.num_states - 1

    @property
    def n_paths(self) -> int:
        return self.path_starts.size - 1

    @property
    def n_steps(self) -> int:
        return self.states.size

    @property
    def path_lengths(self) -> np.ndarray:
        return np.diff(self.path_starts)

    @property
    def path_ids(self) -> np.ndarray:
        return np.repeat(np.arange(self.n_paths), self.path_lengths)

    @property
    def next_states(self) -> np.ndarray:
        nxt = np.empty_like(self.states)
        nxt[:-1] = self.states[1:]
        ends = self.path_starts[1:] - 1
        nxt[ends] = self.absorbing_state
        return nxt

    def path(self, i: int) -> SamplePath:
        lo, hi = self.path_starts[i], self.path_starts[i + 1]
        steps = [
            (int(s), int(a), float(r))
            for s, a, r in zip(self.states[lo:hi], self.actions[lo:hi], self.rewards[lo:hi])
        ]
        return SamplePath(steps)

    def __iter__(self) -> Iterator[SamplePath]:
        return (self.path(i) for i in range(self.n_paths))

    def __len__(self) -> int:
        return self.n_paths

    def head(self, n_paths: int) -> "Dataset":
        """The first ``n_paths`` paths (a nested prefix of this dataset)."""
        n_paths = min(n_paths, self.n_paths)
        end = self.path_starts[n_paths]
        return Dataset(
            self.num_states,
            self.num_actions,
            self.states[:end],
            self.actions[:end],
            self.rewards[:end],
            self.path_starts[: n_paths + 1].copy(),
        )

    def concat(self, other: "Dataset") -> "Dataset":
        if (self.num_states, self.num_actions) != (other.num_states, other.num_actions):
            raise ValueError("datasets come from different state/action spaces")
        return Dataset(
            self.num_states,
            self.num_actions,
            np.concatenate([self.states, other.states]),
            np.concatenate([self.actions, other.actions]),
            np.concatenate([self.rewards, other.rewards]),
            np.concatenate([self.path_starts, other.path_starts[1:] + self.n_steps]),
        )

    @classmethod
    def empty(cls, num_states: int, num_actions: int) -> "Dataset":
        z = np.zeros(0, dtype=np.int64)
        return cls(num_states, num_actions, z, z.copy(), np.zeros(0), np.zeros(1, dtype=np.int64))

    @classmethod
    def from_paths(cls, paths: Iterable[SamplePath], num_states: int, num_actions: int) -> "Dataset":
        states, actions, rewards, starts = [], [], [], [0]
        for p in paths:
            for s, a, r in p.steps:
                if not (0 <= s < num_states - 1 and 0 <= a < num_actions):
                    raise ValueError(f"step ({s}, {a}) outside the non-absorbing state/action space")
                states.append(s)
                actions.append(a)
                rewards.append(r)
            starts.append(len(states))
        return cls(
            num_states,
            num_actions,
            np.asarray(states, dtype=np.int64),
            np.asarray(actions, dtype=np.int64),
            np.asarray(rewards, dtype=float),
            np.asarray(starts, dtype=np.int64),
        )


@dataclass
class OccupancyStats:
    x: np.ndarray
    rho: np.ndarray | None = None
    lam: np.ndarray | None = field(default=None)


def validate_mdp(mdp: TabularMdp) -> list[str]:
    """Return the list of violated structural invariants (empty when the MDP is valid)."""
    problems = []
    P, r, g = mdp.transitions, mdp.rewards, mdp.gamma
    end = mdp.absorbing_state
    if not 0.0 < g <= 1.0:
        problems.append(f"gamma {g} outside (0, 1]")
    if not 0 <= mdp.initial_state < end:
        problems.append(f"initial state {mdp.initial_state} must be a non-absorbing state")
    if np.any(P < 0):
        problems.append("negative transition probability")
    sums = P.sum(axis=2)
    for s, a in zip(*np.nonzero(np.abs(sums - 1.0) > ROW_TOL)):
        problems.append(f"row not stochastic at ({s},{a}): sums to {sums[s, a]:.15g}")
    for s in range(end):
        for a in range(mdp.num_actions):
            if abs(P[s, a, end] - (1.0 - g)) > ROW_TOL:
                problems.append(f"leak != 1-gamma at ({s},{a}): {P[s, a, end]:.15g}")
    if np.any(np.abs(P[end, :, end] - 1.0) > ROW_TOL):
        problems.append("absorbing state does not self-loop")
    if np.any(r[end] != 0):
        problems.append("absorbing state has nonzero reward")
    if np.any(r < 0) or np.any(r > 1):
        problems.append("mean rewards outside [0, 1]")
    return problems


def check_mdp(mdp: TabularMdp) -> TabularMdp:
    problems = validate_mdp(mdp)
    if problems:
        raise ValueError("invalid MDP: " + "; ".join(problems))
    return mdp


def sample_paths(mdp: TabularMdp, policy: Policy, n_paths: int, rng: np.random.Generator) -> Dataset:
    """Sample ``n_paths`` independent paths from ``s0`` until absorption.

    All active paths advance one step per iteration, so the random draws for a
    given ``rng`` state are fixed regardless of how the result is consumed.
    """
    if mdp.gamma >= 1.0:
        raise ValueError("sampling requires gamma < 1 (paths would not terminate)")
    S, A = mdp.num_states, mdp.num_actions
    end = mdp.absorbing_state
    cum_pi = np.cumsum(policy.probs, axis=1)
    cum_pi[:, -1] = 1.0
    cum_P = np.cumsum(mdp.transitions, axis=2)
    cum_P[:, :, -1] = 1.0

    state = np.full(n_paths, mdp.initial_state, dtype=np.int64)
    active = np.arange(n_paths, dtype=np.int64)
    rec_pid, rec_s, rec_a = [], [], []
    while active.size:
        s = state[active]
        a = (rng.random(active.size)[:, None] >= cum_pi[s]).sum(axis=1)
        nxt = (rng.random(active.size)[:, None] >= cum_P[s, a]).sum(axis=1)
        rec_pid.append(active)
        rec_s.append(s)
        rec_a.append(a)
        state[active] = nxt
        active = active[nxt != end]

    if not rec_pid:
        return Dataset.empty(S, A)
    pid = np.concatenate(rec_pid)
    order = np.argsort(pid, kind="stable")
    states = np.concatenate(rec_s)[order]
    actions = np.concatenate(rec_a)[order]
    starts = np.zeros(n_paths + 1, dtype=np.int64)
    starts[1:] = np.cumsum(np.bincount(pid, minlength=n_paths))
    return Dataset(S, A, states, actions, mdp.rewards[states, actions], starts)


def sample_path(mdp: TabularMdp, policy: Policy, rng: np.random.Generator) -> SamplePath:
    return sample_paths(mdp, policy, 1, rng).path(0)


def _solve(M: np.ndarray, b: np.ndarray) -> np.ndarray:
    x = np.linalg.solve(M, b)
    resid = np.max(np.abs(M @ x - b)) if b.size else 0.0
    if not np.isfinite(resid) or resid > SOLVE_TOL:
        raise SolverError(f"linear solve residual {resid:.3g} exceeds {SOLVE_TOL}")
    return x


def _policy_matrix(mdp: TabularMdp, policy: Policy) -> tuple[np.ndarray, np.ndarray]:
    """State-to-state kernel and expected reward under ``policy``, restricted to non-absorbing states."""
    n = mdp.num_states - 1
    pi = policy.probs[:n]
    P_pi = np.einsum("sa,saq->sq", pi, mdp.transitions[:n, :, :n])
    r_pi = np.einsum("sa,sa->s", pi, mdp.rewards[:n])
    return P_pi, r_pi


def exact_value(mdp: TabularMdp, policy: Policy) -> np.ndarray:
    """Solve ``(I - P_pi) v = r_pi`` over non-absorbing states; ``v(s_end) = 0``."""
    P_pi, r_pi = _policy_matrix(mdp, policy)
    v = np.zeros(mdp.num_states)
    v[:-1] = _solve(np.eye(P_pi.shape[0]) - P_pi, r_pi)
    return v


def exact_occupancy(mdp: TabularMdp, policy: Policy) -> OccupancyStats:
    """Expected visit counts ``x(s, a)`` from ``s0`` (zero at the absorbing state)."""
    P_pi, _ = _policy_matrix(mdp, policy)
    n = P_pi.shape[0]
    e0 = np.zeros(n)
    e0[mdp.initial_state] = 1.0
    mu = _solve(np.eye(n) - P_pi.T, e0)
    x = np.zeros((mdp.num_states, mdp.num_actions))
    x[:-1] = mu[:, None] * policy.probs[:-1]
    return OccupancyStats(x=x)


def _hitting(mdp: TabularMdp, policy: Policy, s: int, a: int) -> np.ndarray:
    """Probability, from each non-absorbing state, of eventually taking ``(s, a)``."""
    if s == mdp.absorbing_state:
        raise ValueError("the absorbing state has no first-visit probability")
    P_pi, _ = _policy_matrix(mdp, policy)
    n = P_pi.shape[0]
    M = P_pi.copy()
    M[s] -= policy.probs[s, a] * mdp.transitions[s, a, :n]
    c = np.zeros(n)
    c[s] = policy.probs[s, a]
    return _solve(np.eye(n) - M, c)


def first_visit_prob(mdp: TabularMdp, policy: Policy, s: int, a: int) -> float:
    return float(_hitting(mdp, policy, s, a)[mdp.initial_state])


def return_prob(mdp: TabularMdp, policy: Policy, s: int, a: int) -> float:
    h = _hitting(mdp, policy, s, a)
    return float(mdp.transitions[s, a, :-1] @ h)


def occupancy_stats(mdp: TabularMdp, policy: Policy) -> OccupancyStats:
    """``x``, ``rho`` and ``lam`` for every pair, each from its own linear system."""
    stats = exact_occupancy(mdp, policy)
    rho = np.zeros_like(stats.x)
    lam = np.zeros_like(stats.x)
    for s in range(mdp.num_states - 1):
        for a in range(mdp.num_actions):
            h = _hitting(mdp, policy, s, a)
            rho[s, a] = h[mdp.initial_state]
            lam[s, a] = mdp.transitions[s, a, :-1] @ h
    stats.rho, stats.lam = rho, lam
    return stats


def make_figure1_mdp(sigma: float, gamma: float, rewards=(0.0, 1.0)) -> TabularMdp:
    """Three states ``{s0, s1, s_end}`` and one action.

    ``s0`` stays with probability ``gamma - sigma`` and moves to ``s1`` with
    probability ``sigma``; ``s1`` self-loops with probability ``gamma``.
    ``gamma = 1`` is accepted for analytic use only.
    """
    if not (0.0 <= sigma <= gamma <= 1.0) or gamma <= 0.0:
        raise ValueError(f"need 0 <= sigma <= gamma <= 1 and gamma > 0, got sigma={sigma}, gamma={gamma}")
    P = np.zeros((3, 1, 3))
    P[0, 0] = [gamma - sigma, sigma, 1.0 - gamma]
    P[1, 0] = [0.0, gamma, 1.0 - gamma]
    P[2, 0, 2] = 1.0
    r = np.array([[rewards[0]], [rewards[1]], [0.0]])
    return TabularMdp(gamma, P, r)


def single_state_mdp(gamma: float, num_actions: int = 1, rewards=None) -> TabularMdp:
    """``{s0, s_end}``: every action self-loops with probability ``gamma``."""
    P = np.zeros((2, num_actions, 2))
    P[0, :, 0] = gamma
    P[0, :, 1] = 1.0 - gamma
    P[1, :, 1] = 1.0
    r = np.zeros((2, num_actions))
    r[0] = 1.0 if rewards is None else rewards
    return TabularMdp(gamma, P, r)


def random_mdp(
    num_states: int,
    num_actions: int,
    gamma: float,
    rng: np.random.Generator,
    concentration: float = 1.0,
) -> TabularMdp:
    """Random MDP: Dirichlet sub-rows over non-absorbing successors scaled to mass ``gamma``, uniform rewards.

    ``num_states`` includes the absorbing state.
    """
    if num_states < 2:
        raise ValueError("need at least one non-absorbing state")
    n = num_states - 1
    P = np.zeros((num_states, num_actions, num_states))
    P[:n, :, :n] = gamma * rng.dirichlet(np.full(n, concentration), size=(n, num_actions))
    P[:n, :, n] = 1.0 - gamma
    P[n, :, n] = 1.0
    # Dirichlet rows can carry float error; fold it into the largest entry
    err = 1.0 - P[:n].sum(axis=2)
    idx = P[:n, :, :n].argmax(axis=2)
    ii, jj = np.meshgrid(np.arange(n), np.arange(num_actions), indexing="ij")
    P[ii, jj, idx] += err
    r = np.zeros((num_states, num_actions))
    r[:n] = rng.random((n, num_actions))
    return TabularMdp(gamma, P, r)


def random_policy(num_states: int, num_actions: int, rng: np.random.Generator, concentration: float = 1.0) -> Policy:
    return Policy(rng.dirichlet(np.full(num_actions, concentration), size=num_states))
