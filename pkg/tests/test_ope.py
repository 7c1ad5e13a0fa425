import itertools

import numpy as np
import pytest
from scipy import optimize

from offlinelab.estimation import TransitionCounts, accumulate_counts, build_model
from offlinelab.mdp import (
    Dataset,
    Policy,
    SamplePath,
    TabularMdp,
    exact_occupancy,
    exact_value,
    make_figure1_mdp,
    random_mdp,
    random_policy,
    sample_paths,
    single_state_mdp,
)
from offlinelab.ope import (
    SupportError,
    _robust_rows,
    best_deterministic_value,
    construct_delta_mdps,
    greedy_policy,
    importance_sampling_evaluate,
    is_second_moment_rate,
    model_based_evaluate,
    model_based_optimize,
    path_weights,
    robust_occupancy_upper,
    robust_policy_values,
    value_interval_from_radii,
    value_iteration,
)


def figure1_two_actions(sigma, gamma):
    """Figure-1 chain where action 1 at s0 swaps the stay and move probabilities."""
    P = np.zeros((3, 2, 3))
    P[0, 0] = [gamma - sigma, sigma, 1 - gamma]
    P[0, 1] = [sigma, gamma - sigma, 1 - gamma]
    P[1, :] = [0.0, gamma, 1 - gamma]
    P[2, :, 2] = 1.0
    r = np.array([[0.0, 0.0], [1.0, 1.0], [0.0, 0.0]])
    return TabularMdp(gamma, P, r)


def perturb(mdp, rng, t):
    """Mix each non-absorbing sub-row with a random one of the same mass."""
    n = mdp.num_states - 1
    Q = rng.dirichlet(np.ones(n), size=(n, mdp.num_actions)) * mdp.gamma
    P = mdp.transitions.copy()
    P[:n, :, :n] = (1 - t) * P[:n, :, :n] + t * Q
    return mdp.with_transitions(P)


def test_exact_frequencies_recover_value():
    mdp = make_figure1_mdp(0.3, 0.9)
    n = np.zeros((3, 1, 3), int)
    n[0, 0] = [6, 3, 1]
    n[1, 0] = [0, 9, 1]
    model = build_model(TransitionCounts(n), 0.9, mdp.rewards)
    pi = Policy.uniform(3, 1)
    assert exact_value(model.mdp, pi)[0] == pytest.approx(exact_value(mdp, pi)[0], abs=1e-9)


def test_empty_dataset_value():
    mdp = single_state_mdp(0.9)
    v = model_based_evaluate(Dataset.empty(2, 1), Policy.uniform(2, 1), 0.9, mdp.rewards)
    assert v == pytest.approx(10.0)


def test_model_based_accuracy(fig1):
    pi = Policy.uniform(3, 1)
    v = exact_value(fig1, pi)[0]
    r = np.random.default_rng(11)
    hits = 0
    for _ in range(200):
        data = sample_paths(fig1, pi, 10_000, r)
        hits += abs(model_based_evaluate(data, pi, 0.9, fig1.rewards) - v) <= 0.05
    assert hits >= 190


def test_optimize_dominating_action():
    mdp = single_state_mdp(0.9, num_actions=2, rewards=[0.2, 0.8])
    n = np.zeros((2, 2, 2), int)
    n[0, :, 0] = 9
    n[0, :, 1] = 1
    model = build_model(TransitionCounts(n), 0.9, mdp.rewards)
    pi = greedy_policy(model.mdp, value_iteration(model.mdp))
    assert pi.probs[0, 1] == 1.0


def test_optimize_empty_dataset_greedy_on_reward():
    r = np.array([[0.1, 0.9], [0.7, 0.3], [0.0, 0.0]])
    pi, v = model_based_optimize(Dataset.empty(3, 2), 0.9, r)
    assert list(pi.probs[:2].argmax(axis=1)) == [1, 0]
    assert v == pytest.approx(9.0)


@pytest.mark.parametrize("seed", range(5))
def test_optimize_matches_enumeration(seed):
    r = np.random.default_rng(seed)
    mdp = random_mdp(4, 2, 0.9, r)
    data = sample_paths(mdp, Policy.uniform(4, 2), 300, r)
    pi, v = model_based_optimize(data, 0.9, mdp.rewards)
    model = build_model(accumulate_counts(data), 0.9, mdp.rewards)
    best, _ = best_deterministic_value(model.mdp)
    assert v == pytest.approx(best, abs=1e-8)


def test_value_iteration_matches_enumeration(rng):
    mdp = random_mdp(4, 3, 0.8, rng)
    best, acts = best_deterministic_value(mdp)
    assert value_iteration(mdp)[0] == pytest.approx(best, abs=1e-8)


def test_is_on_policy_is_plain_average(rng, fig1):
    pi = Policy.uniform(3, 1)
    data = sample_paths(fig1, pi, 500, rng)
    ret = np.add.reduceat(data.rewards, data.path_starts[:-1])
    assert importance_sampling_evaluate(data, pi, pi) == pytest.approx(ret.mean())


def test_is_zero_reward_path():
    data = Dataset.from_paths([SamplePath([(0, 0, 0.0), (0, 1, 0.0)])], 2, 2)
    pi = Policy.uniform(2, 2)
    assert importance_sampling_evaluate(data, pi, pi) == 0.0


def test_is_support_error():
    data = Dataset.from_paths([SamplePath([(0, 1, 1.0)])], 2, 2)
    target = Policy([[0.0, 1.0], [0.5, 0.5]])
    behavior = Policy([[1.0, 0.0], [0.5, 0.5]])
    with pytest.raises(SupportError):
        path_weights(data, target, behavior)


def test_is_unbiased_figure1():
    # 2 * gamma < 1 keeps the weights' variance finite, so a 3 SE check is meaningful
    mdp = figure1_two_actions(0.3, 0.45)
    target = Policy.deterministic([0, 0, 0], 2)
    behavior = Policy.uniform(3, 2)
    assert is_second_moment_rate(mdp, target, behavior) < 1
    r = np.random.default_rng(5)
    est = np.array([importance_sampling_evaluate(sample_paths(mdp, behavior, 100, r), target, behavior)
                    for _ in range(2000)])
    v = exact_value(mdp, target)[0]
    assert abs(est.mean() - v) <= 3 * est.std(ddof=1) / np.sqrt(est.size)


def test_second_moment_rate_threshold():
    mdp = single_state_mdp(0.3, num_actions=3)
    target = Policy.deterministic([0, 0], 3)
    behavior = Policy.uniform(2, 3)
    assert is_second_moment_rate(mdp, target, behavior) == pytest.approx(0.9)
    assert is_second_moment_rate(single_state_mdp(0.95, 3), target, behavior) == pytest.approx(2.85)


def test_delta_mdps_equal_kernels(rng):
    mdp = random_mdp(4, 2, 0.9, rng)
    pair = construct_delta_mdps(mdp.transitions, mdp.transitions, 0.9, mdp.rewards)
    pi = random_policy(4, 2, rng)
    ext = pair.extend_policy(pi)
    v = exact_value(mdp, pi)[0]
    assert exact_value(pair.upper, ext)[0] == pytest.approx(v, abs=1e-10)
    assert exact_value(pair.lower, ext)[0] == pytest.approx(v, abs=1e-10)


@pytest.mark.parametrize("seed", range(10))
def test_delta_sandwich(seed):
    r = np.random.default_rng(seed)
    mdp = random_mdp(4, 2, 0.9, r)
    other = perturb(mdp, r, r.uniform(0, 1))
    pair = construct_delta_mdps(mdp.transitions, other.transitions, 0.9, mdp.rewards)
    pi = random_policy(4, 2, r)
    ext = pair.extend_policy(pi)
    va, vb = exact_value(mdp, pi)[0], exact_value(other, pi)[0]
    lo, hi = exact_value(pair.lower, ext)[0], exact_value(pair.upper, ext)[0]
    assert lo <= min(va, vb) + 1e-10
    assert max(va, vb) <= hi + 1e-10


def test_delta_tv_gap_bound():
    mdp = make_figure1_mdp(0.3, 0.9)
    P = mdp.transitions.copy()
    P[0, 0] = [0.5, 0.4, 0.1]  # total variation 0.1 at (s0, a)
    pair = construct_delta_mdps(mdp.transitions, P, 0.9, mdp.rewards)
    pi = Policy.uniform(3, 1)
    ext = pair.extend_policy(pi)
    x = exact_occupancy(mdp, pi).x[0, 0]
    gap = exact_value(pair.upper, ext)[0] - exact_value(pair.lower, ext)[0]
    assert gap <= 0.1 * x / (1 - 0.9) + 1e-10


def test_delta_leak_mismatch():
    a = make_figure1_mdp(0.3, 0.9).transitions
    b = a.copy()
    b[0, 0] = [0.5, 0.3, 0.2]
    with pytest.raises(ValueError):
        construct_delta_mdps(a, b, 0.9, np.zeros((3, 1)))


def _lp_row(p, half, v, upper):
    """Brute-force inner problem: optimise q.v over |q - p|_1 <= 2 half, q >= 0, sum q = sum p."""
    n = p.size
    # variables q (n) and t (n) with t >= |q - p|
    c = np.concatenate([-v if upper else v, np.zeros(n)])
    A_ub = np.block([[np.eye(n), -np.eye(n)], [-np.eye(n), -np.eye(n)], [np.zeros((1, n)), np.ones((1, n))]])
    b_ub = np.concatenate([p, -p, [2 * half]])
    A_eq = np.concatenate([np.ones(n), np.zeros(n)])[None]
    res = optimize.linprog(c, A_ub=A_ub, b_ub=b_ub, A_eq=A_eq, b_eq=[p.sum()], bounds=[(0, None)] * (2 * n))
    return res.x[:n] @ v


@pytest.mark.parametrize("seed", range(8))
def test_robust_rows_match_lp(seed):
    r = np.random.default_rng(seed)
    n = 5
    p = r.dirichlet(np.ones(n)) * 0.9
    v = r.normal(size=n)
    half = r.uniform(0, 0.6)
    for upper in (True, False):
        row = _robust_rows(p[None], np.array([half]), v[None], upper)[0, 0]
        assert row.sum() == pytest.approx(p.sum())
        assert np.all(row >= -1e-15)
        assert np.abs(row - p).sum() <= 2 * half + 1e-12
        assert row @ v == pytest.approx(_lp_row(p, half, v, upper), abs=1e-7)


def test_interval_zero_radii(rng):
    mdp = random_mdp(4, 2, 0.9, rng)
    pi = random_policy(4, 2, rng)
    iv = value_interval_from_radii(mdp, pi, np.zeros((4, 2)))
    v = exact_value(mdp, pi)[0]
    assert iv.lower == pytest.approx(v, abs=1e-8) and iv.upper == pytest.approx(v, abs=1e-8)


def test_interval_vacuous_radii(rng):
    mdp = random_mdp(4, 2, 0.9, rng)
    pi = random_policy(4, 2, rng)
    iv = value_interval_from_radii(mdp, pi, np.full((4, 2), 5.0))
    assert -1e-9 <= iv.lower and iv.upper <= 10 + 1e-9
    for _ in range(5):
        other = perturb(mdp, rng, 1.0)
        assert iv.contains(exact_value(other, pi)[0])


def test_interval_negative_radii(rng):
    mdp = random_mdp(3, 2, 0.9, rng)
    with pytest.raises(ValueError):
        value_interval_from_radii(mdp, Policy.uniform(3, 2), -np.ones((3, 2)))


@pytest.mark.parametrize("seed", range(10))
def test_interval_contains_truth_when_radii_cover(seed):
    r = np.random.default_rng(seed)
    mdp = random_mdp(4, 2, 0.9, r)
    est = perturb(mdp, r, r.uniform(0, 0.3))
    radii = np.abs(est.transitions - mdp.transitions).sum(axis=2)
    pi = random_policy(4, 2, r)
    iv = value_interval_from_radii(est, pi, radii)
    assert iv.contains(exact_value(mdp, pi)[0])
    assert iv.contains(exact_value(est, pi)[0])
    xu = robust_occupancy_upper(est, pi, radii)
    assert np.all(exact_occupancy(mdp, pi).x[:-1] <= xu[:-1] + 1e-8)


def test_robust_occupancy_zero_radii(rng):
    mdp = random_mdp(4, 2, 0.9, rng)
    pi = random_policy(4, 2, rng)
    x = exact_occupancy(mdp, pi).x
    np.testing.assert_allclose(robust_occupancy_upper(mdp, pi, np.zeros((4, 2)))[:-1], x[:-1], atol=1e-8)


def test_robust_values_batch_consistent(rng):
    mdp = random_mdp(4, 2, 0.9, rng)
    pi = random_policy(4, 2, rng)
    radii = rng.uniform(0, 0.5, size=(4, 2))
    R = rng.uniform(size=(3, 4, 2))
    batch = robust_policy_values(mdp, pi, radii, R, upper=True)
    for k in range(3):
        single = robust_policy_values(mdp, pi, radii, R[k:k + 1], upper=True)[0]
        np.testing.assert_allclose(batch[k], single, atol=1e-9)


def test_robust_upper_is_optimal_over_sampled_kernels(rng):
    mdp = random_mdp(3, 2, 0.9, rng)
    pi = random_policy(3, 2, rng)
    radii = np.full((3, 2), 0.2)
    iv = value_interval_from_radii(mdp, pi, radii)
    n = 2
    for _ in range(200):
        P = mdp.transitions.copy()
        for s, a in itertools.product(range(n), range(2)):
            d = rng.normal(size=n)
            d -= d.mean()
            d *= 0.1 / np.abs(d).sum()
            row = P[s, a, :n] + d
            if np.all(row >= 0):
                P[s, a, :n] = row
        assert iv.contains(exact_value(mdp.with_transitions(P), pi)[0])
