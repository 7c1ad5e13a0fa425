import numpy as np
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from offlinelab import bounds
from offlinelab.estimation import TransitionCounts, build_model, df_categorical, project_scaled_simplex
from offlinelab.mdp import (
    exact_occupancy,
    exact_value,
    occupancy_stats,
    random_mdp,
    random_policy,
    validate_mdp,
)
from offlinelab.ope import (
    _robust_rows,
    best_deterministic_value,
    construct_delta_mdps,
    value_iteration,
)

FAST = settings(max_examples=40, deadline=None, derandomize=True, suppress_health_check=[HealthCheck.too_slow])

seeds = st.integers(0, 2**32 - 1)
gammas = st.floats(0.05, 0.97)


def problem(seed, S, A, gamma):
    r = np.random.default_rng(seed)
    mdp = random_mdp(S, A, gamma, r, concentration=r.uniform(0.2, 2.0))
    return r, mdp, random_policy(S, A, r)


@FAST
@given(seeds, st.integers(2, 6), st.integers(1, 3), gammas)
def test_occupancy_identity(seed, S, A, gamma):
    _, mdp, pi = problem(seed, S, A, gamma)
    stt = occupancy_stats(mdp, pi)
    n = S - 1
    np.testing.assert_allclose(stt.x[:n], stt.rho[:n] / (1 - stt.lam[:n]), rtol=1e-9, atol=1e-12)
    assert np.all(stt.lam[:n] <= gamma + 1e-12)
    np.testing.assert_allclose(stt.x[:n].sum(), 1 / (1 - gamma), rtol=1e-9)


@FAST
@given(seeds, st.integers(2, 6), st.integers(1, 3), gammas)
def test_value_is_occupancy_weighted_reward(seed, S, A, gamma):
    _, mdp, pi = problem(seed, S, A, gamma)
    v = exact_value(mdp, pi)[0]
    x = exact_occupancy(mdp, pi).x
    np.testing.assert_allclose(v, (x * mdp.rewards).sum(), rtol=1e-9)
    assert -1e-12 <= v <= 1 / (1 - gamma) + 1e-9


@FAST
@given(seeds, st.integers(2, 5), st.integers(1, 3), gammas, st.sampled_from(["renormalized", "l2_projected"]))
def test_estimated_model_always_valid(seed, S, A, gamma, mode):
    r = np.random.default_rng(seed)
    n = r.integers(0, 5, size=(S, A, S)) * (r.random((S, A, S)) < 0.6)
    rewards = r.random((S, A))
    rewards[-1] = 0.0
    model = build_model(TransitionCounts(n), gamma, rewards, mode)
    assert validate_mdp(model.mdp) == []


@FAST
@given(st.lists(st.floats(-5, 5), min_size=1, max_size=8), st.floats(0.01, 3.0))
def test_projection_feasible_and_idempotent(v, mass):
    p = project_scaled_simplex(np.array(v), mass)
    assert np.all(p >= 0)
    np.testing.assert_allclose(p.sum(), mass, rtol=1e-9)
    np.testing.assert_allclose(project_scaled_simplex(p, mass), p, atol=1e-9)


@FAST
@given(st.lists(st.integers(0, 50), min_size=1, max_size=6).filter(lambda c: sum(c) > 0))
def test_df_is_distribution(counts):
    est = df_categorical(counts)
    np.testing.assert_allclose(est.probs.sum(), 1.0)
    assert np.all(est.probs >= 0)
    assert est.mode_index == int(np.argmax(counts))


@FAST
@given(seeds, st.integers(2, 5), st.integers(1, 3), gammas, st.floats(0, 1))
def test_delta_sandwich(seed, S, A, gamma, t):
    r, mdp, pi = problem(seed, S, A, gamma)
    other = random_mdp(S, A, gamma, r)
    P = (1 - t) * mdp.transitions + t * other.transitions
    pair = construct_delta_mdps(mdp.transitions, P, gamma, mdp.rewards)
    ext = pair.extend_policy(pi)
    va, vb = exact_value(mdp, pi)[0], exact_value(mdp.with_transitions(P), pi)[0]
    lo, hi = exact_value(pair.lower, ext)[0], exact_value(pair.upper, ext)[0]
    assert lo <= min(va, vb) + 1e-9 and max(va, vb) <= hi + 1e-9


@FAST
@given(seeds, st.integers(2, 5), st.integers(1, 3), gammas,
       st.sampled_from([1e-3, 1e-2]), st.sampled_from([0.0, 0.5, 1.0]))
def test_lemma1_gap_bound(seed, S, A, gamma, alpha, beta):
    r, mdp, pi = problem(seed, S, A, gamma)
    x = exact_occupancy(mdp, pi).x
    n = S - 1
    radius = np.full((S, A), np.inf)
    with np.errstate(divide="ignore"):
        radius[:n] = np.where(x[:n] > 0, alpha / x[:n] ** beta, np.inf)
    Q = random_mdp(S, A, gamma, r).transitions
    dist = np.abs(Q - mdp.transitions).sum(axis=2)
    t = np.minimum(1.0, np.min(np.where(dist[:n] > 0, radius[:n] / np.maximum(dist[:n], 1e-300), np.inf)))
    P = (1 - t) * mdp.transitions + t * Q
    gap = abs(exact_value(mdp.with_transitions(P), pi)[0] - exact_value(mdp, pi)[0])
    assert gap <= bounds.lemma1_gap(alpha, beta, S, A, gamma) + 1e-9


@FAST
@given(seeds, st.integers(2, 7), st.floats(0, 1), st.booleans())
def test_robust_rows_stay_in_ball(seed, n, half, upper):
    r = np.random.default_rng(seed)
    p = r.dirichlet(np.ones(n)) * r.uniform(0.1, 1)
    V = r.normal(size=(2, n))
    rows = _robust_rows(p[None], np.array([half]), V, upper)
    for k in range(2):
        q = rows[k, 0]
        assert np.all(q >= -1e-15)
        np.testing.assert_allclose(q.sum(), p.sum(), rtol=1e-12)
        assert np.abs(q - p).sum() <= 2 * half + 1e-12
        assert (q @ V[k] >= p @ V[k] - 1e-12) if upper else (q @ V[k] <= p @ V[k] + 1e-12)


@settings(max_examples=15, deadline=None, derandomize=True)
@given(seeds, st.integers(2, 4), st.integers(1, 2), gammas)
def test_value_iteration_beats_every_deterministic_policy(seed, S, A, gamma):
    _, mdp, _ = problem(seed, S, A, gamma)
    best, _ = best_deterministic_value(mdp)
    np.testing.assert_allclose(value_iteration(mdp)[0], best, atol=1e-7)


@FAST
@given(st.floats(0.1, 0.99), st.floats(0.01, 1.0), st.floats(0, 500), st.floats(0.001, 0.5))
def test_lemma3_count_monotone_in_rho(gamma, rho, n_prime, delta):
    a = bounds.lemma3_path_count(gamma, rho, n_prime, delta)
    b = bounds.lemma3_path_count(gamma, min(1.0, rho * 1.5), n_prime, delta)
    assert b <= a


@FAST
@given(st.floats(0.1, 5.0), st.floats(0.01, 0.5))
def test_theorem1_decreases_in_epsilon(eps, delta):
    x = np.array([[10.0], [0.0]])
    rho = np.array([[1.0], [0.0]])
    q1 = bounds.BoundQuery(2, 1, 0.9, eps, delta, x, x, rho)
    q2 = bounds.BoundQuery(2, 1, 0.9, 2 * eps, delta, x, x, rho)
    assert bounds.theorem1_path_bound(q2).required_paths <= bounds.theorem1_path_bound(q1).required_paths
