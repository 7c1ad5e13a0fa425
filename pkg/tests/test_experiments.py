import json
import math

import numpy as np
import pytest

from offlinelab import experiments as ex
from offlinelab.mdp import Policy, first_visit_prob, return_prob, single_state_mdp


def cfg(kind, **kw):
    return ex.ExperimentConfig.from_dict({"experiment": kind, **kw})


def test_defaults_and_aliases():
    c = cfg("lemma3")
    assert c.experiment == "lemma3_coverage"
    assert c.trials == 2000
    assert c.params["N_prime"] == 20


@pytest.mark.parametrize("bad", [
    {"experiment": "nope"},
    {"experiment": "lemma3", "trials": 0},
    {"experiment": "lemma3", "params": {"bogus": 1}},
    {"experiment": "lemma3", "colour": "red"},
    {"experiment": "lemma3", "schema_version": 2},
    {"experiment": "ope_sweep", "mdp": {"file": "m.json", "generator": {}}},
    {"experiment": "ope_sweep", "target": {}},
    {},
])
def test_invalid_configs(bad):
    with pytest.raises(ex.ConfigError):
        ex.ExperimentConfig.from_dict(bad)


def test_hash_ignores_workers_and_output():
    a = cfg("lemma3", workers=1, output="a")
    b = cfg("lemma3", workers=4, output="b")
    assert a.config_hash() == b.config_hash()
    assert a.config_hash() != cfg("lemma3", seed=1).config_hash()
    assert a.config_hash() != cfg("lemma3", params={"N_prime": 21}).config_hash()


def test_load_config_file(tmp_path):
    (tmp_path / "c.json").write_text(json.dumps({"experiment": "lemma4", "trials": 5}))
    assert ex.ExperimentConfig.load(tmp_path / "c.json").trials == 5
    (tmp_path / "bad.json").write_text("{not json")
    with pytest.raises(ex.ConfigError):
        ex.ExperimentConfig.load(tmp_path / "bad.json")
    with pytest.raises(ex.ConfigError):
        ex.ExperimentConfig.load(tmp_path / "c.json", "lemma3")


def test_wilson_against_statsmodels():
    proportion = pytest.importorskip("statsmodels.stats.proportion")
    for k, n in [(0, 2000), (5, 2000), (150, 2000), (7, 10)]:
        lo, hi = ex.wilson_interval(k, n, 0.99)
        elo, ehi = proportion.proportion_confint(k, n, alpha=0.01, method="wilson")
        assert lo == pytest.approx(elo, abs=1e-12) and hi == pytest.approx(ehi, abs=1e-12)


def test_coverage_summary_one_sided():
    assert ex.coverage_summary(np.zeros(2000, bool), 0.1)["passed"]
    many = np.zeros(2000, bool)
    many[:400] = True
    assert not ex.coverage_summary(many, 0.1)["passed"]


def test_lemma_problem_construction():
    p = ex.action_prob_for_first_visit(0.5, 0.9)
    mdp = single_state_mdp(0.9, 2)
    pi = Policy([[p, 1 - p], [0.5, 0.5]])
    assert first_visit_prob(mdp, pi, 0, 0) == pytest.approx(0.5)
    p = ex.action_prob_for_first_visit(0.8 / 0.9, 0.9)
    pi = Policy([[p, 1 - p], [0.5, 0.5]])
    assert return_prob(mdp, pi, 0, 0) == pytest.approx(0.8)


def test_df_exact_mse():
    exact_df, exact_sm = ex.df_mse_exact(0.95, 100)
    assert exact_sm == pytest.approx(4.75e-4)
    assert exact_df <= ex.theorem2_bound(0.95, 100) + 1e-12
    assert ex.theorem2_bound(0.95, 100) == pytest.approx(4.132e-4, abs=1e-7)
    assert ex.df_mse_exact(1.0, 100)[0] == 0.0


def test_df_crossover():
    c = ex.df_crossover(100, grid_step=1e-3)
    df, sm = ex.df_mse_exact(c + 0.01, 100)
    assert df <= sm
    df, sm = ex.df_mse_exact(c - 0.01, 100)
    assert df > sm


def test_fine_grid_max_bias():
    m, arg = ex.fine_grid_max_bias(1e-3)
    assert m == pytest.approx(0.2162, abs=1e-3)
    assert arg == pytest.approx(0.316, abs=2e-3)


SMALL = {
    "bias_curve": {"params": {"steps": 5, "mc_trials": 2000, "fine_step": 1e-2}},
    "lemma2_coverage": {"trials": 4},
    "lemma3_coverage": {"trials": 20},
    "lemma4_coverage": {"trials": 20},
    "theorem1_coverage": {"trials": 4, "params": {"max_paths": 500}},
    "corollary1_coverage": {"trials": 3, "params": {"n_paths": 500}},
    "theorem2_mse": {"trials": 2, "params": {"resamples_per_trial": 1000}},
    "is_unbiasedness": {"trials": 20},
    "ope_sweep": {"trials": 4, "params": {"n_grid": [50, 200]}},
    "certificate_coverage": {"trials": 3, "params": {"n_paths": 200}},
}


@pytest.mark.parametrize("kind", sorted(SMALL))
def test_every_experiment_runs(kind, tmp_path):
    res = ex.run_experiment(cfg(kind, **SMALL[kind]), tmp_path)
    assert "passed" in res.summary
    text = (tmp_path / f"{kind}.csv").read_text()
    assert text.startswith(f"# config_hash={res.config.config_hash()}")
    summary = json.loads((tmp_path / f"{kind}.json").read_text())
    assert summary["config_hash"] == res.config.config_hash()
    assert (tmp_path / f"{kind}.png").stat().st_size > 0


def test_overwrite_protection(tmp_path):
    ex.run_experiment(cfg("lemma3", trials=5), tmp_path, figures=False)
    ex.run_experiment(cfg("lemma3", trials=5, workers=2), tmp_path, figures=False)
    with pytest.raises(ex.OutputConflict):
        ex.run_experiment(cfg("lemma3", trials=6), tmp_path, figures=False)
    ex.run_experiment(cfg("lemma3", trials=6), tmp_path, force=True, figures=False)


def test_csv_independent_of_workers(tmp_path):
    c = cfg("ope_sweep", trials=6, params={"n_grid": [50, 200]})
    ex.run_experiment(c, tmp_path / "one", workers=1, figures=False)
    ex.run_experiment(c, tmp_path / "two", workers=3, figures=False)
    a = (tmp_path / "one" / "ope_sweep.csv").read_bytes()
    b = (tmp_path / "two" / "ope_sweep.csv").read_bytes()
    assert a == b


def test_trials_reproducible():
    c = cfg("lemma4", trials=3)
    a = ex.run_experiment(c, figures=False)
    b = ex.run_experiment(c, figures=False)
    assert [r.metrics for r in a.trials] == [r.metrics for r in b.trials]
    assert a.trials[1].stream_id == "0/lemma4_coverage/1"


def test_is_summary_flags_infinite_variance():
    res = ex.run_experiment(cfg("is_unbiasedness", trials=50), figures=False)
    assert not res.summary["variance_finite"]
    assert "skipped" in res.summary["unbiasedness_check"]
    finite = cfg("is_unbiasedness", trials=200,
                 mdp={"generator": {"num_states": 4, "num_actions": 3, "gamma": 0.3}})
    s = ex.run_experiment(finite, figures=False).summary
    assert s["variance_finite"] and s["unbiased_within_4se"]


def test_policy_and_mdp_files(tmp_path, rng):
    from offlinelab import io
    from offlinelab.mdp import random_mdp

    mdp = random_mdp(3, 2, 0.8, rng)
    io.save_mdp(mdp, tmp_path / "m.json")
    io.save_policy(Policy.uniform(3, 2), tmp_path / "b.json")
    c = cfg("theorem1_coverage", trials=2, params={"n_paths": 100}, mdp={"file": str(tmp_path / "m.json")},
            behavior={"file": str(tmp_path / "b.json")}, target={"probs": [[1, 0], [0, 1], [1, 0]]})
    res = ex.run_experiment(c, figures=False)
    assert res.summary["N"] == 100
    bad = cfg("theorem1_coverage", trials=1, target={"probs": [[1, 0]]})
    with pytest.raises(ex.ConfigError):
        ex.run_experiment(bad, figures=False)


def test_nan_free_bias_rows():
    res = ex.run_experiment(cfg("bias_curve", params={"steps": 3, "mc_trials": 100, "fine_step": 0.05}),
                            figures=False)
    assert all(not math.isnan(r.metrics["mc_mean"]) for r in res.trials)
