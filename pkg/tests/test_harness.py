from __future__ import annotations

import csv
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from twostage import harness
from twostage.dgp import CLAYTON_TRUTH, DgpSpec, clayton_sample, generate
from twostage.errors import LevelMismatch, NonConvergence, ReplicationBudgetExceeded
from twostage.inference import wasserstein_l1
from twostage.rng import Stream


# DGP definitions ------------------------------------------------------------


def test_spec_defaults_and_labels():
    assert DgpSpec("B", 250).n_instruments == 32
    assert DgpSpec("B", 250, multiplier=4).n_instruments == 63
    assert DgpSpec("C", 250).n_star == 250
    assert DgpSpec("C", 1000).n_star == round(1000**0.945)
    assert DgpSpec("D", 500).k == 3
    assert DgpSpec("b", 500, multiplier=4).label() == "B_n500_m4"
    np.testing.assert_array_equal(DgpSpec("C", 250).theta0, [-0.8, 2.0])


@pytest.mark.parametrize("kwargs", [dict(id="E", n=100), dict(id="B", n=250, multiplier=3),
                                    dict(id="C", n=300), dict(id="D", n=300), dict(id="A", n=5)])
def test_spec_rejects_bad_cells(kwargs):
    with pytest.raises(ValueError):
        DgpSpec(**kwargs)


def test_dgp_a_outcome_error_has_mean_zero():
    d = generate(DgpSpec("A", 100_000), 0)
    assert abs(np.mean(d.y - d.d)) < 0.01
    # the instrument moves the treatment
    assert np.corrcoef(d.Z[:, 1], d.d)[0, 1] > 0.3


def test_dgp_b_extra_instruments_are_irrelevant():
    d = generate(DgpSpec("B", 10_000, multiplier=2), 1)
    z = d.Z[:, 1:]
    assert z.shape[1] == 200
    r_relevant = [np.corrcoef(z[:, j], d.d)[0, 1] for j in range(4)]
    r_other = [np.corrcoef(z[:, j], d.d)[0, 1] for j in range(4, 200)]
    assert min(r_relevant) > 0.05
    assert np.max(np.abs(r_other)) < 0.05


def test_dgp_c_shapes_and_latent_probability():
    spec = DgpSpec("C", 1000)
    d = generate(spec, 2)
    assert d.y.shape == (1000,) and d.d_obs.shape == (spec.n_star,)
    np.testing.assert_allclose(d.p, np.sin(np.pi * d.z) ** 2)


def test_dgp_d_filtered_innovations_have_unit_variance():
    d = generate(DgpSpec("D", 100_000, k=2), 3)
    e = d.Y[1:] - 0.4 * d.Y[:-1]
    # unconditional variance of the GARCH innovation is b0 / (1 - b1 - b2) = 1
    np.testing.assert_allclose(e.var(axis=0), 1.0, atol=0.1)


def test_clayton_sampler_matches_kendall_tau():
    from scipy import stats

    U = clayton_sample(np.random.default_rng(0), 20_000, 2, CLAYTON_TRUTH)
    tau = stats.kendalltau(U[:, 0], U[:, 1])[0]
    assert abs(tau - CLAYTON_TRUTH / (CLAYTON_TRUTH + 2)) < 0.02


def test_generate_is_deterministic_in_the_seed():
    a = generate(DgpSpec("B", 250), Stream(5, (1,)))
    b = generate(DgpSpec("B", 250), Stream(5, (1,)))
    c = generate(DgpSpec("B", 250), Stream(5, (2,)))
    np.testing.assert_array_equal(a.y, b.y)
    assert not np.array_equal(a.y, c.y)


# Aggregation ------------------------------------------------------------------


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-10, 10), min_size=2, max_size=40), st.floats(-5, 5))
def test_summary_identities(values, theta0):
    est = np.array(values)[:, None]
    s = harness.summarize(est, np.array([theta0]))
    assert math.isclose(s["rmse"][0] ** 2, s["bias"][0] ** 2 + s["sd"][0] ** 2, rel_tol=1e-9, abs_tol=1e-9)
    assert s["mae"][0] >= abs(s["bias"][0]) - 1e-12


@pytest.fixture(scope="module")
def small_a():
    return harness.run_mc(DgpSpec("A", 250), reps=20, kappa=200, seed=3)


def test_mc_result_structure(small_a):
    d = small_a.to_dict()
    assert d["completed"] == 20 and d["failures"] == []
    assert set(d["aggregates"]) == set(harness.ESTIMATORS)
    assert set(d["coverage"]) == set(harness.METHODS)
    for c in small_a.cdf:
        assert np.all(np.diff(c["t"]) > 0)
        for key in ("F0", "Hn", "Fn", "Fn_star", "F0_star"):
            assert np.all(np.diff(c[key]) >= -1e-12)
            assert 0 <= c[key][0] <= c[key][-1] <= 1


def test_coverage_level_must_match(small_a):
    two, lower, upper = harness.coverage(small_a, 0.95, "sim")
    assert two.shape == (1,) and 0 <= two[0] <= 1
    with pytest.raises(LevelMismatch):
        harness.coverage(small_a, 0.90)
    with pytest.raises(ValueError):
        harness.coverage(small_a, 0.95, "bogus")


def test_two_sided_interval_inside_one_sided_bounds(small_a):
    for r in small_a.replications:
        for m in harness.METHODS:
            b = r.bounds[m]
            assert np.all(b["lo"] <= b["upper"] + 1e-12) and np.all(b["lower"] <= b["hi"] + 1e-12)


def test_results_do_not_depend_on_worker_count():
    spec = DgpSpec("B", 250)
    serial = harness.run_mc(spec, reps=6, kappa=100, seed=9, n_jobs=1)
    parallel = harness.run_mc(spec, reps=6, kappa=100, seed=9, n_jobs=2)
    np.testing.assert_array_equal(serial.estimates(), parallel.estimates())
    assert serial.to_dict(timing=False) == parallel.to_dict(timing=False)


def test_zero_first_stage_noise_makes_simulated_law_normal():
    res = harness.run_mc(DgpSpec("A", 500), reps=10, kappa=2000, seed=4, first_stage_noise=False)
    for r in res.replications:
        sd = math.sqrt(res.spec.n * r.variance[0, 0])
        ref = sd * np.sort(np.random.default_rng(0).standard_normal(2000))
        # with no first-stage noise the draws are A^{-1} times a normal, up to sampling error
        assert wasserstein_l1(r.psi[:, 0], ref) < 0.02 + 0.05 * sd
    np.testing.assert_allclose(res.estimates("debiased_mean"), res.estimates(), atol=1e-12)


def test_failure_budget(monkeypatch):
    calls = {"n": 0}
    real = harness.fit_model

    def flaky(spec, data, noise=True):
        calls["n"] += 1
        if calls["n"] % 5 == 0:
            raise NonConvergence("forced")
        return real(spec, data, noise)

    monkeypatch.setattr(harness, "fit_model", flaky)
    with pytest.raises(ReplicationBudgetExceeded):
        harness.run_mc(DgpSpec("A", 250), reps=10, kappa=50, seed=0)


def test_writers_round_trip(small_a, tmp_path):
    paths = harness.write_all(small_a, tmp_path)
    assert all(p.exists() for p in paths)
    with open(tmp_path / "A_n250_replications.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 20
    np.testing.assert_allclose([float(r["theta_hat_0"]) for r in rows], small_a.estimates()[:, 0])
    with open(tmp_path / "A_n250_cdf_0.csv") as fh:
        header = next(csv.reader(fh))
    assert header[:5] == ["t", "F0", "Hn", "Fn", "Fn_star"]
    with open(tmp_path / "A_n250_coverage.csv") as fh:
        cov = list(csv.DictReader(fh))
    assert {r["method"] for r in cov} == set(harness.METHODS)
    d = json.loads((tmp_path / "A_n250.json").read_text())
    assert "elapsed_seconds" not in d
    first = [p.read_bytes() for p in paths]
    harness.write_all(small_a, tmp_path)
    assert [p.read_bytes() for p in paths] == first
