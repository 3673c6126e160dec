import json

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import stats
from sklearn.metrics import adjusted_rand_score

from routine_relapse.gmm import (COV_TYPES, GmmError, GmmModel, GmmSelectionReport, bhattacharyya, fit_gmm_em,
                                 gmm_scores, information_criteria, init_centroids_farthest, mahalanobis_sq,
                                 mean_pairwise_bhattacharyya, n_parameters, score_day_gmm, select_gmm)


def blobs(rng, centers, n=200, scale=1.0):
    X = np.concatenate([rng.normal(c, scale, size=(n, len(c))) for c in centers])
    y = np.repeat(np.arange(len(centers)), n)
    return X, y


# --- initialization ---------------------------------------------------------

def test_init_k1_is_a_data_point(rng):
    X = rng.normal(size=(30, 3))
    c = init_centroids_farthest(X, 1, seed=5)
    assert any(np.array_equal(c[0], x) for x in X)


def test_init_farthest_point_collinear():
    X = np.array([[0.0], [1.0], [10.0]])
    for seed in range(50):  # find a seed whose first pick is the point 1
        c = init_centroids_farthest(X, 2, seed)
        if c[0, 0] == 1.0:
            assert c[1, 0] == 10.0
            return
    pytest.fail("no seed picked the middle point first")


def test_init_deterministic_and_errors(rng):
    X = rng.normal(size=(20, 2))
    assert np.array_equal(init_centroids_farthest(X, 4, 9), init_centroids_farthest(X, 4, 9))
    with pytest.raises(GmmError):
        init_centroids_farthest(X, 21, 0)


# --- EM ---------------------------------------------------------------------

@pytest.mark.parametrize("cov_type", COV_TYPES)
def test_k1_closed_form(rng, cov_type):
    X = rng.normal(size=(300, 3)) * [1.0, 2.0, 0.5]
    m = fit_gmm_em(X, 1, cov_type)
    assert m.weights[0] == pytest.approx(1.0)
    assert np.allclose(m.means[0], X.mean(0))
    full = np.cov(X.T, bias=True)
    expect = {"full": full, "tied": full, "diag": np.diag(full),
              "spherical": np.diag(full).mean()}[cov_type]
    got = m.covariances[0] if cov_type in ("full", "diag", "spherical") else m.covariances
    assert np.allclose(got, expect, atol=2e-6)


def test_two_blobs_recovered(rng):
    X, y = blobs(rng, [(0, 0), (10, 10)])
    m = fit_gmm_em(X, 2, "full", seed=0)
    truth = sorted(X[y == j].mean(0).tolist() for j in range(2))
    got = sorted(m.means.tolist())
    assert np.abs(np.array(got) - np.array(truth)).max() < 0.5


@pytest.mark.parametrize("cov_type", COV_TYPES)
def test_log_likelihood_monotone(rng, cov_type):
    X, _ = blobs(rng, [(0, 0, 0), (4, 0, 1), (0, 5, -2)], n=150, scale=1.5)
    m = fit_gmm_em(X, 4, cov_type, seed=3)
    tr = np.array(m.log_likelihood_trace)
    assert np.all(np.diff(tr) >= -1e-8 * np.abs(tr[:-1]))
    assert m.weights.sum() == pytest.approx(1.0, abs=1e-9) and (m.weights > 0).all()


def test_nonfinite_input_rejected():
    X = np.ones((10, 2))
    X[3, 1] = np.nan
    with pytest.raises(GmmError):
        fit_gmm_em(X, 2)


def test_collapsed_component_reseeded(rng, caplog):
    # duplicate points make a spare component collapse onto nothing
    X = np.concatenate([np.zeros((50, 2)), np.ones((50, 2)) * 5, rng.normal(size=(3, 2)) * 1e-3])
    m = fit_gmm_em(X, 3, "spherical", init_means=np.array([[0, 0], [5, 5], [1e3, 1e3]]))
    assert m.k == 3 and np.all(np.isfinite(m.means))


# --- information criteria -----------------------------------------------------

def test_parameter_counts():
    assert n_parameters(1, 1, "spherical") == 2
    assert n_parameters(3, 2, "full") == 2 + 6 + 9
    assert n_parameters(3, 2, "tied") == 2 + 6 + 3
    assert n_parameters(3, 2, "diag") == 2 + 6 + 6


def test_information_criteria_plug_in():
    m = GmmModel("spherical", np.array([1.0]), np.zeros((1, 1)), np.array([1.0]), 0.0)
    aic, bic = information_criteria(m, n=np.e ** 2, log_likelihood=0.0)
    assert aic == pytest.approx(4.0) and bic == pytest.approx(4.0)  # m = 2
    aic, _ = information_criteria(m, n=10, log_likelihood=-3.0)
    assert aic == pytest.approx(4 + 6)


# --- Bhattacharyya ------------------------------------------------------------

def test_bhattacharyya_by_hand():
    assert bhattacharyya([0.0], [[1.0]], [2.0], [[1.0]]) == pytest.approx(0.5)
    assert bhattacharyya([1.0, 2.0], np.eye(2), [1.0, 2.0], np.eye(2)) == pytest.approx(0.0, abs=1e-12)


def test_mean_pairwise_relabel_invariant(rng):
    X, _ = blobs(rng, [(0, 0), (6, 0), (0, 6)], n=80)
    m = fit_gmm_em(X, 3, "full", seed=1)
    perm = [2, 0, 1]
    p = GmmModel("full", m.weights[perm], m.means[perm], m.covariances[perm])
    assert mean_pairwise_bhattacharyya(m) == pytest.approx(mean_pairwise_bhattacharyya(p))


# --- selection ----------------------------------------------------------------

def _three_blob_selection(rng):
    X, _ = blobs(rng, [(0, 0), (8, 0), (0, 8)], n=150)
    return select_gmm(X, range(2, 7), restarts=2, seed=0)


def test_select_three_gaussians_bic_minimum(rng):
    _, report = _three_blob_selection(rng)
    best = min(report.candidates, key=lambda c: (c.bic, c.k))
    assert best.k == 3
    assert all(len(c.restart_log_likelihoods) == 2 for c in report.candidates)


def test_select_follows_band_rule(rng):
    model, report = _three_blob_selection(rng)
    cands = report.candidates
    best_bic, best_aic = min(c.bic for c in cands), min(c.aic for c in cands)
    short = [c for c in cands if c.bic <= best_bic + 0.02 * abs(best_bic)
             and c.aic <= best_aic + 0.02 * abs(best_aic)]
    assert sum(c.chosen for c in cands) == 1
    assert report.chosen in short
    assert report.chosen.mean_bhattacharyya == max(c.mean_bhattacharyya for c in short)
    assert (model.k, model.cov_type) == (report.chosen.k, report.chosen.cov_type)


@pytest.mark.xfail(strict=True, reason="the relative 2% band admits split solutions whose tighter "
                                       "components have larger mean Bhattacharyya distance")
def test_select_three_gaussians_chosen_k(rng):
    model, _ = _three_blob_selection(rng)
    assert model.k == 3


def test_single_candidate_chosen(rng):
    X, _ = blobs(rng, [(0, 0), (5, 5)], n=60)
    model, report = select_gmm(X, [4], cov_types=("diag",), restarts=1)
    assert (model.k, model.cov_type) == (4, "diag") and report.chosen.k == 4


def test_selection_independent_of_threads(rng):
    X, _ = blobs(rng, [(0, 0), (6, 6)], n=60)
    a = select_gmm(X, range(2, 4), cov_types=("full", "diag"), restarts=2, threads=1)[1].to_dict()
    b = select_gmm(X, range(2, 4), cov_types=("full", "diag"), restarts=2, threads=2)[1].to_dict()
    assert json.dumps(a) == json.dumps(b)


def test_model_and_report_round_trip(rng):
    X, _ = blobs(rng, [(0, 0), (6, 6)], n=60)
    model, report = select_gmm(X, [2], cov_types=("tied",), restarts=1)
    again = GmmModel.from_dict(json.loads(json.dumps(model.to_dict())))
    assert np.array_equal(again.covariances, model.covariances)
    assert GmmSelectionReport.from_dict(report.to_dict()).chosen.k == 2


# --- scores -------------------------------------------------------------------

def unit_model(q=2, means=None, weights=None):
    means = np.zeros((1, q)) if means is None else np.asarray(means, float)
    k = len(means)
    weights = np.full(k, 1.0 / k) if weights is None else np.asarray(weights, float)
    return GmmModel("full", weights, means, np.stack([np.eye(q)] * k))


def test_day_at_mean_scores_one():
    s = score_day_gmm(unit_model(), np.zeros(2))
    assert s.label == 1 and s.assigned_likelihood == pytest.approx(1.0)


def test_chi2_two_dof_half():
    x = np.array([np.sqrt(2 * np.log(2)), 0.0])
    assert score_day_gmm(unit_model(), x).assigned_likelihood == pytest.approx(0.5)


def test_weighted_likelihood_arithmetic():
    # survivals 0.8 and 0.2 under chi2(2): d2 = -2 ln s
    d1, d2 = np.sqrt(-2 * np.log(0.8)), np.sqrt(-2 * np.log(0.2))
    m = unit_model(means=[[0.0, 0.0], [d1 + d2, 0.0]], weights=[0.5, 0.5])
    s = score_day_gmm(m, np.array([d1, 0.0]))
    assert s.weighted_likelihood == pytest.approx(0.5, abs=1e-9)


def test_identity_mahalanobis_is_squared_euclidean(rng):
    X = rng.normal(size=(20, 3))
    m = unit_model(q=3, means=rng.normal(size=(2, 3)))
    d2, _ = mahalanobis_sq(X, m)
    assert np.allclose(d2, ((X[:, None, :] - m.means[None]) ** 2).sum(-1))


@given(st.integers(0, 10_000))
def test_scores_bounded_and_convex(seed):
    rng = np.random.default_rng(seed)
    k, q = 3, 2
    A = rng.normal(size=(k, q, q))
    m = GmmModel("full", rng.dirichlet(np.ones(k)), rng.normal(size=(k, q)) * 3, A @ A.transpose(0, 2, 1) + np.eye(q))
    X = rng.normal(size=(25, q)) * 4
    s = gmm_scores(m, X)
    for key in ("assigned_likelihood", "weighted_likelihood"):
        assert np.all((s[key] >= 0) & (s[key] <= 1))
    assert np.all(s["weighted_likelihood"] <= s["survival"].max(1) + 1e-12)
    assert np.all(s["weighted_likelihood"] >= s["survival"].min(1) - 1e-12)
    again = gmm_scores(m, X)
    assert np.array_equal(again["weighted_likelihood"], s["weighted_likelihood"])


def test_calibration_ks(rng):
    X = rng.multivariate_normal([1.0, -2.0, 0.5], [[2, 0.3, 0], [0.3, 1, 0.2], [0, 0.2, 0.5]], size=3000)
    m = fit_gmm_em(X, 1, "full")
    sample = rng.multivariate_normal(m.means[0], m.covariances[0], size=5000)
    s = gmm_scores(m, sample)["assigned_likelihood"]
    assert stats.kstest(s, "uniform").statistic < 0.05


def test_em_ari_three_gaussians(rng):
    X, y = blobs(rng, [(0, 0), (7, 0), (0, 7)], n=333)
    m = fit_gmm_em(X, 3, "full", seed=2)
    assert adjusted_rand_score(y, gmm_scores(m, X)["label"]) > 0.9
