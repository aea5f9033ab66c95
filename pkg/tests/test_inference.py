import numpy as np
import pytest
from scipy import stats

from wpk import (
    CosineNearestNeighbor,
    FeatureTable,
    GaussianWeightPrior,
    HmcConfig,
    LogisticBaseline,
    OptimizerConfig,
    PosteriorSpec,
    Predictor,
    PriorSoftmaxClassifier,
    fit_gaussian,
    fit_gmm,
    fit_laplace,
    hmc_kshot,
    map_kshot,
    nearest_neighbor,
    neg_log_posterior,
    predict,
    reg_from_weights,
)
from wpk.exceptions import CvInapplicableError


def _support(rng, way=3, k=4, p=5):
    X = rng.normal(size=(way * k, p))
    y = np.repeat(np.arange(way), k)
    return X, y


def _zero_mean_iso(p, var=1.0):
    return GaussianWeightPrior.from_params(np.zeros(p), var, "isotropic")


# ---------------------------------------------------------------------------
# posterior value / gradient


def test_posterior_gradient_matches_finite_differences(rng):
    X, y = _support(rng)
    priors = [
        _zero_mean_iso(5, 2.0),
        fit_gaussian(rng.normal(size=(20, 5)), "full"),
        fit_laplace(rng.normal(size=(20, 5)), "diagonal"),
        fit_gmm(rng.normal(size=(20, 5)), 2, "isotropic", seed=3),
    ]
    h = 1e-5
    for prior in priors:
        spec = PosteriorSpec(prior=prior, way=3, X=X, y=y)
        W = rng.normal(size=(3, 5))
        _, grad = neg_log_posterior(spec, W)
        fd = np.zeros_like(W)
        for i in range(3):
            for j in range(5):
                up, down = W.copy(), W.copy()
                up[i, j] += h
                down[i, j] -= h
                fd[i, j] = (
                    neg_log_posterior(spec, up)[0] - neg_log_posterior(spec, down)[0]
                ) / (2 * h)
        scale = max(np.abs(fd).max(), 1.0)
        assert np.abs(grad - fd).max() / scale < 1e-5


def test_gradient_zero_at_prior_mode_without_data(rng):
    prior = GaussianWeightPrior.from_params(rng.normal(size=4), 1.3, "isotropic")
    spec = PosteriorSpec(prior=prior, way=2)
    W = np.tile(prior.mean_, (2, 1))
    _, grad = neg_log_posterior(spec, W)
    assert np.abs(grad).max() < 1e-12


def test_posterior_is_convex_for_gaussian_prior(rng):
    X, y = _support(rng)
    spec = PosteriorSpec(prior=_zero_mean_iso(5), way=3, X=X, y=y)
    for _ in range(20):
        a = rng.normal(size=(3, 5)) * 3
        b = rng.normal(size=(3, 5)) * 3
        fa = neg_log_posterior(spec, a)[0]
        fb = neg_log_posterior(spec, b)[0]
        fm = neg_log_posterior(spec, (a + b) / 2)[0]
        assert fm <= (fa + fb) / 2 + 1e-10


# ---------------------------------------------------------------------------
# MAP


def test_tight_prior_pins_map_to_prior_mean(rng):
    X, y = _support(rng)
    mean = rng.normal(size=5)
    prior = GaussianWeightPrior.from_params(mean, 1e-8, "isotropic")
    res = map_kshot(PosteriorSpec(prior=prior, way=3, X=X, y=y))
    assert res.converged
    assert np.abs(res.weights - mean).max() < 1e-4


def test_map_matches_fixed_logreg(rng):
    # Gaussian(0, var I) prior == L2 penalty ||W||^2 / C with C = 2 var
    for _ in range(5):
        X, y = _support(rng, way=4, k=3, p=6)
        var = float(rng.uniform(0.3, 3.0))
        spec = PosteriorSpec(prior=_zero_mean_iso(6, var), way=4, X=X, y=y)
        res = map_kshot(spec, OptimizerConfig(grad_tolerance=1e-10, init="zeros"))
        base = LogisticBaseline(reg="fixed", C=2 * var).fit(X, y)
        assert np.abs(res.weights - base.coef_).max() < 1e-4
        Q = rng.normal(size=(30, 6))
        pp = predict(Predictor(point=res.weights), Q)
        assert np.abs(pp - base.predict_proba(Q)).max() < 1e-6


def test_map_antisymmetric_support():
    x = np.array([[1.0, 2.0, -0.5]])
    X = np.vstack([x, -x])
    y = np.array([0, 1])
    spec = PosteriorSpec(prior=_zero_mean_iso(3), way=2, X=X, y=y)
    res = map_kshot(spec, OptimizerConfig(grad_tolerance=1e-10))
    assert np.abs(res.weights[0] + res.weights[1]).max() < 1e-6


def test_map_class_permutation_equivariance(rng):
    X, y = _support(rng, way=3, k=2, p=4)
    spec = PosteriorSpec(prior=_zero_mean_iso(4), way=3, X=X, y=y)
    res = map_kshot(spec, OptimizerConfig(grad_tolerance=1e-10))
    perm = np.array([2, 0, 1])
    spec_p = PosteriorSpec(prior=_zero_mean_iso(4), way=3, X=X, y=perm[y])
    res_p = map_kshot(spec_p, OptimizerConfig(grad_tolerance=1e-10))
    assert np.abs(res_p.weights[perm] - res.weights).max() < 1e-6


def test_from_support_builds_local_labels(small_world):
    _, novel, _ = small_world
    from wpk import sample_episode

    ep = sample_episode(novel, 3, 2, 2, seed=5)
    spec = PosteriorSpec.from_support(_zero_mean_iso(novel.dim), ep.support)
    assert spec.way == 3
    assert set(spec.y) == {0, 1, 2}
    assert spec.X.shape == (6, novel.dim)


# ---------------------------------------------------------------------------
# HMC


def test_hmc_recovers_gaussian_target():
    # prior-only posterior: draws should match the prior itself
    mean = np.array([0.5, -1.0])
    prior = GaussianWeightPrior.from_params(mean, np.array([1.0, 2.0]), "diagonal")
    spec = PosteriorSpec(prior=prior, way=2)
    cfg = HmcConfig(n_samples=4000, n_warmup=500, seed=7)
    res = hmc_kshot(spec, cfg)
    draws = res.predictor.samples.reshape(4000, -1)  # 4 coordinates
    target_mean = np.tile(mean, 2)
    target_var = np.tile([1.0, 2.0], 2)
    assert np.abs(draws.mean(axis=0) - target_mean).max() < 0.05 * np.sqrt(2.0)
    assert np.all(np.abs(draws.var(axis=0) / target_var - 1.0) < 0.10)
    ks = stats.kstest(draws[:, 0], "norm", args=(0.5, 1.0)).statistic
    assert ks < 0.03
    assert 0.5 < res.accept_rate <= 1.0


def test_hmc_deterministic_given_seed(rng):
    X, y = _support(rng, way=2, k=3, p=3)
    spec = PosteriorSpec(prior=_zero_mean_iso(3), way=2, X=X, y=y)
    cfg = HmcConfig(n_samples=50, n_warmup=50, seed=11)
    a = hmc_kshot(spec, cfg)
    b = hmc_kshot(spec, cfg)
    assert np.array_equal(a.predictor.samples, b.predictor.samples)
    assert a.step_size == b.step_size


def test_hmc_near_delta_posterior():
    mean = np.array([2.0, -3.0])
    prior = GaussianWeightPrior.from_params(mean, 1e-6, "isotropic")
    spec = PosteriorSpec(prior=prior, way=1)
    res = hmc_kshot(spec, HmcConfig(n_samples=500, n_warmup=300, seed=3, init_step=1e-3))
    draws = res.predictor.samples[:, 0, :]
    assert np.abs(draws.mean(axis=0) - mean).max() < 1e-3


# ---------------------------------------------------------------------------
# prediction


def test_predict_zero_weights_is_uniform():
    probs = predict(Predictor(point=np.zeros((4, 3))), np.ones((5, 3)))
    assert np.allclose(probs, 0.25, atol=1e-15)


def test_predict_single_sample_equals_point(rng):
    W = rng.normal(size=(3, 4))
    X = rng.normal(size=(6, 4))
    a = predict(Predictor(point=W), X)
    b = predict(Predictor(samples=W[None]), X)
    assert np.array_equal(a, b)


def test_predict_two_sample_average(rng):
    W1, W2 = rng.normal(size=(2, 3, 4))
    X = rng.normal(size=(5, 4))
    avg = predict(Predictor(samples=np.stack([W1, W2])), X)
    manual = (predict(Predictor(point=W1), X) + predict(Predictor(point=W2), X)) / 2
    assert np.abs(avg - manual).max() < 1e-15
    assert np.abs(avg.sum(axis=1) - 1.0).max() < 1e-12


def test_predict_argmax_invariant_to_feature_scaling(rng):
    W = rng.normal(size=(4, 3))
    X = rng.normal(size=(10, 3))
    a = predict(Predictor(point=W), X).argmax(axis=1)
    b = predict(Predictor(point=W), 10.0 * X).argmax(axis=1)
    assert np.array_equal(a, b)


def test_predictor_requires_exactly_one_form():
    with pytest.raises(ValueError):
        Predictor()
    with pytest.raises(ValueError):
        Predictor(point=np.zeros((1, 1)), samples=np.zeros((1, 1, 1)))


# ---------------------------------------------------------------------------
# baselines


def test_reg_from_weights_hand_case():
    assert reg_from_weights(np.array([[1.0, -1.0]])) == pytest.approx(2.0)


def test_reg_from_weights_scaling_about_zero(rng):
    W = rng.normal(size=(6, 3))
    assert reg_from_weights(5.0 * W, about="zero") == pytest.approx(
        25.0 * reg_from_weights(W, about="zero")
    )


def test_reg_from_weights_degenerate():
    with pytest.raises(ValueError):
        reg_from_weights(np.full((3, 2), 7.0))


def test_cv_rejected_for_one_shot(rng):
    X, y = _support(rng, way=3, k=1)
    with pytest.raises(CvInapplicableError):
        LogisticBaseline(reg="cv").fit(X, y)


def test_tiny_c_shrinks_weights(rng):
    X, y = _support(rng)
    model = LogisticBaseline(reg="fixed", C=1e-8).fit(X, y)
    assert np.abs(model.coef_).max() < 1e-3


def test_cv_selects_from_grid(rng):
    X, y = _support(rng, way=3, k=6, p=4)
    model = LogisticBaseline(reg="cv").fit(X, y)
    assert model.C_ in model.cv_scores_
    assert len(model.cv_scores_) == 7
    probs = model.predict_proba(X)
    assert probs.shape == (18, 3)


def test_cv_tie_breaks_toward_larger_c():
    # perfectly separable 1-d data: every C achieves accuracy 1.0
    X = np.array([[-2.0], [-1.5], [-1.0], [1.0], [1.5], [2.0]])
    y = np.array([0, 0, 0, 1, 1, 1])
    model = LogisticBaseline(reg="cv", folds=3).fit(X, y)
    assert model.cv_scores_[model.C_] == max(model.cv_scores_.values())
    tied = [c for c, s in model.cv_scores_.items() if s == model.cv_scores_[model.C_]]
    assert model.C_ == max(tied)


def test_from_weights_reg_consistent_with_fixed(rng, small_wtilde):
    X, y = _support(rng)
    a = LogisticBaseline(reg="from_weights", wtilde=small_wtilde).fit(X, y)
    b = LogisticBaseline(reg="fixed", C=reg_from_weights(small_wtilde)).fit(X, y)
    assert np.array_equal(a.coef_, b.coef_)


def test_mle_warns_on_separable_data():
    X = np.array([[1.0], [-1.0]])
    y = np.array([0, 1])
    model = LogisticBaseline(reg="mle", max_iters=50).fit(X, y)
    assert model.warning_ is not None


# ---------------------------------------------------------------------------
# nearest neighbour


def test_nn_identity_queries(rng):
    X, y = _support(rng, way=4, k=2, p=6)
    support = FeatureTable(X, y)
    pred, probs = nearest_neighbor(support, FeatureTable(X, y))
    assert np.array_equal(pred, y)
    assert np.allclose(probs.max(axis=1), 1.0 - 3e-12)
    assert np.allclose(probs.sum(axis=1), 1.0, atol=1e-9)


def test_nn_tie_goes_to_lowest_class_id():
    X = np.array([[1.0, 0.0], [1.0, 0.0]])
    y = np.array([3, 7])
    model = CosineNearestNeighbor().fit(X, y)
    pred = model.predict(np.array([[2.0, 0.0]]))
    assert pred[0] == 3


def test_nn_matches_brute_force(rng):
    X, y = _support(rng, way=5, k=3, p=4)
    Q = rng.normal(size=(40, 4))
    pred, _ = nearest_neighbor(FeatureTable(X, y), FeatureTable(Q, np.zeros(40, int)))
    xn = X / np.linalg.norm(X, axis=1, keepdims=True)
    for i, q in enumerate(Q):
        sims = xn @ (q / np.linalg.norm(q))
        assert pred[i] == y[np.argmax(sims)]


def test_nn_zero_norm_rejected():
    with pytest.raises(ValueError, match="row 1"):
        CosineNearestNeighbor().fit(np.array([[1.0, 0.0], [0.0, 0.0]]), [0, 1])


def test_nn_scale_invariance(rng):
    X, y = _support(rng, way=3, k=2, p=3)
    Q = rng.normal(size=(10, 3))
    a, _ = nearest_neighbor(FeatureTable(X, y), FeatureTable(Q, np.zeros(10, int)))
    b, _ = nearest_neighbor(
        FeatureTable(3.0 * X, y), FeatureTable(0.5 * Q, np.zeros(10, int))
    )
    assert np.array_equal(a, b)


# ---------------------------------------------------------------------------
# estimator wrapper


def test_prior_softmax_classifier_roundtrip(rng):
    X, y = _support(rng, way=3, k=4, p=4)
    y = y + 10  # non-contiguous class ids
    clf = PriorSoftmaxClassifier(prior=_zero_mean_iso(4)).fit(X, y)
    assert np.array_equal(clf.classes_, [10, 11, 12])
    assert set(clf.predict(X)) <= {10, 11, 12}
    assert clf.predict_proba(X).shape == (12, 3)
    params = clf.get_params()
    assert params["inference"] == "map"


def test_prior_softmax_classifier_hmc_path(rng):
    X, y = _support(rng, way=2, k=2, p=3)
    clf = PriorSoftmaxClassifier(
        prior=_zero_mean_iso(3),
        inference="hmc",
        hmc=HmcConfig(n_samples=50, n_warmup=50, seed=1),
    ).fit(X, y)
    assert clf.predictor_.samples.shape == (50, 2, 3)
    assert clf.hmc_result_.accept_rate > 0.1
