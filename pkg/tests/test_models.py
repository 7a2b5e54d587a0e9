import numpy as np
import pytest

from gformula_mi.exceptions import ModelFitError, ValidationError
from gformula_mi.models import (DesignSpec, Family, add_intercept, expit, fit, fit_arrays, fit_logistic,
                                fit_normal, logistic_loglik, logistic_score, mle_draw, posterior_draw,
                                predictive_draw, sequential_spec, validate_sequential)
from gformula_mi.rng import make_rng
from gformula_mi.simstudy import DGM_SCHEMA, generate_dgm


def _logistic_data(n=400, seed=0, beta=(-0.3, 0.8, -1.2)):
    rng = make_rng(seed)
    X = rng.standard_normal((n, len(beta) - 1))
    y = (rng.random(n) < expit(add_intercept(X) @ np.array(beta))).astype(float)
    return X, y


def test_expit_is_stable():
    x = np.array([-1000.0, -30.0, 0.0, 30.0, 1000.0])
    p = expit(x)
    assert np.all(np.isfinite(p))
    assert p[0] == 0.0 and p[-1] == 1.0 and p[2] == 0.5
    assert np.allclose(p + expit(-x), 1.0)


def test_noiseless_fit_is_exact():
    rng = make_rng(3)
    X = rng.standard_normal((50, 3))
    beta = np.array([0.5, -2.0, 3.25, 1e-3])
    y = add_intercept(X) @ beta
    f = fit_arrays(DesignSpec("y", ("a", "b", "c")), X, y)
    assert np.allclose(f.coef, beta, rtol=0, atol=1e-12)
    assert f.sigma2 < 1e-25


def test_irls_stationarity_and_finite_differences():
    X, y = _logistic_data()
    Xd = add_intercept(X)
    beta, cov, iters = fit_logistic(Xd, y)
    assert iters <= 50
    assert np.max(np.abs(logistic_score(beta, Xd, y))) < 1e-8
    h = 1e-5
    analytic = logistic_score(beta + 0.0, Xd, y)
    # away from the optimum the score must match central differences too
    b0 = beta + np.array([0.2, -0.1, 0.3])
    g = logistic_score(b0, Xd, y)
    fd = np.array([(logistic_loglik(b0 + h * e, Xd, y) - logistic_loglik(b0 - h * e, Xd, y)) / (2 * h)
                   for e in np.eye(3)])
    assert np.allclose(fd, g, rtol=1e-4, atol=1e-6)
    fd_opt = np.array([(logistic_loglik(beta + h * e, Xd, y) - logistic_loglik(beta - h * e, Xd, y)) / (2 * h)
                       for e in np.eye(3)])
    assert np.max(np.abs(fd_opt - analytic)) < 1e-4
    assert np.all(np.linalg.eigvalsh(cov) > 0)


def test_logistic_separation_fails_loudly_and_ridge_rescues():
    x = np.linspace(-1, 1, 40)[:, None]
    y = (x[:, 0] > 0).astype(float)
    with pytest.raises(ModelFitError):
        fit_logistic(add_intercept(x), y)
    beta, _, _ = fit_logistic(add_intercept(x), y, ridge=1.0)
    assert np.all(np.isfinite(beta))


def test_ridge_does_not_penalise_intercept():
    X, y = _logistic_data(seed=5)
    Xd = add_intercept(X)
    beta, _, _ = fit_logistic(Xd, y, ridge=10.0)
    assert abs(logistic_score(beta, Xd, y)[0]) < 1e-8


def test_rank_deficient_design_raises():
    X = np.ones((10, 2))
    with pytest.raises(ModelFitError, match="rank"):
        fit_normal(add_intercept(X), np.arange(10.0))
    with pytest.raises(ModelFitError):
        fit_normal(add_intercept(np.ones((2, 3))), np.ones(2))


def test_batched_fit_matches_elementwise():
    rng = make_rng(8)
    X = rng.standard_normal((4, 60, 2))
    y = rng.standard_normal((4, 60))
    coef, s2, inv, df = fit_normal(add_intercept(X), y)
    for b in range(4):
        c1, s1, i1, _ = fit_normal(add_intercept(X[b]), y[b])
        assert np.allclose(coef[b], c1) and np.isclose(s2[b], s1) and np.allclose(inv[b], i1)
    yb = (y > 0).astype(float)
    beta, cov, _ = fit_logistic(add_intercept(X), yb)
    for b in range(4):
        b1, c1, _ = fit_logistic(add_intercept(X[b]), yb[b])
        assert np.allclose(beta[b], b1, atol=1e-9)


def test_posterior_coherence_normal():
    rng = make_rng(11)
    n = 30
    X = rng.standard_normal((n, 2))
    y = add_intercept(X) @ np.array([1.0, 2.0, -1.0]) + rng.standard_normal(n)
    f = fit_arrays(DesignSpec("y", ("a", "b")), X, y)
    d = posterior_draw(f, make_rng(12), size=200_000)
    emp = np.cov(d.coef.T)
    expected = f.sigma2 * f.df / (f.df - 2) * f.cov_factor
    # MC SE of each entry is about max(expected) / sqrt(N); allow five of them
    assert np.allclose(emp, expected, rtol=0, atol=5 * np.abs(expected).max() * 2 / np.sqrt(200_000))
    assert np.isclose(d.sigma2.mean(), f.sigma2 * f.df / (f.df - 2), rtol=0.02)
    assert np.allclose(d.coef.mean(axis=0), f.coef, atol=0.01)


def test_posterior_logistic_uses_inverse_information():
    X, y = _logistic_data(n=800, seed=2)
    f = fit_arrays(DesignSpec("y", ("a", "b"), Family.LOGISTIC), X, y)
    d = posterior_draw(f, make_rng(1), size=100_000)
    assert np.allclose(np.cov(d.coef.T), f.cov_factor, rtol=0.05, atol=1e-4)


def test_abb_support_and_empirical_pool():
    donors = np.array([1.5, 2.5, 7.0, -3.0])
    f = fit_arrays(DesignSpec("L0", (), Family.ABB), None, donors)
    rng = make_rng(4)
    for _ in range(20):
        d = posterior_draw(f, rng)
        assert np.isin(d.pool, donors).all()
        y = predictive_draw(d, None, rng, n=50)
        assert np.isin(y, donors).all()
    e = posterior_draw(fit_arrays(DesignSpec("L0", (), Family.EMPIRICAL), None, donors), rng)
    assert np.array_equal(e.pool, donors)


def test_draws_are_deterministic():
    X, y = _logistic_data()
    fl = fit_arrays(DesignSpec("y", ("a", "b"), Family.LOGISTIC), X, y)
    fn = fit_arrays(DesignSpec("y", ("a", "b")), X, X[:, 0] + y)
    for f in (fl, fn):
        d1 = posterior_draw(f, make_rng(9), size=3)
        d2 = posterior_draw(f, make_rng(9), size=3)
        assert np.array_equal(d1.coef, d2.coef)
        assert np.array_equal(predictive_draw(d1, X, make_rng(10)), predictive_draw(d2, X, make_rng(10)))


def test_predictive_draw_shapes_and_values():
    X, y = _logistic_data(n=100)
    fl = fit_arrays(DesignSpec("y", ("a", "b"), Family.LOGISTIC), X, y)
    rng = make_rng(0)
    single = predictive_draw(mle_draw(fl), X[0], rng)
    assert np.ndim(single) == 0
    batch = posterior_draw(fl, rng, size=5)
    out = predictive_draw(batch, np.broadcast_to(X, (5,) + X.shape), rng)
    assert out.shape == (5, 100)
    assert set(np.unique(out)) <= {0.0, 1.0}
    with pytest.raises(ValidationError):
        predictive_draw(mle_draw(fl), X[:, :1], rng)


def test_l1_regression_recovers_generating_model():
    t = generate_dgm(1_000_000, make_rng(21))
    f = fit(DesignSpec("L1", ("L0", "A0")), t)
    assert np.allclose(f.coef, [0.0, 1.0, 1.0], atol=0.005)
    assert np.isclose(f.sigma2, 1.0, rtol=0.005)


def test_fit_rejects_masked_rows(schema, dgm_table):
    t = dgm_table(20)
    m = t.mask.copy()
    m[0, 2] = True
    t = t.replace_values(t.values, m)
    with pytest.raises(ValidationError, match="masked"):
        fit(DesignSpec("L1", ("L0", "A0")), t)
    f = fit(DesignSpec("L1", ("L0", "A0")), t, rows=lambda tb: ~tb.mask.any(axis=1))
    assert f.n == 19


def test_zero_df_posterior_raises():
    X = np.array([[0.0], [1.0]])
    f = fit_arrays(DesignSpec("y", ("x",)), X, np.array([1.0, 3.0]))
    with pytest.raises(ModelFitError, match="df"):
        posterior_draw(f, make_rng(0))


def test_sequential_spec_structure():
    spec = sequential_spec(DGM_SCHEMA)
    assert [s.target for s in spec] == ["L0", "L1", "L2", "Y"]
    assert spec[0].family is Family.NORMAL
    assert spec[2].predictors == ("L0", "A0", "L1", "A1")
    assert spec[3].predictors == ("L0", "A0", "L1", "A1", "L2", "A2")
    assert sequential_spec(DGM_SCHEMA, "abb")[0].family is Family.ABB
    validate_sequential(spec, DGM_SCHEMA)
    bad = (spec[0], DesignSpec("L1", ("L0", "A0", "L2")), spec[2], spec[3])
    with pytest.raises(ValidationError):
        validate_sequential(bad, DGM_SCHEMA)
    assert DesignSpec.from_dict(spec[1].to_dict()) == spec[1]
