import numpy as np
import pytest

from gformula_mi.data import Pattern, augment, load_csv, missingness_pattern
from gformula_mi.exceptions import ValidationError
from gformula_mi.gform_mc import estimate_contrast_mc
from gformula_mi.gform_mi import (block_stats, contrast, extend, impute_synthetic, point_estimate,
                                  write_imputations)
from gformula_mi.models import sequential_spec
from gformula_mi.rng import make_rng
from gformula_mi.simstudy import generate_dgm


@pytest.fixture
def spec(schema):
    return sequential_spec(schema, "normal_linear")


def test_run_shapes_and_stats(dgm_table, spec, regimes):
    run = impute_synthetic(dgm_table(200), spec, regimes, 8, 150, make_rng(1))
    assert run.mu.shape == run.v.shape == (8, 2)
    assert run.M == 8 and run.n_syn == 150
    assert np.all(run.v > 0)
    assert point_estimate(run, "1,1,1") == pytest.approx(run.mu[:, 0].mean())
    c = contrast(run, regimes[0], regimes[1])
    assert c.point == pytest.approx(run.mu[:, 0].mean() - run.mu[:, 1].mean())
    assert len(run.records()) == 16


def test_block_stats():
    y = np.array([[[1.0, 2.0, 3.0, 6.0]]])
    m, v = block_stats(y)
    assert m[0, 0] == 3.0
    assert v[0, 0] == pytest.approx(np.var([1, 2, 3, 6], ddof=1) / 4)


def test_completeness_and_originals_untouched(dgm_table, spec, regimes):
    t = dgm_table(60)
    run = impute_synthetic(t, spec, regimes, 3, 40, make_rng(2), keep_datasets=True)
    assert len(run.datasets) == 3
    for ds in run.datasets:
        assert ds.n_rows == 60 + 80
        assert not ds.mask.any() and np.all(np.isfinite(ds.values))
        assert np.array_equal(ds.values[ds.origin == 1], t.values)
        assert np.all(ds.values[ds.block == 0][:, [1, 3, 5]] == 1.0)
        assert np.all(ds.values[ds.block == 1][:, [1, 3, 5]] == 0.0)
        y = ds.values[ds.block == 0, 6]
    assert np.isclose(y.mean(), run.mu[2, 0])


def test_imputations_are_independent(dgm_table, spec, regimes):
    run = impute_synthetic(dgm_table(300), spec, regimes, 400, 100, make_rng(3))
    x = run.mu[:, 0] - run.mu[:, 0].mean()
    lag1 = np.sum(x[1:] * x[:-1]) / np.sum(x * x)
    assert abs(lag1) < 4 / np.sqrt(400)


def test_shared_draws_correlate_regime_blocks(dgm_table, spec, regimes):
    t = dgm_table(300)
    shared = impute_synthetic(t, spec, [regimes[0], regimes[0]], 300, 300, make_rng(4))
    indep = impute_synthetic(t, spec, [regimes[0], regimes[0]], 300, 300, make_rng(4), shared_draws=False)
    r_shared = np.corrcoef(shared.mu.T)[0, 1]
    r_indep = np.corrcoef(indep.mu.T)[0, 1]
    assert r_shared > 0.5
    assert abs(r_indep) < 0.25


def test_seed_determinism_and_extension(dgm_table, spec, regimes):
    t = dgm_table(100)
    a = impute_synthetic(t, spec, regimes, 5, 50, make_rng(9))
    b = impute_synthetic(t, spec, regimes, 5, 50, make_rng(9))
    assert np.array_equal(a.mu, b.mu) and np.array_equal(a.v, b.v)
    e1 = extend(a, make_rng(9))
    e2 = a.extended(make_rng(9))
    assert e1.M == 10 and e1.batches == 2
    assert np.array_equal(e1.mu[:5], a.mu)
    assert np.array_equal(e1.mu, e2.mu)
    assert not np.array_equal(e1.mu[5:], a.mu)


def test_agrees_with_monte_carlo_at_scale(spec, regimes, schema):
    t = generate_dgm(20_000, make_rng(31))
    run = impute_synthetic(t, spec, regimes, 20, 20_000, make_rng(32))
    mc = estimate_contrast_mc(t, sequential_spec(schema, "normal_linear"), *regimes, 400_000, make_rng(33))
    mi = point_estimate(run, 0) - point_estimate(run, 1)
    assert abs(mi - mc.point) < 0.05


def test_input_validation(dgm_table, spec, regimes):
    t = dgm_table(30)
    with pytest.raises(ValidationError):
        impute_synthetic(t, spec, regimes, 1, 10, make_rng(0))
    with pytest.raises(ValidationError):
        impute_synthetic(t, spec, regimes, 5, 1, make_rng(0))
    m = t.mask.copy()
    m[0, 2] = True
    with pytest.raises(ValidationError):
        impute_synthetic(t.replace_values(t.values, m), spec, regimes, 5, 10, make_rng(0))
    aug = augment(t, regimes[0], 3)
    assert missingness_pattern(aug, "augmented") is Pattern.MONOTONE


def test_write_imputations(tmp_path, dgm_table, spec, regimes, schema):
    run = impute_synthetic(dgm_table(20), spec, regimes, 2, 7, make_rng(1), keep_datasets=True)
    paths = write_imputations(run, tmp_path)
    assert len(paths) == 4
    back = load_csv(paths[0], schema)
    assert back.n_rows == 7 and back.n_missing == 0
    assert back.col("Y").mean() == pytest.approx(run.mu[0, 0])
    ext = run.extended(make_rng(2))
    assert len(ext.datasets) == 4 and len(write_imputations(ext, tmp_path / "ext")) == 8
    bare = impute_synthetic(dgm_table(20), spec, regimes, 2, 7, make_rng(1))
    with pytest.raises(ValidationError):
        write_imputations(bare, tmp_path)
