"""Conditional model families used for the sequential G-formula models.

Every fitting and drawing routine accepts an optional leading batch axis so
that M imputations (or M chained-equation chains) can be processed in one
vectorised call. Unbatched use follows the same code path with an empty
batch shape.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Callable, Sequence

import numpy as np

from .data import Kind, LongitudinalTable, Role, Schema
from .exceptions import ModelFitError, ValidationError

IRLS_MAX_ITER = 50
IRLS_TOL = 1e-10


class Family(str, Enum):
    NORMAL = "normal_linear"
    LOGISTIC = "logistic"
    EMPIRICAL = "empirical"
    ABB = "abb"

    @property
    def nonparametric(self) -> bool:
        return self in (Family.EMPIRICAL, Family.ABB)


@dataclass(frozen=True)
class DesignSpec:
    target: str
    predictors: tuple[str, ...] = ()
    family: Family = Family.NORMAL

    def __post_init__(self):
        object.__setattr__(self, "predictors", tuple(self.predictors))
        object.__setattr__(self, "family", Family(self.family))
        if self.family.nonparametric and self.predictors:
            raise ValidationError(f"{self.target}: {self.family.value} family takes no predictors")

    def validate(self, schema: Schema) -> None:
        t = schema.index(self.target)
        for p in self.predictors:
            if schema.index(p) >= t:
                raise ValidationError(f"predictor {p!r} does not precede target {self.target!r}")
        kind = schema.column(self.target).kind
        if self.family is Family.LOGISTIC and kind is not Kind.BINARY:
            raise ValidationError(f"logistic family on non-binary target {self.target!r}")
        if self.family is Family.NORMAL and kind is Kind.BINARY:
            raise ValidationError(f"normal_linear family on binary target {self.target!r}")

    def to_dict(self) -> dict:
        return {"target": self.target, "predictors": list(self.predictors), "family": self.family.value}

    @classmethod
    def from_dict(cls, d: dict) -> "DesignSpec":
        return cls(d["target"], tuple(d.get("predictors", ())), d.get("family", "normal_linear"))


SequentialModelSpec = tuple[DesignSpec, ...]


def default_family(kind: Kind) -> Family:
    return Family.LOGISTIC if kind is Kind.BINARY else Family.NORMAL


def sequential_spec(schema: Schema, first_family: Family | str | None = None) -> SequentialModelSpec:
    """Main-effects models for every non-treatment column, in causal order.

    Each confounder and the outcome is regressed on all columns that precede
    it. ``first_family`` overrides the family of the first column (typically
    ``empirical`` or ``abb`` for L_0).
    """
    specs = []
    for j, col in enumerate(schema.columns):
        if col.role is Role.TREATMENT:
            continue
        fam = default_family(col.kind)
        preds = tuple(schema.names[:j])
        if j == 0 and first_family is not None:
            fam = Family(first_family)
            if fam.nonparametric:
                preds = ()
        specs.append(DesignSpec(col.name, preds, fam))
    return tuple(specs)


def validate_sequential(spec: Sequence[DesignSpec], schema: Schema) -> None:
    targets = [s.target for s in spec]
    order = [schema.index(t) for t in targets]
    if order != sorted(order):
        raise ValidationError("model specs are not in causal time order")
    needed = [c.name for c in schema.columns if c.role is not Role.TREATMENT]
    if sorted(targets) != sorted(needed):
        raise ValidationError(f"model targets {targets} must be exactly the non-treatment columns {needed}")
    for s in spec:
        s.validate(schema)


@dataclass(frozen=True, eq=False)
class FittedModel:
    """MLE fit. Array fields may carry a leading batch axis."""

    spec: DesignSpec
    coef: np.ndarray | None = None
    sigma2: np.ndarray | float | None = None
    cov_factor: np.ndarray | None = None
    df: int | None = None
    donors: np.ndarray | None = None
    n: int = 0

    @property
    def family(self) -> Family:
        return self.spec.family

    @property
    def batch_shape(self) -> tuple[int, ...]:
        if self.family.nonparametric:
            return self.donors.shape[:-1]
        return self.coef.shape[:-1]


@dataclass(frozen=True, eq=False)
class ParameterDraw:
    spec: DesignSpec
    coef: np.ndarray | None = None
    sigma2: np.ndarray | None = None
    pool: np.ndarray | None = None

    @property
    def family(self) -> Family:
        return self.spec.family

    @property
    def batch_shape(self) -> tuple[int, ...]:
        if self.family.nonparametric:
            return self.pool.shape[:-1]
        return self.coef.shape[:-1]


def expit(x):
    """Logistic function, evaluated without overflow for either sign."""
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def add_intercept(X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    ones = np.ones(X.shape[:-1] + (1,))
    return np.concatenate([ones, X], axis=-1)


# ---------------------------------------------------------------- fitting


def _check_rank(X: np.ndarray, target: str) -> None:
    n, p = X.shape[-2:]
    if n < p:
        raise ModelFitError(f"{target}: {n} rows for {p} parameters")
    flat = X.reshape((-1, n, p))
    for Xi in flat:
        s = np.linalg.svd(Xi, compute_uv=False)
        if s[-1] <= s[0] * max(n, p) * np.finfo(float).eps:
            raise ModelFitError(f"{target}: rank-deficient design matrix")


def fit_normal(X: np.ndarray, y: np.ndarray, target: str = "y", check_rank: bool = True):
    """OLS with intercept-bearing design ``X`` of shape (..., n, p).

    Returns (coef, sigma2, (X'X)^-1, residual df).
    """
    n, p = X.shape[-2:]
    if n < p:
        raise ModelFitError(f"{target}: {n} rows for {p} parameters")
    if check_rank:
        _check_rank(X, target)
    XtX = np.einsum("...ni,...nj->...ij", X, X)
    Xty = np.einsum("...ni,...n->...i", X, y)
    try:
        inv = np.linalg.inv(XtX)
    except np.linalg.LinAlgError:
        raise ModelFitError(f"{target}: singular X'X") from None
    inv = 0.5 * (inv + np.swapaxes(inv, -1, -2))
    coef = np.einsum("...ij,...j->...i", inv, Xty)
    resid = y - np.einsum("...ni,...i->...n", X, coef)
    df = n - p
    rss = np.einsum("...n,...n->...", resid, resid)
    sigma2 = rss / df if df > 0 else np.zeros_like(rss)
    return coef, sigma2, inv, df


def logistic_loglik(beta: np.ndarray, X: np.ndarray, y: np.ndarray) -> float:
    eta = X @ beta
    return float(np.sum(y * eta - np.logaddexp(0.0, eta)))


def logistic_score(beta: np.ndarray, X: np.ndarray, y: np.ndarray) -> np.ndarray:
    return np.einsum("...ni,...n->...i", X, y - expit(np.einsum("...ni,...i->...n", X, beta)))


def fit_logistic(X: np.ndarray, y: np.ndarray, target: str = "y", ridge: float = 0.0,
                 max_iter: int = IRLS_MAX_ITER, tol: float = IRLS_TOL, check_rank: bool = True):
    """Newton-Raphson / IRLS for logistic regression, batched over leading axes.

    Returns (coef, inverse information at the MLE, iterations used). The
    intercept (column 0) is never penalised by ``ridge``.
    """
    n, p = X.shape[-2:]
    if n < p:
        raise ModelFitError(f"{target}: {n} rows for {p} parameters")
    if check_rank:
        _check_rank(X, target)
    batch = X.shape[:-2]
    beta = np.zeros(batch + (p,))
    pen = np.full(p, float(ridge))
    pen[0] = 0.0
    eye_pen = np.diag(pen)
    for it in range(1, max_iter + 1):
        eta = np.einsum("...ni,...i->...n", X, beta)
        mu = expit(eta)
        w = mu * (1.0 - mu)
        info = np.einsum("...ni,...n,...nj->...ij", X, w, X) + eye_pen
        grad = np.einsum("...ni,...n->...i", X, y - mu) - pen * beta
        try:
            step = np.linalg.solve(info, grad[..., None])[..., 0]
        except np.linalg.LinAlgError:
            raise ModelFitError(f"{target}: singular information matrix (separation?)") from None
        beta = beta + step
        if not np.all(np.isfinite(beta)):
            raise ModelFitError(f"{target}: IRLS diverged (separation?)")
        if np.max(np.abs(step), initial=0.0) < tol:
            break
    else:
        raise ModelFitError(f"{target}: IRLS did not converge in {max_iter} iterations (separation?)")
    mu = expit(np.einsum("...ni,...i->...n", X, beta))
    info = np.einsum("...ni,...n,...nj->...ij", X, mu * (1.0 - mu), X) + eye_pen
    cov = np.linalg.inv(info)
    cov = 0.5 * (cov + np.swapaxes(cov, -1, -2))
    return beta, cov, it


def fit_arrays(spec: DesignSpec, X: np.ndarray | None, y: np.ndarray, ridge: float = 0.0,
               check_rank: bool = True) -> FittedModel:
    """Fit ``spec`` on raw covariates ``X`` (..., n, k) without intercept and target ``y`` (..., n)."""
    y = np.asarray(y, dtype=float)
    if spec.family.nonparametric:
        if y.shape[-1] < 1:
            raise ModelFitError(f"{spec.target}: no donor values")
        return FittedModel(spec, donors=y.copy(), n=y.shape[-1])
    if X is None:
        X = np.empty(y.shape + (0,))
    Xd = add_intercept(X)
    if Xd.shape[-1] != len(spec.predictors) + 1:
        raise ValidationError(f"{spec.target}: covariate dimension {X.shape[-1]} != {len(spec.predictors)}")
    if spec.family is Family.NORMAL:
        coef, sigma2, inv, df = fit_normal(Xd, y, spec.target, check_rank)
        return FittedModel(spec, coef, sigma2, inv, df, n=y.shape[-1])
    coef, cov, _ = fit_logistic(Xd, y, spec.target, ridge=ridge, check_rank=check_rank)
    return FittedModel(spec, coef, None, cov, None, n=y.shape[-1])


def fit(spec: DesignSpec, table: LongitudinalTable,
        rows: np.ndarray | Callable[[LongitudinalTable], np.ndarray] | None = None,
        ridge: float = 0.0) -> FittedModel:
    """Fit one conditional model on the selected rows of ``table``.

    ``rows`` is a boolean row mask or a predicate on the table; the default
    selects the original rows (origin == 1). Every target and predictor cell in
    the selected rows must be observed.
    """
    if rows is None:
        sel = table.origin == 1
    elif callable(rows):
        sel = np.asarray(rows(table), dtype=bool)
    else:
        sel = np.asarray(rows, dtype=bool)
    cols = [table.schema.index(c) for c in spec.predictors]
    t = table.schema.index(spec.target)
    used = cols + [t]
    if table.mask[np.ix_(sel, used)].any():
        raise ValidationError(f"{spec.target}: masked cells among the rows selected for fitting")
    X = table.values[np.ix_(sel, cols)]
    y = table.values[sel, t]
    return fit_arrays(spec, X, y, ridge=ridge)


# ---------------------------------------------------------------- drawing


def mle_draw(fitted: FittedModel) -> ParameterDraw:
    """Parameters fixed at the MLE (used by the Monte-Carlo estimator)."""
    if fitted.family.nonparametric:
        return ParameterDraw(fitted.spec, pool=fitted.donors)
    s2 = None if fitted.sigma2 is None else np.asarray(fitted.sigma2, dtype=float)
    return ParameterDraw(fitted.spec, coef=fitted.coef, sigma2=s2)


def _chol(cov: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        vals, vecs = np.linalg.eigh(cov)
        return vecs * np.sqrt(np.clip(vals, 0.0, None))[..., None, :]


def posterior_draw(fitted: FittedModel, rng: np.random.Generator, size: int | None = None) -> ParameterDraw:
    """Draw parameters from the (approximate) posterior given an MLE fit.

    normal_linear
        sigma2* = sigma2_hat * df / chi2(df), beta* ~ N(beta_hat, sigma2* (X'X)^-1).
    logistic
        beta* ~ N(beta_hat, inverse information).
    abb
        donor pool resampled with replacement (first stage of the approximate
        Bayesian bootstrap).
    empirical
        the fit itself; no parameter uncertainty.

    If ``fitted`` carries a batch axis, one draw is made per batch element and
    ``size`` must be None. Otherwise ``size`` draws are stacked on a new axis.
    """
    fam = fitted.family
    batch = fitted.batch_shape
    if batch and size is not None:
        raise ValidationError("size must be None for a batched fit")
    shape = batch if batch else (() if size is None else (int(size),))

    if fam is Family.EMPIRICAL:
        pool = np.broadcast_to(fitted.donors, shape + fitted.donors.shape[-1:])
        return ParameterDraw(fitted.spec, pool=pool)
    if fam is Family.ABB:
        nd = fitted.donors.shape[-1]
        idx = rng.integers(0, nd, size=shape + (nd,))
        pool = np.take_along_axis(np.broadcast_to(fitted.donors, shape + (nd,)), idx, axis=-1)
        return ParameterDraw(fitted.spec, pool=pool)

    p = fitted.coef.shape[-1]
    L = _chol(fitted.cov_factor)
    z = rng.standard_normal(shape + (p,))
    dev = np.einsum("...ij,...j->...i", L, z)
    if fam is Family.LOGISTIC:
        return ParameterDraw(fitted.spec, coef=fitted.coef + dev)

    df = fitted.df
    s2hat = np.asarray(fitted.sigma2, dtype=float)
    if df is None or df < 1:
        raise ModelFitError(f"{fitted.spec.target}: posterior undefined with zero residual df")
    g = rng.chisquare(df, size=shape)
    sigma2 = s2hat * df / g
    coef = fitted.coef + np.sqrt(sigma2)[..., None] * dev
    return ParameterDraw(fitted.spec, coef=coef, sigma2=np.asarray(sigma2))


def predictive_draw(draw: ParameterDraw, covariates: np.ndarray | None, rng: np.random.Generator,
                    n: int | None = None):
    """Simulate the target given parameters and covariates.

    ``covariates`` has shape (n, k), (*batch, n, k) or (k,) for a single row;
    it is ignored by the nonparametric families, which need ``n`` instead when
    no covariates are passed. Returns an array of shape (*batch, n) or a scalar
    for a single-row call.
    """
    fam = draw.family
    batch = draw.batch_shape
    single = covariates is not None and np.ndim(covariates) == 1
    if single:
        covariates = np.asarray(covariates, dtype=float)[None, :]
    if covariates is not None:
        covariates = np.asarray(covariates, dtype=float)
        n = covariates.shape[-2]
    if n is None:
        raise ValidationError("predictive_draw needs covariates or n")

    if fam.nonparametric:
        nd = draw.pool.shape[-1]
        idx = rng.integers(0, nd, size=batch + (n,))
        out = np.take_along_axis(draw.pool, idx, axis=-1) if batch else draw.pool[idx]
    else:
        k = draw.coef.shape[-1] - 1
        if covariates is None:
            if k:
                raise ValidationError(f"{draw.spec.target}: model needs {k} covariates")
            covariates = np.empty((n, 0))
        if covariates.shape[-1] != k:
            raise ValidationError(
                f"{draw.spec.target}: covariate dimension {covariates.shape[-1]} != {k}")
        eta = draw.coef[..., :1] + np.einsum("...nk,...k->...n", covariates, draw.coef[..., 1:])
        eta = np.broadcast_to(eta, batch + (n,))
        if fam is Family.NORMAL:
            sd = np.sqrt(np.asarray(draw.sigma2, dtype=float))[..., None]
            out = eta + sd * rng.standard_normal(batch + (n,))
        else:
            out = (rng.random(batch + (n,)) < expit(eta)).astype(float)
    return out[..., 0] if single and not batch else out
