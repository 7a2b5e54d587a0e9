"""Combining per-imputation estimates: Rubin's rule and the synthetic-data rule."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from scipy import stats

from .exceptions import NegativeVarianceError, ValidationError

Z975 = float(stats.norm.ppf(0.975))
DEFAULT_MAX_BATCHES = 20


@dataclass
class PooledResult:
    point: float
    between: float
    within: float
    variance: float
    se: float
    df: float
    ci_t: tuple[float, float]
    ci_z: tuple[float, float]
    M_used: int
    batches_added: int = 0
    rule: str = "synthetic"
    flags: list[str] = field(default_factory=list)
    primary: str = "t"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ci_t"] = list(self.ci_t)
        d["ci_z"] = list(self.ci_z)
        d["df"] = None if math.isinf(self.df) else self.df
        d["df_infinite"] = math.isinf(self.df)
        return d

    def covers(self, truth: float, kind: str = "t") -> bool:
        lo, hi = self.ci_t if kind == "t" else self.ci_z
        return lo <= truth <= hi


def between_within(estimates: Sequence[float], withins: Sequence[float]) -> tuple[float, float]:
    est = np.asarray(estimates, dtype=float)
    w = np.asarray(withins, dtype=float)
    if est.size < 2:
        raise ValidationError("need at least two imputations")
    if w.shape != est.shape:
        raise ValidationError("estimates and within-variances differ in length")
    return float(np.var(est, ddof=1)), float(np.mean(w))


def rubin_variance(B: float, V: float, M: int) -> float:
    return (1.0 + 1.0 / M) * B + V


def synthetic_variance(B: float, V: float, M: int) -> float:
    """``(1 + 1/M) B - V``; may be zero or negative."""
    if M < 2:
        raise ValidationError("M must be >= 2")
    return (1.0 + 1.0 / M) * B - V


def raghu_df(B: float, V: float, M: int) -> float:
    """t reference degrees of freedom for the synthetic rule; infinite when B is zero."""
    if B <= 0:
        return math.inf
    return (M - 1) * (1.0 - M * V / ((M + 1) * B)) ** 2


def rubin_df(B: float, V: float, M: int) -> float:
    if B <= 0:
        return math.inf
    r = (1.0 + 1.0 / M) * B / V if V > 0 else math.inf
    return (M - 1) * (1.0 + 1.0 / r) ** 2


def prob_negative(M: int, n_syn: int, n_obs: int, exact: bool = False) -> float:
    """P(V_syn < 0) for a normal mean with known variance.

    The default is the large-M approximation P(chi2_{M-1} < M / (n_syn/n_obs + 1)).
    ``exact=True`` uses the threshold (M - 1) / (1 + 1/M) / (n_syn/n_obs + 1)
    instead, which is exact in that model; the two differ noticeably for small M.
    """
    if M < 2:
        raise ValidationError("M must be >= 2")
    ratio = n_syn / n_obs
    if math.isinf(ratio):
        return 0.0
    scale = (M - 1) / (1.0 + 1.0 / M) if exact else float(M)
    return float(stats.chi2.cdf(scale / (ratio + 1.0), M - 1))


def contrast_variance(vsyn_a: float, vsyn_b: float) -> float:
    return vsyn_a + vsyn_b


def _intervals(point: float, variance: float, df: float, flags: list[str]):
    se = math.sqrt(variance) if variance > 0 else 0.0
    if math.isinf(df):
        q = Z975
    else:
        if df < 1:
            flags.append("df_floored")
        q = float(stats.t.ppf(0.975, max(df, 1.0)))
    return se, (point - q * se, point + q * se), (point - Z975 * se, point + Z975 * se)


def pool(estimates: Sequence[float], withins: Sequence[float], rule: str = "synthetic") -> PooledResult:
    """Pool one scalar estimand. No extension; the synthetic variance may be non-positive."""
    est = np.asarray(estimates, dtype=float)
    B, V = between_within(est, withins)
    M = est.size
    point = float(est.mean())
    flags: list[str] = []
    if rule == "rubin":
        var, df = rubin_variance(B, V, M), rubin_df(B, V, M)
    elif rule == "synthetic":
        var, df = synthetic_variance(B, V, M), raghu_df(B, V, M)
        if B == 0 and V == 0:
            flags.append("degenerate")
        elif var <= 0:
            flags.append("nonpositive_variance")
    else:
        raise ValidationError(f"unknown pooling rule {rule!r}")
    se, ci_t, ci_z = _intervals(point, max(var, 0.0), df, flags)
    return PooledResult(point, B, V, var, se, df, ci_t, ci_z, M, 0, rule, flags)


def pool_contrast(mu_a, v_a, mu_b, v_b, method: str = "direct", rule: str = "synthetic") -> PooledResult:
    """Pool the contrast mean(a) - mean(b).

    Both intervals are reported; the z interval is primary because the t
    reference df was derived for a single mean. ``method="sum"`` adds the per-regime synthetic variances; ``"direct"``
    applies the rule to the per-imputation contrasts. In both cases between,
    within and df are computed from the per-imputation contrasts.
    """
    mu_a, mu_b = np.asarray(mu_a, float), np.asarray(mu_b, float)
    v_a, v_b = np.asarray(v_a, float), np.asarray(v_b, float)
    res = pool(mu_a - mu_b, v_a + v_b, rule=rule)
    res.primary = "z"
    if method == "direct" or rule == "rubin":
        return res
    if method != "sum":
        raise ValidationError(f"unknown contrast variance method {method!r}")
    M = mu_a.size
    var = contrast_variance(synthetic_variance(*between_within(mu_a, v_a), M),
                            synthetic_variance(*between_within(mu_b, v_b), M))
    flags = [f for f in res.flags if f not in ("nonpositive_variance", "df_floored")]
    if var <= 0 and not (res.between == 0 and res.within == 0):
        flags.append("nonpositive_variance")
    se, ci_t, ci_z = _intervals(res.point, max(var, 0.0), res.df, flags)
    return PooledResult(res.point, res.between, res.within, var, se, res.df, ci_t, ci_z, M, 0, rule, flags, "z")


def _pool_run(run, a, b, method):
    ia = run.regime_index(a)
    if b is None:
        return pool(run.mu[:, ia], run.v[:, ia])
    ib = run.regime_index(b)
    return pool_contrast(run.mu[:, ia], run.v[:, ia], run.mu[:, ib], run.v[:, ib], method=method)


def pool_with_extension(run, rng: np.random.Generator, regime_a=0, regime_b=None,
                        max_batches: int = DEFAULT_MAX_BATCHES, method: str = "direct"):
    """Pool with the synthetic rule, adding batches of imputations until the variance is positive.

    ``run`` is an imputation run exposing ``extended(rng)``; each added batch
    has the run's initial size and all statistics are recomputed over every
    imputation accumulated so far. Returns ``(result, final_run)``.
    """
    if max_batches < 1:
        raise ValidationError("max_batches must be >= 1")
    added = 0
    res = _pool_run(run, regime_a, regime_b, method)
    while "nonpositive_variance" in res.flags:
        if added >= max_batches:
            raise NegativeVarianceError(
                f"synthetic variance still non-positive after {added} extra batches (M={run.M})")
        run = run.extended(rng)
        added += 1
        res = _pool_run(run, regime_a, regime_b, method)
    res.batches_added = added
    return res, run
