"""Classical Monte-Carlo G-formula with nonparametric bootstrap inference."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from functools import partial
from typing import Sequence

import numpy as np

from .data import LongitudinalTable, Regime, missingness_pattern, Pattern
from .exceptions import EstimationError, GFormulaError, ValidationError
from .models import DesignSpec, FittedModel, fit, mle_draw, validate_sequential
from .parallel import pmap
from .rng import substream
from .sequential import check_time_order, simulate

log = logging.getLogger(__name__)

Z975 = 1.959963984540054
MAX_FAIL_FRACTION = 0.10


@dataclass
class McEstimate:
    regimes: tuple[str, ...]
    point: float
    n_syn: int
    means: tuple[float, ...] = ()
    mcse: float | None = None
    bootstrap_se: float | None = None
    ci: tuple[float, float] | None = None
    n_boot: int = 0
    n_failed: int = 0

    def to_dict(self) -> dict:
        return {
            "method": "mc",
            "regimes": list(self.regimes),
            "point": self.point,
            "means": list(self.means),
            "n_syn": self.n_syn,
            "mcse": self.mcse,
            "se": self.bootstrap_se,
            "ci_z": list(self.ci) if self.ci else None,
            "n_boot": self.n_boot,
            "n_boot_failed": self.n_failed,
        }


def fit_sequential(table: LongitudinalTable, spec: Sequence[DesignSpec], ridge: float = 0.0) -> list[FittedModel]:
    validate_sequential(spec, table.schema)
    return [fit(s, table, ridge=ridge) for s in spec]


def simulate_regime(fits: Sequence[FittedModel], regime: Regime, n_syn: int, rng: np.random.Generator,
                    schema=None) -> np.ndarray:
    """Simulate ``n_syn`` outcome values under ``regime`` with parameters at the MLE."""
    if int(n_syn) < 1:
        raise ValidationError("n_syn must be >= 1")
    if schema is None:
        raise ValidationError("simulate_regime needs the table schema")
    check_time_order(schema, fits)
    regime.validate(schema)
    draws = [mle_draw(f) for f in fits]
    sims = simulate(schema, draws, dict(regime.assignments), int(n_syn), rng)
    return np.asarray(sims[schema.outcome.name])


def _require_complete(table: LongitudinalTable) -> None:
    if missingness_pattern(table) is not Pattern.COMPLETE:
        raise ValidationError("the Monte-Carlo estimator needs complete data; use the MI route for missing data")


def _contrast(table, spec, regime_a, regime_b, n_syn, rng, common_random_numbers, ridge):
    fits = fit_sequential(table, spec, ridge)
    rng_b = substream(rng, 0) if common_random_numbers else substream(rng, 1)
    ya = simulate_regime(fits, regime_a, n_syn, substream(rng, 0), table.schema)
    yb = simulate_regime(fits, regime_b, n_syn, rng_b, table.schema)
    return ya, yb


def estimate_contrast_mc(table: LongitudinalTable, spec: Sequence[DesignSpec], regime_a: Regime,
                         regime_b: Regime, n_syn: int, rng: np.random.Generator,
                         common_random_numbers: bool = False, ridge: float = 0.0) -> McEstimate:
    """Fit the sequential models once and contrast mean simulated outcomes.

    With ``common_random_numbers`` both regimes reuse one random stream, so
    identical regimes give a contrast of exactly zero.
    """
    _require_complete(table)
    ya, yb = _contrast(table, spec, regime_a, regime_b, n_syn, rng, common_random_numbers, ridge)
    ma, mb = float(ya.mean()), float(yb.mean())
    mcse = mcse_mc(ya, yb) if n_syn >= 2 else None
    return McEstimate((regime_a.label, regime_b.label), ma - mb, int(n_syn), (ma, mb), mcse)


def _replicate(r, table, spec, regime_a, regime_b, n_syn, seed_rng, crn, ridge):
    rng = substream(seed_rng, 1, r)
    idx = rng.integers(0, table.n_rows, size=table.n_rows)
    try:
        ya, yb = _contrast(table.take(idx), spec, regime_a, regime_b, n_syn, rng, crn, ridge)
    except GFormulaError as exc:
        log.debug("bootstrap replicate %d failed: %s", r, exc)
        return None
    return float(ya.mean() - yb.mean())


def bootstrap(table: LongitudinalTable, spec: Sequence[DesignSpec], regime_a: Regime, regime_b: Regime,
              n_syn: int, n_boot: int, rng: np.random.Generator, workers: int | None = 1,
              common_random_numbers: bool = False, ridge: float = 0.0) -> McEstimate:
    """Point estimate plus nonparametric bootstrap SE and normal-based 95% CI.

    Rows (individuals) are resampled with replacement. Failed replicates are
    skipped; more than 10% failures raise :class:`EstimationError`.
    """
    if int(n_boot) < 2:
        raise ValidationError("n_boot must be >= 2")
    est = estimate_contrast_mc(table, spec, regime_a, regime_b, n_syn, substream(rng, 0),
                               common_random_numbers, ridge)
    job = partial(_replicate, table=table, spec=tuple(spec), regime_a=regime_a, regime_b=regime_b,
                  n_syn=int(n_syn), seed_rng=rng, crn=common_random_numbers, ridge=ridge)
    reps = pmap(job, range(int(n_boot)), workers)
    ok = np.array([x for x in reps if x is not None])
    failed = len(reps) - len(ok)
    if failed > MAX_FAIL_FRACTION * n_boot or len(ok) < 2:
        raise EstimationError(f"{failed} of {n_boot} bootstrap replicates failed")
    se = float(np.std(ok, ddof=1))
    est.bootstrap_se = se
    est.ci = (est.point - Z975 * se, est.point + Z975 * se)
    est.n_boot = int(n_boot)
    est.n_failed = failed
    return est


def mcse_mc(sim_a: np.ndarray, sim_b: np.ndarray, n_syn: int | None = None) -> float:
    """Monte-Carlo SE of a difference of two independent simulated means."""
    sim_a = np.asarray(sim_a, dtype=float)
    sim_b = np.asarray(sim_b, dtype=float)
    n = len(sim_a) if n_syn is None else int(n_syn)
    if n < 2 or len(sim_a) < 2 or len(sim_b) < 2:
        raise ValidationError("mcse_mc needs n_syn >= 2")
    return float(np.sqrt(np.var(sim_a, ddof=1) / n + np.var(sim_b, ddof=1) / n))
