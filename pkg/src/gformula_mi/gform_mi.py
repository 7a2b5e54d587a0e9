"""G-formula via synthetic multiple imputation.

The observed table is augmented with one block of ``n_syn`` rows per regime.
Each imputation draws every sequential model's parameters from its posterior
(fitted on the original rows only) and fills the augmented rows in a single
pass in causal order. Only per-imputation means and complete-data variances
of the outcome in each block are kept unless datasets are requested.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from .data import LongitudinalTable, Pattern, Regime, augment, missingness_pattern, write_csv
from .exceptions import EstimationError, ValidationError
from .models import DesignSpec, FittedModel, ParameterDraw, fit, posterior_draw, validate_sequential
from .rng import substream
from .sequential import regime_arrays, simulate


class ImputationEngine(Protocol):
    regimes: tuple[Regime, ...]
    n_syn: int

    def draw_batch(self, M: int, rng: np.random.Generator, keep: bool = False):
        ...


def _broadcast_draw(d: ParameterDraw, R: int) -> ParameterDraw:
    """Share one draw per imputation across R regime blocks: (M, ...) -> (M, R, ...)."""
    if d.family.nonparametric:
        pool = d.pool[:, None, :]
        return ParameterDraw(d.spec, pool=np.broadcast_to(pool, pool.shape[:1] + (R,) + pool.shape[2:]))
    coef = np.broadcast_to(d.coef[:, None, :], (d.coef.shape[0], R, d.coef.shape[1]))
    s2 = None if d.sigma2 is None else np.broadcast_to(np.asarray(d.sigma2)[:, None], coef.shape[:2])
    return ParameterDraw(d.spec, coef=coef, sigma2=s2)


def _stack_draws(ds: list[ParameterDraw]) -> ParameterDraw:
    d0 = ds[0]
    if d0.family.nonparametric:
        return ParameterDraw(d0.spec, pool=np.stack([d.pool for d in ds], axis=1))
    s2 = None if d0.sigma2 is None else np.stack([np.asarray(d.sigma2) for d in ds], axis=1)
    return ParameterDraw(d0.spec, coef=np.stack([d.coef for d in ds], axis=1), sigma2=s2)


def impute_blocks(schema, fits: Sequence[FittedModel], regimes: Sequence[Regime], M: int, n_syn: int,
                  rng: np.random.Generator, shared_draws: bool = True) -> dict[str, np.ndarray]:
    """One posterior draw per model and imputation, then one sequential pass.

    ``fits`` may be single fits (M draws are taken from each) or fits batched
    over M completed datasets (one draw each). Returns arrays of shape
    (M, R, n_syn) per column.
    """
    R = len(regimes)
    batched = bool(fits[0].batch_shape)
    size = None if batched else M
    draws = []
    for f in fits:
        if shared_draws:
            draws.append(_broadcast_draw(posterior_draw(f, rng, size=size), R))
        else:
            draws.append(_stack_draws([posterior_draw(f, rng, size=size) for _ in range(R)]))
    treat = regime_arrays(regimes, schema, (M,))
    return simulate(schema, draws, treat, n_syn, rng, batch=(M, R))


def block_stats(y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-block mean and complete-data variance of the mean (sample variance / n_syn)."""
    n = y.shape[-1]
    return y.mean(axis=-1), y.var(axis=-1, ddof=1) / n


def completed_tables(augmented: LongitudinalTable, sims: dict[str, np.ndarray],
                     base_values: np.ndarray | None = None) -> list[LongitudinalTable]:
    """Fill the augmented blocks of ``augmented`` with imputed values, one table per imputation."""
    schema = augmented.schema
    M, R, n_syn = next(iter(sims.values())).shape
    out = []
    aug_rows = augmented.origin == 0
    for m in range(M):
        vals = augmented.values.copy() if base_values is None else base_values[m].copy()
        for name, arr in sims.items():
            vals[aug_rows, schema.index(name)] = arr[m].reshape(-1)
        mask = np.zeros_like(augmented.mask)
        out.append(LongitudinalTable(schema, vals, mask, augmented.origin, augmented.block, augmented.regimes))
    return out


@dataclass
class SyntheticImputer:
    """Engine for complete original data: models fitted once on the original rows."""

    table: LongitudinalTable
    spec: tuple[DesignSpec, ...]
    regimes: tuple[Regime, ...]
    n_syn: int
    shared_draws: bool = True
    ridge: float = 0.0
    fits: list[FittedModel] = field(init=False)

    def __post_init__(self):
        validate_sequential(self.spec, self.table.schema)
        for r in self.regimes:
            r.validate(self.table.schema)
        if missingness_pattern(self.table) is not Pattern.COMPLETE:
            raise ValidationError("original rows must be complete; use the two-stage route for missing data")
        self.fits = [fit(s, self.table, ridge=self.ridge) for s in self.spec]

    def augmented(self) -> LongitudinalTable:
        out = self.table.original()
        for r in self.regimes:
            out = augment(out, r, self.n_syn)
        return out

    def draw_batch(self, M: int, rng: np.random.Generator, keep: bool = False):
        sims = impute_blocks(self.table.schema, self.fits, self.regimes, M, self.n_syn, rng, self.shared_draws)
        _check_filled(sims)
        mu, v = block_stats(sims[self.table.schema.outcome.name])
        datasets = completed_tables(self.augmented(), sims) if keep else None
        return mu, v, datasets


def _check_filled(sims: dict[str, np.ndarray]) -> None:
    for name, arr in sims.items():
        if not np.all(np.isfinite(arr)):
            raise EstimationError(f"augmented cells of {name!r} still missing after the imputation pass")


@dataclass
class ImputationRun:
    """Per-imputation, per-regime sufficient statistics.

    ``mu[m, r]`` is the mean imputed outcome in regime r's block of imputation
    m and ``v[m, r]`` its complete-data variance.
    """

    regimes: tuple[Regime, ...]
    mu: np.ndarray
    v: np.ndarray
    n_syn: int
    batch_size: int
    engine: ImputationEngine | None = field(default=None, repr=False)
    datasets: list[LongitudinalTable] | None = field(default=None, repr=False)
    batches: int = 1

    @property
    def M(self) -> int:
        return self.mu.shape[0]

    def regime_index(self, regime: Regime | str | int) -> int:
        if isinstance(regime, int):
            return regime
        labels = [r.label for r in self.regimes]
        key = regime.label if isinstance(regime, Regime) else str(regime)
        if isinstance(regime, Regime) and regime in self.regimes:
            return self.regimes.index(regime)
        if key not in labels:
            raise ValidationError(f"regime {key!r} not in run ({labels})")
        return labels.index(key)

    def records(self) -> list[dict]:
        return [
            {"m": m + 1, "regime": r.label, "mu": float(self.mu[m, j]), "v": float(self.v[m, j])}
            for m in range(self.M) for j, r in enumerate(self.regimes)
        ]

    def extended(self, rng: np.random.Generator, keep: bool | None = None) -> "ImputationRun":
        return extend(self, rng, keep=keep)


def _validate_counts(M: int, n_syn: int) -> None:
    if int(M) < 2:
        raise ValidationError("M must be >= 2")
    if int(n_syn) < 2:
        raise ValidationError("n_syn must be >= 2")


def run_engine(engine: ImputationEngine, M: int, rng: np.random.Generator, keep: bool = False) -> ImputationRun:
    _validate_counts(M, engine.n_syn)
    mu, v, datasets = engine.draw_batch(int(M), substream(rng, 0), keep=keep)
    return ImputationRun(tuple(engine.regimes), mu, v, engine.n_syn, int(M), engine, datasets, batches=1)


def impute_synthetic(table: LongitudinalTable, spec: Sequence[DesignSpec], regimes: Sequence[Regime],
                     M: int, n_syn: int, rng: np.random.Generator, shared_draws: bool = True,
                     keep_datasets: bool = False, ridge: float = 0.0) -> ImputationRun:
    """Augment ``table`` once per regime and impute the augmented rows M times.

    Parameters
    ----------
    table : LongitudinalTable
        Complete original data (origin == 1 rows only are used for fitting).
    spec : sequence of DesignSpec
        Models for every non-treatment column, in causal order.
    regimes : sequence of Regime
        One augmented block of ``n_syn`` rows is added per regime.
    shared_draws : bool
        Use one parameter draw per model per imputation for all blocks
        (default) instead of independent draws per block.
    keep_datasets : bool
        Retain the M completed augmented datasets on the run.
    """
    _validate_counts(M, n_syn)
    engine = SyntheticImputer(table, tuple(spec), tuple(regimes), int(n_syn), shared_draws, ridge)
    return run_engine(engine, M, rng, keep=keep_datasets)


def extend(run: ImputationRun, rng: np.random.Generator, keep: bool | None = None) -> ImputationRun:
    """Append one more batch of ``run.batch_size`` imputations generated the same way.

    Datasets are retained for the new batch if ``keep`` is true or, by
    default, if the run already retains them.
    """
    if run.engine is None:
        raise ValidationError("run has no imputation engine attached; cannot extend")
    if keep is None:
        keep = run.datasets is not None
    mu, v, datasets = run.engine.draw_batch(run.batch_size, substream(rng, run.batches), keep=keep)
    all_sets = None
    if run.datasets is not None and datasets is not None:
        all_sets = run.datasets + datasets
    return replace(run, mu=np.vstack([run.mu, mu]), v=np.vstack([run.v, v]),
                   datasets=all_sets, batches=run.batches + 1)


def point_estimate(run: ImputationRun, regime: Regime | str | int) -> float:
    return float(run.mu[:, run.regime_index(regime)].mean())


@dataclass(frozen=True)
class ContrastStats:
    point: float
    mu_a: np.ndarray
    v_a: np.ndarray
    mu_b: np.ndarray
    v_b: np.ndarray


def contrast(run: ImputationRun, regime_a, regime_b) -> ContrastStats:
    """Difference of pooled means between two regimes' blocks plus the per-regime inputs for pooling."""
    a, b = run.regime_index(regime_a), run.regime_index(regime_b)
    mu_a, mu_b = run.mu[:, a], run.mu[:, b]
    return ContrastStats(float(mu_a.mean() - mu_b.mean()), mu_a, run.v[:, a], mu_b, run.v[:, b])


def write_imputations(run: ImputationRun, directory: str | Path, stem: str = "imputation") -> list[Path]:
    """Dump each retained dataset's augmented rows, one CSV per imputation per regime."""
    if run.datasets is None:
        raise ValidationError("run was created without keep_datasets")
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for m, ds in enumerate(run.datasets, start=1):
        for k, reg in enumerate(run.regimes):
            block = ds.take(np.flatnonzero(ds.block == k))
            p = directory / f"{stem}_m{m:04d}_regime{k + 1}.csv"
            write_csv(block, p)
            paths.append(p)
    return paths
