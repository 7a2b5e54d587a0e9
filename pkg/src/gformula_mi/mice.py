"""Chained-equations imputation of actually-missing data and the two-stage pipeline.

Stage one completes the original data M times with fully conditional
specification (every incomplete variable regressed on all others). Stage two
augments each completed dataset and imputes the potential outcomes once per
dataset from the sequential G-formula models fitted to that dataset.

The M chains are run in lockstep: each model fit in a sweep is one batched
least-squares or IRLS call over all chains.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import Kind, LongitudinalTable, Regime, augment
from .exceptions import ModelFitError, ValidationError
from .gform_mi import (ImputationRun, _validate_counts, block_stats, completed_tables, impute_blocks,
                       run_engine, _check_filled)
from .models import DesignSpec, Family, default_family, fit_arrays, posterior_draw, predictive_draw, validate_sequential
from .rng import substream

log = logging.getLogger(__name__)


@dataclass
class ChainConfig:
    n_iterations: int = 5
    families: dict[str, str] = field(default_factory=dict)
    ridge: float = 0.0
    trace: bool = False

    def __post_init__(self):
        if int(self.n_iterations) < 1:
            raise ValidationError("n_iterations must be >= 1")
        self.n_iterations = int(self.n_iterations)

    def family_for(self, name: str, kind: Kind) -> Family:
        fam = Family(self.families.get(name, default_family(kind)))
        if fam.nonparametric:
            raise ValidationError(f"{name}: chained equations need a regression family, not {fam.value}")
        return fam

    def to_dict(self) -> dict:
        return {"n_iterations": self.n_iterations, "families": dict(self.families), "ridge": self.ridge}


def fit_batch(spec: DesignSpec, X: np.ndarray, y: np.ndarray, ridge: float = 0.0):
    """Fit one model per leading batch element; falls back to element-wise fits on failure.

    Returns ``(fit, ok)`` where ``ok`` flags elements that fitted. Failed
    elements carry the first successful element's parameters as placeholders.
    """
    try:
        return fit_arrays(spec, X, y, ridge=ridge, check_rank=False), np.ones(X.shape[0], bool)
    except ModelFitError:
        pass
    fits, ok = [], np.zeros(X.shape[0], bool)
    for b in range(X.shape[0]):
        try:
            fits.append(fit_arrays(spec, X[b], y[b], ridge=ridge))
            ok[b] = True
        except ModelFitError:
            fits.append(None)
    if not ok.any():
        raise ModelFitError(f"{spec.target}: fit failed in every chain")
    good = next(f for f in fits if f is not None)
    fits = [good if f is None else f for f in fits]
    merged = type(good)(
        spec,
        np.stack([f.coef for f in fits]),
        None if good.sigma2 is None else np.stack([np.asarray(f.sigma2) for f in fits]),
        np.stack([f.cov_factor for f in fits]),
        good.df,
        n=good.n,
    )
    return merged, ok


@dataclass
class ChainResult:
    values: np.ndarray  # (M, n, k)
    trace: np.ndarray | None = None  # (n_iterations, M, n_incomplete) chain means
    trace_columns: tuple[str, ...] = ()


def _chain_arrays(table: LongitudinalTable, config: ChainConfig, M: int, rng: np.random.Generator) -> ChainResult:
    schema = table.schema
    vals0 = table.values
    mask = table.mask
    n, k = vals0.shape
    incomplete = [j for j in range(k) if mask[:, j].any()]
    for j in incomplete:
        if mask[:, j].all():
            raise ValidationError(f"column {schema.names[j]!r} is entirely missing")
    vals = np.broadcast_to(vals0, (M, n, k)).copy()
    if not incomplete:
        return ChainResult(vals, None, ())
    for j in incomplete:
        obs = vals0[~mask[:, j], j]
        miss = np.flatnonzero(mask[:, j])
        vals[:, miss, j] = obs[rng.integers(0, obs.size, size=(M, miss.size))]

    specs = {}
    for j in incomplete:
        col = schema.columns[j]
        others = tuple(i for i in range(k) if i != j)
        specs[j] = (DesignSpec(col.name, tuple(schema.names[i] for i in others),
                               config.family_for(col.name, col.kind)), list(others))

    trace = np.empty((config.n_iterations, M, len(incomplete))) if config.trace else None
    strikes = np.zeros((M, k), dtype=int)
    for it in range(config.n_iterations):
        for jj, j in enumerate(incomplete):
            spec, others = specs[j]
            obs_rows = np.flatnonzero(~mask[:, j])
            mis_rows = np.flatnonzero(mask[:, j])
            X = vals[:, obs_rows][:, :, others]
            y = np.broadcast_to(vals0[obs_rows, j], (M, obs_rows.size))
            fitted, ok = fit_batch(spec, X, y, config.ridge)
            strikes[~ok, j] += 1
            strikes[ok, j] = 0
            if (strikes[:, j] >= 2).any():
                raise ModelFitError(f"{spec.target}: fit failed in consecutive sweeps")
            draw = posterior_draw(fitted, rng)
            new = predictive_draw(draw, vals[:, mis_rows][:, :, others], rng)
            keep_old = ~ok
            if keep_old.any():
                new[keep_old] = vals[keep_old][:, mis_rows, j]
            vals[:, mis_rows, j] = new
        if trace is not None:
            trace[it] = vals[:, :, incomplete].mean(axis=1)
    return ChainResult(vals, trace, tuple(schema.names[j] for j in incomplete))


def chained_impute(table: LongitudinalTable, config: ChainConfig, M: int, rng: np.random.Generator,
                   return_trace: bool = False):
    """Complete the original rows of ``table`` M times by chained equations.

    Missing cells start as random draws from each variable's observed values.
    Each sweep visits the incomplete variables in causal order, refits the
    variable's model on rows where it is observed (other variables at their
    current values), draws parameters from the posterior and re-imputes its
    missing cells. Observed cells are never changed.
    """
    if int(M) < 1:
        raise ValidationError("M must be >= 1")
    orig = table.original()
    res = _chain_arrays(orig, config, int(M), rng)
    zero = np.zeros_like(orig.mask)
    tables = [LongitudinalTable(orig.schema, v, zero, orig.origin) for v in res.values]
    return (tables, res) if return_trace else tables


def write_trace(result: ChainResult, path: str | Path) -> None:
    """Chain means per iteration as long-format CSV: iteration, chain, variable, mean."""
    if result.trace is None:
        raise ValidationError("no trace recorded; set ChainConfig.trace")
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iteration", "chain", "variable", "mean"])
        n_it, M, nv = result.trace.shape
        for it in range(n_it):
            for m in range(M):
                for v in range(nv):
                    w.writerow([it + 1, m + 1, result.trace_columns[v], repr(float(result.trace[it, m, v]))])


def apply_mcar(table: LongitudinalTable, pi: float, columns: Sequence[str], rng: np.random.Generator) -> LongitudinalTable:
    """Mask each cell of ``columns`` independently with probability ``pi`` (original rows only)."""
    if not 0.0 <= pi < 1.0:
        raise ValidationError("pi must be in [0, 1)")
    idx = [table.schema.index(c) for c in columns]
    hit = np.zeros_like(table.mask)
    draws = rng.random((table.n_rows, len(idx))) < pi
    draws &= (table.origin == 1)[:, None]
    hit[:, idx] = draws
    return table.replace_values(table.values, table.mask | hit)


@dataclass
class TwoStageImputer:
    """Engine for incomplete original data; each batch reruns both stages."""

    table: LongitudinalTable
    config: ChainConfig
    spec: tuple[DesignSpec, ...]
    regimes: tuple[Regime, ...]
    n_syn: int
    shared_draws: bool = True
    last_chain: ChainResult | None = field(default=None, repr=False)

    def __post_init__(self):
        validate_sequential(self.spec, self.table.schema)
        for r in self.regimes:
            r.validate(self.table.schema)

    def draw_batch(self, M: int, rng: np.random.Generator, keep: bool = False):
        schema = self.table.schema
        chain = _chain_arrays(self.table.original(), self.config, M, substream(rng, 0))
        self.last_chain = chain
        completed = chain.values
        fits = []
        for s in self.spec:
            X = completed[:, :, [schema.index(p) for p in s.predictors]]
            y = completed[:, :, schema.index(s.target)]
            f, ok = fit_batch(s, X, y, self.config.ridge)
            if not ok.all():
                raise ModelFitError(f"{s.target}: sequential model fit failed on a completed dataset")
            fits.append(f)
        sims = impute_blocks(schema, fits, self.regimes, M, self.n_syn, substream(rng, 1), self.shared_draws)
        _check_filled(sims)
        mu, v = block_stats(sims[schema.outcome.name])
        datasets = None
        if keep:
            template = self.table.original()
            for r in self.regimes:
                template = augment(template, r, self.n_syn)
            base = np.broadcast_to(template.values, (M,) + template.values.shape).copy()
            base[:, : completed.shape[1]] = completed
            datasets = completed_tables(template, sims, base_values=base)
        return mu, v, datasets


def two_stage_synthetic(table: LongitudinalTable, config: ChainConfig, spec: Sequence[DesignSpec],
                        regimes: Sequence[Regime], M: int, n_syn: int, rng: np.random.Generator,
                        shared_draws: bool = True, keep_datasets: bool = False) -> ImputationRun:
    """Chained-equations completion followed by one synthetic pass per completed dataset."""
    _validate_counts(M, n_syn)
    engine = TwoStageImputer(table, config, tuple(spec), tuple(regimes), int(n_syn), shared_draws)
    return run_engine(engine, M, rng, keep=keep_datasets)
