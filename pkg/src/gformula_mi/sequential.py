"""Sequential simulation of confounders and outcome under fixed treatments."""

from __future__ import annotations

from typing import Mapping, Sequence

import numpy as np

from .data import Regime, Role, Schema
from .exceptions import ValidationError
from .models import FittedModel, ParameterDraw, predictive_draw


def check_time_order(schema: Schema, models: Sequence[FittedModel | ParameterDraw]) -> None:
    idx = [schema.index(m.spec.target) for m in models]
    if idx != sorted(idx) or len(set(idx)) != len(idx):
        raise ValidationError("fits are not in causal time order")
    targets = {m.spec.target for m in models}
    needed = {c.name for c in schema.columns if c.role is not Role.TREATMENT}
    if targets != needed:
        raise ValidationError(f"fits cover {sorted(targets)}, need {sorted(needed)}")


def regime_arrays(regimes: Sequence[Regime], schema: Schema, shape: tuple[int, ...]) -> dict:
    """Treatment values per regime, shaped (*shape, R, 1) for broadcasting over rows."""
    out = {}
    for col in schema.treatments:
        vals = np.array([r.value(col.name) for r in regimes], dtype=float)
        out[col.name] = vals.reshape((1,) * len(shape) + (len(regimes), 1))
    return out


def simulate(schema: Schema, draws: Sequence[ParameterDraw], treatments: Mapping[str, np.ndarray | float],
             n_syn: int, rng: np.random.Generator, batch: tuple[int, ...] = ()) -> dict[str, np.ndarray]:
    """Draw each modelled column in turn given everything simulated before it.

    ``draws`` must have batch shape ``batch`` (or broadcast to it); treatment
    values must broadcast to ``(*batch, n_syn)``. Returns one array of shape
    ``(*batch, n_syn)`` per column.
    """
    check_time_order(schema, draws)
    full = tuple(batch) + (int(n_syn),)
    cur = {name: np.broadcast_to(np.asarray(v, dtype=float), full) for name, v in treatments.items()}
    for d in draws:
        preds = d.spec.predictors
        missing = [p for p in preds if p not in cur]
        if missing:
            raise ValidationError(f"{d.spec.target}: predictors {missing} not yet simulated")
        X = np.stack([cur[p] for p in preds], axis=-1) if preds else None
        cur[d.spec.target] = predictive_draw(d, X, rng, n=n_syn)
    return cur
