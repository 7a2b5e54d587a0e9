"""Simulation studies for the MI and Monte-Carlo G-formula estimators.

Data come from a three-period mechanism with one continuous confounder and a
binary treatment per period::

    L0 ~ N(0, 1)             A0 ~ Bern(expit(L0))
    L1 ~ N(A0 + L0, 1)       A1 ~ Bern(expit(A0 + L1))
    L2 ~ N(A1 + L1, 1)       A2 ~ Bern(expit(A1 + L2))
    Y  ~ N(A2 + L2, 1)

so E(Y^{a0,a1,a2}) = a0 + a1 + a2 and the always- versus never-treated
contrast is 3.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from functools import partial

import numpy as np

from .data import LongitudinalTable, Regime, Schema
from .exceptions import EstimationError, GFormulaError, ValidationError
from .gform_mc import bootstrap
from .gform_mi import impute_synthetic
from .mice import ChainConfig, apply_mcar, two_stage_synthetic
from .models import expit, sequential_spec
from .parallel import pmap
from .pooling import pool_contrast, pool_with_extension, prob_negative, rubin_variance, synthetic_variance
from .rng import make_rng, substream

log = logging.getLogger(__name__)

DGM_SCHEMA = Schema.from_dicts([
    {"name": "L0", "kind": "continuous", "role": "baseline_confounder", "time": 0},
    {"name": "A0", "kind": "binary", "role": "treatment", "time": 0},
    {"name": "L1", "kind": "continuous", "role": "timevarying_confounder", "time": 1},
    {"name": "A1", "kind": "binary", "role": "treatment", "time": 1},
    {"name": "L2", "kind": "continuous", "role": "timevarying_confounder", "time": 2},
    {"name": "A2", "kind": "binary", "role": "treatment", "time": 2},
    {"name": "Y", "kind": "continuous", "role": "outcome", "time": 3},
])
MCAR_COLUMNS = ("L1", "A1", "L2", "A2", "Y")
ALWAYS = Regime.from_values(DGM_SCHEMA, [1, 1, 1], name="1,1,1")
NEVER = Regime.from_values(DGM_SCHEMA, [0, 0, 0], name="0,0,0")
MAX_FAIL_FRACTION = 0.01


def generate_dgm(n: int, rng: np.random.Generator) -> LongitudinalTable:
    if int(n) < 1:
        raise ValidationError("n must be >= 1")
    n = int(n)
    L0 = rng.standard_normal(n)
    A0 = (rng.random(n) < expit(L0)).astype(float)
    L1 = A0 + L0 + rng.standard_normal(n)
    A1 = (rng.random(n) < expit(A0 + L1)).astype(float)
    L2 = A1 + L1 + rng.standard_normal(n)
    A2 = (rng.random(n) < expit(A1 + L2)).astype(float)
    Y = A2 + L2 + rng.standard_normal(n)
    return LongitudinalTable.from_arrays(DGM_SCHEMA, dict(L0=L0, A0=A0, L1=L1, A1=A1, L2=L2, A2=A2, Y=Y))


def dgm_truth(regime: Regime) -> float:
    """E(Y^a) under the mechanism: the chain of conditional means collapses to a0 + a1 + a2."""
    return float(sum(v for _, v in regime.assignments))


@dataclass
class StudyConfig:
    name: str = "custom"
    n_obs: int = 500
    n_syn: int = 500
    M_initial: int = 50
    pi: float = 0.0
    n_replicates: int = 1000
    estimators: tuple[str, ...] = ("mi",)
    seed: int = 20240601
    truth: float = 3.0
    l0_family: str = "normal_linear"
    n_iterations: int = 5
    contrast_method: str = "direct"
    shared_draws: bool = True
    max_batches: int = 20
    n_boot: int = 200
    mc_n_syn: int | None = None

    def __post_init__(self):
        self.estimators = tuple(self.estimators)
        if self.n_replicates < 1:
            raise ValidationError("n_replicates must be >= 1")
        bad = set(self.estimators) - {"mi", "mc_bootstrap"}
        if bad or not self.estimators:
            raise ValidationError(f"unknown estimators {sorted(bad)}; choose from mi, mc_bootstrap")
        if not 0.0 <= self.pi < 1.0:
            raise ValidationError("pi must be in [0, 1)")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["estimators"] = list(self.estimators)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "StudyConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValidationError(f"unknown study config fields {sorted(unknown)}")
        return cls(**d)


@dataclass
class EstimatorSummary:
    n_ok: int
    n_failed: int
    bias: float
    emp_se: float
    mean_est_se: float
    t_coverage: float
    z_coverage: float
    mean_M: float | None = None
    max_M: int | None = None
    n_negative: int | None = None
    rubin_mean_se: float | None = None
    rubin_coverage: float | None = None


@dataclass
class StudyReport:
    config: StudyConfig
    estimators: dict[str, EstimatorSummary]
    wall_time: float
    replicates: list[dict] = field(default_factory=list, repr=False)

    def to_dict(self, include_replicates: bool = False) -> dict:
        d = {
            "config": self.config.to_dict(),
            "estimators": {k: asdict(v) for k, v in self.estimators.items()},
            "wall_time": self.wall_time,
        }
        if include_replicates:
            d["replicates"] = self.replicates
        return d

    def format_table(self) -> str:
        head = ["Scenario", "Estimator", "M", "pi", "Bias", "Emp. SE", "Est. SE",
                "t(v_f) 95% CI", "Z 95% CI", "Mean M", "Max M", "Neg."]
        rows = []
        for est, s in self.estimators.items():
            rows.append([
                self.config.name, est, str(self.config.M_initial) if est == "mi" else "-",
                f"{self.config.pi:g}", f"{s.bias:.3f}", f"{s.emp_se:.3f}", f"{s.mean_est_se:.3f}",
                f"{s.t_coverage:.1f}" if est == "mi" else "-", f"{s.z_coverage:.1f}",
                f"{s.mean_M:.1f}" if s.mean_M is not None else "-",
                str(s.max_M) if s.max_M is not None else "-",
                str(s.n_negative) if s.n_negative is not None else "-",
            ])
        widths = [max(len(h), *(len(r[i]) for r in rows)) for i, h in enumerate(head)]
        line = lambda cells: "  ".join(c.rjust(w) for c, w in zip(cells, widths))
        out = [line(head), "-" * len(line(head))] + [line(r) for r in rows]
        return "\n".join(out)


def _mi_replicate(config: StudyConfig, table: LongitudinalTable, rng: np.random.Generator) -> dict:
    spec = sequential_spec(DGM_SCHEMA, config.l0_family)
    regimes = [ALWAYS, NEVER]
    if config.pi > 0:
        run = two_stage_synthetic(table, ChainConfig(config.n_iterations), spec, regimes,
                                  config.M_initial, config.n_syn, rng, shared_draws=config.shared_draws)
    else:
        run = impute_synthetic(table, spec, regimes, config.M_initial, config.n_syn, rng,
                               shared_draws=config.shared_draws)
    res, run = pool_with_extension(run, rng, 0, 1, config.max_batches, config.contrast_method)
    rub = pool_contrast(run.mu[:, 0], run.v[:, 0], run.mu[:, 1], run.v[:, 1], rule="rubin")
    return {
        "point": res.point, "se": res.se,
        "t_cover": res.covers(config.truth, "t"), "z_cover": res.covers(config.truth, "z"),
        "M_used": res.M_used, "negative": res.batches_added > 0,
        "rubin_se": rub.se, "rubin_cover": rub.covers(config.truth, "z"),
    }


def _mc_replicate(config: StudyConfig, table: LongitudinalTable, rng: np.random.Generator) -> dict:
    spec = sequential_spec(DGM_SCHEMA, "empirical")
    est = bootstrap(table, spec, ALWAYS, NEVER, config.mc_n_syn or config.n_syn, config.n_boot, rng, workers=1)
    lo, hi = est.ci
    return {"point": est.point, "se": est.bootstrap_se, "z_cover": lo <= config.truth <= hi,
            "t_cover": lo <= config.truth <= hi}


def run_replicate(config: StudyConfig, r: int) -> dict:
    """Replicate ``r``: reproducible in isolation from (seed, r)."""
    rng = make_rng(config.seed, r)
    table = generate_dgm(config.n_obs, substream(rng, 0))
    if config.pi > 0:
        table = apply_mcar(table, config.pi, MCAR_COLUMNS, substream(rng, 1))
    out = {"replicate": r}
    for k, est in enumerate(config.estimators):
        fn = _mi_replicate if est == "mi" else _mc_replicate
        try:
            out[est] = fn(config, table, substream(rng, 2 + k))
        except GFormulaError as exc:
            out[est] = {"failed": str(exc)}
    return out


def _summarise(config: StudyConfig, est: str, recs: list[dict]) -> EstimatorSummary:
    ok = [x for x in recs if "failed" not in x]
    n_failed = len(recs) - len(ok)
    if not ok:
        raise EstimationError(f"{est}: every replicate failed")
    pts = np.array([x["point"] for x in ok])
    ses = np.array([x["se"] for x in ok])
    s = EstimatorSummary(
        n_ok=len(ok), n_failed=n_failed,
        bias=float(pts.mean() - config.truth),
        emp_se=float(pts.std(ddof=1)) if len(ok) > 1 else 0.0,
        mean_est_se=float(ses.mean()),
        t_coverage=100.0 * float(np.mean([x["t_cover"] for x in ok])),
        z_coverage=100.0 * float(np.mean([x["z_cover"] for x in ok])),
    )
    if est == "mi":
        Ms = np.array([x["M_used"] for x in ok])
        s.mean_M = float(Ms.mean())
        s.max_M = int(Ms.max())
        s.n_negative = int(sum(x["negative"] for x in ok))
        s.rubin_mean_se = float(np.mean([x["rubin_se"] for x in ok]))
        s.rubin_coverage = 100.0 * float(np.mean([x["rubin_cover"] for x in ok]))
    return s


def run_study(config: StudyConfig, workers: int | None = 1, keep_replicates: bool = False) -> StudyReport:
    """Run ``config.n_replicates`` replicates and summarise each estimator.

    Results depend only on the config (including its seed), not on ``workers``.
    Raises :class:`EstimationError` if more than 1% of replicates fail for an
    estimator.
    """
    t0 = time.perf_counter()
    reps = pmap(partial(run_replicate, config), range(config.n_replicates), workers)
    summaries = {}
    for est in config.estimators:
        recs = [r[est] for r in reps]
        s = _summarise(config, est, recs)
        if s.n_failed > MAX_FAIL_FRACTION * config.n_replicates:
            raise EstimationError(f"{est}: {s.n_failed} of {config.n_replicates} replicates failed")
        summaries[est] = s
    return StudyReport(config, summaries, time.perf_counter() - t0, reps if keep_replicates else [])


def abb_variant_study(config: StudyConfig, workers: int | None = 1) -> StudyReport:
    """The study with L0 imputed by the approximate Bayesian bootstrap."""
    return run_study(replace(config, l0_family="abb", name=config.name + "-abb"), workers)


def mcse_mi(B: float, M: int) -> float:
    """Monte-Carlo SE of an MI point estimate: sqrt(B / M)."""
    if M < 1:
        raise ValidationError("M must be >= 1")
    return math.sqrt(B / M)


@dataclass
class ToyReport:
    n_obs: int
    n_syn: int
    M: int
    sigma2: float
    n_replicates: int
    empirical_var: float
    mean_vsyn: float
    analytic_var: float
    mean_rubin_var: float
    negative_frequency: float
    prob_negative: float
    prob_negative_exact: float
    max_identity_error: float

    def to_dict(self) -> dict:
        return asdict(self)

    def format_table(self) -> str:
        rows = [
            ("analytic Var(mu_hat)", self.analytic_var),
            ("empirical Var(mu_hat)", self.empirical_var),
            ("mean synthetic variance", self.mean_vsyn),
            ("mean Rubin variance", self.mean_rubin_var),
            ("P(Vsyn < 0) empirical", self.negative_frequency),
            ("P(Vsyn < 0) approximation", self.prob_negative),
            ("P(Vsyn < 0) exact", self.prob_negative_exact),
        ]
        w = max(len(k) for k, _ in rows)
        head = f"toy normal mean: n_obs={self.n_obs} n_syn={self.n_syn} M={self.M} sigma2={self.sigma2:g} reps={self.n_replicates}"
        return "\n".join([head] + [f"{k.ljust(w)}  {v:.6g}" for k, v in rows])


def toy_normal_mean(n_obs: int, n_syn: int, M: int, sigma2: float, n_replicates: int,
                    rng: np.random.Generator, mu: float = 0.0, chunk: int = 1000) -> ToyReport:
    """Synthetic MI for a normal mean with known variance.

    Each replicate draws an observed sample, then M synthetic samples of size
    n_syn from N(mu_tilde, sigma2) with mu_tilde ~ N(sample mean, sigma2/n_obs).
    The within-imputation variance is the known sigma2 / n_syn.
    """
    if sigma2 <= 0:
        raise ValidationError("sigma2 must be positive")
    if M < 2:
        raise ValidationError("M must be >= 2")
    sd = math.sqrt(sigma2)
    V = sigma2 / n_syn
    mu_hat, vsyn, rub, ident = [], [], [], 0.0
    done = 0
    while done < n_replicates:
        c = min(chunk, n_replicates - done)
        ybar = (mu + sd * rng.standard_normal((c, n_obs))).mean(axis=1)
        mu_tilde = ybar[:, None] + math.sqrt(sigma2 / n_obs) * rng.standard_normal((c, M))
        mu_m = np.empty((c, M))
        for m in range(M):
            mu_m[:, m] = (mu_tilde[:, m:m + 1] + sd * rng.standard_normal((c, n_syn))).mean(axis=1)
        B = mu_m.var(axis=1, ddof=1)
        vs = np.array([synthetic_variance(b, V, M) for b in B])
        rv = np.array([rubin_variance(b, V, M) for b in B])
        ident = max(ident, float(np.max(np.abs((rv - vs) - 2 * V))))
        mu_hat.append(mu_m.mean(axis=1))
        vsyn.append(vs)
        rub.append(rv)
        done += c
    mu_hat = np.concatenate(mu_hat)
    vsyn = np.concatenate(vsyn)
    rub = np.concatenate(rub)
    return ToyReport(
        n_obs, n_syn, M, sigma2, n_replicates,
        empirical_var=float(mu_hat.var(ddof=1)),
        mean_vsyn=float(vsyn.mean()),
        analytic_var=sigma2 / (n_syn * M) + (1 + 1 / M) * sigma2 / n_obs,
        mean_rubin_var=float(rub.mean()),
        negative_frequency=float(np.mean(vsyn < 0)),
        prob_negative=prob_negative(M, n_syn, n_obs),
        prob_negative_exact=prob_negative(M, n_syn, n_obs, exact=True),
        max_identity_error=ident,
    )


PRESETS: dict[str, dict] = {
    **{f"complete-m{M}": {"name": f"complete-m{M}", "M_initial": M} for M in (5, 10, 25, 50, 100)},
    "mcar-p05": {"name": "mcar-p05", "pi": 0.05},
    "mcar-p10": {"name": "mcar-p10", "pi": 0.10},
    "mcar-p25": {"name": "mcar-p25", "pi": 0.25},
    "mcar-p50": {"name": "mcar-p50", "pi": 0.50, "n_iterations": 50},
    "abb": {"name": "abb", "l0_family": "abb"},
    "mc-bootstrap": {"name": "mc-bootstrap", "estimators": ["mc_bootstrap"], "n_replicates": 500},
}
TOY_PRESET = {"n_obs": 100, "n_syn": 100, "M": 5, "sigma2": 1.0, "n_replicates": 10000}


def preset_names() -> list[str]:
    return sorted(PRESETS) + ["toy"]


def preset_config(name: str, **overrides) -> StudyConfig:
    if name not in PRESETS:
        raise ValidationError(f"unknown preset {name!r}; available: {', '.join(preset_names())}")
    d = dict(PRESETS[name])
    d.update({k: v for k, v in overrides.items() if v is not None})
    return StudyConfig.from_dict(d)
