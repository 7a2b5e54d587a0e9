"""Command-line entry point: ``gformula-mi {analyze,simulate,validate}``.

Exit codes: 0 success, 1 validation failure, 2 estimation failure, 3 I/O error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from . import __version__
from .data import LongitudinalTable, Pattern, Regime, Schema, load_csv, missingness_pattern
from .exceptions import EstimationError, ValidationError
from .gform_mc import bootstrap
from .gform_mi import impute_synthetic, point_estimate, write_imputations
from .mice import ChainConfig, two_stage_synthetic, write_trace
from .models import DesignSpec, sequential_spec, validate_sequential
from .pooling import pool, pool_with_extension
from .rng import make_rng
from .simstudy import (DGM_SCHEMA, TOY_PRESET, StudyConfig, generate_dgm, mcse_mi, preset_config,
                       preset_names, run_study, toy_normal_mean)

log = logging.getLogger("gformula_mi")

FORMAT_VERSION = "1"
SEED_ENV = "GFORMULA_MI_SEED"
THREADS_ENV = "GFORMULA_MI_THREADS"

EXIT_OK, EXIT_VALIDATION, EXIT_ESTIMATION, EXIT_IO = 0, 1, 2, 3

RUN_DEFAULTS: dict[str, Any] = {
    "data": None,
    "schema": None,
    "models": None,
    "l0_family": "auto",
    "regimes": ["1,1,1", "0,0,0"],
    "method": "auto",
    "M": 50,
    "n_syn": 500,
    "n_boot": 200,
    "chain": {"n_iterations": 5},
    "seed": 1,
    "threads": 1,
    "contrast_method": "direct",
    "shared_draws": True,
    "max_batches": 20,
    "output": None,
}


class ConfigErrors(ValidationError):
    def __init__(self, problems: list[str]):
        self.problems = problems
        super().__init__("; ".join(problems))


@dataclass
class Resolved:
    """A validated run configuration and the objects built from it."""

    config: dict
    schema: Schema | None = None
    table: LongitudinalTable | None = None
    spec: tuple[DesignSpec, ...] = ()
    regimes: list[Regime] = field(default_factory=list)
    method: str = "mi"


def _read_json(path: str | Path) -> dict:
    try:
        with open(path) as fh:
            return json.load(fh)
    except OSError as exc:
        raise OSError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigErrors([f"config {path} is not valid JSON: {exc}"]) from None


def merge_config(file_cfg: dict, args: argparse.Namespace) -> dict:
    cfg = json.loads(json.dumps(RUN_DEFAULTS))
    unknown = set(file_cfg) - set(RUN_DEFAULTS)
    if unknown:
        raise ConfigErrors([f"unknown config fields {sorted(unknown)}"])
    cfg.update(file_cfg)
    if os.environ.get(SEED_ENV):
        cfg["seed"] = int(os.environ[SEED_ENV])
    if os.environ.get(THREADS_ENV):
        cfg["threads"] = int(os.environ[THREADS_ENV])
    for key, attr in [("data", "data"), ("method", "method"), ("M", "m_initial"), ("n_syn", "n_syn"),
                      ("n_boot", "n_boot"), ("seed", "seed"), ("threads", "threads"), ("output", "output"),
                      ("contrast_method", "contrast_method")]:
        val = getattr(args, attr, None)
        if val is not None:
            cfg[key] = val
    if getattr(args, "regime", None):
        cfg["regimes"] = list(args.regime)
    if getattr(args, "n_iterations", None) is not None:
        cfg["chain"] = dict(cfg.get("chain") or {}, n_iterations=args.n_iterations)
    return cfg


def resolve(cfg: dict, load_data: bool = True) -> Resolved:
    """Validate everything that can be checked without estimation; collect all problems."""
    problems: list[str] = []
    res = Resolved(cfg)

    data = cfg.get("data")
    is_dgm = isinstance(data, dict) and "dgm" in data
    if cfg.get("schema") is None and is_dgm:
        res.schema = DGM_SCHEMA
        cfg["schema"] = DGM_SCHEMA.to_dicts()
    elif cfg.get("schema") is None:
        problems.append("config has no schema")
    else:
        try:
            res.schema = Schema.from_dicts(cfg["schema"])
        except ValidationError as exc:
            problems.append(f"schema: {exc}")

    if cfg.get("method") not in ("mi", "mc", "auto"):
        problems.append(f"method must be mi, mc or auto, not {cfg.get('method')!r}")
    for key, lo in (("M", 2), ("n_syn", 2), ("n_boot", 2), ("max_batches", 1), ("threads", 1)):
        v = cfg.get(key)
        if not isinstance(v, int) or v < lo:
            problems.append(f"{key} must be an integer >= {lo}")
    if cfg.get("contrast_method") not in ("direct", "sum"):
        problems.append("contrast_method must be direct or sum")
    try:
        ChainConfig(**(cfg.get("chain") or {}))
    except (TypeError, ValidationError) as exc:
        problems.append(f"chain: {exc}")
    regs = cfg.get("regimes") or []
    if not 1 <= len(regs) <= 2:
        problems.append("regimes must list one regime (a mean) or two (a contrast)")

    if res.schema is not None:
        for spec in regs:
            try:
                r = Regime.parse(res.schema, spec)
                r.validate(res.schema)
                res.regimes.append(r)
            except (ValidationError, ValueError) as exc:
                problems.append(f"regime {spec!r}: {exc}")
        try:
            if cfg.get("models"):
                res.spec = tuple(DesignSpec.from_dict(d) for d in cfg["models"])
            else:
                res.spec = ()
            if res.spec:
                validate_sequential(res.spec, res.schema)
        except (ValidationError, KeyError, ValueError) as exc:
            problems.append(f"models: {exc}")

    if load_data and res.schema is not None:
        try:
            if is_dgm:
                n = int(data["dgm"].get("n", 500))
                res.table = generate_dgm(n, make_rng(int(cfg.get("seed") or 0), 999))
            elif data is None:
                problems.append("config has no data path")
            else:
                res.table = load_csv(data, res.schema)
        except ValidationError as exc:
            problems.append(f"data: {exc}")
        except OSError as exc:
            # report config problems first; a bad path alone is an I/O failure
            if not problems:
                raise
            problems.append(f"data: {exc}")

    if res.table is not None and cfg.get("method") in ("mi", "mc", "auto"):
        pattern = missingness_pattern(res.table)
        if cfg["method"] == "mc" and pattern is not Pattern.COMPLETE:
            problems.append(f"method mc needs complete data but the dataset has {res.table.n_missing} missing cells")
        if cfg["method"] == "auto":
            res.method = "mi"
        else:
            res.method = cfg["method"]
    if problems:
        raise ConfigErrors(problems)
    if not res.spec and res.schema is not None:
        fam = cfg.get("l0_family")
        if fam == "auto":
            fam = "empirical" if res.method == "mc" else "normal_linear"
        res.spec = sequential_spec(res.schema, fam)
    cfg["resolved_method"] = res.method
    cfg["models"] = [s.to_dict() for s in res.spec]
    return res


def _analyze(res: Resolved, args) -> dict:
    cfg = res.config
    rng = make_rng(int(cfg["seed"]))
    a = res.regimes[0]
    b = res.regimes[1] if len(res.regimes) > 1 else None
    if res.method == "mc":
        if b is None:
            raise ConfigErrors(["method mc reports a contrast; give two regimes"])
        est = bootstrap(res.table, res.spec, a, b, cfg["n_syn"], cfg["n_boot"], rng, workers=cfg["threads"])
        return est.to_dict()

    chain = ChainConfig(**cfg["chain"], trace=bool(getattr(args, "trace", None)))
    pattern = missingness_pattern(res.table)
    keep = bool(getattr(args, "dump_imputations", None))
    if pattern is Pattern.COMPLETE:
        run = impute_synthetic(res.table, res.spec, res.regimes, cfg["M"], cfg["n_syn"], rng,
                               shared_draws=cfg["shared_draws"], keep_datasets=keep)
        stage = "synthetic"
    else:
        log.info("dataset has %s missingness; using chained equations then synthetic imputation", pattern.value)
        run = two_stage_synthetic(res.table, chain, res.spec, res.regimes, cfg["M"], cfg["n_syn"], rng,
                                  shared_draws=cfg["shared_draws"], keep_datasets=keep)
        stage = "two_stage"
        if getattr(args, "trace", None):
            write_trace(run.engine.last_chain, args.trace)
    pooled, run = pool_with_extension(run, rng, 0, 1 if b is not None else None,
                                      cfg["max_batches"], cfg["contrast_method"])
    if keep:
        write_imputations(run, args.dump_imputations)
    out = {"method": "mi", "imputation": stage, **pooled.to_dict()}
    out["mcse"] = mcse_mi(pooled.between, pooled.M_used)
    out["regimes"] = [r.label for r in res.regimes]
    out["per_regime"] = {}
    for k, r in enumerate(res.regimes):
        pr = pool(run.mu[:, k], run.v[:, k])
        out["per_regime"][r.label] = {"point": point_estimate(run, k), "variance": pr.variance,
                                      "between": pr.between, "within": pr.within}
    return out


def _dump(doc: dict, output: str | None) -> None:
    text = json.dumps(doc, indent=2, sort_keys=True, allow_nan=True) + "\n"
    if output:
        Path(output).write_text(text)
    else:
        sys.stdout.write(text)


def cmd_analyze(args) -> int:
    file_cfg = _read_json(args.config) if args.config else {}
    cfg = merge_config(file_cfg, args)
    res = resolve(cfg)
    result = _analyze(res, args)
    _dump({"format_version": FORMAT_VERSION, "command": "analyze", "config": res.config, "result": result},
          cfg.get("output"))
    return EXIT_OK


def cmd_validate(args) -> int:
    file_cfg = _read_json(args.config) if args.config else {}
    cfg = merge_config(file_cfg, args)
    res = resolve(cfg)
    n = res.table.n_rows if res.table is not None else 0
    print(f"ok: {len(res.schema.columns)} columns, {n} rows, {len(res.regimes)} regime(s), method {res.method}")
    return EXIT_OK


def cmd_simulate(args) -> int:
    doc: dict[str, Any] = {"format_version": FORMAT_VERSION, "command": "simulate"}
    seed = args.seed if args.seed is not None else (int(os.environ[SEED_ENV]) if os.environ.get(SEED_ENV) else None)
    threads = args.threads if args.threads is not None else int(os.environ.get(THREADS_ENV, 1))
    if args.preset == "toy":
        params = dict(TOY_PRESET)
        for k, attr in (("M", "m_initial"), ("n_syn", "n_syn"), ("n_obs", "n_obs"), ("n_replicates", "n_replicates")):
            if getattr(args, attr, None) is not None:
                params[k] = getattr(args, attr)
        params["seed"] = 20240601 if seed is None else seed
        rep = toy_normal_mean(params["n_obs"], params["n_syn"], params["M"], params["sigma2"],
                              params["n_replicates"], make_rng(params["seed"]))
        doc.update({"preset": "toy", "config": params, "report": rep.to_dict()})
        table = rep.format_table()
    else:
        overrides = {"n_replicates": args.n_replicates, "seed": seed, "M_initial": args.m_initial,
                     "n_syn": args.n_syn, "n_obs": args.n_obs}
        if args.config:
            file_cfg = _read_json(args.config)
            study = StudyConfig.from_dict({**file_cfg.get("study", file_cfg),
                                           **{k: v for k, v in overrides.items() if v is not None}})
        elif args.preset:
            study = preset_config(args.preset, **overrides)
        else:
            raise ConfigErrors([f"simulate needs --preset or --config; presets: {', '.join(preset_names())}"])
        report = run_study(study, workers=threads)
        doc.update({"preset": args.preset, "config": study.to_dict(), "report": report.to_dict()})
        table = report.format_table()
    if args.output:
        _dump(doc, args.output)
        print(table)
    elif args.format == "json":
        _dump(doc, None)
    else:
        print(table)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gformula-mi", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("--log-level", choices=["quiet", "info", "debug"], default="info")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON run configuration")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--threads", type=int)
        sp.add_argument("--m-initial", dest="m_initial", type=int)
        sp.add_argument("--n-syn", dest="n_syn", type=int)

    a = sub.add_parser("analyze", help="estimate counterfactual means or a contrast from a dataset")
    common(a)
    a.add_argument("--data", help="CSV dataset (overrides config)")
    a.add_argument("--method", choices=["mi", "mc", "auto"])
    a.add_argument("--regime", action="append", help="regime as comma-separated treatment values; repeat for a contrast")
    a.add_argument("--n-boot", dest="n_boot", type=int)
    a.add_argument("--n-iterations", dest="n_iterations", type=int)
    a.add_argument("--contrast-method", dest="contrast_method", choices=["direct", "sum"])
    a.add_argument("--output", help="write the result document here instead of stdout")
    a.add_argument("--dump-imputations", dest="dump_imputations", metavar="DIR")
    a.add_argument("--trace", metavar="CSV", help="write chained-equation chain means per iteration")
    a.set_defaults(func=cmd_analyze)

    s = sub.add_parser("simulate", help="run a simulation study preset")
    common(s)
    s.add_argument("--preset", help=f"one of: {', '.join(preset_names())}")
    s.add_argument("--n-replicates", dest="n_replicates", type=int)
    s.add_argument("--n-obs", dest="n_obs", type=int)
    s.add_argument("--format", choices=["table", "json"], default="table")
    s.add_argument("--output")
    s.set_defaults(func=cmd_simulate)

    v = sub.add_parser("validate", help="check config and dataset consistency without estimating")
    v.add_argument("--config", help="JSON run configuration")
    v.add_argument("--data")
    v.add_argument("--method", choices=["mi", "mc", "auto"])
    v.add_argument("--regime", action="append")
    v.set_defaults(func=cmd_validate)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = {"quiet": logging.WARNING, "info": logging.INFO, "debug": logging.DEBUG}[args.log_level]
    logging.basicConfig(level=level, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigErrors as exc:
        print("validation failed:", file=sys.stderr)
        for prob in exc.problems:
            print(f"  - {prob}", file=sys.stderr)
        return EXIT_VALIDATION
    except ValidationError as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except EstimationError as exc:
        print(f"estimation error ({type(exc).__name__}): {exc}", file=sys.stderr)
        return EXIT_ESTIMATION
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
