"""Command-line entry point: ``panel-dml <command> --out DIR ...``.

Every command validates its inputs up front, then writes its outputs together
with ``run_config.json`` and ``manifest.json`` (input and output SHA-256 digests).
Failures print a JSON error report to stderr and exit nonzero.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np
import pandas as pd

from . import __version__
from .dml import METHODS, EstimateConfig, estimate
from .errors import ConfigError, DataError, PanelDMLError, SchemaError, ValidationError
from .io import read_table, sha256_file, to_json, write_csv, write_json
from .learners import LAMBDA_GRID
from .nnet import WIDTH_GRID
from .panel import PanelDataset, make_long_run, make_short_run
from .riesz import C_GRID
from .studies import (AdaptationConfig, SimulationConfig, bin_coefficients, run_adaptation, run_simulation,
                      synth_weather, two_regime_data)
from .weather import (DEFAULT_THRESHOLD, SCHEMA_NAMES, YEARLY_FLEXIBLE, CovariateMatrix, assemble, get_schema,
                      parse_range, season_totals, validate_daily)

log = logging.getLogger("panel_dml")

EXIT_OK, EXIT_FAILED, EXIT_INVALID = 0, 1, 2
SEED_ENV = "PANEL_DML_SEED"
DAILY_COLUMNS = ("unit_id", "date", "tmin_c", "tmax_c", "prec_mm")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ValidationError([message])


def _months(text: str) -> tuple[int, int]:
    try:
        lo, hi = (int(v) for v in text.split("-"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"season must look like 3-8, got {text!r}") from None
    if not 1 <= lo <= hi <= 12:
        raise argparse.ArgumentTypeError(f"season months out of order or range: {text!r}")
    return lo, hi


def _csv_list(choices):
    def parse(text):
        items = [t.strip() for t in text.split(",") if t.strip()]
        bad = [t for t in items if t not in choices]
        if bad or not items:
            raise argparse.ArgumentTypeError(f"expected comma-separated values from {', '.join(choices)}; "
                                             f"got {text!r}")
        return tuple(items)
    return parse


def _float_list(text):
    try:
        return tuple(float(t) for t in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _int_list(text):
    try:
        return tuple(int(t) for t in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _year_span(text):
    try:
        lo, hi = parse_range(text)
    except (ConfigError, ValueError) as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None
    return list(range(lo, hi + 1))


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--out", required=True, type=Path, help="output directory (created if absent)")
    common.add_argument("--seed", type=int, default=0, help=f"master seed; {SEED_ENV} overrides it")
    common.add_argument("--jobs", type=int, default=os.cpu_count() or 1, help="worker processes")
    common.add_argument("--log-level", default="WARNING", choices=("DEBUG", "INFO", "WARNING", "ERROR"))

    def schema_opts(default="yearly_linear"):
        # parent parsers share action objects, so each subcommand gets its own
        opts = _Parser(add_help=False)
        opts.add_argument("--schema", choices=SCHEMA_NAMES, default=default)
        opts.add_argument("--threshold", type=int, default=DEFAULT_THRESHOLD, help="damaging-heat cut in deg C")
        opts.add_argument("--season", type=_months, default=(3, 8), help="first-last month, e.g. 3-8")
        return opts

    fit_opts = _Parser(add_help=False)
    fit_opts.add_argument("--folds", type=int, default=5)
    fit_opts.add_argument("--lambda-grid", type=_float_list, default=LAMBDA_GRID,
                          help="Lasso penalties as fractions of lambda_max")
    fit_opts.add_argument("--lambda-fraction", type=float, default=None,
                          help="fix lambda = fraction * lambda_max per fold instead of selecting it")
    fit_opts.add_argument("--width-grid", type=_int_list, default=WIDTH_GRID)
    fit_opts.add_argument("--width", type=int, default=None, help="fix the network width")
    fit_opts.add_argument("--c-grid", type=_float_list, default=C_GRID, help="Riesz penalty multipliers")
    fit_opts.add_argument("--degree", type=int, default=None, help="dictionary degree (2 or 3)")
    fit_opts.add_argument("--epochs", type=int, default=1000)

    data_opts = _Parser(add_help=False)
    data_opts.add_argument("--panel", type=Path, help="CSV with unit_id, year, y and the schema covariates")
    data_opts.add_argument("--yields", type=Path, help="CSV with unit_id, year, yield[, area]")
    data_opts.add_argument("--covariates", type=Path, help="CSV with unit_id, year and the schema covariates")
    data_opts.add_argument("--weight-col", default=None, help="yield column used as unit weight, e.g. area")

    parser = _Parser(prog="panel-dml", description="Debiased average weather derivatives for panel data.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("transform", parents=[common, schema_opts()], help="daily weather to season covariates")
    p.add_argument("--weather", type=Path, required=True, help=f"CSV with {', '.join(DAILY_COLUMNS)}")
    p.add_argument("--missing", choices=("reject", "prorate"), default="reject")

    p = sub.add_parser("simulate", parents=[common, fit_opts], help="Monte Carlo study")
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--counties", type=int, default=1000)
    p.add_argument("--years", type=int, default=2)
    p.add_argument("--methods", type=_csv_list(METHODS), default=("ols_linear",))
    p.add_argument("--schemas", type=_csv_list(SCHEMA_NAMES), default=("yearly_linear",))
    p.add_argument("--threshold", type=int, default=DEFAULT_THRESHOLD)
    p.add_argument("--beta", type=_float_list, default=(0.02, -0.05, 0.001), help="lower,higher,prec")
    p.add_argument("--weather", type=Path, default=None,
                   help="daily weather CSV to resample instead of synthetic weather")

    p = sub.add_parser("estimate", parents=[common, schema_opts(), fit_opts, data_opts],
                       help="one debiased estimate")
    p.add_argument("--method", choices=METHODS, required=True)
    p.add_argument("--long-run", nargs=2, metavar=("RANGE1", "RANGE2"), default=None,
                   help="build the two-period panel of range averages, e.g. 1990-1999 2010-2019")
    p.add_argument("--outcome", choices=("mean_log", "log_mean"), default="mean_log")

    p = sub.add_parser("adaptation", parents=[common, schema_opts(), fit_opts, data_opts],
                       help="subsample bootstrap of 1 - long-run/short-run")
    p.add_argument("--method", choices=METHODS, default="ols_linear")
    p.add_argument("--range1", default="1990-1999")
    p.add_argument("--range2", default="2010-2019")
    p.add_argument("--boot", type=int, default=500)
    p.add_argument("--fraction", type=float, default=0.8)
    p.add_argument("--outcome", choices=("mean_log", "log_mean"), default="mean_log")
    p.add_argument("--bonferroni", type=int, default=3)

    p = sub.add_parser("bins", parents=[common, schema_opts(YEARLY_FLEXIBLE), fit_opts, data_opts],
                       help="per-bin effects and the piecewise-linear fit")
    p.add_argument("--method", choices=METHODS, default="ols_linear")
    p.add_argument("--knee", type=float, default=None, help="defaults to the threshold")

    p = sub.add_parser("synth", parents=[common], help="write synthetic input files")
    p.add_argument("--kind", choices=("weather", "two-regime"), required=True)
    p.add_argument("--counties", type=int, default=20)
    p.add_argument("--years", type=_year_span, default=None, help="first-last year, e.g. 1990-2019")
    p.add_argument("--beta-sr", type=float, default=-0.01)
    p.add_argument("--beta-lr", type=float, default=-0.005)
    return parser


# ---------------------------------------------------------------- input loading


def _gather(*loaders):
    """Run every loader, then raise one ValidationError holding all of their problems."""
    results, problems = [], []
    for load in loaders:
        try:
            results.append(load())
        except ValidationError as exc:
            problems.extend(exc.problems)
            results.append(None)
        except (DataError, SchemaError) as exc:
            problems.append(str(exc))
            results.append(None)
    if problems:
        raise ValidationError(problems)
    return results


def _year_ints(frame, path, label):
    year = frame["year"]
    if not np.all(np.isfinite(year)) or not np.all(year == np.round(year)):
        raise ValidationError([f"{label} {path}: column year must hold whole numbers"])
    frame["year"] = year.astype(int)
    return frame


def load_daily(path) -> pd.DataFrame:
    frame = read_table(path, DAILY_COLUMNS, key=(), label="weather")
    problems = validate_daily(frame)
    if problems:
        raise ValidationError([f"weather {path}: {p}" for p in problems])
    return frame


def load_yields(path, weight_col=None) -> pd.DataFrame:
    required = ("unit_id", "year", "yield") + ((weight_col,) if weight_col else ())
    frame = read_table(path, required, numeric=("year",) + required[2:], label="yields")
    frame = _year_ints(frame, path, "yields")
    bad = np.flatnonzero(~(frame["yield"].to_numpy(dtype=float) > 0))
    if bad.size:
        raise ValidationError([f"yields {path}: row {i + 2}: yield must be positive" for i in bad[:10]])
    return frame


def load_covariates(path, schema) -> CovariateMatrix:
    names = schema.covariate_names
    frame = read_table(path, ("unit_id", "year", *names), numeric=("year", *names), label="covariates")
    frame = _year_ints(frame, path, "covariates")
    if frame[list(names)].isna().any().any():
        raise ValidationError([f"covariates {path}: missing values in covariate columns"])
    return CovariateMatrix.from_frame(frame, schema)


def load_panel(path, schema, weight_col=None) -> PanelDataset:
    names = schema.covariate_names
    extra = (weight_col,) if weight_col else ()
    frame = read_table(path, ("unit_id", "year", "y", *names, *extra), numeric=("y", *names, *extra),
                       label="panel")
    if frame[["y", *names]].isna().any().any():
        raise ValidationError([f"panel {path}: missing values in y or covariate columns"])
    return PanelDataset.from_frame(frame, schema, weight_col)


def _panel_inputs(args, schema):
    if args.panel is not None:
        if args.yields is not None or args.covariates is not None:
            raise ValidationError(["give either --panel or --yields with --covariates, not both"])
        if getattr(args, "long_run", None):
            raise ValidationError(["--long-run needs --yields and --covariates"])
        return "panel", _gather(lambda: load_panel(args.panel, schema, args.weight_col))[0]
    missing = [flag for flag, v in (("--yields", args.yields), ("--covariates", args.covariates)) if v is None]
    if missing:
        raise ValidationError([f"missing input: {flag} (or use --panel)" for flag in missing])
    yields, cov = _gather(lambda: load_yields(args.yields, args.weight_col),
                          lambda: load_covariates(args.covariates, schema))
    return "tables", (yields, cov)


def _inputs(args) -> list[Path]:
    keys = ("weather", "panel", "yields", "covariates")
    return [getattr(args, k) for k in keys if getattr(args, k, None) is not None]


def _fit_options(args) -> dict:
    return dict(lambda_grid=tuple(args.lambda_grid), width_grid=tuple(args.width_grid), c_grid=tuple(args.c_grid),
                lambda_fraction=args.lambda_fraction, width=args.width, degree=args.degree, epochs=args.epochs)


# ---------------------------------------------------------------- commands


def cmd_transform(args, out: Path) -> list[str]:
    schema = get_schema(args.schema, args.threshold, args.season)
    daily = _gather(lambda: load_daily(args.weather))[0]
    totals = season_totals(daily, args.season, args.missing)
    cov = assemble(totals, schema)
    write_csv(out / "covariates.csv", cov.to_frame())
    write_json(out / "transform_report.json", {"schema": schema.to_dict(), "n_rows": len(cov),
                                               "incomplete_unit_years": list(totals.report)})
    return ["covariates.csv", "transform_report.json"]


def cmd_simulate(args, out: Path) -> list[str]:
    if len(args.beta) != 3:
        raise ValidationError(["--beta needs exactly three values: lower,higher,prec"])
    weather = None
    if args.weather is not None:
        daily = _gather(lambda: load_daily(args.weather))[0]
        weather = season_totals(daily)
    config = SimulationConfig(trials=args.trials, counties=args.counties, years=args.years, beta=tuple(args.beta),
                              methods=args.methods, schemas=args.schemas, threshold=args.threshold,
                              seed=args.seed, k=args.folds, estimate_options=_fit_options(args),
                              n_jobs=args.jobs)
    trials, summary = run_simulation(config, weather)
    write_csv(out / "sim_trials.csv", trials)
    write_csv(out / "sim_summary.csv", summary)
    return ["sim_trials.csv", "sim_summary.csv"]


def cmd_estimate(args, out: Path) -> list[str]:
    schema = get_schema(args.schema, args.threshold, args.season)
    kind, data = _panel_inputs(args, schema)
    if kind == "panel":
        panel = data
    else:
        yields, cov = data
        if args.long_run:
            panel = make_long_run(yields, cov, args.long_run[0], args.long_run[1], args.outcome, args.weight_col)
        else:
            panel = make_short_run(yields, cov, args.weight_col)
    config = EstimateConfig(args.method, k=args.folds, seed=args.seed, n_jobs=args.jobs, **_fit_options(args))
    est = estimate(panel, config)
    report = est.to_dict()
    report["schema"] = schema.name
    write_json(out / "estimate.json", report)
    write_csv(out / "scores.csv", pd.DataFrame({"unit_id": panel.unit_ids, "year": panel.years,
                                                "score": est.scores}))
    return ["estimate.json", "scores.csv"]


def cmd_adaptation(args, out: Path) -> list[str]:
    schema = get_schema(args.schema, args.threshold, args.season)
    _, (yields, cov) = _panel_inputs(args, schema)
    opts = _fit_options(args)
    config = AdaptationConfig(method=args.method, schema=schema.name, range1=args.range1, range2=args.range2,
                              n_boot=args.boot, fraction=args.fraction, outcome=args.outcome, seed=args.seed,
                              k=args.folds, bonferroni=args.bonferroni, estimate_options=opts, n_jobs=args.jobs)
    result = run_adaptation(yields, cov, config)
    write_csv(out / "adaptation.csv", result.trials)
    write_json(out / "adaptation_summary.json", result.summary())
    return ["adaptation.csv", "adaptation_summary.json"]


def cmd_bins(args, out: Path) -> list[str]:
    if args.schema != YEARLY_FLEXIBLE:
        raise ValidationError([f"bins needs --schema {YEARLY_FLEXIBLE}, got {args.schema}"])
    schema = get_schema(args.schema, args.threshold, args.season)
    kind, data = _panel_inputs(args, schema)
    panel = data if kind == "panel" else make_short_run(*data, args.weight_col)
    table, fit = bin_coefficients(panel, args.method, args.knee, k=args.folds, seed=args.seed,
                                  n_jobs=args.jobs, **_fit_options(args))
    write_csv(out / "bins.csv", table)
    write_json(out / "bins_fit.json", fit)
    return ["bins.csv", "bins_fit.json"]


def cmd_synth(args, out: Path) -> list[str]:
    if args.kind == "weather":
        years = args.years or [2000, 2001]
        write_csv(out / "weather.csv", synth_weather(args.counties, years, seed=args.seed))
        return ["weather.csv"]
    years = args.years or list(range(1990, 2020))
    yields, cov = two_regime_data(args.counties, years, beta_sr=args.beta_sr, beta_lr=args.beta_lr, seed=args.seed)
    write_csv(out / "yields.csv", yields)
    write_csv(out / "covariates.csv", cov.to_frame())
    return ["yields.csv", "covariates.csv"]


COMMANDS = {"transform": cmd_transform, "simulate": cmd_simulate, "estimate": cmd_estimate,
            "adaptation": cmd_adaptation, "bins": cmd_bins, "synth": cmd_synth}


# ---------------------------------------------------------------- driver


def _run_config(args) -> dict:
    config = {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items()}
    config.pop("log_level", None)
    config["version"] = __version__
    return config


def _parse(parser, argv):
    args, unknown = parser.parse_known_args(argv)
    if unknown:
        raise ValidationError([f"unrecognized argument: {u}" for u in unknown])
    if os.environ.get(SEED_ENV):
        try:
            args.seed = int(os.environ[SEED_ENV])
        except ValueError:
            raise ValidationError([f"{SEED_ENV} must be an integer, got {os.environ[SEED_ENV]!r}"]) from None
    problems = []
    if args.jobs < 1:
        problems.append("--jobs must be at least 1")
    if getattr(args, "folds", 2) < 2:
        problems.append("--folds must be at least 2")
    for path in _inputs(args):
        if not path.is_file():
            problems.append(f"cannot read input file {path}")
    if problems:
        raise ValidationError(problems)
    return args


def _report_error(kind: str, problems, out: Path | None) -> None:
    report = {"status": "error", "error": kind, "problems": list(problems)}
    sys.stderr.write(to_json(report))
    if out is not None and out.is_dir():
        write_json(out / "error.json", report)


def main(argv=None) -> int:
    parser = build_parser()
    out = None
    try:
        args = _parse(parser, argv)
        logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s")
        out = args.out
        out.mkdir(parents=True, exist_ok=True)
        inputs = _inputs(args)
        input_hashes = {str(p): sha256_file(p) for p in inputs}
        written = COMMANDS[args.command](args, out)
        write_json(out / "run_config.json", _run_config(args))
        written.append("run_config.json")
        write_json(out / "manifest.json", {"inputs": input_hashes,
                                           "outputs": {name: sha256_file(out / name) for name in written}})
    except ValidationError as exc:
        _report_error("validation", exc.problems, out)
        return EXIT_INVALID
    except ConfigError as exc:
        _report_error("config", [str(exc)], out)
        return EXIT_INVALID
    except PanelDMLError as exc:
        _report_error(type(exc).__name__, [str(exc)], out)
        return EXIT_FAILED
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
