"""Command-line front end: calibrate models, run scenarios, analyze outputs.

Exit codes: 0 success, 1 usage, 2 data or validation problem, 3 internal
error (a bug, not bad input).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import shutil
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import (
    SENSITIVITY_PARAMS,
    metric_series,
    sensitivity,
    stats_rows,
    ALL_METRICS,
    SERIES_METRICS,
    STATS_HEADER,
)
from .core import AGE_BAND_LABELS, Codebook, N_BANDS, SimDate, Sex
from .errors import ConfigError, DataError, DemosimError
from .fertility import calibrate_fertility
from .kernel import RunConfig, RunResult, run
from .migration import MIGRATION_DECADES, MigrationSchedule, calibrate_migration
from .mortality import MAX_AGE, calibrate_mortality
from .rates import (
    BIRTH_RATES_FILE,
    CENSUS_FILE,
    MORTALITY_FILE,
    MULTIPLICITY_FILE,
    SEX_RATIO_FILE,
    TFR_FILE,
    load_dataset,
)
from .scenarios import BUILTIN_SCENARIOS, ScenarioConfig, builtin_scenario, parse_scenario

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_INTERNAL = 3

DATA_ENV = "DEMOSIM_DATA"
DATASET_FILES = (
    CENSUS_FILE, BIRTH_RATES_FILE, TFR_FILE, MULTIPLICITY_FILE, SEX_RATIO_FILE, MORTALITY_FILE,
)
SCHEDULE_FILE = "schedule.csv"


class _Parser(argparse.ArgumentParser):
    """argparse exits 2 on usage errors; this project reserves 2 for data."""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _default_data_dir() -> Path:
    env = os.environ.get(DATA_ENV)
    if env:
        return Path(env)
    return Path(__file__).parent / "data_bundle"


# --- calibrate ----------------------------------------------------------------------


def cmd_calibrate(args) -> int:
    data_dir = Path(args.data)
    out = Path(args.out)
    data = load_dataset(data_dir)
    out.mkdir(parents=True, exist_ok=True)

    fertility = calibrate_fertility(data)
    mortality = calibrate_mortality(data.mortality)
    schedule = calibrate_migration(data, args.population, args.seed)

    for name in DATASET_FILES:
        shutil.copyfile(data_dir / name, out / name)
    schedule.save(out / SCHEDULE_FILE, data.codebook)
    _write_fertility_model(out / "fertility_hazards.csv", data, fertility)
    _write_mortality_curves(out / "mortality_curves.csv", mortality)
    with open(out / "manifest.json", "w") as fh:
        json.dump(
            {
                "population_size": args.population,
                "seed": args.seed,
                "versions": {"demosim": __version__, "numpy": np.__version__},
            },
            fh, indent=2, sort_keys=True,
        )

    for decade in MIGRATION_DECADES:
        d = schedule.decades.index(decade)
        absolute = schedule.ks[d][schedule.laws[d] == 0]
        relative = schedule.ks[d][schedule.laws[d] == 1]
        print(
            f"decade {decade}: net absolute flow {absolute.sum():+,.0f} persons/yr "
            f"over {np.count_nonzero(absolute)} cohorts; "
            f"{np.count_nonzero(relative)} relative-law cohorts "
            f"(mean k {relative[relative != 0].mean() if relative.any() else 0.0:+.5f}/yr)"
        )
    print(f"models written to {out}")
    return EXIT_OK


def _write_fertility_model(path, data, fertility):
    """Base annual conception hazards by band and mother cohort (ethnicity
    scaling and year-specific twin adjustment applied at run time)."""
    first = data.fertility.first_year
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("age_group", "mother_birth_year", "hazard"))
        for band in np.flatnonzero(data.fertility.present):
            for j in range(data.fertility.values.shape[1]):
                r = data.fertility.values[band, j]
                w.writerow((AGE_BAND_LABELS[band], first + j, f"{-np.log1p(-r):.6f}"))


def _write_mortality_curves(path, mortality):
    """Cohort hazard curves at decade spacing (the run evaluates exactly)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("sex", "birth_year", "age", "hazard"))
        for sex in (Sex.FEMALE, Sex.MALE):
            for birth_year in range(1880, 2041, 10):
                curve = mortality.curve(sex, birth_year)
                for age in range(0, MAX_AGE + 1):
                    w.writerow((sex.label, birth_year, age, f"{curve.hazard[age]:.6f}"))


# --- run ----------------------------------------------------------------------------


def _resolve_scenario(spec: str) -> ScenarioConfig:
    if spec in BUILTIN_SCENARIOS:
        return builtin_scenario(spec)
    path = Path(spec)
    if path.exists():
        return parse_scenario(path.read_text(), name=path.stem)
    raise ConfigError(
        f"unknown scenario {spec!r}: not a built-in ({', '.join(sorted(BUILTIN_SCENARIOS))}) "
        "and no such file"
    )


def _echo_factors(s: ScenarioConfig):
    pct = lambda v: f"{v * 100:.0f}%"
    enl = "—" if s.brexit else pct(s.f_enl)
    print(
        f"scenario {s.name}: brexit={'yes' if s.brexit else 'no'} "
        f"f_Enl {enl}, f_Ex {pct(s.f_ex)}, f_Em {pct(s.f_em)}, f_Ret {pct(s.f_ret)}"
    )


def cmd_run(args) -> int:
    models = Path(args.models)
    data = load_dataset(models)
    schedule = MigrationSchedule.load(models / SCHEDULE_FILE, data.codebook)
    scenario = _resolve_scenario(args.scenario)

    start = SimDate(1991, 0)
    end = start.add_quarters(args.steps) if args.steps is not None else SimDate(2041, 0)
    config = RunConfig(
        start=start, end=end, population_size=args.population,
        seed=args.seed, scenario=scenario, migration=True,
    )
    _echo_factors(scenario)
    result = run(config, data, schedule)
    result.save(args.out)
    final = result.snapshot(end) if end.quarter == 0 else None
    if final is not None:
        print(
            f"{config.n_steps} steps; population at {end}: "
            f"{final.sum() * result.scale_factor:,.0f}"
        )
    print(f"run written to {args.out}")
    return EXIT_OK


# --- analyze ------------------------------------------------------------------------


def _load_runs(dirs) -> list[RunResult]:
    results = [RunResult.load(d) for d in dirs]
    grids = {tuple(sorted(r.snapshots)) for r in results}
    if len(grids) > 1:
        raise DataError("runs are incomparable: snapshot grids differ")
    return results


def _write_pyramids(out, results):
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("date", "scenario", "sex", "age_group", "count"))
        for r in results:
            scen = r.config.scenario.name if r.config.scenario else "baseline"
            for date in r.snapshot_dates():
                snap = r.snapshot(date).sum(axis=2) * r.scale_factor
                for sex in (Sex.FEMALE, Sex.MALE):
                    for band in range(N_BANDS):
                        w.writerow((date, scen, sex.label, AGE_BAND_LABELS[band],
                                    f"{snap[int(sex), band]:.0f}"))


def cmd_analyze(args) -> int:
    results = _load_runs(args.runs)
    codebook = Codebook()

    if args.sensitivity:
        return _run_sensitivity(args, results[0], codebook)

    if args.metric == "pyramid":
        _write_pyramids(args.out, results)
        print(f"pyramids written to {args.out}")
        return EXIT_OK

    rows = []
    for r in results:
        rows.extend(stats_rows(r, args.metric, codebook))
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(STATS_HEADER)
        w.writerows(rows)
    print(f"{len(rows)} stat rows written to {args.out}")
    return EXIT_OK


def _run_sensitivity(args, base: RunResult, codebook: Codebook) -> int:
    if not args.models:
        raise ConfigError("--sensitivity needs --models to re-run the simulation")
    if args.metric not in SERIES_METRICS:
        raise ConfigError(
            f"sensitivity needs a single-series metric, one of {sorted(SERIES_METRICS)}"
        )
    if base.config.scenario is None:
        raise ConfigError("the baseline run has no scenario to perturb")
    models = Path(args.models)
    data = load_dataset(models)
    schedule = MigrationSchedule.load(models / SCHEDULE_FILE, data.codebook)
    base_config = base.config

    def runner(scenario: ScenarioConfig) -> np.ndarray:
        result = run(replace(base_config, scenario=scenario), data, schedule)
        return metric_series(result, args.metric, codebook)[1]

    report = sensitivity(
        runner, base_config.scenario, args.sensitivity, joint=args.joint, jobs=args.jobs
    )
    dates = metric_series(base, args.metric, codebook)[0]
    payload = {
        "param": report.param,
        "base_value": report.base_value,
        "metric": args.metric,
        "dates": [str(d) for d in dates],
        "series": {k: v.tolist() for k, v in report.values.items()},
        "derivative": report.derivative.tolist(),
        "joint_residual": None if report.joint_residual is None else report.joint_residual.tolist(),
        "warnings": report.warnings,
    }
    with open(args.out, "w") as fh:
        json.dump(payload, fh, indent=2)
    print(
        f"sensitivity of {args.metric} to {report.param}: "
        f"max |derivative| {report.max_abs_derivative():,.2f}; report in {args.out}"
    )
    return EXIT_OK


# --- entry point --------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="demosim", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"demosim {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    cal = sub.add_parser("calibrate", help="fit all models from a dataset directory")
    cal.add_argument("--data", default=None, help=f"dataset directory (default ${DATA_ENV} or bundled)")
    cal.add_argument("--out", required=True, help="directory for calibrated models")
    cal.add_argument("--population", type=int, default=100_000)
    cal.add_argument("--seed", type=int, default=0)
    cal.set_defaults(func=cmd_calibrate)

    rn = sub.add_parser("run", help="simulate one scenario")
    rn.add_argument("--scenario", required=True, help="built-in name or key=value file")
    rn.add_argument("--models", required=True, help="directory written by calibrate")
    rn.add_argument("--out", required=True)
    rn.add_argument("--seed", type=int, default=0)
    rn.add_argument("--population", type=int, default=100_000)
    rn.add_argument("--steps", type=int, default=None, help="number of quarterly steps (default: to mid-2041)")
    rn.set_defaults(func=cmd_run)

    an = sub.add_parser("analyze", help="compute statistics over run outputs")
    an.add_argument("--runs", nargs="+", required=True, help="run output directories")
    an.add_argument("--metric", required=True, help=f"one of {', '.join(sorted(ALL_METRICS))}")
    an.add_argument("--out", required=True)
    an.add_argument("--sensitivity", metavar="PARAM", default=None,
                    help=f"perturb one of {', '.join(SENSITIVITY_PARAMS)} and re-run")
    an.add_argument("--joint", action="store_true", help="with --sensitivity f_em: also perturb f_ret jointly")
    an.add_argument("--models", default=None, help="models directory (needed by --sensitivity)")
    an.add_argument("--jobs", type=int, default=1)
    an.set_defaults(func=cmd_analyze)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.func is cmd_calibrate and args.data is None:
            args.data = _default_data_dir()
        return args.func(args)
    except SystemExit:
        raise
    except (DataError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except DemosimError as exc:
        print(f"internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    except Exception as exc:  # noqa: BLE001 - last-resort boundary
        log.exception("unhandled failure")
        return EXIT_INTERNAL


if __name__ == "__main__":
    raise SystemExit(main())
