"""Summary statistics over run outputs: age structure, ratios, growth
decomposition, composition sampling error, and parameter sensitivity.

Everything here is a pure function of run artifacts; nothing mutates a
result. Counts stay in simulated persons — callers that want real persons
multiply by the run's scale factor, which cancels in every share and ratio
anyway.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from .core import (
    AGE_BAND_LABELS,
    Codebook,
    EthnicAggregate,
    N_BANDS,
    N_ETHNICITIES,
    Sex,
    SimDate,
)
from .errors import ConfigError, DataError, DemosimError
from .kernel import EventLedger, RunResult
from .scenarios import ScenarioConfig

log = logging.getLogger(__name__)

MAX_TABULATED_AGE = 99  # the open 85+ band is spread over 85..99


# --- filtering --------------------------------------------------------------------


@dataclass(frozen=True)
class GroupFilter:
    """Conjunctive row filter over (sex, band, ethnicity) snapshot cells."""

    sexes: tuple = (0, 1)
    bands: tuple = tuple(range(N_BANDS))
    ethnicities: Optional[tuple] = None  # explicit codes; None = unrestricted
    aggregates: tuple = ()  # every listed aggregate must contain the cell
    name: str = "all"

    def mask(self, codebook: Codebook) -> np.ndarray:
        m = np.zeros((2, N_BANDS, N_ETHNICITIES), dtype=bool)
        eth = np.ones(N_ETHNICITIES, dtype=bool)
        if self.ethnicities is not None:
            keep = np.zeros(N_ETHNICITIES, dtype=bool)
            keep[list(self.ethnicities)] = True
            eth &= keep
        for agg in self.aggregates:
            eth &= codebook.aggregates == int(agg)
        for sex in self.sexes:
            for band in self.bands:
                m[sex, band] = eth
        return m

    def apply(self, snapshot: np.ndarray, codebook: Codebook) -> np.ndarray:
        return np.where(self.mask(codebook), snapshot, 0)

    def __and__(self, other: "GroupFilter") -> "GroupFilter":
        eths: Optional[tuple] = None
        if self.ethnicities is not None or other.ethnicities is not None:
            a = set(self.ethnicities) if self.ethnicities is not None else set(range(N_ETHNICITIES))
            b = set(other.ethnicities) if other.ethnicities is not None else set(range(N_ETHNICITIES))
            eths = tuple(sorted(a & b))
        return GroupFilter(
            sexes=tuple(sorted(set(self.sexes) & set(other.sexes))),
            bands=tuple(sorted(set(self.bands) & set(other.bands))),
            ethnicities=eths,
            aggregates=tuple(dict.fromkeys(self.aggregates + other.aggregates)),
            name=f"{self.name}&{other.name}" if other.name != "all" else self.name,
        )

    @classmethod
    def for_sex(cls, sex: Sex) -> "GroupFilter":
        return cls(sexes=(int(sex),), name=sex.label)

    @classmethod
    def for_aggregate(cls, aggregate: EthnicAggregate) -> "GroupFilter":
        return cls(aggregates=(aggregate,), name=aggregate.name.lower())


# --- age structure ----------------------------------------------------------------


def weighted_median(values: np.ndarray, weights: np.ndarray) -> float:
    """Median of a discrete weighted distribution; an exact half-mass tie
    averages the two straddling values."""
    values = np.asarray(values, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    if values.shape != weights.shape or values.ndim != 1:
        raise DemosimError("values and weights must be parallel 1-d arrays")
    if (weights < 0).any():
        raise DemosimError("negative weights")
    order = np.argsort(values, kind="stable")
    values, weights = values[order], weights[order]
    total = weights.sum()
    if total <= 0:
        raise DataError("median of an empty distribution")
    cum = np.cumsum(weights)
    half = total / 2.0
    i = int(np.searchsorted(cum, half, side="left"))
    while weights[i] == 0:  # searchsorted may land on a zero-weight value
        i += 1
    if abs(cum[i] - half) <= 1e-9 * total:
        j = i + 1
        while j < len(values) and weights[j] == 0:
            j += 1
        if j < len(values):
            return float((values[i] + values[j]) / 2.0)
    return float(values[i])


def band_counts_to_ages(band_counts: np.ndarray) -> np.ndarray:
    """Spread banded counts uniformly over whole-year ages 0..99; the open
    85+ band covers 85..99."""
    if band_counts.shape != (N_BANDS,):
        raise DemosimError(f"expected {N_BANDS} band counts, got {band_counts.shape}")
    ages = np.zeros(MAX_TABULATED_AGE + 1)
    for band in range(N_BANDS - 1):
        ages[band * 5 : band * 5 + 5] += band_counts[band] / 5.0
    ages[85:] += band_counts[N_BANDS - 1] / 15.0
    return ages


def median_age(
    snapshot: np.ndarray, filter: Optional[GroupFilter] = None, codebook: Optional[Codebook] = None
) -> float:
    """Whole-year weighted median age of a (possibly filtered) snapshot."""
    codebook = codebook or Codebook()
    counts = (filter or GroupFilter()).apply(snapshot, codebook)
    bands = counts.sum(axis=(0, 2))
    weights = band_counts_to_ages(bands)
    return weighted_median(np.arange(MAX_TABULATED_AGE + 1), weights)


# --- shares and ratios --------------------------------------------------------------

# the reported age groups straddle band edges; pro-rate the straddled band
REPRODUCTIVE_BANDS = dict.fromkeys(range(3, 10), 1.0) | {10: 0.2}  # 15..50
WORKING_BANDS = dict.fromkeys(range(3, 13), 1.0) | {13: 0.2}  # 15..64 + 1/5 of 65-69
ELDERLY_BANDS = {13: 0.8} | dict.fromkeys(range(14, N_BANDS), 1.0)  # the rest of 65+
CHILD_BANDS = dict.fromkeys(range(0, 3), 1.0)  # under 15


def _banded_total(band_counts: np.ndarray, weights: dict) -> float:
    return float(sum(band_counts[b] * w for b, w in weights.items()))


def reproductive_share(snapshot: np.ndarray) -> float:
    """Women aged 15-50 as a fraction of the whole population."""
    total = snapshot.sum()
    if total <= 0:
        raise DataError("empty snapshot")
    women = snapshot[int(Sex.FEMALE)].sum(axis=1)
    return _banded_total(women, REPRODUCTIVE_BANDS) / float(total)


def sex_ratio(snapshot: np.ndarray) -> float:
    """Males per female."""
    females = snapshot[int(Sex.FEMALE)].sum()
    if females <= 0:
        raise DataError("sex ratio undefined: no females")
    return float(snapshot[int(Sex.MALE)].sum()) / float(females)


def dependency_ratios(snapshot: np.ndarray) -> dict:
    """Dependants per working-age person, total and old-age."""
    bands = snapshot.sum(axis=(0, 2))
    working = _banded_total(bands, WORKING_BANDS)
    if working <= 0:
        raise DataError("dependency ratio undefined: no working-age population")
    children = _banded_total(bands, CHILD_BANDS)
    elderly = _banded_total(bands, ELDERLY_BANDS)
    return {"total": (children + elderly) / working, "old_age": elderly / working}


def pyramid(snapshot: np.ndarray) -> np.ndarray:
    """Counts per (sex, band)."""
    return snapshot.sum(axis=2)


# --- growth decomposition -----------------------------------------------------------


def growth_decomposition(
    ledger: EventLedger,
    from_date: SimDate,
    to_date: SimDate,
    aggregate: Optional[EthnicAggregate] = None,
    codebook: Optional[Codebook] = None,
) -> dict:
    """Natural growth and net migration of the living population over
    [from_date, to_date); their sum is exactly the population change."""
    i0 = from_date.quarters_since(ledger.start_date)
    i1 = to_date.quarters_since(ledger.start_date)
    if not (0 <= i0 <= i1 <= ledger.n_steps):
        raise DemosimError(
            f"window {from_date}..{to_date} outside the ledger range "
            f"({ledger.start_date} + {ledger.n_steps} steps)"
        )
    if aggregate is None:
        eth_mask = np.ones(N_ETHNICITIES, dtype=bool)
    else:
        eth_mask = (codebook or Codebook()).aggregates == int(aggregate)
    cell_mask = np.broadcast_to(eth_mask, (2, N_BANDS, N_ETHNICITIES)).reshape(-1)

    def tally(events: np.ndarray) -> int:
        return int(events[i0:i1][:, cell_mask].sum())

    return {
        "natural_growth": tally(ledger.births) - tally(ledger.deaths),
        "net_migration": tally(ledger.immigrants) - tally(ledger.emigrants),
    }


# --- composition sampling error ------------------------------------------------------


def sampling_error(counts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Posterior mean and std of each group's population fraction under a
    flat Dirichlet prior on the composition."""
    counts = np.asarray(counts, dtype=np.float64)
    if counts.ndim != 1 or counts.size < 2:
        raise DemosimError("need a 1-d vector of at least two group counts")
    if (counts < 0).any():
        raise DemosimError("negative counts")
    alpha = counts + 1.0
    a0 = alpha.sum()
    mean = alpha / a0
    var = alpha * (a0 - alpha) / (a0 * a0 * (a0 + 1.0))
    return mean, np.sqrt(var)


# --- sensitivity ---------------------------------------------------------------------

SENSITIVITY_PARAMS = ("f_enl", "f_ex", "f_em", "f_ret")
REL_STEP = 0.05
ABS_STEP = 0.05  # fallback when the base value is 0


@dataclass
class SensitivityReport:
    param: str
    base_value: float
    values: dict  # perturbation label -> output series
    derivative: np.ndarray
    joint_residual: Optional[np.ndarray] = None
    warnings: list = field(default_factory=list)

    def max_abs_derivative(self) -> float:
        return float(np.max(np.abs(self.derivative)))


def _perturbations(p: float) -> tuple[float, float, float, list]:
    """(low, high, denominator, warnings) for the two-sided difference."""
    if p == 0.0:
        msg = (
            "base value is 0: relative perturbation undefined, "
            f"using absolute step {ABS_STEP}"
        )
        log.warning(msg)
        return 0.0, ABS_STEP, ABS_STEP, [msg]
    return p * (1 - REL_STEP), p * (1 + REL_STEP), 2 * REL_STEP * p, []


def sensitivity(
    runner: Callable[[ScenarioConfig], np.ndarray],
    scenario: ScenarioConfig,
    param: str,
    joint: bool = False,
    jobs: int = 1,
) -> SensitivityReport:
    """Two-sided +-5% derivative of the runner's output series w.r.t. one
    scenario factor; `runner` must hold everything else (seed included) fixed.

    With `joint` set (f_em only), f_em and f_ret are additionally perturbed
    upward together and the report carries the deviation of the joint response
    from the sum of the separate ones.
    """
    if param not in SENSITIVITY_PARAMS:
        raise ConfigError(f"unknown sensitivity parameter {param!r}; pick one of {SENSITIVITY_PARAMS}")
    if param == "f_enl" and scenario.brexit:
        raise ConfigError("f_enl applies only to scenarios without Brexit")
    if joint and param != "f_em":
        raise ConfigError("joint perturbation pairs f_em with f_ret; pass param='f_em'")

    p = float(getattr(scenario, param))
    lo, hi, denom, warnings = _perturbations(p)

    tasks = {"low": replace(scenario, **{param: lo}), "high": replace(scenario, **{param: hi})}
    if joint:
        p_ret = float(scenario.f_ret)
        _, ret_hi, _, ret_warn = _perturbations(p_ret)
        warnings += ret_warn
        tasks["base"] = scenario
        tasks["ret_high"] = replace(scenario, f_ret=ret_hi)
        tasks["joint_high"] = replace(scenario, **{param: hi, "f_ret": ret_hi})

    labels = list(tasks)
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            series = dict(zip(labels, pool.map(runner, [tasks[k] for k in labels])))
    else:
        series = {k: runner(tasks[k]) for k in labels}
    series = {k: np.asarray(v, dtype=np.float64) for k, v in series.items()}

    derivative = (series["high"] - series["low"]) / denom
    residual = None
    if joint:
        d_em = series["high"] - series["base"]
        d_ret = series["ret_high"] - series["base"]
        d_joint = series["joint_high"] - series["base"]
        residual = d_joint - (d_em + d_ret)
    return SensitivityReport(
        param=param,
        base_value=p,
        values=series,
        derivative=derivative,
        joint_residual=residual,
        warnings=warnings,
    )


# --- stats serialization --------------------------------------------------------------

STATS_HEADER = ("date", "scenario", "metric", "filter", "value", "sampling_std")

# one value per snapshot (or, for eu-inflow, per step): usable as a
# sensitivity output series
SERIES_METRICS = frozenset(
    {"total-population", "median-age", "sex-ratio", "reproductive-share", "eu-share", "eu-inflow"}
)
ALL_METRICS = SERIES_METRICS | {"dependency", "growth", "pyramid"}


def _eu_cell_mask(codebook: Codebook) -> np.ndarray:
    eth = codebook.aggregates == int(EthnicAggregate.EU_IMMIGRANT)
    return np.broadcast_to(eth, (2, N_BANDS, N_ETHNICITIES)).reshape(-1)


def metric_series(
    result: RunResult, metric: str, codebook: Optional[Codebook] = None
) -> tuple[list[SimDate], np.ndarray]:
    """One value per date for a single-series metric. Snapshot metrics are
    annual; eu-inflow is the quarterly EU-immigrant arrival count."""
    codebook = codebook or Codebook()
    scale = result.scale_factor
    if metric not in SERIES_METRICS:
        raise ConfigError(f"{metric!r} is not a single-series metric; pick one of {sorted(SERIES_METRICS)}")
    if metric == "eu-inflow":
        ledger = result.ledger
        dates = [ledger.start_date.add_quarters(t) for t in range(ledger.n_steps)]
        values = ledger.immigrants[:, _eu_cell_mask(codebook)].sum(axis=1) * scale
        return dates, values.astype(np.float64)
    dates = result.snapshot_dates()
    values = np.empty(len(dates))
    for i, date in enumerate(dates):
        snap = result.snapshot(date)
        if metric == "total-population":
            values[i] = snap.sum() * scale
        elif metric == "median-age":
            values[i] = median_age(snap)
        elif metric == "sex-ratio":
            values[i] = sex_ratio(snap)
        elif metric == "reproductive-share":
            values[i] = reproductive_share(snap)
        else:  # eu-share
            eu = GroupFilter.for_aggregate(EthnicAggregate.EU_IMMIGRANT)
            values[i] = eu.apply(snap, codebook).sum() / snap.sum()
    return dates, values


def stats_rows(
    result: RunResult, metric: str, codebook: Optional[Codebook] = None
) -> list[tuple]:
    """Long-format rows for one run and one metric over all July snapshots."""
    codebook = codebook or Codebook()
    scen = result.config.scenario.name if result.config.scenario else "baseline"
    scale = result.scale_factor
    if metric not in ALL_METRICS:
        raise ConfigError(f"unknown metric {metric!r}; pick one of {sorted(ALL_METRICS)}")
    if metric == "pyramid":
        raise ConfigError("pyramid is not a stats metric; use analysis.pyramid on snapshots")
    rows = []
    if metric == "eu-inflow":
        for date, value in zip(*metric_series(result, metric, codebook)):
            rows.append((str(date), scen, metric, "eu_immigrant", value, ""))
        return rows
    if metric == "growth":
        snaps = result.snapshot_dates()
        groups = [(None, "all")] + [
            (agg, agg.name.lower()) for agg in EthnicAggregate
        ]
        for a, b in zip(snaps, snaps[1:]):
            for agg, label in groups:
                parts = growth_decomposition(result.ledger, a, b, agg, codebook)
                rows.append((str(a), scen, "growth-natural", label, parts["natural_growth"] * scale, ""))
                rows.append((str(a), scen, "growth-migration", label, parts["net_migration"] * scale, ""))
        return rows
    for date in result.snapshot_dates():
        snap = result.snapshot(date)
        if metric == "total-population":
            rows.append((str(date), scen, metric, "all", snap.sum() * scale, ""))
        elif metric == "median-age":
            rows.append((str(date), scen, metric, "all", median_age(snap), ""))
        elif metric == "sex-ratio":
            rows.append((str(date), scen, metric, "all", sex_ratio(snap), ""))
        elif metric == "reproductive-share":
            share = reproductive_share(snap)
            women = snap[int(Sex.FEMALE)].sum(axis=1)
            k = _banded_total(women, REPRODUCTIVE_BANDS)
            _, std = sampling_error(np.array([k, snap.sum() - k]))
            rows.append((str(date), scen, metric, "all", share, std[0]))
        elif metric == "dependency":
            ratios = dependency_ratios(snap)
            rows.append((str(date), scen, "dependency-total", "all", ratios["total"], ""))
            rows.append((str(date), scen, "dependency-old-age", "all", ratios["old_age"], ""))
        elif metric == "eu-share":
            eu = GroupFilter.for_aggregate(EthnicAggregate.EU_IMMIGRANT)
            k = eu.apply(snap, codebook).sum()
            mean, std = sampling_error(np.array([k, snap.sum() - k], dtype=float))
            rows.append((str(date), scen, metric, eu.name, mean[0], std[0]))
    return rows
