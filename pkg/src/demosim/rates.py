"""Input tables: census counts, fertility and mortality rates, total-fertility
scalers, twin probabilities and the sex ratio at birth.

All rates are stored as annual quantities; hazard conversion happens in the
process modules. Year axes are contiguous and extrapolate flat on both ends
(a 1905 cohort reads the first tabulated cohort, a 2050 calendar year reads
the last tabulated year).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .core import (
    AGE_BAND_LABELS,
    DEFAULT_ETHNICITY_NAMES,
    N_BANDS,
    N_ETHNICITIES,
    Codebook,
    Sex,
    parse_age_band,
)
from .errors import DataError

CENSUS_FILE = "census.csv"
BIRTH_RATES_FILE = "birth_rates.csv"
TFR_FILE = "tfr.csv"
MULTIPLICITY_FILE = "multiplicity.csv"
SEX_RATIO_FILE = "sex_ratio.csv"
MORTALITY_FILE = "mortality.csv"

TFR_AVERAGE_LABEL = "average"

# The model is anchored on these censuses: the first seeds the population and
# the three together drive migration-rate calibration.
CENSUS_YEARS = (1991, 2001, 2011)


def _read_rows(path: Path, columns: tuple[str, ...]):
    if not path.is_file():
        raise DataError(f"{path}: file not found")
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        got = tuple(reader.fieldnames or ())
        if got != columns:
            raise DataError(f"{path.name}: expected header {','.join(columns)}, got {','.join(got)}")
        for lineno, row in enumerate(reader, start=2):
            yield lineno, row


class _RowErrors:
    """Collects row-level problems so a bad file reports everything at once."""

    def __init__(self, filename: str):
        self.filename = filename
        self.messages: list[str] = []

    def add(self, lineno: int, msg: str):
        self.messages.append(f"{self.filename}:{lineno}: {msg}")

    def raise_if_any(self):
        if self.messages:
            raise DataError("\n".join(self.messages))


def _parse_number(errs: _RowErrors, lineno: int, name: str, raw: str, lo=None, hi=None, lo_open=False, hi_open=False):
    try:
        value = float(raw)
    except ValueError:
        errs.add(lineno, f"{name}={raw!r} is not a number")
        return None
    if not np.isfinite(value):
        errs.add(lineno, f"{name}={raw!r} is not finite")
        return None
    if lo is not None and (value < lo or (lo_open and value == lo)):
        errs.add(lineno, f"{name}={value} below {'open ' if lo_open else ''}bound {lo}")
        return None
    if hi is not None and (value > hi or (hi_open and value == hi)):
        errs.add(lineno, f"{name}={value} above {'open ' if hi_open else ''}bound {hi}")
        return None
    return value


def _parse_int(errs: _RowErrors, lineno: int, name: str, raw: str):
    try:
        return int(raw)
    except ValueError:
        errs.add(lineno, f"{name}={raw!r} is not an integer")
        return None


def _parse_band(errs: _RowErrors, lineno: int, raw: str):
    try:
        return parse_age_band(raw)
    except ValueError as exc:
        errs.add(lineno, str(exc))
        return None


def _parse_sex(errs: _RowErrors, lineno: int, raw: str):
    try:
        return Sex.from_label(raw)
    except ValueError as exc:
        errs.add(lineno, str(exc))
        return None


def _year_span(errs: _RowErrors, years: Iterable[int], what: str):
    """Validate a contiguous year axis and return (first, n)."""
    ys = sorted(set(years))
    if not ys:
        errs.add(0, f"no {what} rows found")
        errs.raise_if_any()
    if ys != list(range(ys[0], ys[-1] + 1)):
        missing = sorted(set(range(ys[0], ys[-1] + 1)) - set(ys))
        errs.add(0, f"{what} years not contiguous, missing {missing}")
        errs.raise_if_any()
    return ys[0], len(ys)


class YearTable:
    """A (row, calendar-year) matrix with flat extrapolation on the year axis."""

    def __init__(self, values: np.ndarray, first_year: int):
        self.values = np.asarray(values, dtype=np.float64)
        self.first_year = int(first_year)

    @property
    def last_year(self) -> int:
        return self.first_year + self.values.shape[-1] - 1

    def col(self, years):
        return np.clip(np.asarray(years) - self.first_year, 0, self.values.shape[-1] - 1)


@dataclass
class CensusTable:
    """Mid-year population counts per (sex, age band, ethnicity), by census year."""

    counts: dict[int, np.ndarray] = field(default_factory=dict)

    def years(self) -> list[int]:
        return sorted(self.counts)

    def counts_for(self, year: int) -> np.ndarray:
        try:
            return self.counts[year]
        except KeyError:
            raise DataError(f"no census table for year {year} (have {self.years()})") from None

    def total(self, year: int) -> float:
        return float(self.counts_for(year).sum())


class FertilityTable(YearTable):
    """Annual birth rates per woman by age band and the mother's birth-year
    cohort. Bands absent from the file are permanently zero (infertile)."""

    def __init__(self, values, first_cohort, present: np.ndarray):
        super().__init__(values, first_cohort)
        self.present = present  # bool[N_BANDS]

    def rate(self, bands: np.ndarray, cohorts) -> np.ndarray:
        return self.values[bands, self.col(cohorts)]


class TFRScaler(YearTable):
    """Per-ethnicity fertility scaling: group TFR over same-year average TFR.
    Groups without a TFR series scale by exactly 1."""

    def scale(self, eth: np.ndarray, year: int) -> np.ndarray:
        return self.values[eth, self.col(year)]


class MultiplicityTable(YearTable):
    def twin_prob(self, bands: np.ndarray, year: int) -> np.ndarray:
        return self.values[bands, self.col(year)]


class SexRatioTable(YearTable):
    def male_share(self, year: int) -> float:
        return float(self.values[0, self.col(year)])


class MortalityTable(YearTable):
    """Annual death probability by sex, age band and calendar year."""

    def __init__(self, values, first_year):
        super().__init__(values, first_year)  # values[2, N_BANDS, n_years]

    def prob(self, sexes: np.ndarray, bands: np.ndarray, years) -> np.ndarray:
        return self.values[sexes, bands, self.col(years)]


@dataclass
class Dataset:
    codebook: Codebook
    census: CensusTable
    fertility: FertilityTable
    tfr: TFRScaler
    multiplicity: MultiplicityTable
    sex_ratio: SexRatioTable
    mortality: MortalityTable


# --- loaders -------------------------------------------------------------------


def _load_census(path: Path, codebook: Codebook) -> CensusTable:
    errs = _RowErrors(path.name)
    cells: dict[int, np.ndarray] = {}
    seen: set[tuple] = set()
    for lineno, row in _read_rows(path, ("year", "sex", "age_group", "ethnicity", "count")):
        year = _parse_int(errs, lineno, "year", row["year"])
        sex = _parse_sex(errs, lineno, row["sex"])
        band = _parse_band(errs, lineno, row["age_group"])
        count = _parse_number(errs, lineno, "count", row["count"], lo=0)
        try:
            eth = codebook.code(row["ethnicity"])
        except ValueError as exc:
            errs.add(lineno, str(exc))
            continue
        if None in (year, sex, band, count):
            continue
        key = (year, int(sex), band, eth)
        if key in seen:
            errs.add(lineno, f"duplicate census cell {row['sex']}/{row['age_group']}/{row['ethnicity']} in {year}")
            continue
        seen.add(key)
        cells.setdefault(year, np.zeros((2, N_BANDS, N_ETHNICITIES)))[int(sex), band, eth] = count
    errs.raise_if_any()
    if not cells:
        raise DataError(f"{path.name}: no census rows")
    return CensusTable(cells)


def _load_birth_rates(path: Path) -> FertilityTable:
    errs = _RowErrors(path.name)
    rows: dict[tuple[int, int], float] = {}
    for lineno, row in _read_rows(path, ("age_group", "mother_birth_year", "rate")):
        band = _parse_band(errs, lineno, row["age_group"])
        cohort = _parse_int(errs, lineno, "mother_birth_year", row["mother_birth_year"])
        rate = _parse_number(errs, lineno, "rate", row["rate"], lo=0, hi=1, hi_open=True)
        if None in (band, cohort, rate):
            continue
        if (band, cohort) in rows:
            errs.add(lineno, f"duplicate rate for {row['age_group']} cohort {cohort}")
        rows[(band, cohort)] = rate
    errs.raise_if_any()
    first, n = _year_span(errs, (c for _, c in rows), "mother_birth_year")
    present = np.zeros(N_BANDS, dtype=bool)
    values = np.zeros((N_BANDS, n))
    for (band, cohort), rate in rows.items():
        present[band] = True
        values[band, cohort - first] = rate
    for band in np.flatnonzero(present):
        have = {c for b, c in rows if b == band}
        gaps = sorted(set(range(first, first + n)) - have)
        if gaps:
            errs.add(0, f"band {AGE_BAND_LABELS[band]} missing cohorts {gaps}")
    errs.raise_if_any()
    return FertilityTable(values, first, present)


def _load_tfr(path: Path, codebook: Codebook) -> TFRScaler:
    errs = _RowErrors(path.name)
    rows: dict[tuple[str, int], float] = {}
    for lineno, row in _read_rows(path, ("ethnicity", "year", "tfr")):
        name = row["ethnicity"].strip()
        if name != TFR_AVERAGE_LABEL:
            try:
                codebook.code(name)
            except ValueError as exc:
                errs.add(lineno, str(exc))
                continue
        year = _parse_int(errs, lineno, "year", row["year"])
        tfr = _parse_number(errs, lineno, "tfr", row["tfr"], lo=0, lo_open=True)
        if None in (year, tfr):
            continue
        if (name, year) in rows:
            errs.add(lineno, f"duplicate tfr for {name} in {year}")
        rows[(name, year)] = tfr
    errs.raise_if_any()
    first, n = _year_span(errs, (y for _, y in rows), "tfr")
    span = range(first, first + n)
    missing_avg = [y for y in span if (TFR_AVERAGE_LABEL, y) not in rows]
    if missing_avg:
        errs.add(0, f"'{TFR_AVERAGE_LABEL}' series missing years {missing_avg}")
    named = {name for name, _ in rows if name != TFR_AVERAGE_LABEL}
    for name in sorted(named):
        gaps = [y for y in span if (name, y) not in rows]
        if gaps:
            errs.add(0, f"{name} tfr series missing years {gaps}")
    errs.raise_if_any()
    values = np.ones((N_ETHNICITIES, n))
    avg = np.array([rows[(TFR_AVERAGE_LABEL, y)] for y in span])
    for name in named:
        values[codebook.code(name)] = [rows[(name, y)] for y in span] / avg
    return TFRScaler(values, first)


def _load_multiplicity(path: Path) -> MultiplicityTable:
    errs = _RowErrors(path.name)
    rows: dict[tuple[int, int], float] = {}
    for lineno, row in _read_rows(path, ("age_group", "year", "twin_prob")):
        band = _parse_band(errs, lineno, row["age_group"])
        year = _parse_int(errs, lineno, "year", row["year"])
        prob = _parse_number(errs, lineno, "twin_prob", row["twin_prob"], lo=0, hi=1, hi_open=True)
        if None in (band, year, prob):
            continue
        if (band, year) in rows:
            errs.add(lineno, f"duplicate twin_prob for {row['age_group']} in {year}")
        rows[(band, year)] = prob
    errs.raise_if_any()
    first, n = _year_span(errs, (y for _, y in rows), "multiplicity")
    values = np.zeros((N_BANDS, n))
    for (band, year), prob in rows.items():
        values[band, year - first] = prob
    return MultiplicityTable(values, first)


def _load_sex_ratio(path: Path) -> SexRatioTable:
    errs = _RowErrors(path.name)
    rows: dict[int, float] = {}
    for lineno, row in _read_rows(path, ("year", "male_share")):
        year = _parse_int(errs, lineno, "year", row["year"])
        share = _parse_number(errs, lineno, "male_share", row["male_share"], lo=0, hi=1, lo_open=True, hi_open=True)
        if None in (year, share):
            continue
        if year in rows:
            errs.add(lineno, f"duplicate male_share for {year}")
        rows[year] = share
    errs.raise_if_any()
    first, n = _year_span(errs, rows, "sex_ratio")
    return SexRatioTable(np.array([[rows[first + i] for i in range(n)]]), first)


def _load_mortality(path: Path) -> MortalityTable:
    errs = _RowErrors(path.name)
    rows: dict[tuple[int, int, int], float] = {}
    for lineno, row in _read_rows(path, ("sex", "age_group", "year", "rate")):
        sex = _parse_sex(errs, lineno, row["sex"])
        band = _parse_band(errs, lineno, row["age_group"])
        year = _parse_int(errs, lineno, "year", row["year"])
        rate = _parse_number(errs, lineno, "rate", row["rate"], lo=0, hi=1, hi_open=True)
        if None in (sex, band, year, rate):
            continue
        key = (int(sex), band, year)
        if key in rows:
            errs.add(lineno, f"duplicate rate for {row['sex']}/{row['age_group']} in {year}")
        rows[key] = rate
    errs.raise_if_any()
    first, n = _year_span(errs, (y for _, _, y in rows), "mortality")
    values = np.zeros((2, N_BANDS, n))
    for sex in (0, 1):
        for band in range(N_BANDS):
            gaps = [y for y in range(first, first + n) if (sex, band, y) not in rows]
            if gaps:
                errs.add(0, f"{'FM'[sex]}/{AGE_BAND_LABELS[band]} missing years {gaps}")
    errs.raise_if_any()
    for (sex, band, year), rate in rows.items():
        values[sex, band, year - first] = rate
    return MortalityTable(values, first)


def load_dataset(directory) -> Dataset:
    """Read and validate the six input tables from a directory."""
    directory = Path(directory)
    if not directory.is_dir():
        raise DataError(f"dataset directory {directory} does not exist")
    codebook = Codebook(DEFAULT_ETHNICITY_NAMES)
    census = _load_census(directory / CENSUS_FILE, codebook)
    missing = [y for y in CENSUS_YEARS if y not in census.counts]
    if missing:
        raise DataError(
            f"{CENSUS_FILE}: missing census year(s) {missing}; migration calibration impossible"
        )
    return Dataset(
        codebook=codebook,
        census=census,
        fertility=_load_birth_rates(directory / BIRTH_RATES_FILE),
        tfr=_load_tfr(directory / TFR_FILE, codebook),
        multiplicity=_load_multiplicity(directory / MULTIPLICITY_FILE),
        sex_ratio=_load_sex_ratio(directory / SEX_RATIO_FILE),
        mortality=_load_mortality(directory / MORTALITY_FILE),
    )


# --- writers (used by the bundled-data generator and tests) --------------------


def _write_csv(path: Path, header: tuple[str, ...], rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def write_census(path, counts_by_year: dict[int, np.ndarray], codebook: Codebook):
    rows = []
    for year in sorted(counts_by_year):
        table = counts_by_year[year]
        for sex in (Sex.FEMALE, Sex.MALE):
            for band in range(N_BANDS):
                for eth, name in enumerate(codebook.names):
                    c = table[int(sex), band, eth]
                    if c:
                        rows.append((year, sex.label, AGE_BAND_LABELS[band], name, f"{c:.0f}"))
    _write_csv(Path(path), ("year", "sex", "age_group", "ethnicity", "count"), rows)


def write_birth_rates(path, values: np.ndarray, first_cohort: int, present: np.ndarray):
    rows = [
        (AGE_BAND_LABELS[band], first_cohort + j, f"{values[band, j]:.6f}")
        for band in np.flatnonzero(present)
        for j in range(values.shape[1])
    ]
    _write_csv(Path(path), ("age_group", "mother_birth_year", "rate"), rows)


def write_tfr(path, series: dict[str, np.ndarray], first_year: int):
    rows = [
        (name, first_year + j, f"{vals[j]:.4f}")
        for name, vals in series.items()
        for j in range(len(vals))
    ]
    _write_csv(Path(path), ("ethnicity", "year", "tfr"), rows)


def write_multiplicity(path, values: np.ndarray, first_year: int, bands: np.ndarray):
    rows = [
        (AGE_BAND_LABELS[band], first_year + j, f"{values[band, j]:.5f}")
        for band in bands
        for j in range(values.shape[1])
    ]
    _write_csv(Path(path), ("age_group", "year", "twin_prob"), rows)


def write_sex_ratio(path, shares: np.ndarray, first_year: int):
    rows = [(first_year + j, f"{shares[j]:.5f}") for j in range(len(shares))]
    _write_csv(Path(path), ("year", "male_share"), rows)


def write_mortality(path, values: np.ndarray, first_year: int):
    rows = [
        (sex.label, AGE_BAND_LABELS[band], first_year + j, f"{values[int(sex), band, j]:.6f}")
        for sex in (Sex.FEMALE, Sex.MALE)
        for band in range(N_BANDS)
        for j in range(values.shape[2])
    ]
    _write_csv(Path(path), ("sex", "age_group", "year", "rate"), rows)
