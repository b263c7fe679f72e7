"""Cohort mortality.

Period death probabilities q(sex, 5-year band, calendar year) are turned into
per-cohort hazard curves: the rate observed for ages [x, x+5) in year y lands
on the birth cohorts y-x-4 ... y-x at the ages they hold in year y, i.e.
h(age) = -ln(1 - q(sex, band(age), cohort + age)). Years outside the table
extrapolate flat, and cohorts born before the first data year use a copy of
that first derivable cohort's curve (a 1900 cohort reads the 1912 curve when
the table starts in 1912).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import AGE_BAND_LABELS, Sex, band_of_age
from .errors import DataError
from .rates import MortalityTable

MAX_AGE = 110  # survivors beyond this keep using the terminal band's hazard


@dataclass(frozen=True)
class MortalityCurve:
    sex: Sex
    birth_year: int
    hazard: np.ndarray  # indexed by whole-year age, 0..MAX_AGE

    def __post_init__(self):
        if (self.hazard < 0).any():
            raise ValueError("negative hazard in mortality curve")


class MortalityModel:
    """The full set of cohort curves, evaluated lazily from the rate table."""

    def __init__(self, table: MortalityTable):
        bad = np.argwhere(table.values >= 1.0)
        if len(bad):
            sex, band, j = bad[0]
            raise DataError(
                f"mortality rate is 1 for {'FM'[sex]}/{AGE_BAND_LABELS[band]} "
                f"in {table.first_year + j}: hazard undefined"
            )
        self.table = table

    def hazard_at(self, sexes: np.ndarray, ages: np.ndarray, cohorts: np.ndarray) -> np.ndarray:
        """Vectorised h(age) for persons given as parallel arrays."""
        a = np.minimum(ages, MAX_AGE)
        c = np.maximum(cohorts, self.table.first_year)
        q = self.table.prob(np.asarray(sexes, dtype=np.int64), band_of_age(a), c + a)
        return -np.log1p(-q)

    def curve(self, sex: Sex, birth_year: int) -> MortalityCurve:
        ages = np.arange(MAX_AGE + 1)
        h = self.hazard_at(np.full_like(ages, int(sex)), ages, np.full_like(ages, birth_year))
        return MortalityCurve(sex, birth_year, h)


def calibrate_mortality(table: MortalityTable) -> MortalityModel:
    return MortalityModel(table)


def death_probability(curve: MortalityCurve, age: int, dt: float) -> float:
    if dt <= 0:
        raise ValueError(f"dt must be positive, got {dt}")
    if age < 0:
        raise ValueError(f"negative age {age}")
    return float(-np.expm1(-curve.hazard[min(age, MAX_AGE)] * dt))


def backfill_cohorts(curves: dict, earliest_data_cohort: int) -> dict:
    """Fill requested pre-data cohorts with copies of the earliest curve.

    `curves` maps (sex, birth_year) -> MortalityCurve and must contain the
    earliest data cohort for every sex that any earlier cohort is requested
    for; earlier entries whose value is None are replaced.
    """
    if not curves:
        raise DataError("no mortality curves to backfill from")
    out = dict(curves)
    for (sex, year), curve in curves.items():
        if curve is None:
            src = out.get((sex, earliest_data_cohort))
            if src is None:
                raise DataError(f"no curve for earliest data cohort {earliest_data_cohort}")
            out[(sex, year)] = MortalityCurve(src.sex, year, src.hazard.copy())
    return out
