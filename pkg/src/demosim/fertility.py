"""Pregnancy and birth process.

Conception is a non-homogeneous Poisson process with memory: the annual birth
rate r(band, cohort) is inverted to a piecewise-constant conception hazard
h = -ln(1 - r/(1+twin_prob)), so that conceptions times expected litter size
reproduce the target birth rate. The hazard is rescaled per ethnic group by
TFR_group/TFR_average, forced to zero outside ages [15, 50], while pregnant,
and for the three months following a delivery. Gestation is exactly three
quarterly steps; every pregnancy delivers.
"""

from __future__ import annotations

from typing import Optional

import numpy as np

from .core import (
    AGE_BAND_LABELS,
    QUARTERS_PER_YEAR,
    Person,
    Sex,
    SimDate,
    age_of,
    band_of_age,
)
from .errors import DataError, DemosimError
from .rates import Dataset

FERTILE_MIN_AGE = 15
FERTILE_MAX_AGE = 50  # inclusive
POSTPARTUM_QUARTERS = 1  # conception hazard is zero for one step after a birth
GESTATION_QUARTERS = 3


class PregnancyModel:
    """Calibrated conception hazard plus the birth-outcome distributions."""

    def __init__(self, data: Dataset):
        self.fertility = data.fertility
        self.tfr = data.tfr
        self.multiplicity = data.multiplicity
        self.sex_ratio = data.sex_ratio
        self._check_invertible()

    def _check_invertible(self):
        # the inversion needs r < 1 + twin_prob in every cell the model can visit
        min_twin = self.multiplicity.values.min(axis=1)
        for band in np.flatnonzero(self.fertility.present):
            worst = self.fertility.values[band].max()
            if worst >= 1.0 + min_twin[band]:
                cohort = self.fertility.first_year + int(self.fertility.values[band].argmax())
                raise DataError(
                    f"birth rate {worst} for {AGE_BAND_LABELS[band]} cohort {cohort} "
                    f"is not below 1 + twin_prob ({1.0 + min_twin[band]}): hazard undefined"
                )

    # -- hazard -----------------------------------------------------------

    def annual_hazard(self, bands: np.ndarray, cohorts: np.ndarray, eths: np.ndarray, year: int) -> np.ndarray:
        """Ethnicity-scaled conception hazard per year, before eligibility."""
        r = self.fertility.rate(bands, cohorts)
        twins = self.multiplicity.twin_prob(bands, year)
        base = -np.log1p(-(r / (1.0 + twins)))
        return base * self.tfr.scale(eths, year)

    def conception_hazard(
        self,
        sexes: np.ndarray,
        ages: np.ndarray,
        cohorts: np.ndarray,
        eths: np.ndarray,
        date: SimDate,
        pregnant: np.ndarray,
        quarters_since_birth: np.ndarray,
    ) -> np.ndarray:
        """Vectorised effective hazard; zero wherever conception is excluded.

        quarters_since_birth < 0 means "never gave birth".
        """
        bands = band_of_age(np.maximum(ages, 0))
        h = self.annual_hazard(bands, cohorts, eths, date.year)
        eligible = (
            (sexes == int(Sex.FEMALE))
            & (ages >= FERTILE_MIN_AGE)
            & (ages <= FERTILE_MAX_AGE)
            & ~pregnant
            & ((quarters_since_birth < 0) | (quarters_since_birth > POSTPARTUM_QUARTERS))
        )
        return np.where(eligible, h, 0.0)

    # -- scalar API -------------------------------------------------------

    def conception_probability(self, person: Person, date: SimDate, dt: float = 0.25) -> float:
        if person.sex is not Sex.FEMALE:
            raise DemosimError(f"conception probability queried for male person {person.id}")
        since = (
            date.quarters_since(person.last_childbirth_date)
            if person.last_childbirth_date is not None
            else -1
        )
        h = self.conception_hazard(
            np.array([int(person.sex)]),
            np.array([age_of(person, date)]),
            np.array([person.birth_date.year]),
            np.array([person.ethnicity]),
            date,
            np.array([person.due_date is not None]),
            np.array([since]),
        )
        return float(-np.expm1(-h[0] * dt))

    # -- birth outcomes ----------------------------------------------------

    def twin_probability(self, mother_bands: np.ndarray, year: int) -> np.ndarray:
        return self.multiplicity.twin_prob(mother_bands, year)

    def male_share(self, year: int) -> float:
        return self.sex_ratio.male_share(year)

    def draw_birth_outcome(self, mother: Person, birth_date: SimDate, rng: np.random.Generator) -> list[Person]:
        """One or two newborns inheriting the mother's ethnicity."""
        band = band_of_age(age_of(mother, birth_date))
        n = 2 if rng.random() < float(self.twin_probability(np.array([band]), birth_date.year)[0]) else 1
        share = self.male_share(birth_date.year)
        return [
            Person(
                id=-1,  # assigned by the population store
                sex=Sex.MALE if rng.random() < share else Sex.FEMALE,
                birth_date=birth_date,
                ethnicity=mother.ethnicity,
                mother_id=mother.id,
            )
            for _ in range(n)
        ]


def calibrate_fertility(data: Dataset) -> PregnancyModel:
    return PregnancyModel(data)


def conception_probability(model: PregnancyModel, person: Person, date: SimDate, dt: float = 0.25) -> float:
    return model.conception_probability(person, date, dt)
