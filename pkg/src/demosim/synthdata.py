"""Bundled synthetic input tables.

`python -m demosim.synthdata [outdir]` regenerates the CSV bundle shipped in
``data_bundle/``. The vital-rate tables are smooth parametric curves pinned
here; the 2001 and 2011 censuses are harvested from a 500k-person simulation
run forward from the 1991 census under the known migration schedule returned
by :func:`true_schedule`. Calibrating against the bundle therefore has a
recoverable ground truth, which the test suite exploits.

Everything here is deterministic: regeneration reproduces the bundle
byte-for-byte.
"""

from __future__ import annotations

import sys
from pathlib import Path

import numpy as np

from .core import (
    Codebook,
    DEFAULT_ETHNICITY_NAMES,
    N_BANDS,
    N_ETHNICITIES,
    Sex,
    SimDate,
)
from .migration import MigrationSchedule
from .rates import (
    BIRTH_RATES_FILE,
    CENSUS_FILE,
    CensusTable,
    Dataset,
    FertilityTable,
    MORTALITY_FILE,
    MULTIPLICITY_FILE,
    MortalityTable,
    MultiplicityTable,
    SEX_RATIO_FILE,
    SexRatioTable,
    TFR_AVERAGE_LABEL,
    TFR_FILE,
    TFRScaler,
    write_birth_rates,
    write_census,
    write_mortality,
    write_multiplicity,
    write_sex_ratio,
    write_tfr,
)

GENERATION_SEED = 19910701
GENERATION_SIZE = 500_000

MORTALITY_SPAN = (1912, 2011)  # calendar years
FERTILITY_COHORTS = (1940, 2000)  # mothers' birth years
RATE_YEARS = (1991, 2041)  # calendar years for tfr / multiplicity / sex ratio


def _years(span: tuple[int, int]) -> np.ndarray:
    return np.arange(span[0], span[1] + 1)


# --- vital rates -----------------------------------------------------------------


def mortality_values() -> np.ndarray:
    """Annual death probability [sex, band, calendar year], Gompertz-shaped
    with an infant bump and a secular improvement trend."""
    years = _years(MORTALITY_SPAN)
    mid = (np.arange(N_BANDS) * 5 + 2).astype(float)
    mid[-1] = 97.0  # open-ended 85+ band
    base = 4.0e-5 * np.exp(0.088 * mid)
    base[0] += 0.006  # infancy
    improvement = np.exp(-0.006 * (years - years[0]))
    q = base[None, :, None] * improvement[None, None, :] * np.array([1.0, 1.45])[:, None, None]
    return np.minimum(q, 0.95)


def fertility_values() -> tuple[np.ndarray, np.ndarray]:
    """Annual birth rate [band, mother cohort] plus the present-band mask.
    Later cohorts shift childbearing towards older ages at a nearly flat
    total."""
    cohorts = _years(FERTILITY_COHORTS)
    base = np.zeros(N_BANDS)
    slope = np.zeros(N_BANDS)
    base[3:10] = [0.013, 0.058, 0.099, 0.094, 0.058, 0.024, 0.0045]
    slope[3:10] = [-0.35, -0.30, -0.10, 0.10, 0.25, 0.35, 0.40]
    frac = (cohorts - cohorts[0]) / (cohorts[-1] - cohorts[0])
    values = base[:, None] * (1.0 + slope[:, None] * frac[None, :])
    present = base > 0
    return values, present


def tfr_series() -> dict[str, np.ndarray]:
    """Total-fertility series per ethnic group; the mandatory population-wide
    'average' series anchors the scaling."""
    years = _years(RATE_YEARS)
    frac = (years - years[0]) / (years[-1] - years[0])

    def ramp(hi: float, lo: float) -> np.ndarray:
        return hi + (lo - hi) * frac

    flat = lambda v: np.full(len(years), v)
    return {
        TFR_AVERAGE_LABEL: flat(1.80),
        "White British": flat(1.75),
        "Other White": flat(1.85),
        "Indian": ramp(2.05, 1.85),
        "Pakistani": ramp(2.95, 2.15),
        "Bangladeshi": ramp(2.75, 2.00),
        "Black African": ramp(2.35, 2.10),
        "Chinese": flat(1.45),
    }


def multiplicity_values() -> tuple[np.ndarray, np.ndarray]:
    """Twin-birth probability [band, year] over the reproductive bands."""
    years = _years(RATE_YEARS)
    bands = np.arange(3, 11)  # mothers deliver at ages 15..50
    values = np.zeros((N_BANDS, len(years)))
    values[bands, :] = (
        0.009 + 0.0012 * (bands - 3)[:, None] + 0.00004 * (years - years[0])[None, :]
    )
    return values, bands


def sex_ratio_values() -> np.ndarray:
    years = _years(RATE_YEARS)
    return 0.5135 + 0.0015 * np.sin(2 * np.pi * (years - years[0]) / 35.0)


# --- 1991 census ------------------------------------------------------------------


TOTAL_1991 = 50_000_000

# ethnic composition (shares of the whole population)
ETH_SHARES = {
    "White British": 0.877, "Irish": 0.021, "Gypsy or Irish Traveller": 0.001,
    "Other White": 0.023, "White and Black Caribbean": 0.004,
    "White and Black African": 0.002, "White and Asian": 0.004, "Other Mixed": 0.003,
    "Indian": 0.017, "Pakistani": 0.010, "Bangladeshi": 0.004, "Chinese": 0.003,
    "Other Asian": 0.004, "Black African": 0.004, "Black Caribbean": 0.010,
    "Other Black": 0.004, "Arab": 0.003, "Any Other": 0.006,
}

# age profile of the long-settled population, percent per 5-year band
AGE_PROFILE = np.array(
    [6.7, 6.3, 6.2, 6.6, 7.8, 8.1, 7.2, 6.7, 6.3, 5.5, 5.3, 5.7, 5.3, 4.8, 4.3, 3.2, 2.2, 1.8]
) / 100.0

# groups with a settled (old) age structure; everyone else skews younger
_SETTLED = {"White British", "Irish"}


def census_1991() -> np.ndarray:
    """Mid-1991 counts [sex, band, ethnicity], in real persons."""
    counts = np.zeros((2, N_BANDS, N_ETHNICITIES))
    bands = np.arange(N_BANDS)
    female_share = 0.488 + 0.16 * (bands / (N_BANDS - 1)) ** 2
    for eth, name in enumerate(DEFAULT_ETHNICITY_NAMES):
        profile = AGE_PROFILE.copy()
        if name not in _SETTLED:
            profile = profile * np.exp(-0.09 * bands)
            profile /= profile.sum()
        group = TOTAL_1991 * ETH_SHARES[name] * profile
        counts[0, :, eth] = group * female_share
        counts[1, :, eth] = group * (1.0 - female_share)
    return np.rint(counts)


# --- generating migration schedule -------------------------------------------------


def _absolute(schedule, decade, eth_name, per_year, weights, female_share=0.5):
    """Spread an absolute yearly flow over decade-start cohorts."""
    codebook = Codebook(DEFAULT_ETHNICITY_NAMES)
    d = schedule.decades.index(decade)
    eth = codebook.code(eth_name)
    for cohort, w in weights.items():
        schedule.ks[d, 0, eth, cohort] = per_year * female_share * w
        schedule.ks[d, 1, eth, cohort] = per_year * (1.0 - female_share) * w


def _relative(schedule, decade, eth_name, k_female, k_male, cohorts):
    codebook = Codebook(DEFAULT_ETHNICITY_NAMES)
    d = schedule.decades.index(decade)
    eth = codebook.code(eth_name)
    for cohort in cohorts:
        schedule.laws[d, :, eth, cohort] = 1
        schedule.ks[d, 0, eth, cohort] = k_female
        schedule.ks[d, 1, eth, cohort] = k_male


_WORKING_AGE = {3: 0.05, 4: 0.18, 5: 0.24, 6: 0.19, 7: 0.13, 8: 0.09, 9: 0.06, 10: 0.04, 11: 0.02}
_ARRIVER = {4: 0.20, 5: 0.25, 6: 0.20, 7: 0.15, 8: 0.10, 9: 0.06, 10: 0.04}
_YOUNG = {3: 0.30, 4: 0.30, 5: 0.20, 6: 0.20}


def true_schedule() -> MigrationSchedule:
    """The migration schedule the bundled 2001/2011 censuses were produced
    under: sustained EU-origin inflows rising sharply in the 2000s, steady
    Commonwealth-origin inflows, and a slow native-British net outflow."""
    s = MigrationSchedule.zeros()

    _absolute(s, 1991, "Other White", 44_000, _WORKING_AGE, female_share=0.52)
    _absolute(s, 2001, "Other White", 150_000, _WORKING_AGE, female_share=0.57)

    _relative(s, 1991, "White British", -0.0010, -0.0014, range(2, 13))
    _relative(s, 2001, "White British", -0.0011, -0.0015, range(2, 13))
    _relative(s, 1991, "Irish", -0.0020, -0.0020, range(4, 11))
    _relative(s, 2001, "Irish", -0.0022, -0.0022, range(4, 11))

    for decade, boost in ((1991, 1.0), (2001, 1.2)):
        _absolute(s, decade, "Indian", 12_000 * boost, _ARRIVER)
        _absolute(s, decade, "Pakistani", 9_000 * boost, _ARRIVER)
        _absolute(s, decade, "Bangladeshi", 4_000 * boost, _ARRIVER)
        _absolute(s, decade, "Black African", 8_000 * boost, _ARRIVER)
        _absolute(s, decade, "Chinese", 3_000 * boost, _ARRIVER)
        _absolute(s, decade, "Other Asian", 2_000 * boost, _ARRIVER)
        _absolute(s, decade, "Arab", 1_500 * boost, _ARRIVER)
        _absolute(s, decade, "Any Other", 2_000 * boost, _ARRIVER)
        _absolute(s, decade, "Black Caribbean", -1_000, {5: 0.3, 6: 0.3, 7: 0.2, 8: 0.2})
        for mixed in ("White and Black Caribbean", "White and Black African",
                      "White and Asian", "Other Mixed"):
            _absolute(s, decade, mixed, 500 * boost, _YOUNG)
    return s


# --- assembly ----------------------------------------------------------------------


def base_dataset(census_counts: dict[int, np.ndarray] | None = None) -> Dataset:
    """The synthetic tables as in-memory objects (1991 census only unless
    counts for more years are passed in)."""
    fert_values, fert_present = fertility_values()
    mult_values, _ = multiplicity_values()
    codebook = Codebook(DEFAULT_ETHNICITY_NAMES)

    tfr = np.ones((N_ETHNICITIES, len(_years(RATE_YEARS))))
    series = tfr_series()
    average = series[TFR_AVERAGE_LABEL]
    for name, vals in series.items():
        if name != TFR_AVERAGE_LABEL:
            tfr[codebook.code(name)] = vals / average

    return Dataset(
        codebook=codebook,
        census=CensusTable(dict(census_counts or {1991: census_1991()})),
        fertility=FertilityTable(fert_values, FERTILITY_COHORTS[0], fert_present),
        tfr=TFRScaler(tfr, RATE_YEARS[0]),
        multiplicity=MultiplicityTable(mult_values, RATE_YEARS[0]),
        sex_ratio=SexRatioTable(sex_ratio_values()[None, :], RATE_YEARS[0]),
        mortality=MortalityTable(mortality_values(), MORTALITY_SPAN[0]),
    )


def synthesize_censuses(
    population_size: int = GENERATION_SIZE, seed: int = GENERATION_SEED
) -> dict[int, np.ndarray]:
    """Run 1991->2011 under the generating schedule and read the census years
    off the July snapshots, scaled back to real persons."""
    from .kernel import RunConfig, run

    data = base_dataset()
    cfg = RunConfig(
        start=SimDate(1991, 0), end=SimDate(2011, 0),
        population_size=population_size, seed=seed, scenario=None, migration=True,
    )
    result = run(cfg, data, true_schedule())
    counts = {1991: data.census.counts_for(1991)}
    for year in (2001, 2011):
        counts[year] = np.rint(result.snapshot(SimDate(year, 0)) * result.scale_factor)
    return counts


def generate(outdir, population_size: int = GENERATION_SIZE, seed: int = GENERATION_SEED):
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    codebook = Codebook(DEFAULT_ETHNICITY_NAMES)

    fert_values, fert_present = fertility_values()
    write_birth_rates(outdir / BIRTH_RATES_FILE, fert_values, FERTILITY_COHORTS[0], fert_present)
    write_tfr(outdir / TFR_FILE, tfr_series(), RATE_YEARS[0])
    mult_values, mult_bands = multiplicity_values()
    write_multiplicity(outdir / MULTIPLICITY_FILE, mult_values, RATE_YEARS[0], mult_bands)
    write_sex_ratio(outdir / SEX_RATIO_FILE, sex_ratio_values(), RATE_YEARS[0])
    write_mortality(outdir / MORTALITY_FILE, mortality_values(), MORTALITY_SPAN[0])

    counts = synthesize_censuses(population_size, seed)
    write_census(outdir / CENSUS_FILE, counts, codebook)
    return outdir


def main(argv=None) -> int:
    args = sys.argv[1:] if argv is None else argv
    outdir = args[0] if args else Path(__file__).parent / "data_bundle"
    generate(outdir)
    print(f"wrote bundle to {outdir}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
