"""Net migration: census calibration, the two rate laws, and the population
operations that realise flows (selection, emigration to the pool, immigrant
cloning).

Rates are attached to decade-start cohorts: a (sex, ethnicity, 5-year age band
at the decade's first 1 July) group keeps one constant rate for the whole
decade while its members age through the bands. Bands 75+ at decade start are
aggregated into a single cohort. After the last census decade the population
keeps the rate structure it had halfway through it: a person currently in band
a is treated as the cohort that occupied band a at that midpoint, i.e. base
band a-1, capped at the 75+ aggregate; current 0-4 year olds carry no direct
rate (children below 10 only migrate with their mothers).

Absolute-law k is stored in real persons per year; relative-law k is 1/year
and scale-free.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from .core import (
    AGE_BAND_LABELS,
    BAND_WIDTH,
    N_BANDS,
    N_ETHNICITIES,
    QUARTERS_PER_YEAR,
    Codebook,
    EthnicAggregate,
    Population,
    Sex,
    SimDate,
    STATUS_LIVING,
    STATUS_POOL,
    band_of_age,
)
from .errors import DataError, DemosimError
from .rates import Dataset

CHILD_AGE_LIMIT = 10  # children below this never migrate on their own
MIGRATION_DECADES = (1991, 2001)
DECADE_YEARS = 10.0

# decade-start cohorts: bands 0-4 .. 70-74 plus one aggregated 75+ cohort
N_COHORTS = 16
COHORT_75PLUS = 15
COHORT_LABELS = AGE_BAND_LABELS[:COHORT_75PLUS] + ("75+",)


class MigrationLaw(Enum):
    ABSOLUTE = "absolute"
    RELATIVE = "relative"


# --- the formulas ---------------------------------------------------------------


def estimate_net_migration(n_y: float, np_y: float, n_y10: float, np_y10: float) -> float:
    """Decade net migration of a cohort: census change minus the change the
    no-migration simulation predicts, (n'_{y+10} - n'_y) - (n_{y+10} - n_y)."""
    return (np_y10 - np_y) - (n_y10 - n_y)


def select_law(aggregate: EthnicAggregate, net: float) -> MigrationLaw:
    """Absolute everywhere, except native British net emigration is relative."""
    if aggregate is EthnicAggregate.NATIVE_BRITISH and net < 0:
        return MigrationLaw.RELATIVE
    return MigrationLaw.ABSOLUTE


def rate_from_delta(dm: float, n: float, dt: float, law: MigrationLaw) -> float:
    if law is MigrationLaw.ABSOLUTE:
        return dm / dt
    if n <= 0 or dm <= -n:
        raise DemosimError(
            f"relative rate undefined for dm={dm}, n={n} (needs n > 0 and dm > -n)"
        )
    return float(np.log1p(dm / n)) / dt


def apply_rate(k: float, law: MigrationLaw, n: float, dt: float) -> float:
    """Expected signed flow over dt for a group of current size n."""
    if n < 0:
        raise DemosimError(f"group size must be >= 0, got {n}")
    if dt <= 0:
        raise DemosimError(f"dt must be positive, got {dt}")
    if law is MigrationLaw.ABSOLUTE:
        return max(k * dt, -n)
    return n * float(np.expm1(k * dt))


# --- schedule -------------------------------------------------------------------


@dataclass
class MigrationSchedule:
    """Calibrated (law, k) per (decade, sex, ethnicity, base cohort)."""

    laws: np.ndarray  # uint8[n_decades, 2, N_ETHNICITIES, N_COHORTS]; 0=abs, 1=rel
    ks: np.ndarray  # float64, same shape
    decades: tuple = MIGRATION_DECADES

    def _d(self, decade_start: int) -> int:
        try:
            return self.decades.index(decade_start)
        except ValueError:
            raise DemosimError(f"no schedule for decade {decade_start}") from None

    def rate(self, decade_start: int, sex: int, eth: int, cohort: int):
        d = self._d(decade_start)
        law = MigrationLaw.RELATIVE if self.laws[d, sex, eth, cohort] else MigrationLaw.ABSOLUTE
        return law, float(self.ks[d, sex, eth, cohort])

    @classmethod
    def zeros(cls) -> "MigrationSchedule":
        shape = (len(MIGRATION_DECADES), 2, N_ETHNICITIES, N_COHORTS)
        return cls(np.zeros(shape, dtype=np.uint8), np.zeros(shape))

    def save(self, path, codebook: Codebook):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(("sex", "ethnicity", "base_age_group", "decade_start", "law", "k"))
            for d, decade in enumerate(self.decades):
                for sex in (Sex.FEMALE, Sex.MALE):
                    for eth, name in enumerate(codebook.names):
                        for c in range(N_COHORTS):
                            law = MigrationLaw.RELATIVE if self.laws[d, int(sex), eth, c] else MigrationLaw.ABSOLUTE
                            w.writerow(
                                (sex.label, name, COHORT_LABELS[c], decade, law.value,
                                 repr(float(self.ks[d, int(sex), eth, c])))
                            )

    @classmethod
    def load(cls, path, codebook: Codebook) -> "MigrationSchedule":
        sched = cls.zeros()
        seen = np.zeros(sched.ks.shape, dtype=bool)
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            expected = ["sex", "ethnicity", "base_age_group", "decade_start", "law", "k"]
            if reader.fieldnames != expected:
                raise DataError(f"{path}: expected header {','.join(expected)}")
            for lineno, row in enumerate(reader, start=2):
                try:
                    sex = int(Sex.from_label(row["sex"]))
                    eth = codebook.code(row["ethnicity"])
                    c = COHORT_LABELS.index(row["base_age_group"])
                    d = MIGRATION_DECADES.index(int(row["decade_start"]))
                    law = MigrationLaw(row["law"])
                    k = float(row["k"])
                except (ValueError, KeyError) as exc:
                    raise DataError(f"{path}:{lineno}: {exc}") from None
                sched.laws[d, sex, eth, c] = law is MigrationLaw.RELATIVE
                sched.ks[d, sex, eth, c] = k
                seen[d, sex, eth, c] = True
        if not seen.all():
            d, sex, eth, c = np.argwhere(~seen)[0]
            raise DataError(
                f"{path}: missing entry for {'FM'[sex]}/{codebook.names[eth]}/"
                f"{COHORT_LABELS[c]} decade {MIGRATION_DECADES[d]}"
            )
        return sched


# --- cohort bookkeeping ----------------------------------------------------------


def cohort_counts_at_start(banded: np.ndarray) -> np.ndarray:
    """Cohort sizes at the decade's first census: cohort c = band c, with the
    75+ aggregate summing bands 75-79/80-84/85+. banded is (2, bands, eth)."""
    out = np.empty((2, N_COHORTS, N_ETHNICITIES), dtype=banded.dtype)
    out[:, :COHORT_75PLUS] = banded[:, :COHORT_75PLUS]
    out[:, COHORT_75PLUS] = banded[:, COHORT_75PLUS:].sum(axis=1)
    return out


def cohort_counts_at_end(banded: np.ndarray) -> np.ndarray:
    """The same cohorts ten years later: everyone is exactly two bands older,
    and the 75+ aggregate has moved wholesale into the open 85+ band."""
    out = np.empty((2, N_COHORTS, N_ETHNICITIES), dtype=banded.dtype)
    out[:, :COHORT_75PLUS] = banded[:, 2 : 2 + COHORT_75PLUS]
    out[:, COHORT_75PLUS] = banded[:, N_BANDS - 1]
    return out


def cohorts_at_anchor(pop: Population, ids: np.ndarray, anchor_q: int) -> tuple[np.ndarray, np.ndarray]:
    """(cohort index, valid mask) by age at the decade-start date; persons born
    after the anchor carry no cohort."""
    base_age = (anchor_q - pop.birth_q[ids]) // QUARTERS_PER_YEAR
    valid = base_age >= 0
    cohort = np.minimum(band_of_age(np.maximum(base_age, 0)), COHORT_75PLUS)
    return cohort, valid


def cohorts_post_decades(pop: Population, ids: np.ndarray, t_q: int) -> tuple[np.ndarray, np.ndarray]:
    """Frozen mid-decade structure: current band a maps to base band a-1
    (capped at the 75+ aggregate); band 0 carries no rate."""
    band = band_of_age(pop.ages(ids, t_q))
    valid = band >= 1
    cohort = np.minimum(np.maximum(band - 1, 0), COHORT_75PLUS)
    return cohort, valid


def cohort_of_date(date: SimDate) -> int:
    """Decade start governing a date, or -1 once past the census decades."""
    for decade in reversed(MIGRATION_DECADES):
        if decade <= date.year < decade + 10:
            return decade
    return -1


# --- selection and movement -------------------------------------------------------


def select_migrants(
    pop: Population, members: np.ndarray, count: int, mode: str, rng, priorities=None
) -> np.ndarray:
    """Pick `count` of `members`; Random is uniform without replacement, LIFO
    takes the latest immigrationDate first (ties: highest id first) and
    ignores the rng entirely.

    Random selection prefers `priorities` (per-member uniforms, lowest first)
    over the rng: exchangeable priorities give the same uniform subset but, when
    keyed to person identity, keep selections aligned between perturbed runs
    instead of reshuffling whenever the group composition shifts by one."""
    members = np.asarray(members, dtype=np.int64)
    if count > len(members):
        raise DemosimError(f"cannot select {count} from group of {len(members)}")
    if count == len(members):
        return members
    if mode == "random":
        if priorities is not None:
            return members[np.argsort(priorities, kind="stable")[:count]]
        return rng.choice(members, size=count, replace=False)
    if mode == "lifo":
        order = np.lexsort((-members, -pop.imm_q[members].astype(np.int64)))
        return members[order[:count]]
    raise DemosimError(f"unknown selection mode {mode!r}")


def dragged_children(pop: Population, mover_ids: np.ndarray, t_q: int, index=None) -> np.ndarray:
    """Children below 10 (sharing the movers' status) whose mother moves."""
    if index is not None:
        kids = index.children_of(mover_ids)
    else:
        kids = pop.children_under(mover_ids, t_q, CHILD_AGE_LIMIT)
    return kids[~np.isin(kids, mover_ids)]


def emigrate(pop: Population, ids: np.ndarray, t_q: int, index=None) -> np.ndarray:
    """Move persons plus their under-10 children to the emigrant pool;
    returns everything that moved."""
    ids = np.asarray(ids, dtype=np.int64)
    if (pop.status[ids] != STATUS_LIVING).any():
        bad = ids[pop.status[ids] != STATUS_LIVING][0]
        raise DemosimError(f"person {bad} is not in the living population")
    moved = np.concatenate([ids, dragged_children(pop, ids, t_q, index)])
    pop.status[moved] = STATUS_POOL
    return moved


def clone_immigrants(pop: Population, template_ids: np.ndarray, t_q: int, index=None) -> np.ndarray:
    """Clone templates into the living population: fresh ids, immigrationDate
    now; under-10 children are cloned alongside with motherId rewired. Clones
    arrive un-pregnant and without their template's mother link."""
    template_ids = np.asarray(template_ids, dtype=np.int64)
    if len(template_ids) == 0:
        return template_ids
    clones = pop.append(
        pop.sex[template_ids],
        pop.eth[template_ids],
        pop.birth_q[template_ids],
        imm_q=t_q,
        last_birth_q=pop.last_birth_q[template_ids],
    )
    # children keyed to distinct templates; a template picked twice clones its
    # children once per pick
    if index is not None:
        kids = index.children_of(np.unique(template_ids))
    else:
        kids = pop.children_under(np.unique(template_ids), t_q, CHILD_AGE_LIMIT)
    if len(kids):
        order = np.argsort(pop.mother[kids], kind="stable")
        kids = kids[order]
        k_mothers = pop.mother[kids]
        for i, template in enumerate(template_ids):
            lo = np.searchsorted(k_mothers, template)
            hi = np.searchsorted(k_mothers, template, side="right")
            if hi > lo:
                batch = kids[lo:hi]
                child_clones = pop.append(
                    pop.sex[batch],
                    pop.eth[batch],
                    pop.birth_q[batch],
                    imm_q=t_q,
                    last_birth_q=pop.last_birth_q[batch],
                    mother=clones[i],
                )
                clones = np.concatenate([clones, child_clones])
    return clones


def synthesize_immigrants(
    pop: Population, sex: int, eth: int, age_lo: int, age_hi: int, count: int, t_q: int, rng
) -> np.ndarray:
    """Fallback for inflow into an empty group: fabricate persons with age
    uniform over the group's current whole-year span."""
    ages = rng.integers(age_lo, age_hi + 1, size=count)
    birth_q = t_q - ages * QUARTERS_PER_YEAR - rng.integers(0, QUARTERS_PER_YEAR, size=count)
    return pop.append(
        np.full(count, sex, dtype=np.int8),
        np.full(count, eth, dtype=np.int8),
        birth_q.astype(np.int32),
        imm_q=t_q,
    )


def return_from_pool(pop: Population, ids: np.ndarray, t_q: int, index=None) -> np.ndarray:
    """Move pool members (plus their under-10 pool children) back to living;
    their immigrationDate becomes the return step."""
    ids = np.asarray(ids, dtype=np.int64)
    if (pop.status[ids] != STATUS_POOL).any():
        bad = ids[pop.status[ids] != STATUS_POOL][0]
        raise DemosimError(f"person {bad} is not in the emigrant pool")
    moved = np.concatenate([ids, dragged_children(pop, ids, t_q, index)])
    pop.status[moved] = STATUS_LIVING
    pop.imm_q[moved] = t_q
    return moved


# --- calibration -------------------------------------------------------------------


def calibrate_migration(data: Dataset, population_size: int, seed: int) -> MigrationSchedule:
    """The four-step census calibration.

    1. simulate 1991->2011 without migration, recording 1-July compositions;
    2. rescale that run to the historic 1991 total;
    3. per (sex, ethnicity, decade-start cohort) collect simulated and census
       cohort sizes at both ends of each decade;
    4. net migration dm = (n'_{y+10} - n'_y) - (n_{y+10} - n_y), law from
       select_law, k from rate_from_delta (relative law referenced to the
       census size at decade start).
    """
    from .kernel import RunConfig, run  # deferred: kernel imports this module

    cfg = RunConfig(
        start=SimDate(MIGRATION_DECADES[0], 0),
        end=SimDate(MIGRATION_DECADES[-1] + 10, 0),
        population_size=population_size,
        seed=seed,
        scenario=None,
        migration=False,
    )
    result = run(cfg, data, schedule=None)

    factor = data.census.total(MIGRATION_DECADES[0]) / result.snapshot(
        SimDate(MIGRATION_DECADES[0], 0)
    ).sum()

    sched = MigrationSchedule.zeros()
    aggregates = data.codebook.aggregates
    for d, decade in enumerate(MIGRATION_DECADES):
        sim_y = factor * result.snapshot(SimDate(decade, 0))
        sim_y10 = factor * result.snapshot(SimDate(decade + 10, 0))
        n_y = cohort_counts_at_start(sim_y)
        n_y10 = cohort_counts_at_end(sim_y10)
        np_y = cohort_counts_at_start(data.census.counts_for(decade))
        np_y10 = cohort_counts_at_end(data.census.counts_for(decade + 10))
        for sex in (0, 1):
            for eth in range(N_ETHNICITIES):
                for c in range(N_COHORTS):
                    dm = estimate_net_migration(
                        n_y[sex, c, eth], np_y[sex, c, eth], n_y10[sex, c, eth], np_y10[sex, c, eth]
                    )
                    law = select_law(EthnicAggregate(int(aggregates[eth])), dm)
                    n_ref = np_y[sex, c, eth]
                    if law is MigrationLaw.RELATIVE and not (n_ref > 0 and dm > -n_ref):
                        # cohort empty (or fully emptied) in the census: fall
                        # back to the size-independent law
                        law = MigrationLaw.ABSOLUTE
                    sched.laws[d, sex, eth, c] = law is MigrationLaw.RELATIVE
                    sched.ks[d, sex, eth, c] = rate_from_delta(dm, n_ref, DECADE_YEARS, law)
    return sched
