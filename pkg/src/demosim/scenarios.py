"""EU-membership scenarios: time-dependent modifiers of the calibrated
migration schedule plus the one-off post-referendum waves.

Simulation years run 1 July to 30 June, so the quarter containing the
referendum (23 June 2016) is (2015, q3) and Brexit day (1 July 2018) is
(2018, q0). The exodus/return wave starts two years after the referendum and
lasts two years (8 steps).

Waves move whole family units: an adult moves together with all their living
under-10 children, and each moved person counts against the wave quota.
Eligible under-10 orphans (mother dead) form their own single-person units so
that selection stays strictly last-in-first-out over the eligible set.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .core import (
    NO_QUARTER,
    Codebook,
    EthnicAggregate,
    Population,
    STATUS_LIVING,
    STATUS_POOL,
    SimDate,
)
from .errors import ConfigError, DemosimError
from .migration import (
    CHILD_AGE_LIMIT,
    COHORT_75PLUS,
    MIGRATION_DECADES,
    MigrationLaw,
    MigrationSchedule,
    cohort_of_date,
)

log = logging.getLogger(__name__)

REFERENDUM_DATE = SimDate(2015, 3)  # quarter containing 23 June 2016
BREXIT_DATE = SimDate(2018, 0)  # 1 July 2018
WAVE_OFFSET_YEARS = 2
WAVE_QUARTERS = 8  # two years of quarterly steps
ENLARGEMENT_START = 2020
ENLARGEMENT_YEARS = 10
EU_EMIGRATION_SHARE = 0.30  # share of British emigration destined for the EU


@dataclass(frozen=True)
class ScenarioConfig:
    name: str
    brexit: bool
    f_enl: float = 1.0
    f_ex: float = 0.0
    f_em: float = 1.0
    f_ret: float = 0.0
    referendum_date: SimDate = REFERENDUM_DATE
    brexit_date: SimDate = BREXIT_DATE
    enlargement_start: int = ENLARGEMENT_START
    enlargement_years: int = ENLARGEMENT_YEARS
    wave_quarters: int = WAVE_QUARTERS
    eu_emigration_share: float = EU_EMIGRATION_SHARE

    @property
    def wave_start(self) -> SimDate:
        return self.referendum_date.add_years(WAVE_OFFSET_YEARS)

    def in_wave(self, date: SimDate) -> bool:
        dq = date.quarters_since(self.wave_start)
        return self.brexit and 0 <= dq < self.wave_quarters

    def validate(self):
        for key in ("f_enl", "f_ex", "f_em", "f_ret"):
            value = getattr(self, key)
            if not np.isfinite(value) or value < 0:
                raise ConfigError(f"scenario {self.name}: {key}={value} must be >= 0")
        if self.brexit:
            for key in ("f_ex", "f_em", "f_ret"):
                value = getattr(self, key)
                if value > 1:
                    raise ConfigError(
                        f"scenario {self.name}: {key}={value} must be in [0, 1] when brexit=true"
                    )
        return self


BUILTIN_SCENARIOS = {
    "status-quo": ScenarioConfig("status-quo", brexit=False, f_enl=1.0, f_ex=0.0, f_em=1.0, f_ret=0.0),
    "2nd-enlargement": ScenarioConfig("2nd-enlargement", brexit=False, f_enl=2.0, f_ex=0.0, f_em=1.0, f_ret=0.0),
    "amicable": ScenarioConfig("amicable", brexit=True, f_ex=0.70, f_em=0.80, f_ret=0.10),
    "depopulation": ScenarioConfig("depopulation", brexit=True, f_ex=0.10, f_em=0.80, f_ret=0.10),
    "radical": ScenarioConfig("radical", brexit=True, f_ex=0.70, f_em=0.30, f_ret=0.80),
}

_SCENARIO_KEYS = {
    "f_enl": float, "f_ex": float, "f_em": float, "f_ret": float,
    "enlargement_start": int,
}
_SCENARIO_DATE_KEYS = ("referendum_date", "brexit_date")


def parse_scenario(text: str, name: str = "custom") -> ScenarioConfig:
    """Parse the flat key=value scenario format ('#' starts a comment)."""
    fields: dict = {"name": name, "brexit": False}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip().lower(), value.strip()
        if not sep:
            raise ConfigError(f"scenario line {lineno}: expected key=value, got {raw!r}")
        try:
            if key == "name":
                fields["name"] = value
            elif key == "brexit":
                if value.lower() not in ("true", "false"):
                    raise ValueError(f"brexit must be true or false, got {value!r}")
                fields["brexit"] = value.lower() == "true"
            elif key in _SCENARIO_KEYS:
                fields[key] = _SCENARIO_KEYS[key](value)
            elif key in _SCENARIO_DATE_KEYS:
                fields[key] = SimDate.parse(value)
            else:
                raise ValueError(f"unknown scenario key {key!r}")
        except ValueError as exc:
            raise ConfigError(f"scenario line {lineno}: {exc}") from None
    return ScenarioConfig(**fields).validate()


def builtin_scenario(name: str) -> ScenarioConfig:
    try:
        return BUILTIN_SCENARIOS[name]
    except KeyError:
        raise ConfigError(
            f"unknown scenario {name!r} (built-ins: {', '.join(sorted(BUILTIN_SCENARIOS))})"
        ) from None


# --- schedule modifiers ------------------------------------------------------------


def effective_rate(
    schedule: MigrationSchedule,
    scenario: ScenarioConfig | None,
    sex: int,
    eth: int,
    cohort: int,
    date: SimDate,
    aggregate: EthnicAggregate,
) -> tuple[MigrationLaw, float]:
    """Scenario-adjusted (law, k) for one decade-start cohort at one date.

    Baseline: the governing decade's rate, or the last decade's once past it.
    Modifiers, in order: (a) post-Brexit EU-immigrant rates revert to the
    first decade; (b) without Brexit, EU-immigrant k is multiplied by f_enl
    during the enlargement window; (c) post-Brexit native-British emigration
    (k < 0) is damped to (1 - s) + s*f_em of its magnitude, s the EU-destined
    share.
    """
    decade = cohort_of_date(date)
    if decade < 0:
        decade = MIGRATION_DECADES[-1]
    law, k = schedule.rate(decade, sex, eth, cohort)
    if scenario is None:
        return law, k
    if aggregate is EthnicAggregate.EU_IMMIGRANT:
        if scenario.brexit and date >= scenario.brexit_date:
            law, k = schedule.rate(MIGRATION_DECADES[0], sex, eth, cohort)
        elif (
            not scenario.brexit
            and scenario.enlargement_start <= date.year < scenario.enlargement_start + scenario.enlargement_years
        ):
            k = k * scenario.f_enl
    elif aggregate is EthnicAggregate.NATIVE_BRITISH:
        if scenario.brexit and k < 0 and date >= scenario.brexit_date:
            s = scenario.eu_emigration_share
            k = k * ((1.0 - s) + s * scenario.f_em)
    return law, k


def effective_rate_for_band(
    schedule: MigrationSchedule,
    scenario: ScenarioConfig | None,
    sex: int,
    eth: int,
    band: int,
    date: SimDate,
    aggregate: EthnicAggregate,
) -> tuple[MigrationLaw, float] | None:
    """SAE-keyed adapter: map a current age band to its governing cohort.

    Past the census decades the map is exact (band a held base band a-1 at the
    frozen midpoint); inside a decade it uses the band's lower edge, which is
    approximate because a cohort straddles two bands mid-decade. Bands whose
    members are all below 10 carry no direct rate -> None.
    """
    decade = cohort_of_date(date)
    if decade < 0:
        cohort = band - 1
    else:
        elapsed = date.year - decade
        cohort = (band * 5 - elapsed) // 5 if band * 5 - elapsed >= 0 else -1
    if cohort < 0:
        return None
    return effective_rate(schedule, scenario, sex, eth, min(cohort, COHORT_75PLUS), date, aggregate)


# --- waves -------------------------------------------------------------------------


def split_quota(total: int, parts: int) -> list[int]:
    """Spread `total` over `parts` steps, remainders to the earliest steps."""
    base, rem = divmod(int(total), parts)
    return [base + 1] * rem + [base] * (parts - rem)


def eligible_exodus_ids(pop: Population, codebook: Codebook, scenario: ScenarioConfig) -> np.ndarray:
    """Living EU immigrants who arrived on or before Brexit day."""
    n = pop.size
    brexit_q = scenario.brexit_date.to_quarters()
    mask = (
        (pop.status[:n] == STATUS_LIVING)
        & (codebook.aggregates[pop.eth[:n]] == int(EthnicAggregate.EU_IMMIGRANT))
        & (pop.imm_q[:n] != NO_QUARTER)
        & (pop.imm_q[:n] <= brexit_q)
    )
    return np.flatnonzero(mask)


def native_pool_ids(pop: Population, codebook: Codebook) -> np.ndarray:
    n = pop.size
    mask = (pop.status[:n] == STATUS_POOL) & (
        codebook.aggregates[pop.eth[:n]] == int(EthnicAggregate.NATIVE_BRITISH)
    )
    return np.flatnonzero(mask)


def _family_units(pop: Population, member_ids: np.ndarray, t_q: int, status: int, index=None):
    """Group ids into (head, size) units: adults head their own unit and bring
    every living under-10 child of theirs (same status); under-10 members
    whose mother is not a unit head stand alone (orphans).

    Returns (heads, sizes, members_of) where members_of[i] lists unit i's ids.
    """
    ages = pop.ages(member_ids, t_q)
    adults = member_ids[ages >= CHILD_AGE_LIMIT]
    young = member_ids[ages < CHILD_AGE_LIMIT]
    if len(adults) == 0:
        kids = np.empty(0, np.int64)
    elif index is not None:
        kids = index.children_of(adults)
    else:
        kids = pop.children_under(adults, t_q, CHILD_AGE_LIMIT)
    kids = kids[pop.status[kids] == status]
    orphans = young[~np.isin(young, kids)]

    heads = np.concatenate([adults, orphans])
    members_of: list[np.ndarray] = [np.array([h], dtype=np.int64) for h in heads]
    if len(kids):
        order = np.argsort(pop.mother[kids], kind="stable")
        kids = kids[order]
        mothers = pop.mother[kids]
        pos = {int(h): i for i, h in enumerate(adults)}
        lo = 0
        while lo < len(kids):
            hi = lo
            m = mothers[lo]
            while hi < len(kids) and mothers[hi] == m:
                hi += 1
            i = pos[int(m)]
            members_of[i] = np.concatenate([members_of[i], kids[lo:hi]])
            lo = hi
    sizes = np.array([len(m) for m in members_of], dtype=np.int64)
    return heads, sizes, members_of


def _take_units(order: np.ndarray, sizes: np.ndarray, members_of: list, quota: int):
    """Strict prefix of units in the given order, never exceeding quota;
    returns (selected ids, persons short of quota).

    Stops at the first unit that does not fit — skipping it to fill the quota
    with later units would reorder the queue. The shortfall carries into the
    next step's quota instead.
    """
    taken: list[np.ndarray] = []
    room = quota
    for i in order:
        if sizes[i] > room:
            break
        taken.append(members_of[i])
        room -= int(sizes[i])
    ids = np.concatenate(taken) if taken else np.empty(0, dtype=np.int64)
    return ids, room


class WaveState:
    """Per-run wave bookkeeping: totals frozen at waveStart, per-step quotas
    with remainders carried forward when family units do not fit exactly."""

    def __init__(self, scenario: ScenarioConfig, pop: Population, codebook: Codebook):
        self.scenario = scenario
        self.codebook = codebook
        basis_ex = len(eligible_exodus_ids(pop, codebook, scenario))
        basis_ret = len(native_pool_ids(pop, codebook))
        self.exodus_total = int(np.floor(scenario.f_ex * basis_ex + 0.5))
        self.return_total = int(np.floor(scenario.f_ret * basis_ret + 0.5))
        self.exodus_quotas = split_quota(self.exodus_total, scenario.wave_quarters)
        self.return_quotas = split_quota(self.return_total, scenario.wave_quarters)
        self._exodus_carry = 0
        self._return_carry = 0

    def _step_index(self, date: SimDate) -> int:
        i = date.quarters_since(self.scenario.wave_start)
        if not 0 <= i < self.scenario.wave_quarters:
            raise DemosimError(f"{date} is outside the wave window of {self.scenario.name}")
        return i

    def exodus_plan(self, pop: Population, date: SimDate, index=None) -> np.ndarray:
        """Ids leaving this step: LIFO over eligible units (latest arrivals
        first, ties broken towards higher ids)."""
        i = self._step_index(date)
        quota = self.exodus_quotas[i] + self._exodus_carry
        if quota == 0:
            self._exodus_carry = 0
            return np.empty(0, dtype=np.int64)
        t_q = date.to_quarters()
        eligible = eligible_exodus_ids(pop, self.codebook, self.scenario)
        heads, sizes, members_of = _family_units(pop, eligible, t_q, STATUS_LIVING, index)
        order = np.lexsort((-heads, -pop.imm_q[heads].astype(np.int64)))
        ids, short = _take_units(order, sizes, members_of, quota)
        self._exodus_carry = short
        return ids

    def return_plan(
        self, pop: Population, date: SimDate, rng: np.random.Generator, index=None,
        priority=None,
    ) -> np.ndarray:
        """Ids returning from the pool this step, drawn uniformly by unit.

        `priority(head_ids) -> uniforms` orders units by per-person draws
        (lowest first), which is the same uniform choice as a permutation but
        stays aligned between runs whose pools differ by a few members."""
        i = self._step_index(date)
        quota = self.return_quotas[i] + self._return_carry
        if quota == 0:
            self._return_carry = 0
            return np.empty(0, dtype=np.int64)
        t_q = date.to_quarters()
        pool = native_pool_ids(pop, self.codebook)
        if len(pool) <= quota:
            if len(pool) < quota:
                log.warning(
                    "return wave at %s short by %d: pool exhausted", date, quota - len(pool)
                )
            self._return_carry = 0
            return pool
        heads, sizes, members_of = _family_units(pop, pool, t_q, STATUS_POOL, index)
        if priority is not None:
            order = np.argsort(priority(heads), kind="stable")
        else:
            order = rng.permutation(len(heads))
        ids, short = _take_units(order, sizes, members_of, quota)
        self._return_carry = short
        return ids
