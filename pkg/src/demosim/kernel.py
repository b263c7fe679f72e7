"""The quarterly simulation loop.

Fixed per-step order: scheduled births are delivered, deaths sampled, new
conceptions sampled, baseline migration flows applied per cohort, scenario
wave orders executed, ledger closed. The emigrant pool runs the first three
phases only. Per-person draws are keyed on (seed, person id, step, purpose),
so an edit to one person never perturbs another's fate; structural draws
(who exactly is selected, template choice) come from one per-step generator
consumed in fixed phase order. Results are a pure function of (config, data).
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .core import (
    AGE_BAND_LABELS,
    ChildIndex,
    N_BANDS,
    N_CELLS,
    N_ETHNICITIES,
    NO_QUARTER,
    Population,
    QUARTERS_PER_YEAR,
    STATUS_DEAD,
    STATUS_LIVING,
    STATUS_POOL,
    Sex,
    SimDate,
    band_of_age,
    build_initial_population,
    parse_age_band,
)
from .errors import ConfigError, ConservationError, DataError, DemosimError
from .fertility import GESTATION_QUARTERS, PregnancyModel, calibrate_fertility
from .migration import (
    CHILD_AGE_LIMIT,
    COHORT_75PLUS,
    N_COHORTS,
    MigrationLaw,
    MigrationSchedule,
    clone_immigrants,
    cohort_of_date,
    cohorts_at_anchor,
    cohorts_post_decades,
    emigrate,
    return_from_pool,
    select_migrants,
    synthesize_immigrants,
)
from .mortality import MortalityModel, calibrate_mortality
from .rates import Dataset
from .rng import Purpose, cell_uniform, derive_key, generator, poisson_from_u, u01
from .scenarios import ScenarioConfig, WaveState, effective_rate, eligible_exodus_ids

log = logging.getLogger(__name__)

DT_YEARS = 0.25
N_GROUPS = 2 * N_ETHNICITIES * N_COHORTS  # migration flow groups per step


@dataclass(frozen=True)
class RunConfig:
    start: SimDate = SimDate(1991, 0)
    end: SimDate = SimDate(2041, 0)
    population_size: int = 100_000
    seed: int = 0
    scenario: Optional[ScenarioConfig] = None
    migration: bool = True
    scale_factor: Optional[float] = None  # real persons per simulated person
    step_months: int = 3

    @property
    def n_steps(self) -> int:
        return self.end.quarters_since(self.start)

    def validate(self) -> "RunConfig":
        if self.step_months != 3:
            raise ConfigError(f"engine is quarterly; step_months must be 3, got {self.step_months}")
        if self.n_steps < 0:
            raise ConfigError(f"end {self.end} precedes start {self.start}")
        if self.population_size <= 0:
            raise ConfigError(f"population_size must be positive, got {self.population_size}")
        if self.scenario is not None:
            self.scenario.validate()
            if self.scenario.brexit:
                wave_end = self.scenario.wave_start.add_quarters(self.scenario.wave_quarters)
                if wave_end > self.end:
                    raise ConfigError(
                        f"scenario {self.scenario.name}: wave ends {wave_end}, after run end {self.end}"
                    )
        return self

    def to_json(self) -> dict:
        d = {
            "start": str(self.start), "end": str(self.end),
            "population_size": self.population_size, "seed": self.seed,
            "migration": self.migration, "scale_factor": self.scale_factor,
            "step_months": self.step_months,
        }
        if self.scenario is not None:
            s = self.scenario
            d["scenario"] = {
                "name": s.name, "brexit": s.brexit, "f_enl": s.f_enl, "f_ex": s.f_ex,
                "f_em": s.f_em, "f_ret": s.f_ret, "referendum_date": str(s.referendum_date),
                "brexit_date": str(s.brexit_date), "enlargement_start": s.enlargement_start,
            }
        else:
            d["scenario"] = None
        return d


class EventLedger:
    """Per-step, per-SAE-cell event counts for the living set and the pool.

    All counts at step t are keyed by the cell a person occupies at date t;
    aging moves people between cells only across step boundaries, so within a
    step end = start + births - deaths + inflow - outflow holds cell-wise.
    """

    LIVING_FIELDS = ("start", "births", "deaths", "immigrants", "emigrants", "end")
    POOL_FIELDS = ("pool_start", "pool_births", "pool_deaths", "pool_arrivals", "pool_departures", "pool_end")

    def __init__(self, n_steps: int, start: SimDate):
        self.n_steps = n_steps
        self.start_date = start
        for name in self.LIVING_FIELDS + self.POOL_FIELDS:
            setattr(self, name, np.zeros((n_steps, N_CELLS), dtype=np.int64))

    def step_index(self, date: SimDate) -> int:
        i = date.quarters_since(self.start_date)
        if not 0 <= i < self.n_steps:
            raise DemosimError(f"{date} outside ledger range")
        return i

    def check_conservation(self):
        living = self.start + self.births - self.deaths + self.immigrants - self.emigrants
        if not np.array_equal(living, self.end):
            t, cell = np.argwhere(living != self.end)[0]
            raise ConservationError(
                f"living balance broken at step {t} cell {cell}: "
                f"expected {living[t, cell]}, ledger end {self.end[t, cell]}"
            )
        pool = self.pool_start + self.pool_births - self.pool_deaths + self.pool_arrivals - self.pool_departures
        if not np.array_equal(pool, self.pool_end):
            t, cell = np.argwhere(pool != self.pool_end)[0]
            raise ConservationError(
                f"pool balance broken at step {t} cell {cell}: "
                f"expected {pool[t, cell]}, ledger end {self.pool_end[t, cell]}"
            )
        return True


@dataclass
class RunResult:
    config: RunConfig
    ledger: EventLedger
    snapshots: dict  # quarter index -> int64[2, N_CELLS]; row 0 living, row 1 pool
    scale_factor: float = 1.0  # real persons per simulated person, as realised
    wave_log: list = field(default_factory=list)
    migration_log: Optional[np.ndarray] = None  # [steps, 2, eth, cohort] signed sim persons
    fingerprints: dict = field(default_factory=dict)

    def snapshot(self, date: SimDate, pool: bool = False) -> np.ndarray:
        q = date.to_quarters()
        if q not in self.snapshots:
            raise DemosimError(f"no snapshot at {date} (1-July dates only)")
        return self.snapshots[q][1 if pool else 0].reshape(2, N_BANDS, N_ETHNICITIES)

    def snapshot_dates(self) -> list[SimDate]:
        return [SimDate.from_quarters(q) for q in sorted(self.snapshots)]

    def digest(self) -> str:
        """Byte-level fingerprint of everything a run produces."""
        h = hashlib.sha256()
        h.update(json.dumps(self.config.to_json(), sort_keys=True).encode())
        h.update(repr(float(self.scale_factor)).encode())
        for name in EventLedger.LIVING_FIELDS + EventLedger.POOL_FIELDS:
            h.update(getattr(self.ledger, name).tobytes())
        for q in sorted(self.snapshots):
            h.update(str(q).encode())
            h.update(self.snapshots[q].tobytes())
        h.update(json.dumps(self.wave_log, sort_keys=True).encode())
        return h.hexdigest()

    # -- serialization ------------------------------------------------------

    def save(self, outdir):
        outdir = Path(outdir)
        outdir.mkdir(parents=True, exist_ok=True)
        self._write_snapshots(outdir / "snapshots.csv")
        self._write_events(outdir / "events.csv")
        manifest = {
            "config": self.config.to_json(),
            "scale_factor": self.scale_factor,
            "digest": self.digest(),
            "fingerprints": self.fingerprints,
            "wave_log": self.wave_log,
            "versions": {"demosim": __version__, "numpy": np.__version__},
        }
        with open(outdir / "manifest.json", "w") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)

    def _write_snapshots(self, path):
        from .core import DEFAULT_ETHNICITY_NAMES as names

        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(("date", "sex", "age_group", "ethnicity", "pool", "count"))
            for q in sorted(self.snapshots):
                date = SimDate.from_quarters(q)
                for pool in (0, 1):
                    counts = self.snapshots[q][pool]
                    for cell in np.flatnonzero(counts):
                        band = (cell // N_ETHNICITIES) % N_BANDS
                        sex = cell // (N_BANDS * N_ETHNICITIES)
                        w.writerow(
                            (date, "FM"[sex], AGE_BAND_LABELS[band],
                             names[cell % N_ETHNICITIES], pool, counts[cell])
                        )

    def _write_events(self, path):
        from .core import DEFAULT_ETHNICITY_NAMES as names

        led = self.ledger
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(("date", "sex", "age_group", "ethnicity", "births", "deaths", "immigrants", "emigrants"))
            for t in range(led.n_steps):
                date = led.start_date.add_quarters(t)
                any_event = led.births[t] | led.deaths[t] | led.immigrants[t] | led.emigrants[t]
                for cell in np.flatnonzero(any_event):
                    band = (cell // N_ETHNICITIES) % N_BANDS
                    sex = cell // (N_BANDS * N_ETHNICITIES)
                    w.writerow(
                        (date, "FM"[sex], AGE_BAND_LABELS[band], names[cell % N_ETHNICITIES],
                         led.births[t, cell], led.deaths[t, cell],
                         led.immigrants[t, cell], led.emigrants[t, cell])
                    )

    @classmethod
    def load(cls, rundir) -> "RunResult":
        """Rebuild an analysis-grade result from serialized CSV. Start/end
        census columns of the ledger are not serialized, so conservation
        checking is only available on freshly produced results."""
        rundir = Path(rundir)
        with open(rundir / "manifest.json") as fh:
            manifest = json.load(fh)
        cfg_d = manifest["config"]
        scenario = None
        if cfg_d.get("scenario"):
            s = cfg_d["scenario"]
            scenario = ScenarioConfig(
                name=s["name"], brexit=s["brexit"], f_enl=s["f_enl"], f_ex=s["f_ex"],
                f_em=s["f_em"], f_ret=s["f_ret"],
                referendum_date=SimDate.parse(s["referendum_date"]),
                brexit_date=SimDate.parse(s["brexit_date"]),
                enlargement_start=s["enlargement_start"],
            )
        config = RunConfig(
            start=SimDate.parse(cfg_d["start"]), end=SimDate.parse(cfg_d["end"]),
            population_size=cfg_d["population_size"], seed=cfg_d["seed"],
            scenario=scenario, migration=cfg_d["migration"],
            scale_factor=cfg_d["scale_factor"],
        )
        from .core import DEFAULT_ETHNICITY_NAMES, Codebook

        codebook = Codebook(DEFAULT_ETHNICITY_NAMES)
        ledger = EventLedger(config.n_steps, config.start)
        with open(rundir / "events.csv", newline="") as fh:
            for row in csv.DictReader(fh):
                t = ledger.step_index(SimDate.parse(row["date"]))
                cell = (
                    int(Sex.from_label(row["sex"])) * N_BANDS + parse_age_band(row["age_group"])
                ) * N_ETHNICITIES + codebook.code(row["ethnicity"])
                ledger.births[t, cell] = int(row["births"])
                ledger.deaths[t, cell] = int(row["deaths"])
                ledger.immigrants[t, cell] = int(row["immigrants"])
                ledger.emigrants[t, cell] = int(row["emigrants"])
        snapshots: dict = {}
        with open(rundir / "snapshots.csv", newline="") as fh:
            for row in csv.DictReader(fh):
                q = SimDate.parse(row["date"]).to_quarters()
                cell = (
                    int(Sex.from_label(row["sex"])) * N_BANDS + parse_age_band(row["age_group"])
                ) * N_ETHNICITIES + codebook.code(row["ethnicity"])
                snapshots.setdefault(q, np.zeros((2, N_CELLS), dtype=np.int64))[
                    int(row["pool"]), cell
                ] = int(row["count"])
        return cls(
            config=config, ledger=ledger, snapshots=snapshots,
            scale_factor=manifest.get("scale_factor", 1.0),
            wave_log=manifest.get("wave_log", []), fingerprints=manifest.get("fingerprints", {}),
        )


def _dataset_fingerprints(data: Dataset, schedule: Optional[MigrationSchedule]) -> dict:
    def fp(*arrays) -> str:
        h = hashlib.sha256()
        for a in arrays:
            h.update(np.ascontiguousarray(a).tobytes())
        return h.hexdigest()[:16]

    out = {
        "census": fp(*[data.census.counts[y] for y in data.census.years()]),
        "fertility": fp(data.fertility.values, data.fertility.present),
        "tfr": fp(data.tfr.values),
        "multiplicity": fp(data.multiplicity.values),
        "sex_ratio": fp(data.sex_ratio.values),
        "mortality": fp(data.mortality.values),
    }
    if schedule is not None:
        out["schedule"] = fp(schedule.laws, schedule.ks)
    return out


class _Engine:
    def __init__(self, config: RunConfig, data: Dataset, schedule: Optional[MigrationSchedule]):
        config.validate()
        if config.migration and schedule is None:
            raise ConfigError("migration enabled but no calibrated schedule given")
        self.config = config
        self.data = data
        self.codebook = data.codebook
        self.schedule = schedule
        self.scenario = config.scenario
        self.fertility = calibrate_fertility(data)
        self.mortality = calibrate_mortality(data.mortality)
        self.seed = config.seed

        census0 = data.census.counts_for(config.start.year)
        self.pop = build_initial_population(
            census0, config.population_size, derive_key(config.seed, 0, Purpose.INIT), config.start
        )
        if config.scale_factor is not None:
            self.pop.scale_factor = config.scale_factor

        self.ledger = EventLedger(config.n_steps, config.start)
        self.snapshots: dict = {}
        self.wave_log: list = []
        self.wave: Optional[WaveState] = None
        self._rate_cache: dict = {}
        self.migration_log = np.zeros(
            (config.n_steps, 2, N_ETHNICITIES, N_COHORTS), dtype=np.int64
        )

    # -- helpers ------------------------------------------------------------

    def _alive(self, q: int) -> np.ndarray:
        n = self.pop.size
        return np.flatnonzero((self.pop.status[:n] != STATUS_DEAD) & (self.pop.birth_q[:n] < q))

    def _count_cells(self, ids: np.ndarray, q: int, out: np.ndarray):
        """Accumulate counts split by living/pool rows of `out` ([2, N_CELLS])."""
        if len(ids) == 0:
            return
        cells = self.pop.cell_codes(ids, q)
        pool = self.pop.status[ids] == STATUS_POOL
        if (~pool).any():
            out[0] += np.bincount(cells[~pool], minlength=N_CELLS)
        if pool.any():
            out[1] += np.bincount(cells[pool], minlength=N_CELLS)

    def _log_cohorts(self, t: int, ids: np.ndarray, date: SimDate, q: int, sign: int):
        """Record realized flows against each mover's own decade cohort."""
        if len(ids) == 0:
            return
        decade = cohort_of_date(date)
        if decade >= 0:
            cohorts, valid = cohorts_at_anchor(self.pop, ids, SimDate(decade, 0).to_quarters())
        else:
            cohorts, valid = cohorts_post_decades(self.pop, ids, q)
        ids, cohorts = ids[valid], cohorts[valid]
        flat = (self.pop.eth[ids].astype(np.int64)) * N_COHORTS + cohorts
        np.add.at(
            self.migration_log[t, :, :, :].reshape(2, -1),
            (self.pop.sex[ids].astype(np.int64), flat),
            sign,
        )

    # -- phases ---------------------------------------------------------------

    def _births(self, t: int, date: SimDate, q: int):
        pop = self.pop
        mothers = np.flatnonzero(pop.due_q[: pop.size] == q)
        if len(mothers) == 0:
            return
        year = date.year
        bands = band_of_age(pop.ages(mothers, q))
        twin_p = self.fertility.twin_probability(bands, year)
        twins = u01(self.seed, mothers, t, Purpose.TWIN) < twin_p
        male_share = self.fertility.male_share(year)

        def deliver(ms, purpose):
            sexes = np.where(
                u01(self.seed, ms, t, purpose) < male_share, int(Sex.MALE), int(Sex.FEMALE)
            ).astype(np.int8)
            kids = pop.append(
                sexes, pop.eth[ms], np.int32(q), status=pop.status[ms], mother=ms
            )
            return kids

        first = deliver(mothers, Purpose.CHILD_SEX)
        second = deliver(mothers[twins], Purpose.BIRTH_SEX) if twins.any() else np.empty(0, np.int64)
        pop.last_birth_q[mothers] = q
        pop.due_q[mothers] = NO_QUARTER

        births = np.zeros((2, N_CELLS), dtype=np.int64)
        for kids in (first, second):
            self._count_cells(kids, q, births)
        self.ledger.births[t] += births[0]
        self.ledger.pool_births[t] += births[1]

    def _deaths(self, t: int, date: SimDate, q: int):
        pop = self.pop
        ids = self._alive(q)
        if len(ids) == 0:
            return
        ages = pop.ages(ids, q)
        cohort_years = pop.birth_q[ids] // QUARTERS_PER_YEAR
        h = self.mortality.hazard_at(pop.sex[ids], ages, cohort_years)
        p = -np.expm1(-h * DT_YEARS)
        dead = ids[u01(self.seed, ids, t, Purpose.DEATH) < p]
        if len(dead) == 0:
            return
        out = np.zeros((2, N_CELLS), dtype=np.int64)
        self._count_cells(dead, q, out)
        pop.status[dead] = STATUS_DEAD
        pop.due_q[dead] = NO_QUARTER  # a pregnancy does not survive the mother
        self.ledger.deaths[t] += out[0]
        self.ledger.pool_deaths[t] += out[1]

    def _conceptions(self, t: int, date: SimDate, q: int):
        pop = self.pop
        ids = self._alive(q)
        females = ids[pop.sex[ids] == int(Sex.FEMALE)]
        if len(females) == 0:
            return
        ages = pop.ages(females, q)
        cohorts = pop.birth_q[females] // QUARTERS_PER_YEAR
        last = pop.last_birth_q[females]
        since = np.where(last == NO_QUARTER, -1, q - last)
        h = self.fertility.conception_hazard(
            pop.sex[females], ages, cohorts, pop.eth[females], date,
            pregnant=pop.due_q[females] != NO_QUARTER, quarters_since_birth=since,
        )
        p = -np.expm1(-h * DT_YEARS)
        conceived = females[u01(self.seed, females, t, Purpose.CONCEIVE) < p]
        pop.due_q[conceived] = q + GESTATION_QUARTERS

    def _group_rates(self, date: SimDate, decade: int):
        """Scenario-adjusted (relative?, k) per flow group; changes only at
        decade and scenario-phase boundaries, so cache across steps."""
        s = self.scenario
        brexit_on = bool(s and s.brexit and date >= s.brexit_date)
        enl_on = bool(
            s and not s.brexit
            and s.enlargement_start <= date.year < s.enlargement_start + s.enlargement_years
        )
        key = (decade, brexit_on, enl_on)
        hit = self._rate_cache.get(key)
        if hit is None:
            rel = np.zeros(N_GROUPS, dtype=bool)
            ks = np.zeros(N_GROUPS)
            for g in range(N_GROUPS):
                sex, rest = divmod(g, N_ETHNICITIES * N_COHORTS)
                eth, cohort = divmod(rest, N_COHORTS)
                law, k = effective_rate(
                    self.schedule, s, sex, eth, cohort, date, self.codebook.aggregate(eth)
                )
                rel[g] = law is MigrationLaw.RELATIVE
                ks[g] = k
            hit = self._rate_cache[key] = (rel, ks)
        return hit

    def _flows(self, t: int, date: SimDate, q: int, cidx: ChildIndex):
        pop = self.pop
        scale = pop.scale_factor
        living = pop.living_ids()
        decade = cohort_of_date(date)
        if decade >= 0:
            cohorts, valid = cohorts_at_anchor(pop, living, SimDate(decade, 0).to_quarters())
        else:
            cohorts, valid = cohorts_post_decades(pop, living, q)
        ids = living[valid]
        gcodes = (
            pop.sex[ids].astype(np.int64) * N_ETHNICITIES + pop.eth[ids]
        ) * N_COHORTS + cohorts[valid]
        group_n = np.bincount(gcodes, minlength=N_GROUPS)

        rel, ks = self._group_rates(date, decade)
        flow = np.maximum(ks * DT_YEARS, -group_n * scale) / scale
        if rel.any():
            flow[rel] = group_n[rel] * np.expm1(ks[rel] * DT_YEARS)
        mus = np.abs(flow)
        signs = np.sign(flow).astype(np.int8)

        active = np.flatnonzero(mus > 0)
        if len(active) == 0:
            return
        counts = poisson_from_u(mus[active], cell_uniform(self.seed, t, active))

        # member lists (age >= 10 only) for groups that realize a flow
        need = active[counts > 0]
        members: dict[int, np.ndarray] = {}
        if len(need):
            lut = np.zeros(N_GROUPS, dtype=bool)
            lut[need] = True
            old_enough = pop.ages(ids, q) >= CHILD_AGE_LIMIT
            pick = lut[gcodes] & old_enough
            sub_ids, sub_g = ids[pick], gcodes[pick]
            order = np.argsort(sub_g, kind="stable")
            sub_ids, sub_g = sub_ids[order], sub_g[order]
            bounds = np.searchsorted(sub_g, np.stack([need, need + 1]))
            for j, g in enumerate(need):
                members[int(g)] = sub_ids[bounds[0, j] : bounds[1, j]]

        arrivals = np.zeros(N_CELLS, dtype=np.int64)
        departures = np.zeros(N_CELLS, dtype=np.int64)
        for j, g in enumerate(active):
            cnt = int(counts[j])
            if cnt == 0:
                continue
            g = int(g)
            sex, rest = divmod(g, N_ETHNICITIES * N_COHORTS)
            eth, cohort = divmod(rest, N_COHORTS)
            group = members.get(g, np.empty(0, dtype=np.int64))
            # each group draws from its own substream so one group's realized
            # count cannot shift another's template or age draws between runs
            rng = generator(self.seed, ((t + 1) << 16) | g, Purpose.SELECTION)
            if signs[g] > 0:
                if len(group):
                    templates = rng.choice(group, size=cnt, replace=True)
                    new = clone_immigrants(pop, templates, q, cidx)
                else:
                    lo, hi = self._group_age_span(cohort, decade, date)
                    lo = max(lo, CHILD_AGE_LIMIT)
                    if hi < lo:
                        continue
                    new = synthesize_immigrants(pop, sex, eth, lo, hi, cnt, q, rng)
                arrivals += pop.counts_by_cell(new, q)
                self._log_cohorts(t, new, date, q, +1)
            else:
                cnt = min(cnt, len(group))
                if cnt == 0:
                    continue
                chosen = select_migrants(
                    pop, group, cnt, "random", rng,
                    priorities=u01(self.seed, group, t, Purpose.SELECTION),
                )
                moved = emigrate(pop, chosen, q, cidx)
                departures += pop.counts_by_cell(moved, q)
                self._log_cohorts(t, moved, date, q, -1)
        self.ledger.immigrants[t] += arrivals
        self.ledger.emigrants[t] += departures
        self.ledger.pool_arrivals[t] += departures

    def _group_age_span(self, cohort: int, decade: int, date: SimDate) -> tuple[int, int]:
        """Current whole-year age span of a flow group, for synthesized arrivals."""
        if decade >= 0:
            elapsed = date.year - decade
            lo = cohort * 5 + elapsed
            hi = (cohort * 5 + 4 + elapsed) if cohort < COHORT_75PLUS else 99
        else:
            lo = (cohort + 1) * 5
            hi = (cohort + 1) * 5 + 4 if cohort < COHORT_75PLUS else 99
        return lo, min(hi, 99)

    def _waves(self, t: int, date: SimDate, q: int, rng: np.random.Generator, cidx: ChildIndex):
        scenario = self.scenario
        if scenario is None or not scenario.brexit or not scenario.in_wave(date):
            return
        if self.wave is None:
            self.wave = WaveState(scenario, self.pop, self.codebook)

        leavers = self.wave.exodus_plan(self.pop, date, cidx)
        entry = {"date": str(date), "exodus": int(len(leavers)), "returns": 0}
        if len(leavers):
            dated = leavers[self.pop.imm_q[leavers] != NO_QUARTER]
            entry["min_selected_imm_q"] = int(self.pop.imm_q[dated].min()) if len(dated) else None
            entry["post_brexit_selected"] = int(
                (self.pop.imm_q[dated] > scenario.brexit_date.to_quarters()).sum()
            )
            moved = emigrate(self.pop, leavers, q, cidx)
            out = self.pop.counts_by_cell(moved, q)
            self.ledger.emigrants[t] += out
            self.ledger.pool_arrivals[t] += out
            self._log_cohorts(t, moved, date, q, -1)
        remaining = eligible_exodus_ids(self.pop, self.codebook, scenario)
        rem_dated = remaining[self.pop.imm_q[remaining] != NO_QUARTER]
        entry["max_remaining_imm_q"] = int(self.pop.imm_q[rem_dated].max()) if len(rem_dated) else None

        returners = self.wave.return_plan(
            self.pop, date, rng, cidx,
            priority=lambda ids: u01(self.seed, ids, t, Purpose.SELECTION),
        )
        entry["returns"] = int(len(returners))
        if len(returners):
            moved = return_from_pool(self.pop, returners, q, cidx)
            back = self.pop.counts_by_cell(moved, q)
            self.ledger.immigrants[t] += back
            self.ledger.pool_departures[t] += back
            self._log_cohorts(t, moved, date, q, +1)
        self.wave_log.append(entry)

    # -- loop -----------------------------------------------------------------

    def run(self) -> RunResult:
        cfg = self.config
        date = cfg.start
        for t in range(cfg.n_steps):
            q = date.to_quarters()
            try:
                living, pool = self.pop.living_ids(), self.pop.pool_ids()
                start = np.stack(
                    [self.pop.counts_by_cell(living, q), self.pop.counts_by_cell(pool, q)]
                )
                self.ledger.start[t] = start[0]
                self.ledger.pool_start[t] = start[1]
                if date.quarter == 0:
                    self.snapshots[q] = start.copy()

                rng = generator(self.seed, t, Purpose.SELECTION)
                self._births(t, date, q)
                self._deaths(t, date, q)
                self._conceptions(t, date, q)
                wave_due = (
                    self.scenario is not None and self.scenario.brexit
                    and self.scenario.in_wave(date)
                )
                if cfg.migration or wave_due:
                    cidx = ChildIndex(self.pop, q, CHILD_AGE_LIMIT)
                    if cfg.migration:
                        self._flows(t, date, q, cidx)
                    self._waves(t, date, q, rng, cidx)

                self.ledger.end[t] = self.pop.counts_by_cell(self.pop.living_ids(), q)
                self.ledger.pool_end[t] = self.pop.counts_by_cell(self.pop.pool_ids(), q)
            except Exception as exc:
                raise type(exc)(f"step {t} ({date}): {exc}").with_traceback(exc.__traceback__) from None
            date = date.add_quarters(1)

        q = date.to_quarters()
        self.snapshots[q] = np.stack(
            [
                self.pop.counts_by_cell(self.pop.living_ids(), q),
                self.pop.counts_by_cell(self.pop.pool_ids(), q),
            ]
        )
        return RunResult(
            config=cfg,
            ledger=self.ledger,
            snapshots=self.snapshots,
            scale_factor=self.pop.scale_factor,
            wave_log=self.wave_log,
            migration_log=self.migration_log,
            fingerprints=_dataset_fingerprints(self.data, self.schedule),
        )


def run(config: RunConfig, data: Dataset, schedule: Optional[MigrationSchedule] = None) -> RunResult:
    """Simulate. Deterministic: identical (config, data, schedule) give
    byte-identical results."""
    return _Engine(config, data, schedule).run()
