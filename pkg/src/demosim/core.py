"""Core domain types: quarter-resolution dates, sex/age/ethnicity coding and the
columnar population store shared by every other module.

The population is kept as a struct-of-arrays arena so that a 5-million-person
run stays vectorisable; `Person` is a lightweight read-only view used by the
scalar APIs and the tests. Person ids are arena row indices and are never
recycled.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum
from typing import NamedTuple, Optional, Sequence

import numpy as np

QUARTERS_PER_YEAR = 4

# Sentinel for "date not set" in the int32 quarter columns.
NO_QUARTER = np.iinfo(np.int32).min


class Sex(IntEnum):
    FEMALE = 0
    MALE = 1

    @classmethod
    def from_label(cls, label: str) -> "Sex":
        try:
            return {"F": cls.FEMALE, "M": cls.MALE}[label.strip().upper()]
        except KeyError:
            raise ValueError(f"unknown sex label {label!r} (expected F or M)") from None

    @property
    def label(self) -> str:
        return "F" if self is Sex.FEMALE else "M"


class EthnicAggregate(IntEnum):
    NATIVE_BRITISH = 0
    EU_IMMIGRANT = 1
    OTHER = 2


@dataclass(frozen=True, order=True)
class SimDate:
    """A calendar quarter. Quarter 0 of year Y starts on 1 July of year Y."""

    year: int
    quarter: int = 0

    def __post_init__(self):
        if not 0 <= self.quarter < QUARTERS_PER_YEAR:
            raise ValueError(f"quarter must be in 0..3, got {self.quarter}")

    def to_quarters(self) -> int:
        """Absolute quarter index used by the columnar store."""
        return self.year * QUARTERS_PER_YEAR + self.quarter

    @classmethod
    def from_quarters(cls, q: int) -> "SimDate":
        return cls(int(q) // QUARTERS_PER_YEAR, int(q) % QUARTERS_PER_YEAR)

    def add_quarters(self, n: int) -> "SimDate":
        return SimDate.from_quarters(self.to_quarters() + n)

    def add_years(self, n: int) -> "SimDate":
        return SimDate(self.year + n, self.quarter)

    def quarters_since(self, other: "SimDate") -> int:
        return self.to_quarters() - other.to_quarters()

    def __str__(self) -> str:
        return f"{self.year}q{self.quarter}"

    @classmethod
    def parse(cls, text: str) -> "SimDate":
        year, _, quarter = text.lower().partition("q")
        return cls(int(year), int(quarter) if quarter else 0)


# --- age banding --------------------------------------------------------------

N_BANDS = 18
BAND_WIDTH = 5
OPEN_BAND_LOWER = 85  # last band is open-ended
AGE_BAND_LABELS = tuple(
    f"{5 * i}-{5 * i + 4}" for i in range(N_BANDS - 1)
) + (f"{OPEN_BAND_LOWER}+",)


def band_of_age(age) -> "int | np.ndarray":
    """5-year band index for a whole-year age (scalar or array)."""
    if isinstance(age, np.ndarray):
        return np.minimum(age // BAND_WIDTH, N_BANDS - 1)
    if age < 0:
        raise ValueError(f"negative age {age}")
    return min(age // BAND_WIDTH, N_BANDS - 1)


def band_lower(band: int) -> int:
    return band * BAND_WIDTH


def parse_age_band(label: str) -> int:
    label = label.strip()
    if label == f"{OPEN_BAND_LOWER}+":
        return N_BANDS - 1
    lo, _, hi = label.partition("-")
    band = int(lo) // BAND_WIDTH
    if not hi or AGE_BAND_LABELS[band] != label:
        raise ValueError(f"unknown age band label {label!r}")
    return band


# --- ethnicity ----------------------------------------------------------------

DEFAULT_ETHNICITY_NAMES = (
    "White British",
    "Irish",
    "Gypsy or Irish Traveller",
    "Other White",
    "White and Black Caribbean",
    "White and Black African",
    "White and Asian",
    "Other Mixed",
    "Indian",
    "Pakistani",
    "Bangladeshi",
    "Chinese",
    "Other Asian",
    "Black African",
    "Black Caribbean",
    "Other Black",
    "Arab",
    "Any Other",
)

_NATIVE_NAMES = frozenset({"White British", "Irish"})
_EU_NAMES = frozenset({"Other White"})


class Codebook:
    """Ethnic-group codebook: code -> name, plus the three-way aggregate map."""

    def __init__(self, names: Sequence[str] = DEFAULT_ETHNICITY_NAMES):
        names = tuple(names)
        if len(names) != len(set(names)):
            raise ValueError("duplicate ethnicity names in codebook")
        self.names = names
        self._index = {name: i for i, name in enumerate(names)}
        self.aggregates = np.array(
            [self._aggregate_of(name) for name in names], dtype=np.int8
        )

    @staticmethod
    def _aggregate_of(name: str) -> int:
        if name in _NATIVE_NAMES:
            return int(EthnicAggregate.NATIVE_BRITISH)
        if name in _EU_NAMES:
            return int(EthnicAggregate.EU_IMMIGRANT)
        return int(EthnicAggregate.OTHER)

    def __len__(self) -> int:
        return len(self.names)

    def code(self, name: str) -> int:
        try:
            return self._index[name]
        except KeyError:
            raise ValueError(f"unknown ethnicity {name!r}") from None

    def aggregate(self, code: int) -> EthnicAggregate:
        return EthnicAggregate(int(self.aggregates[code]))

    def codes_in(self, aggregate: EthnicAggregate) -> np.ndarray:
        return np.flatnonzero(self.aggregates == int(aggregate))


N_ETHNICITIES = len(DEFAULT_ETHNICITY_NAMES)
N_CELLS = 2 * N_BANDS * N_ETHNICITIES  # sex x band x ethnicity


class SAEKey(NamedTuple):
    sex: Sex
    age_band: int
    ethnicity: int

    @property
    def cell(self) -> int:
        return (int(self.sex) * N_BANDS + self.age_band) * N_ETHNICITIES + self.ethnicity

    @classmethod
    def from_cell(cls, cell: int) -> "SAEKey":
        eth = cell % N_ETHNICITIES
        rest = cell // N_ETHNICITIES
        return cls(Sex(rest // N_BANDS), rest % N_BANDS, eth)


@dataclass(frozen=True)
class Person:
    """Read-only view of one arena row."""

    id: int
    sex: Sex
    birth_date: SimDate
    ethnicity: int
    mother_id: Optional[int] = None
    immigration_date: Optional[SimDate] = None
    last_childbirth_date: Optional[SimDate] = None
    due_date: Optional[SimDate] = None


def age_of(person: Person, date: SimDate) -> int:
    """Whole-year age, rounded down. Exact quarter arithmetic."""
    dq = date.quarters_since(person.birth_date)
    if dq < 0:
        raise ValueError(f"query date {date} precedes birth date {person.birth_date}")
    return dq // QUARTERS_PER_YEAR


def sae_key(person: Person, date: SimDate) -> SAEKey:
    return SAEKey(person.sex, band_of_age(age_of(person, date)), person.ethnicity)


# --- population arena ---------------------------------------------------------

STATUS_LIVING = 0
STATUS_POOL = 1
STATUS_DEAD = 2

_COLUMNS = (
    ("sex", np.int8),
    ("eth", np.int8),
    ("status", np.int8),
    ("birth_q", np.int32),
    ("imm_q", np.int32),
    ("last_birth_q", np.int32),
    ("due_q", np.int32),
    ("mother", np.int64),
)


class Population:
    """Struct-of-arrays person store holding the living E&W sample and the
    auxiliary emigrant pool in a single arena. Rows are append-only; death and
    migration are status flips."""

    def __init__(self, capacity: int = 1024, scale_factor: float = 10.0):
        self.size = 0
        self.scale_factor = float(scale_factor)
        for name, dtype in _COLUMNS:
            setattr(self, name, np.empty(capacity, dtype=dtype))

    @property
    def capacity(self) -> int:
        return self.sex.shape[0]

    def _grow(self, need: int):
        new_cap = max(int(self.capacity * 1.5) + 16, self.size + need)
        for name, _ in _COLUMNS:
            arr = getattr(self, name)
            grown = np.empty(new_cap, dtype=arr.dtype)
            grown[: self.size] = arr[: self.size]
            setattr(self, name, grown)

    def append(
        self,
        sex,
        eth,
        birth_q,
        status=STATUS_LIVING,
        imm_q=NO_QUARTER,
        last_birth_q=NO_QUARTER,
        due_q=NO_QUARTER,
        mother=-1,
    ) -> np.ndarray:
        """Append a batch of rows (broadcasting scalars); returns the new ids."""
        n = int(np.broadcast(sex, eth, birth_q, status, imm_q, last_birth_q, due_q, mother).size)
        if self.size + n > self.capacity:
            self._grow(n)
        lo, hi = self.size, self.size + n
        self.sex[lo:hi] = sex
        self.eth[lo:hi] = eth
        self.birth_q[lo:hi] = birth_q
        self.status[lo:hi] = status
        self.imm_q[lo:hi] = imm_q
        self.last_birth_q[lo:hi] = last_birth_q
        self.due_q[lo:hi] = due_q
        self.mother[lo:hi] = mother
        self.size = hi
        return np.arange(lo, hi, dtype=np.int64)

    # -- views ------------------------------------------------------------

    def person(self, pid: int) -> Person:
        if not 0 <= pid < self.size:
            raise IndexError(f"person id {pid} out of range")
        to_date = lambda q: None if q == NO_QUARTER else SimDate.from_quarters(int(q))
        return Person(
            id=pid,
            sex=Sex(int(self.sex[pid])),
            birth_date=SimDate.from_quarters(int(self.birth_q[pid])),
            ethnicity=int(self.eth[pid]),
            mother_id=int(self.mother[pid]) if self.mother[pid] >= 0 else None,
            immigration_date=to_date(self.imm_q[pid]),
            last_childbirth_date=to_date(self.last_birth_q[pid]),
            due_date=to_date(self.due_q[pid]),
        )

    def living_ids(self) -> np.ndarray:
        return np.flatnonzero(self.status[: self.size] == STATUS_LIVING)

    def pool_ids(self) -> np.ndarray:
        return np.flatnonzero(self.status[: self.size] == STATUS_POOL)

    def ages(self, ids: np.ndarray, q: int) -> np.ndarray:
        return (q - self.birth_q[ids]) // QUARTERS_PER_YEAR

    def cell_codes(self, ids: np.ndarray, q: int) -> np.ndarray:
        """Flat SAE cell code per person, ages evaluated at quarter q."""
        band = band_of_age(self.ages(ids, q)).astype(np.int64)
        return (self.sex[ids].astype(np.int64) * N_BANDS + band) * N_ETHNICITIES + self.eth[ids]

    def counts_by_cell(self, ids: np.ndarray, q: int) -> np.ndarray:
        return np.bincount(self.cell_codes(ids, q), minlength=N_CELLS)

    def children_under(self, mother_ids: np.ndarray, q: int, max_age: int = 10) -> np.ndarray:
        """Living ids of children below max_age whose mother is in mother_ids.

        Same-status containment is the caller's business: this scans the whole
        arena for status == the mothers' own status rows.
        """
        if len(mother_ids) == 0:
            return np.empty(0, dtype=np.int64)
        statuses = np.unique(self.status[mother_ids])
        n = self.size
        young = (self.birth_q[:n] > q - max_age * QUARTERS_PER_YEAR) & np.isin(
            self.status[:n], statuses
        )
        cand = np.flatnonzero(young)
        if len(cand) == 0:
            return cand.astype(np.int64)
        hit = np.isin(self.mother[cand], mother_ids)
        return cand[hit].astype(np.int64)


class ChildIndex:
    """Mother -> young-children lookup frozen at one quarter.

    The (mother, birth_q) links never change after a row is appended, so one
    index serves every drag query within a step even as statuses flip;
    statuses are re-read at query time. Rows appended after construction are
    invisible, which is what the step phases need: movers and templates always
    predate the index.
    """

    def __init__(self, pop: Population, q: int, max_age: int = 10):
        self.pop = pop
        n = pop.size
        young = np.flatnonzero(
            (pop.birth_q[:n] > q - max_age * QUARTERS_PER_YEAR)
            & (pop.mother[:n] >= 0)
            & (pop.status[:n] != STATUS_DEAD)
        )
        order = np.argsort(pop.mother[young], kind="stable")
        self.kids = young[order]
        self.mothers = pop.mother[young][order]

    def children_of(self, mother_ids: np.ndarray, statuses=None) -> np.ndarray:
        """Children of the given mothers (each child once, duplicates in
        mother_ids notwithstanding), filtered to the given status set; the
        default keeps children sharing any of the mothers' own statuses."""
        mother_ids = np.asarray(mother_ids, dtype=np.int64)
        if len(mother_ids) == 0 or len(self.kids) == 0:
            return np.empty(0, dtype=np.int64)
        m = np.unique(mother_ids)
        lo = np.searchsorted(self.mothers, m, side="left")
        hi = np.searchsorted(self.mothers, m, side="right")
        counts = hi - lo
        total = int(counts.sum())
        if total == 0:
            return np.empty(0, dtype=np.int64)
        starts = np.repeat(lo, counts)
        offsets = np.arange(total) - np.repeat(np.cumsum(counts) - counts, counts)
        kids = self.kids[starts + offsets]
        if statuses is None:
            statuses = np.unique(self.pop.status[mother_ids])
        return kids[np.isin(self.pop.status[kids], statuses)]


def build_initial_population(
    census_counts: np.ndarray,
    target_size: int,
    seed: int,
    start: SimDate = SimDate(1991, 0),
) -> Population:
    """Sample the starting population from census SAE shares.

    census_counts is the (sex, band, ethnicity) count table for the starting
    census year. Ages are uniform within each 5-year band; the open band draws
    uniformly on [85, 100). The result is deterministic for a given seed.
    """
    counts = np.asarray(census_counts, dtype=np.float64)
    if counts.shape != (2, N_BANDS, N_ETHNICITIES):
        raise ValueError(f"census table must be (2, {N_BANDS}, {N_ETHNICITIES}), got {counts.shape}")
    if (counts < 0).any():
        raise ValueError("census table has negative cell counts")
    total = counts.sum()
    if total <= 0:
        raise ValueError("census table is empty")
    if target_size <= 0:
        raise ValueError("target_size must be positive")

    rng = np.random.Generator(np.random.Philox(seed))
    flat = counts.ravel()
    cell_sizes = rng.multinomial(int(target_size), flat / total)

    pop = Population(capacity=int(target_size) + 16, scale_factor=total / target_size)
    q0 = start.to_quarters()
    sexes = np.repeat(np.arange(N_CELLS) // (N_BANDS * N_ETHNICITIES), cell_sizes).astype(np.int8)
    bands = np.repeat((np.arange(N_CELLS) // N_ETHNICITIES) % N_BANDS, cell_sizes)
    eths = np.repeat(np.arange(N_CELLS) % N_ETHNICITIES, cell_sizes).astype(np.int8)

    widths = np.where(bands == N_BANDS - 1, 100 - OPEN_BAND_LOWER, BAND_WIDTH)
    ages = bands * BAND_WIDTH + (rng.random(len(bands)) * widths).astype(np.int64)
    birth_q = q0 - ages * QUARTERS_PER_YEAR - rng.integers(0, QUARTERS_PER_YEAR, len(bands))
    pop.append(sexes, eths, birth_q.astype(np.int32))
    return pop
