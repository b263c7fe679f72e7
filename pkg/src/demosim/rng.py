"""Randomness for the simulation.

Two kinds of draws coexist:

* per-person event draws (death, conception, twinning, child sex) use a
  counter-based mixer keyed on (seed, person id, step, purpose). A person's
  draw for a given step does not depend on how many other people exist or on
  the order events were processed, which gives common random numbers across
  perturbed reruns -- the property the sensitivity machinery leans on.
* structural draws (who gets selected for a migration wave, ages within a
  band, ...) use numpy Philox generators keyed per (seed, step, purpose).

Poisson counts for migration flows are realised by inverting the CDF at a
cell-keyed uniform, so the count is monotone in the mean for a fixed seed.
"""

from __future__ import annotations

from enum import IntEnum

import numpy as np


class Purpose(IntEnum):
    DEATH = 1
    CONCEIVE = 2
    TWIN = 3
    CHILD_SEX = 4
    BIRTH_SEX = 5
    MIGRATION = 6
    SELECTION = 7
    INIT = 8


_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)


def _mix(x: np.ndarray) -> np.ndarray:
    """splitmix64 finaliser; a bijection on uint64."""
    x = np.asarray(x, dtype=np.uint64)
    with np.errstate(over="ignore"):
        x = (x ^ (x >> np.uint64(30))) * _M1
        x = (x ^ (x >> np.uint64(27))) * _M2
        return x ^ (x >> np.uint64(31))


def _key(seed: int, step: int, purpose: int) -> np.uint64:
    with np.errstate(over="ignore"):
        k = _mix(np.uint64(seed) * _GAMMA + np.uint64(step & 0xFFFFFFFF))
        return _mix(k + np.uint64(purpose) * _GAMMA)


def derive_key(seed: int, step: int, purpose: int) -> int:
    """A decorrelated integer seed for a named substream."""
    return int(_key(seed, step, purpose))


def u01(seed: int, ids: np.ndarray, step: int, purpose: Purpose) -> np.ndarray:
    """Uniform(0,1) per id, reproducible independently of array order."""
    ids = np.asarray(ids, dtype=np.uint64)
    with np.errstate(over="ignore"):
        h = _mix(ids * _GAMMA + _key(seed, step, purpose))
    # 53-bit mantissa; strictly inside (0, 1)
    return ((h >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0 ** -53


def _log_pmf(k: np.ndarray, mu: np.ndarray) -> np.ndarray:
    """log Poisson pmf via a Stirling series for ln k! (k >= 10 here)."""
    k = k.astype(np.float64)
    ln_fact = (
        k * np.log(k) - k + 0.5 * np.log(2.0 * np.pi * k) + 1.0 / (12.0 * k) - 1.0 / (360.0 * k**3)
    )
    return k * np.log(mu) - mu - ln_fact


def poisson_from_u(mu, u):
    """Invert the Poisson CDF at uniform u.

    Monotone in mu for fixed u, which couples perturbed reruns. For small
    means the pmf is scanned from zero; for large means the scan starts
    12 standard deviations below the mean (the skipped lower-tail mass is
    ~1e-33, below the resolution of the 53-bit uniforms).
    """
    mu = np.asarray(mu, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    mu, u = np.broadcast_arrays(mu, u)
    shaped = mu.ndim > 0
    mu, u = np.atleast_1d(mu), np.atleast_1d(u)

    # exp(-mu) underflows to 0 near mu ~ 745, which would stall the
    # scan-from-zero branch; switch to the Stirling start well before that
    # (mu - 12 sqrt(mu) > 200 there, so the k >= 10 series requirement holds)
    big = mu >= 500.0
    k = np.zeros(mu.shape, dtype=np.int64)
    p = np.empty(mu.shape, dtype=np.float64)
    p[~big] = np.exp(-mu[~big])
    if big.any():
        k[big] = np.maximum(0, np.floor(mu[big] - 12.0 * np.sqrt(mu[big]))).astype(np.int64)
        p[big] = np.exp(_log_pmf(k[big], mu[big]))
    cdf = p.copy()
    cap = (mu + 40.0 * np.sqrt(mu + 1.0) + 50.0).astype(np.int64)
    active = cdf < u
    while active.any():
        k[active] += 1
        p[active] *= mu[active] / k[active]
        cdf[active] += p[active]
        active = (cdf < u) & (k < cap)
    out = k
    return out if shaped else int(out[0])


def cell_uniform(seed: int, step: int, cell_codes: np.ndarray, purpose: Purpose = Purpose.MIGRATION) -> np.ndarray:
    """One uniform per SAE cell, keyed so the same cell sees the same u each
    (seed, step) regardless of which other cells are active."""
    return u01(seed, np.asarray(cell_codes, dtype=np.uint64), step, purpose)


def generator(seed: int, step: int, purpose: Purpose) -> np.random.Generator:
    """Philox generator for structural draws at one step."""
    return np.random.Generator(np.random.Philox(key=int(_key(seed, step, purpose))))
