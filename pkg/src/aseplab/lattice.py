"""Lattice topologies, particle configurations and closed-form rate formulas.

Configurations are 0/1 occupancies on a finite segment (a truncation of the
infinite lattice) or a ring.  Densities are sampled through one shared
uniform per site so that configurations at different densities are
monotone-coupled under a common stream.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Union

import numpy as np

from .rng import RngStream


@dataclass(frozen=True)
class Rates:
    """Nearest-neighbor jump rates: right at p, left at q, 0 <= q < p <= 1, p + q = 1."""

    p: float
    q: float = None  # type: ignore[assignment]

    def __post_init__(self):
        q = 1.0 - self.p if self.q is None else float(self.q)
        object.__setattr__(self, "p", float(self.p))
        object.__setattr__(self, "q", q)
        if not (0.0 <= self.q < self.p <= 1.0):
            raise ValueError(f"need 0 <= q < p <= 1, got p={self.p}, q={self.q}")
        if abs(self.p + self.q - 1.0) > 1e-12:
            raise ValueError(f"need p + q = 1, got {self.p + self.q}")

    @property
    def theta(self) -> float:
        """Drift p - q, in (0, 1]."""
        return self.p - self.q


@dataclass(frozen=True)
class Segment:
    """Sites lo..hi inclusive, closed boundaries."""

    lo: int
    hi: int

    def __post_init__(self):
        if not self.lo < self.hi:
            raise ValueError(f"segment needs lo < hi, got [{self.lo}, {self.hi}]")

    @property
    def n_sites(self) -> int:
        return self.hi - self.lo + 1

    @property
    def n_pairs(self) -> int:
        return self.n_sites - 1

    def sites(self) -> np.ndarray:
        return np.arange(self.lo, self.hi + 1)

    def index(self, site: int) -> int:
        if not self.lo <= site <= self.hi:
            raise KeyError(f"site {site} outside [{self.lo}, {self.hi}]")
        return site - self.lo


@dataclass(frozen=True)
class Ring:
    """n sites on a cycle; site arithmetic is mod n."""

    n: int

    def __post_init__(self):
        if self.n < 2:
            raise ValueError(f"ring needs n >= 2, got {self.n}")

    @property
    def n_sites(self) -> int:
        return self.n

    @property
    def n_pairs(self) -> int:
        return self.n

    def sites(self) -> np.ndarray:
        return np.arange(self.n)

    def index(self, site: int) -> int:
        return site % self.n


Topology = Union[Segment, Ring]


@dataclass
class Configuration:
    """Occupancy (one bit per site) on a topology.

    The occupancy array is indexed 0..n_sites-1; on a segment, array index i
    is lattice site topology.lo + i.
    """

    topology: Topology
    occupancy: np.ndarray

    def __post_init__(self):
        occ = np.ascontiguousarray(self.occupancy, dtype=np.uint8)
        if occ.shape != (self.topology.n_sites,):
            raise ValueError(
                f"occupancy length {occ.shape} does not match topology "
                f"with {self.topology.n_sites} sites"
            )
        if occ.max(initial=0) > 1:
            raise ValueError("occupancy values must be 0 or 1")
        self.occupancy = occ

    @classmethod
    def empty(cls, topology: Topology) -> "Configuration":
        return cls(topology, np.zeros(topology.n_sites, dtype=np.uint8))

    @classmethod
    def from_sites(cls, topology: Topology, sites) -> "Configuration":
        occ = np.zeros(topology.n_sites, dtype=np.uint8)
        for s in sites:
            occ[topology.index(s)] = 1
        return cls(topology, occ)

    def copy(self) -> "Configuration":
        return Configuration(self.topology, self.occupancy.copy())

    def __getitem__(self, site: int) -> int:
        return int(self.occupancy[self.topology.index(site)])

    @property
    def n_particles(self) -> int:
        return int(self.occupancy.sum())

    def density(self) -> float:
        return self.n_particles / self.topology.n_sites

    def positions(self) -> np.ndarray:
        """Occupied lattice sites, ascending."""
        idx = np.flatnonzero(self.occupancy)
        if isinstance(self.topology, Segment):
            return idx + self.topology.lo
        return idx

    def dominates(self, other: "Configuration") -> bool:
        """Coordinatewise >= against a configuration on the same topology."""
        if self.topology != other.topology:
            raise ValueError("configurations live on different topologies")
        return bool(np.all(self.occupancy >= other.occupancy))


@dataclass(frozen=True)
class DensityProfile:
    """Per-site density in [0, 1]: a base (constant or array) plus point overrides.

    Point overrides cover deterministic sites, e.g. a forced particle at the
    origin is ``{0: 1.0}``; piecewise-constant profiles are arrays.
    """

    base: Union[float, np.ndarray]
    overrides: Mapping[int, float] = field(default_factory=dict)

    def __post_init__(self):
        if np.isscalar(self.base):
            b = float(self.base)
            if not 0.0 <= b <= 1.0:
                raise ValueError(f"density {b} outside [0, 1]")
            object.__setattr__(self, "base", b)
        else:
            arr = np.asarray(self.base, dtype=np.float64)
            if arr.ndim != 1 or np.any(arr < 0.0) or np.any(arr > 1.0):
                raise ValueError("profile array must be 1-d with values in [0, 1]")
            object.__setattr__(self, "base", arr)
        for s, v in self.overrides.items():
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"override density {v} at site {s} outside [0, 1]")
        object.__setattr__(self, "overrides", dict(self.overrides))

    @classmethod
    def constant(cls, rho: float, overrides: Mapping[int, float] | None = None) -> "DensityProfile":
        return cls(rho, overrides or {})

    def resolve(self, topology: Topology) -> np.ndarray:
        """Per-site densities aligned with the topology's occupancy array."""
        n = topology.n_sites
        if np.isscalar(self.base):
            rho = np.full(n, self.base, dtype=np.float64)
        else:
            if len(self.base) != n:
                raise ValueError(
                    f"profile has {len(self.base)} entries, topology has {n} sites"
                )
            rho = np.array(self.base, dtype=np.float64)
        for site, v in self.overrides.items():
            rho[topology.index(site)] = v
        return rho


def sample_config(topology: Topology, profile: DensityProfile, rng: RngStream) -> Configuration:
    """Sample occupancies, site i occupied iff U_i < rho_i.

    One uniform per site, drawn from a fresh generator of `rng`, so two calls
    with the same stream and pointwise-ordered profiles yield coordinatewise
    ordered configurations (monotone coupling across densities).
    """
    rho = profile.resolve(topology)
    u = rng.generator().random(topology.n_sites)
    return Configuration(topology, (u < rho).astype(np.uint8))


def _check_rho(rho: float) -> float:
    if not 0.0 <= rho <= 1.0:
        raise ValueError(f"density {rho} outside [0, 1]")
    return float(rho)


def flux(rho: float, rates: Rates) -> float:
    """Stationary mean particle flow per unit time across a fixed edge: (p-q) rho (1-rho)."""
    rho = _check_rho(rho)
    return rates.theta * rho * (1.0 - rho)


def char_speed(rho: float, rates: Rates) -> float:
    """Characteristic speed (p-q)(1-2 rho), the flux derivative in rho."""
    rho = _check_rho(rho)
    return rates.theta * (1.0 - 2.0 * rho)


def mean_current(rho: float, rates: Rates, x: int, t: float) -> float:
    """Stationary expected net current across the line from (1/2, 0) to (x+1/2, t)."""
    rho = _check_rho(rho)
    if t < 0:
        raise ValueError(f"time {t} must be nonnegative")
    return t * flux(rho, rates) - x * rho
