"""Exact ground truth at desk scale.

Transient CTMC distributions come from uniformization with certified
truncation error; the joint (configuration, tracked discrepancy) chain
gives exact second-class statistics on a truncated window; a reflected
biased walk in a deterministic on/off environment provides the geometric
stationary law used by the label-tail bounds.  Everything here is built
from the process definitions directly, independent of the simulation
kernels, so the two can check each other.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence, Union

import numpy as np
import scipy.sparse as sp
from scipy import stats

from .engine import NearestNeighbor, RateModel, as_general
from .lattice import Configuration, DensityProfile, Rates, Ring, Segment, Topology
from .rng import RngStream

STATE_GUARD = 1 << 24


@dataclass
class GeneratorMatrix:
    """Enumerated state space with its transition-rate matrix."""

    n_states: int
    matrix: sp.csr_matrix  # rate matrix, row infinitesimal stochastic

    def __post_init__(self):
        if self.n_states > STATE_GUARD:
            raise ValueError(f"state space {self.n_states} exceeds guard {STATE_GUARD}")

    def validate(self, tol: float = 1e-9) -> None:
        g = self.matrix
        off = g - sp.diags(g.diagonal())
        if off.nnz and off.min() < -tol:
            raise AssertionError("negative off-diagonal rate")
        rows = np.asarray(abs(g.sum(axis=1))).ravel()
        if rows.max(initial=0.0) > tol:
            raise AssertionError("row sums of generator not zero")

    def uniformization_rate(self) -> float:
        return float(-self.matrix.diagonal().min(initial=0.0))


def _transient(gen: GeneratorMatrix, v0: np.ndarray, t: float, tol: float) -> np.ndarray:
    """Uniformized transient law: sum Poisson(lam*t) weights over jump-chain powers.

    The series is truncated once the accumulated Poisson weight exceeds
    1 - tol/2, which certifies L1 error <= tol/2; long horizons are split
    so the per-step Poisson mean stays in floating range.
    """
    lam = gen.uniformization_rate()
    if lam <= 0.0 or t <= 0.0:
        return v0.copy()
    steps = max(1, math.ceil(lam * t / 400.0))
    step_tol = tol / (2.0 * steps)
    gt = gen.matrix.transpose().tocsr()
    v = v0.copy()
    for _ in range(steps):
        mu = lam * (t / steps)
        w = math.exp(-mu)
        acc = w * v
        cum = w
        vk = v
        k = 0
        while cum < 1.0 - step_tol:
            vk = vk + gt.dot(vk) / lam
            k += 1
            w *= mu / k
            acc = acc + w * vk
            cum += w
        v = acc
    return np.clip(v, 0.0, None)


def _model_moves(model: RateModel, n: int, ring: bool):
    """Admissible (origin, displacement, rate-lookup) moves, engine semantics."""
    g = as_general(model)
    reach = g.reach
    moves = []
    for i in range(n):
        for k in range(1, reach + 1):
            for d in (k, -k):
                if ring or 0 <= i + d < n:
                    moves.append((i, d))
    return g, moves


def _window_value(state: int, i: int, reach: int, n: int, ring: bool) -> int:
    v = 0
    for b in range(2 * reach + 1):
        j = i - reach + b
        if ring:
            j %= n
        elif not 0 <= j < n:
            continue
        v |= ((state >> j) & 1) << b
    return v


def build_generator(model: RateModel, topology: Topology) -> GeneratorMatrix:
    """Rate matrix over all 2^n occupancy states of a tiny topology."""
    n = topology.n_sites
    if 1 << n > STATE_GUARD:
        raise ValueError(f"2^{n} states exceed the guard")
    ring = isinstance(topology, Ring)
    g, moves = _model_moves(model, n, ring)
    rows, cols, vals = [], [], []
    for state in range(1 << n):
        out = 0.0
        for i, d in moves:
            j = (i + d) % n if ring else i + d
            if (state >> i) & 1 and not (state >> j) & 1:
                w = _window_value(state, i, g.reach, n, ring)
                k = abs(d)
                rate = g.p_tables[k - 1, w] if d > 0 else g.q_tables[k - 1, w]
                if rate > 0.0:
                    new = state ^ (1 << i) ^ (1 << j)
                    rows.append(state)
                    cols.append(new)
                    vals.append(rate)
                    out += rate
        if out > 0.0:
            rows.append(state)
            cols.append(state)
            vals.append(-out)
    m = sp.csr_matrix((vals, (rows, cols)), shape=(1 << n, 1 << n))
    return GeneratorMatrix(1 << n, m)


def product_law(topology: Topology, profile: DensityProfile) -> np.ndarray:
    """Probability vector of independent site occupations over bitmask states."""
    rho = profile.resolve(topology)
    n = topology.n_sites
    if 1 << n > STATE_GUARD:
        raise ValueError("state space exceeds guard")
    v = np.ones(1)
    for i in range(n):
        # doubling the vector makes bit i of the state index the new site
        v = np.concatenate([v * (1.0 - rho[i]), v * rho[i]])
    return v


def _as_initial_vector(initial, topology: Topology, n_states: int) -> np.ndarray:
    if isinstance(initial, Configuration):
        v = np.zeros(n_states)
        state = int(sum(int(b) << i for i, b in enumerate(initial.occupancy)))
        v[state] = 1.0
        return v
    if isinstance(initial, DensityProfile):
        return product_law(topology, initial)
    v = np.asarray(initial, dtype=np.float64)
    if v.shape != (n_states,):
        raise ValueError(f"initial law must have {n_states} entries")
    if abs(v.sum() - 1.0) > 1e-9 or v.min() < -1e-12:
        raise ValueError("initial law is not a probability vector")
    return v


def exact_distribution(
    initial: Union[np.ndarray, Configuration, DensityProfile],
    model: RateModel,
    topology: Topology,
    t: float,
    tol: float = 1e-12,
) -> np.ndarray:
    """Full occupancy-state law at time t, exact up to tol in L1."""
    if tol <= 0:
        raise ValueError("tol must be positive")
    gen = build_generator(model, topology)
    v0 = _as_initial_vector(initial, topology, gen.n_states)
    return _transient(gen, v0, t, tol)


def occupancy_marginal(dist: np.ndarray, n_sites: int) -> np.ndarray:
    """Per-site occupation probabilities from a state-law vector."""
    states = np.arange(len(dist))
    return np.array([dist[(states >> i) & 1 == 1].sum() for i in range(n_sites)])


def product_invariance_residual(model: RateModel, ring_sites: int, rho: float) -> float:
    """max |nu G| for the Bernoulli(rho) product law on a ring; 0 iff invariant."""
    topo = Ring(ring_sites)
    gen = build_generator(model, topo)
    nu = product_law(topo, DensityProfile.constant(rho))
    return float(np.abs(gen.matrix.transpose().tocsr().dot(nu)).max())


# ---------------------------------------------------------------------------
# Joint (configuration, tracked discrepancy) chain


def _move_bit(state: int, i: int, j: int) -> int:
    """Particle hop i -> j if (occupied, vacant), else unchanged."""
    if (state >> i) & 1 and not (state >> j) & 1:
        return state ^ (1 << i) ^ (1 << j)
    return state


def second_class_generator(n_sites: int, rates: Union[Rates, tuple[float, float]]) -> GeneratorMatrix:
    """Basic-coupling pair chain (lower config, discrepancy site) on a segment.

    States are indexed q * 2^n + occ where occ is the lower configuration
    (its bit q is always 0) and the upper configuration is occ + delta_q.
    Transitions apply each directed edge clock to both configurations.
    A raw (p, q) pair is accepted for symmetry checks outside the usual
    0 <= q < p constraint.
    """
    n = n_sites
    n_states = n << n
    if n_states > STATE_GUARD:
        raise ValueError("pair-chain state space exceeds guard")
    rp, rq = (rates.p, rates.q) if isinstance(rates, Rates) else rates
    rows, cols, vals = [], [], []
    for q_pos in range(n):
        for occ in range(1 << n):
            if (occ >> q_pos) & 1:
                continue
            state = (q_pos << n) | occ
            upper = occ | (1 << q_pos)
            out = 0.0
            for i in range(n - 1):
                for rate, a, b in ((rp, i, i + 1), (rq, i + 1, i)):
                    if rate <= 0.0:
                        continue
                    new_low = _move_bit(occ, a, b)
                    new_up = _move_bit(upper, a, b)
                    if new_low == occ and new_up == upper:
                        continue
                    diff = new_up & ~new_low
                    new_q = diff.bit_length() - 1
                    new_state = (new_q << n) | new_low
                    rows.append(state)
                    cols.append(new_state)
                    vals.append(rate)
                    out += rate
            if out > 0.0:
                rows.append(state)
                cols.append(state)
                vals.append(-out)
    m = sp.csr_matrix((vals, (rows, cols)), shape=(n_states, n_states))
    return GeneratorMatrix(n_states, m)


@dataclass
class SecondClassExact:
    """Both members of the two-point identity on a truncated window."""

    sites: np.ndarray  # lattice sites j
    q_law: np.ndarray  # P(Q(t) = j), from the pair chain
    covariance: np.ndarray  # Cov[omega_j(t), omega_0(0)], from the single-layer chain
    rho: float

    def identity_residual(self) -> float:
        return float(np.abs(self.covariance - self.rho * (1.0 - self.rho) * self.q_law).max())


def exact_second_class(
    half_width: int, rho: float, rates: Rates, t: float, tol: float = 1e-12
) -> SecondClassExact:
    """Exact P(Q(t)=j) and Cov[omega_j(t), omega_0(0)] on the window {-w..w}.

    The two members come from different chains: the covariance from the
    2^n single-configuration chain started from the product law, the
    discrepancy law from the (configuration, discrepancy) pair chain.
    """
    n = 2 * half_width + 1
    if n > 13:
        raise ValueError(f"window of {n} sites exceeds the 13-site pair-chain guard")
    if not 0.0 < rho < 1.0:
        raise ValueError("density must be in (0, 1)")
    topo = Segment(-half_width, half_width)
    model = NearestNeighbor(rates)
    origin = half_width  # array index of lattice site 0

    # covariance route: conditioned vs unconditioned product starts
    cond1 = DensityProfile.constant(rho, {0: 1.0})
    free = DensityProfile.constant(rho)
    d1 = exact_distribution(cond1, model, topo, t, tol)
    d0 = exact_distribution(free, model, topo, t, tol)
    e1 = occupancy_marginal(d1, n)
    e0 = occupancy_marginal(d0, n)
    cov = rho * (e1 - e0)

    # discrepancy route: pair chain from (product with vacant origin, Q=0)
    gen = second_class_generator(n, rates)
    base = product_law(topo, DensityProfile.constant(rho, {0: 0.0}))
    v0 = np.zeros(gen.n_states)
    v0[origin << n : (origin + 1) << n] = base
    vt = _transient(gen, v0, t, tol)
    q_law = vt.reshape(n, 1 << n).sum(axis=1)

    return SecondClassExact(topo.sites(), q_law, cov, rho)


# ---------------------------------------------------------------------------
# Biased walk in a deterministic on/off edge environment


@dataclass(frozen=True)
class EnvironmentSchedule:
    """Deterministic open/closed gates per edge, right-continuous in time.

    ``flips`` lists (site, time) toggle events for the edge {site-1, site};
    a jump across that edge at time t is allowed iff the current value is 1.
    """

    initial: Union[int, Mapping[int, int]] = 1
    flips: Sequence[tuple[int, float]] = field(default_factory=tuple)

    def __post_init__(self):
        fl = tuple(sorted(((int(s), float(tt)) for s, tt in self.flips), key=lambda e: e[1]))
        per_site: dict[int, list[float]] = {}
        for s, tt in fl:
            if tt < 0:
                raise ValueError("flip times must be nonnegative")
            per_site.setdefault(s, []).append(tt)
        object.__setattr__(self, "flips", fl)
        object.__setattr__(
            self, "_site_flips", {s: np.array(ts) for s, ts in per_site.items()}
        )

    def value(self, site: int, t: float) -> int:
        if isinstance(self.initial, Mapping):
            u = int(self.initial.get(site, 1))
        else:
            u = int(self.initial)
        ts = self._site_flips.get(site)
        if ts is not None:
            u ^= int(np.searchsorted(ts, t, side="right")) & 1
        return u


def adversarial_schedule(
    sites: Sequence[int], t_end: float, flips_per_site: int, rng: RngStream
) -> EnvironmentSchedule:
    """Seeded random on/off schedule: a reproducible worst-case-style input."""
    gen = rng.generator()
    flips = []
    for s in sites:
        for tt in np.sort(gen.random(flips_per_site)) * t_end:
            flips.append((int(s), float(tt)))
    initial = {int(s): int(gen.random() < 0.5) for s in sites}
    return EnvironmentSchedule(initial, flips)


def geometric_pi(j: int, rates: Rates) -> float:
    """Stationary law of the reflected walk under open gates: (1-q/p)(q/p)^j."""
    if j < 0:
        raise ValueError("support is j >= 0")
    r = rates.q / rates.p
    return (1.0 - r) * r**j if j > 0 else (1.0 - r)


def _walk_once(
    schedule: EnvironmentSchedule,
    rates: Rates,
    t_end: float,
    start: int,
    gen: np.random.Generator,
    reflected: bool,
    right_rates: Rates | None,
) -> int:
    p, q = rates.p, rates.q
    rp, rq = (right_rates.p, right_rates.q) if right_rates is not None else (p, q)
    x = start
    t = 0.0
    while True:
        t += gen.standard_exponential()  # composite attempt rate p + q = 1
        if t > t_end:
            return x
        u = gen.random()
        if x <= -1:
            pr, ql = p, q
        elif x == 0:
            # the 0 -> 1 rate lies outside Z_-: suppressed when reflected,
            # otherwise pluggable; the down rate from 0 is pinned at q
            pr, ql = (0.0 if reflected else rp), q
        else:
            pr, ql = rp, rq
        if u < pr:
            if schedule.value(x + 1, t):
                x += 1
        elif u < pr + ql:
            if schedule.value(x, t):
                x -= 1


def simulate_reflected_walk(
    schedule: EnvironmentSchedule,
    rates: Rates,
    t_end: float,
    init: Union[int, str, Callable[[np.random.Generator], int]],
    rng: RngStream,
    samples: int = 1,
    reflected: bool = True,
    right_rates: Rates | None = None,
) -> np.ndarray:
    """Sample walk positions at t_end in a fixed environment.

    ``reflected`` keeps the walk in Z_- by suppressing the 0 -> 1 jump;
    ``init`` is a start site, "geometric" for the stationary-law start, or
    a callable drawing a start from a generator.  Rates right of the
    origin are pluggable for the unreflected walk and default to (p, q).
    """
    out = np.empty(samples, dtype=np.int64)
    for s in range(samples):
        gen = rng.child(s).generator()
        if init == "geometric":
            start = -_geometric_start(rates, gen)
        elif callable(init):
            start = int(init(gen))
        else:
            start = int(init)
        if reflected and start > 0:
            raise ValueError("reflected walk must start in Z_-")
        out[s] = _walk_once(schedule, rates, t_end, start, gen, reflected, right_rates)
    return out


def _geometric_start(rates: Rates, gen: np.random.Generator) -> int:
    """Sample j >= 0 with P(j) = (1 - q/p)(q/p)^j by inverse transform."""
    r = rates.q / rates.p
    if r == 0.0:
        return 0
    return int(math.floor(math.log(1.0 - gen.random()) / math.log(r)))


def coupled_walk_pair(
    schedule: EnvironmentSchedule,
    rates: Rates,
    t_end: float,
    rng: RngStream,
    samples: int,
) -> tuple[np.ndarray, np.ndarray]:
    """Common-clock coupling of (reflected Y from pi, free Z from 0).

    Shared attempt clocks preserve Y(t) <= Z(t); the pair is asserted at
    every event.  Returns (Y(t_end), Z(t_end)) samples.
    """
    p, q = rates.p, rates.q
    ys = np.empty(samples, dtype=np.int64)
    zs = np.empty(samples, dtype=np.int64)
    for s in range(samples):
        gen = rng.child(s).generator()
        y = -_geometric_start(rates, gen)
        z = 0
        t = 0.0
        while True:
            t += gen.standard_exponential()
            if t > t_end:
                break
            u = gen.random()
            if u < p:  # up attempt
                if y <= -1 and schedule.value(y + 1, t):
                    y += 1
                if schedule.value(z + 1, t):
                    z += 1
            else:  # down attempt
                if schedule.value(y, t):
                    y -= 1
                if schedule.value(z, t):
                    z -= 1
            if y > z:
                raise AssertionError("coupled walk ordering violated")
        ys[s] = y
        zs[s] = z
    return ys, zs


def skellam_abs_moment(rates: Rates, t: float, m: float, center: float) -> float:
    """E |S - center|^m for S = Poisson(p t) - Poisson(q t), by series summation."""
    mu1, mu2 = rates.p * t, rates.q * t
    span = int(math.ceil(12.0 * math.sqrt(max(mu1 + mu2, 1.0)) + 20.0))
    lo = int(math.floor(mu1 - mu2)) - span
    hi = int(math.ceil(mu1 - mu2)) + span
    ks = np.arange(lo, hi + 1)
    if mu2 == 0.0:
        pmf = stats.poisson.pmf(ks, mu1)
    else:
        pmf = stats.skellam.pmf(ks, mu1, mu2)
    return float(np.sum(pmf * np.abs(ks - center) ** m))
