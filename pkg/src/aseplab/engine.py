"""Exact continuous-time evolution from per-directed-edge Poisson streams.

Every admissible directed jump (i -> i+d), 1 <= |d| <= R, carries a
unit-rate attempt stream realized from its own counter-based substream.
When a stream fires, the attempt is accepted with the jump's rate
(constant p or q for nearest-neighbor ASEP, a local-window table for the
generalized model) and the exchange executes if the exclusion rule
permits; blocked or rejected attempts are ignored.  Thinning makes the
accepted attempts on each directed edge a Poisson stream at exactly the
target rate, and streams on distinct edges are independent, so this is
the graphical construction realized stream by stream.  Scheduling is a
priority queue over next firing times, one entry per stream, with ties
broken deterministically by stream id.

Because each stream owns its substream, runs that share an RngStream see
identical per-edge clock realizations whatever window restriction is
applied; reduced runs are therefore coupled to full runs path by path.
"""
from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence, Union

import numpy as np

from .lattice import Configuration, DensityProfile, Rates, Ring, Segment, Topology
from .rng import RngStream

_TAG_STREAMS = 0
_TAG_AUX = 1

FLAG_BOUNDARY_ZONE = 2  # outermost sites per end watched for contamination


@dataclass(frozen=True)
class NearestNeighbor:
    """Constant-rate nearest-neighbor ASEP."""

    rates: Rates

    @property
    def reach(self) -> int:
        return 1


@dataclass(frozen=True)
class General:
    """Bounded-range exclusion with configuration-dependent rates.

    ``p_tables[k-1][w]`` is the rate for the jump i -> i+k when the window
    (omega_{i-R}, ..., omega_{i+R}) spells the bit pattern w (LSB = leftmost
    site); ``q_tables`` likewise for i -> i-k.  Sites read beyond a segment
    boundary count as vacant.
    """

    reach: int
    p_tables: np.ndarray
    q_tables: np.ndarray

    def __post_init__(self):
        if self.reach < 1:
            raise ValueError("reach must be >= 1")
        width = 1 << (2 * self.reach + 1)
        for name, tab in (("p_tables", self.p_tables), ("q_tables", self.q_tables)):
            arr = np.asarray(tab, dtype=np.float64)
            if arr.shape != (self.reach, width):
                raise ValueError(f"{name} must have shape ({self.reach}, {width})")
            if arr.min() < 0.0 or arr.max() > 1.0:
                raise ValueError(f"{name} values must lie in [0, 1]")
            object.__setattr__(self, name, arr)

    @classmethod
    def from_functions(
        cls,
        reach: int,
        p_k: Sequence[Callable[[np.ndarray], float]],
        q_k: Sequence[Callable[[np.ndarray], float]],
    ) -> "General":
        """Tabulate rate functions of the local window.

        Each callable receives the occupancy window as an array of length
        2*reach+1 centered on the jump origin and returns a rate in [0, 1].
        """
        if len(p_k) != reach or len(q_k) != reach:
            raise ValueError("need exactly `reach` rate functions per direction")
        width = 1 << (2 * reach + 1)
        p_tab = np.zeros((reach, width))
        q_tab = np.zeros((reach, width))
        for w in range(width):
            window = np.array([(w >> b) & 1 for b in range(2 * reach + 1)], dtype=np.uint8)
            for k in range(reach):
                p_tab[k, w] = p_k[k](window)
                q_tab[k, w] = q_k[k](window)
        return cls(reach, p_tab, q_tab)


RateModel = Union[NearestNeighbor, General]


def as_general(model: RateModel) -> General:
    """Constant-rate tables for a nearest-neighbor model; identity otherwise."""
    if isinstance(model, General):
        return model
    r = model.rates
    return General(1, np.full((1, 8), r.p), np.full((1, 8), r.q))


@dataclass
class Trajectory:
    """One realized path: end states plus the ordered attempt log.

    origins/targets hold lattice sites; ``effected`` marks attempts that
    moved a particle.  ``flagged`` records boundary contamination (an
    effected move landed in the outermost FLAG_BOUNDARY_ZONE sites of a
    segment).
    """

    initial: Configuration
    final: Configuration
    times: np.ndarray
    origins: np.ndarray
    targets: np.ndarray
    effected: np.ndarray
    flagged: bool
    hooks: dict = field(default_factory=dict)

    @property
    def n_events(self) -> int:
        return len(self.times)


class ClockSuite:
    """Per-directed-edge attempt streams and their firing-time queue.

    Stream (i, d) fires at unit rate from its own substream; acceptance
    coins for that edge come from the same substream, so the realization
    of any one edge is independent of all the others and of which window
    restriction a consumer applies.
    """

    def __init__(self, topology: Topology, reach: int, rng: RngStream):
        self.topology = topology
        self.reach = reach
        n = topology.n_sites
        self.ring = isinstance(topology, Ring)
        offsets = []
        for k in range(1, reach + 1):
            offsets.extend((k, -k))
        self.offsets = offsets
        self.streams: list[tuple[int, int]] = []  # (origin index, displacement)
        for i in range(n):
            for d in offsets:
                if self.ring or 0 <= i + d < n:
                    self.streams.append((i, d))
        base = rng.child(_TAG_STREAMS)
        self._gens = [base.child(i, d & 0xFF).generator() for (i, d) in self.streams]
        self._heap = [(g.standard_exponential(), sid) for sid, g in enumerate(self._gens)]
        heapq.heapify(self._heap)

    def next_firing(self) -> tuple[float, int]:
        return heapq.heappop(self._heap)

    def requeue(self, t: float, sid: int) -> None:
        heapq.heappush(self._heap, (t + self._gens[sid].standard_exponential(), sid))

    def coin(self, sid: int) -> float:
        return self._gens[sid].random()

    def attach(self, t: float, rate: float, gen: np.random.Generator) -> None:
        """Register an auxiliary composite stream under the sentinel id -1."""
        self._aux_gen = gen
        self._aux_rate = rate
        heapq.heappush(self._heap, (t + gen.standard_exponential() / rate, -1))

    def requeue_aux(self, t: float) -> None:
        heapq.heappush(self._heap, (t + self._aux_gen.standard_exponential() / self._aux_rate, -1))


@dataclass
class _Layer:
    occ: np.ndarray
    act_lo: int  # active array-index bounds, inclusive
    act_hi: int


@dataclass
class _LoopResult:
    times: np.ndarray
    origins: np.ndarray
    targets: np.ndarray
    effected: np.ndarray  # (n_events, n_layers) uint8
    flagged: bool


def _window_bits(occ: np.ndarray, i: int, reach: int, ring: bool) -> int:
    n = len(occ)
    v = 0
    for b in range(2 * reach + 1):
        j = i - reach + b
        if ring:
            v |= int(occ[j % n]) << b
        elif 0 <= j < n:
            v |= int(occ[j]) << b
    return v


def _evolve(
    topology: Topology,
    model: RateModel,
    layers: Sequence[_Layer],
    t_end: float,
    rng: RngStream,
    *,
    record: bool = True,
    registry: Sequence["DiscrepancyEntry"] = (),
    on_event: Callable | None = None,
    aux: "AuxProcess | None" = None,
) -> _LoopResult:
    """Drive the shared clocks over [0, t_end], mutating layers in place."""
    if t_end < 0:
        raise ValueError("t_end must be nonnegative")
    ring = isinstance(topology, Ring)
    n = topology.n_sites
    constant = isinstance(model, NearestNeighbor)
    if constant:
        p_const, q_const = model.rates.p, model.rates.q
        reach = 1
    else:
        reach = model.reach
        if n < 2 * reach + 1:
            raise ValueError(f"window of {n} sites too small for radius {reach}")
        p_tab, q_tab = model.p_tables, model.q_tables
    clocks = ClockSuite(topology, reach, rng)
    if aux is not None:
        clocks.attach(0.0, aux.rate, rng.child(_TAG_AUX).generator())
    lo = topology.lo if isinstance(topology, Segment) else 0

    times: list[float] = []
    origins: list[int] = []
    targets: list[int] = []
    effected: list[tuple] = []
    flagged = False
    zone = FLAG_BOUNDARY_ZONE

    while True:
        t, sid = clocks.next_firing()
        if t > t_end:
            break
        if sid == -1:
            aux.handle(t, clocks._aux_gen)
            clocks.requeue_aux(t)
            continue
        i, d = clocks.streams[sid]
        j = (i + d) % n if ring else i + d
        u = clocks.coin(sid)
        span_lo, span_hi = (i, i + d) if d > 0 else (i + d, i)
        eff = []
        for layer in layers:
            moved = False
            if ring or (span_lo >= layer.act_lo and span_hi <= layer.act_hi):
                if constant:
                    rate = p_const if d > 0 else q_const
                else:
                    w = _window_bits(layer.occ, i, reach, ring)
                    rate = p_tab[d - 1, w] if d > 0 else q_tab[-d - 1, w]
                if u < rate and layer.occ[i] == 1 and layer.occ[j] == 0:
                    layer.occ[i] = 0
                    layer.occ[j] = 1
                    moved = True
                    if not ring and (j < zone or j >= n - zone):
                        flagged = True
            eff.append(moved)
        for entry in registry:
            entry.update(i + lo, j + lo, layers, lo)
        if on_event is not None:
            on_event(t, i, j, eff)
        if record:
            times.append(t)
            origins.append(i + lo)
            targets.append(j + lo)
            effected.append(tuple(eff))
        clocks.requeue(t, sid)

    return _LoopResult(
        np.array(times),
        np.array(origins, dtype=np.int64),
        np.array(targets, dtype=np.int64),
        np.array(effected, dtype=np.uint8).reshape(len(times), len(layers)),
        flagged,
    )


@dataclass
class DiscrepancyEntry:
    """Single tracked discrepancy between an ordered layer pair.

    Updated in O(1) per event: the discrepancy can only move when the fired
    edge touches its current site.
    """

    upper: int
    lower: int
    position: int  # lattice site
    path_times: list = field(default_factory=list)
    path_positions: list = field(default_factory=list)

    def update(self, site_a: int, site_b: int, layers: Sequence[_Layer], lo: int) -> None:
        if self.position != site_a and self.position != site_b:
            return
        up = layers[self.upper].occ
        lo_occ = layers[self.lower].occ
        for s in (site_a, site_b):
            if up[s - lo] == 1 and lo_occ[s - lo] == 0:
                self.position = s
                return
        raise AssertionError("declared single-discrepancy pair lost its discrepancy")


class AuxProcess:
    """Interface for an auxiliary composite clock attached to the loop."""

    rate: float

    def handle(self, t: float, gen: np.random.Generator) -> None:  # pragma: no cover
        raise NotImplementedError


def _full_layer(config: Configuration) -> _Layer:
    return _Layer(config.occupancy.copy(), 0, config.topology.n_sites - 1)


def _make_trajectory(
    initial: Configuration,
    layer: _Layer,
    res: _LoopResult,
    hooks: Mapping[str, Callable] | None,
) -> Trajectory:
    traj = Trajectory(
        initial=initial,
        final=Configuration(initial.topology, layer.occ),
        times=res.times,
        origins=res.origins,
        targets=res.targets,
        effected=res.effected[:, 0] if res.effected.size else res.effected.reshape(0),
        flagged=res.flagged,
    )
    if hooks:
        for name, fn in hooks.items():
            traj.hooks[name] = fn(traj)
    return traj


def run(
    config: Configuration,
    model: NearestNeighbor,
    t_end: float,
    rng: RngStream,
    hooks: Mapping[str, Callable] | None = None,
    record_log: bool = True,
) -> Trajectory:
    """Evolve a nearest-neighbor ASEP configuration for time t_end."""
    if not isinstance(model, NearestNeighbor):
        raise TypeError("run() takes a NearestNeighbor model; use run_general for tables")
    layer = _full_layer(config)
    res = _evolve(config.topology, model, [layer], t_end, rng, record=record_log)
    return _make_trajectory(config.copy(), layer, res, hooks)


def run_general(
    config: Configuration,
    model: General,
    t_end: float,
    rng: RngStream,
    hooks: Mapping[str, Callable] | None = None,
    record_log: bool = True,
) -> Trajectory:
    """Evolve the bounded-range, configuration-dependent-rate exclusion."""
    if not isinstance(model, General):
        raise TypeError("run_general() takes a General model")
    layer = _full_layer(config)
    res = _evolve(config.topology, model, [layer], t_end, rng, record=record_log)
    return _make_trajectory(config.copy(), layer, res, hooks)


def run_reduced(
    config: Configuration,
    window: tuple[int, int],
    model: RateModel,
    t_end: float,
    rng: RngStream,
    hooks: Mapping[str, Callable] | None = None,
    record_log: bool = True,
) -> Trajectory:
    """Evolve with every jump that involves a site outside the open window deleted.

    Sites outside (a, b) are frozen at their initial values.  The clock
    realization is shared with run() under the same stream, so the pair
    (full run, reduced run) is coupled path by path.
    """
    a, b = window
    topo = config.topology
    if isinstance(topo, Ring):
        raise ValueError("reduced runs are defined on segments")
    if not (topo.lo - 1 <= a and b <= topo.hi + 1):
        raise ValueError(f"window ({a}, {b}) not within segment [{topo.lo}, {topo.hi}]")
    if b <= a + 1:
        raise ValueError(f"degenerate window ({a}, {b}): no interior sites")
    layer = _Layer(
        config.occupancy.copy(),
        max(a + 1, topo.lo) - topo.lo,
        min(b - 1, topo.hi) - topo.lo,
    )
    res = _evolve(topo, model, [layer], t_end, rng, record=record_log)
    return _make_trajectory(config.copy(), layer, res, hooks)


@dataclass(frozen=True)
class WindowPlan:
    """Auto-sized finite stand-in for the infinite lattice.

    The Bernoulli profile fills the core; beyond it sits a vacant buffer
    wide enough that no particle plausibly reaches the outermost
    FLAG_BOUNDARY_ZONE sites within the run, which is what the
    contamination flag watches.
    """

    segment: Segment
    core_lo: int
    core_hi: int

    def profile(self, rho: float, overrides: Mapping[int, float] | None = None) -> DensityProfile:
        sites = self.segment.sites()
        base = np.where((sites >= self.core_lo) & (sites <= self.core_hi), rho, 0.0)
        return DensityProfile(base, overrides or {})

    def densities(self, rho: float, overrides: Mapping[int, float] | None = None) -> np.ndarray:
        return self.profile(rho, overrides).resolve(self.segment)


def flag_zone(plan: WindowPlan) -> int:
    """Watched boundary width: active only when a vacant margin separates the core.

    Explicit window overrides fill the whole segment, so contamination
    watching is meaningful (and astronomically rare) only for auto-sized
    plans with their vacant buffer.
    """
    margin = min(plan.core_lo - plan.segment.lo, plan.segment.hi - plan.core_hi)
    return FLAG_BOUNDARY_ZONE if margin > FLAG_BOUNDARY_ZONE else 0


def auto_window(
    rates: Rates,
    t: float,
    obs_lo: int = 0,
    obs_hi: int = 0,
    speed: float | None = None,
    scale: float = 1.0,
) -> WindowPlan:
    """Size a window so truncation cannot plausibly influence the observation region.

    Core half-width L = ceil(|V| t + 6 t + 10 sqrt(t) + 20) around
    [obs_lo, obs_hi] (information spreads at a finitely bounded rate, so
    influence from beyond L is exponentially unlikely to arrive by t), then
    a vacant buffer of ceil(t + 8 sqrt(t)) + 6 keeps leaked particles away
    from the watched boundary zone.  ``scale`` multiplies L for doubling
    experiments.
    """
    if speed is None:
        speed = rates.theta  # worst case over densities: |V^rho| <= theta
    L = math.ceil((abs(speed) * t + 6.0 * t + 10.0 * math.sqrt(t) + 20.0) * scale)
    buffer = math.ceil(t + 8.0 * math.sqrt(t)) + 6
    pad = L + buffer + FLAG_BOUNDARY_ZONE
    return WindowPlan(Segment(obs_lo - pad, obs_hi + pad), obs_lo - L, obs_hi + L)


@dataclass
class InvarianceReport:
    """Outcome of a product-measure invariance probe."""

    passed: bool
    max_sigma: float
    site_sigma: float
    pair_sigma: float
    site_delta: float
    pair_delta: float
    replicas: int

    @property
    def verdict(self) -> str:
        return "PASS" if self.passed else "FAIL"


def check_product_invariance(
    model: RateModel,
    rho: float,
    t_probe: float,
    replicas: int,
    rng: RngStream,
    ring_sites: int = 24,
) -> InvarianceReport:
    """Test whether i.i.d. Bernoulli(rho) looks time-invariant for the model.

    Runs on a ring to avoid boundary artifacts and compares single-site and
    adjacent-pair occupation statistics at times 0 and t_probe, paired per
    replica; PASS iff every deviation is within 4 standard errors.
    """
    from ._kernels import evolve_general_ring  # local import: numba warmup cost

    if replicas < 2:
        raise ValueError("need at least 2 replicas")
    gmodel = as_general(model)
    n = ring_sites
    if n < 2 * gmodel.reach + 1:
        raise ValueError(f"ring of {n} sites too small for radius {gmodel.reach}")
    site_diff = np.empty(replicas)
    pair_diff = np.empty(replicas)
    for r in range(replicas):
        gen = rng.child(r).generator()
        occ = (gen.random(n) < rho).astype(np.uint8)
        s0 = occ.mean()
        p0 = (occ * np.roll(occ, -1)).mean()
        evolve_general_ring(occ, gmodel.reach, gmodel.p_tables, gmodel.q_tables, t_probe, gen)
        site_diff[r] = occ.mean() - s0
        pair_diff[r] = (occ * np.roll(occ, -1)).mean() - p0
    site_se = site_diff.std(ddof=1) / math.sqrt(replicas)
    pair_se = pair_diff.std(ddof=1) / math.sqrt(replicas)
    site_z = abs(site_diff.mean()) / site_se if site_se > 0 else 0.0
    pair_z = abs(pair_diff.mean()) / pair_se if pair_se > 0 else 0.0
    return InvarianceReport(
        passed=bool(site_z <= 4.0 and pair_z <= 4.0),
        max_sigma=float(max(site_z, pair_z)),
        site_sigma=float(site_z),
        pair_sigma=float(pair_z),
        site_delta=float(site_diff.mean()),
        pair_delta=float(pair_diff.mean()),
        replicas=replicas,
    )
