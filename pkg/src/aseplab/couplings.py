"""Shared-clock couplings and second-class particle machinery.

The basic coupling evolves a stack of coordinatewise-ordered
configurations under one clock suite, which preserves the ordering and
keeps declared single-discrepancy pairs single-discrepancy.  On top of
it, the two-label construction realizes a coupling in which the tracked
second-class particle of the denser marginal never overtakes that of the
sparser one; the labels hop along the stack's second-class particles on
auxiliary clocks with a fast (rate p-q) and a slow (rate q) stream per
relevant directed edge.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import _kernels
from .engine import (
    AuxProcess,
    DiscrepancyEntry,
    NearestNeighbor,
    WindowPlan,
    _evolve,
    _Layer,
    auto_window,
    flag_zone,
)
from .lattice import Configuration, Rates, Ring, Segment
from .rng import RngStream

_TWO53 = 9007199254740992.0


@dataclass
class LayeredState:
    """Ordered stack of configurations sharing one clock suite.

    ``layers[0]`` is the topmost (densest) configuration; each layer must
    dominate the next coordinatewise.  ``single_discrepancies`` declares
    layer pairs (upper index, lower index) that differ at exactly one
    site; their discrepancy positions are tracked event by event.
    """

    layers: Sequence[Configuration]
    rates: Rates
    single_discrepancies: Mapping[tuple[int, int], int] = field(default_factory=dict)

    def __post_init__(self):
        if len(self.layers) < 1:
            raise ValueError("need at least one layer")
        topo = self.layers[0].topology
        for cfg in self.layers[1:]:
            if cfg.topology != topo:
                raise ValueError("layers must share a topology")
        for upper, lower in zip(self.layers, self.layers[1:]):
            if not upper.dominates(lower):
                raise ValueError("layers out of coordinatewise order")
        for (u, l), pos in self.single_discrepancies.items():
            diff = self.layers[u].occupancy.astype(np.int8) - self.layers[l].occupancy
            sites = np.flatnonzero(diff)
            if len(sites) != 1 or np.any(diff < 0):
                raise ValueError(f"pair ({u}, {l}) is not a single-discrepancy pair")
            site = int(sites[0]) + (topo.lo if isinstance(topo, Segment) else 0)
            if site != pos:
                raise ValueError(f"pair ({u}, {l}) discrepancy is at {site}, not {pos}")


@dataclass
class SecondClassTracker:
    """Tracked discrepancy with its position among a stack's second-class particles."""

    q_position: int | None
    x_positions: np.ndarray
    label_a: int | None = None
    label_b: int | None = None
    m_q: int | None = None
    label_history: list = field(default_factory=list)

    def validate(self) -> None:
        if np.any(np.diff(self.x_positions) <= 0):
            raise AssertionError("second-class positions not strictly increasing")
        if self.label_a is not None and self.label_b is not None and self.label_a > self.label_b:
            raise AssertionError("label ordering a <= b violated")


@dataclass
class CoupledTrajectory:
    """Joint path of basic-coupled layers plus tracked discrepancy paths."""

    initial: list[Configuration]
    final: list[Configuration]
    times: np.ndarray
    origins: np.ndarray
    targets: np.ndarray
    effected: np.ndarray  # (n_events, n_layers)
    discrepancy_paths: dict  # (upper, lower) -> (times, positions) arrays
    flagged: bool

    def discrepancy(self, upper: int, lower: int) -> int:
        times, pos = self.discrepancy_paths[(upper, lower)]
        return int(pos[-1])


def run_basic_coupling(
    state: LayeredState, t_end: float, rng: RngStream, record_log: bool = True
) -> CoupledTrajectory:
    """Evolve all layers under common clocks, tracking declared discrepancies.

    Ordering between layers is re-asserted on exit; single-discrepancy
    bookkeeping raises if a declared pair ever loses its discrepancy.
    Marginally each layer evolves exactly as a lone run() with the same
    stream, and indeed produces an identical event log.
    """
    topo = state.layers[0].topology
    initial = [cfg.copy() for cfg in state.layers]
    layers = [_Layer(cfg.occupancy.copy(), 0, topo.n_sites - 1) for cfg in state.layers]
    registry = [
        DiscrepancyEntry(u, l, pos, [0.0], [pos])
        for (u, l), pos in state.single_discrepancies.items()
    ]

    def track(t, i, j, eff):
        for entry in registry:
            if entry.path_positions[-1] != entry.position:
                entry.path_times.append(t)
                entry.path_positions.append(entry.position)

    res = _evolve(
        topo,
        NearestNeighbor(state.rates),
        layers,
        t_end,
        rng,
        record=record_log,
        registry=registry,
        on_event=track,
    )
    final = [Configuration(topo, layer.occ) for layer in layers]
    for upper, lower in zip(final, final[1:]):
        if not upper.dominates(lower):
            raise AssertionError("basic coupling lost the coordinatewise order")
    paths = {
        (e.upper, e.lower): (np.array(e.path_times), np.array(e.path_positions, dtype=np.int64))
        for e in registry
    }
    return CoupledTrajectory(
        initial, final, res.times, res.origins, res.targets, res.effected, paths, res.flagged
    )


@dataclass
class EnvironmentView:
    """Adjacency environment of the second-class stack, indexed by label.

    ``value(m, t)`` is the indicator that particle X_m sits immediately to
    the right of X_{m-1} at time t, reconstructed from recorded position
    snapshots: piecewise constant with finitely many flips on any bounded
    interval.
    """

    times: np.ndarray
    snapshots: np.ndarray  # (n_snapshots, n_x) positions

    def value(self, m: int, t: float) -> int:
        if not 1 <= m < self.snapshots.shape[1]:
            return 0
        k = int(np.searchsorted(self.times, t, side="right")) - 1
        k = max(k, 0)
        return int(self.snapshots[k, m] == self.snapshots[k, m - 1] + 1)

    def flips(self, m: int) -> list[tuple[int, float]]:
        """(label, time) toggle events of u(m, .), oracle-schedule style."""
        out = []
        prev = self.value(m, self.times[0])
        for k in range(1, len(self.times)):
            cur = int(self.snapshots[k, m] == self.snapshots[k, m - 1] + 1)
            if cur != prev:
                out.append((m, float(self.times[k])))
                prev = cur
        return out


@dataclass
class ConcavityTrajectory:
    """Outcome of the two-label coupling run."""

    zeta_minus_final: Configuration
    xi_final: Configuration
    zeta_final: Configuration
    tracker: SecondClassTracker
    q_dense_path: tuple[np.ndarray, np.ndarray]  # (times, positions of X_a)
    q_sparse_path: tuple[np.ndarray, np.ndarray]  # (times, positions of X_b)
    flagged: bool
    environment: EnvironmentView | None = None

    @property
    def q_dense(self) -> int:
        return int(self.q_dense_path[1][-1])

    @property
    def q_sparse(self) -> int:
        return int(self.q_sparse_path[1][-1])


class LabelWalk(AuxProcess):
    """Auxiliary clocks for the two labels, as a four-slot composite.

    At any instant at most four directed edges are relevant: right and
    left of each label's particle.  Each slot serves its edge with a fast
    coin (probability (p-q)/p, the rate p-q stream) and a slow coin (the
    rate q stream); with equal labels the b slots are ghosts so each
    relevant edge keeps exactly one fast+slow pair.  Slot draws are
    discarded whenever the adjacency the rule requires is absent, which
    by memorylessness realizes independent per-edge streams exactly.
    """

    def __init__(self, rates: Rates, x_positions: list, a: int, b: int):
        self.p, self.q = rates.p, rates.q
        self.rate = 4.0 * rates.p
        self.x = x_positions  # lattice sites, strictly increasing; mutated by the owner
        self.a = a
        self.b = b
        self.history: list[tuple[float, int, int]] = [(0.0, a, b)]

    def handle(self, t: float, gen: np.random.Generator) -> None:
        slot = int(gen.random() * _TWO53) & 3
        a, b, x = self.a, self.b, self.x
        same = a == b
        if same and slot >= 2:
            return
        fast = True if self.q <= 0.0 else (gen.random() < (self.p - self.q) / self.p)
        if slot == 0:  # edge (X_a, X_a + 1)
            if a + 1 < len(x) and x[a + 1] == x[a] + 1:
                if same:
                    if fast:
                        self.b = b + 1
                    else:
                        self.a, self.b = a + 1, b + 1
                elif not fast:
                    self.a = a + 1
        elif slot == 1:  # edge (X_a, X_a - 1)
            if a - 1 >= 0 and x[a - 1] == x[a] - 1:
                if same:
                    if fast:
                        self.a = a - 1
                    else:
                        self.a, self.b = a - 1, b - 1
                else:
                    self.a = a - 1
        elif slot == 2:  # edge (X_b, X_b + 1)
            if b + 1 < len(x) and x[b + 1] == x[b] + 1:
                self.b = b + 1
        else:  # edge (X_b, X_b - 1)
            if b - 1 >= 0 and x[b - 1] == x[b] - 1:
                if not fast:
                    self.b = b - 1
        if self.a > self.b:
            raise AssertionError("label ordering a <= b violated")
        if (self.a, self.b) != (a, b):
            self.history.append((t, self.a, self.b))


def run_concavity_coupling(
    zeta0: Configuration,
    xi0: Configuration,
    q_dense0: int,
    q_sparse0: int,
    rates: Rates,
    t_end: float,
    rng: RngStream,
    record_environment: bool = False,
) -> ConcavityTrajectory:
    """Couple a denser and a sparser system so their tracked particles stay ordered.

    The pair (zeta, xi) evolves in basic coupling; labels a and b live on
    the zeta-xi second-class particles and move per the auxiliary-clock
    rules, so that (zeta - delta_{X_a}, X_a) and (xi, X_b) are each
    marginally an ASEP with a second-class particle while X_a <= X_b
    holds at every event (asserted).
    """
    topo = zeta0.topology
    if isinstance(topo, Ring):
        raise ValueError("the two-label coupling is built on segments")
    if not zeta0.dominates(xi0):
        raise ValueError("need zeta(0) >= xi(0) coordinatewise")
    if q_dense0 > q_sparse0:
        raise ValueError("need dense-side start <= sparse-side start")
    for site in (q_dense0, q_sparse0):
        if zeta0[site] != 1 or xi0[site] != 0:
            raise ValueError(f"site {site} must hold a zeta particle and an xi vacancy")

    lo = topo.lo
    diff = zeta0.occupancy.astype(np.int8) - xi0.occupancy
    x_sites = [int(s) + lo for s in np.flatnonzero(diff)]
    a0 = x_sites.index(q_dense0)
    b0 = x_sites.index(q_sparse0)
    walk = LabelWalk(rates, x_sites, a0, b0)

    xi_layer = _Layer(xi0.occupancy.copy(), 0, topo.n_sites - 1)
    zeta_layer = _Layer(zeta0.occupancy.copy(), 0, topo.n_sites - 1)
    site2x = {s: m for m, s in enumerate(x_sites)}
    qd_times, qd_pos = [0.0], [q_dense0]
    qs_times, qs_pos = [0.0], [q_sparse0]
    env_times, env_snaps = [0.0], [list(x_sites)]

    def on_event(t, i_idx, j_idx, eff):
        xi_eff, zeta_eff = eff
        si, sj = i_idx + lo, j_idx + lo
        if zeta_eff and not xi_eff:  # discrepancy advanced with the zeta particle
            m = site2x.pop(si)
            x_sites[m] = sj
            site2x[sj] = m
        elif xi_eff and not zeta_eff:  # xi particle took the discrepancy's site
            m = site2x.pop(sj)
            x_sites[m] = si
            site2x[si] = m
        if zeta_layer.occ[i_idx] < xi_layer.occ[i_idx] or zeta_layer.occ[j_idx] < xi_layer.occ[j_idx]:
            raise AssertionError("coordinatewise order zeta >= xi violated")
        qd, qs = x_sites[walk.a], x_sites[walk.b]
        if qd > qs:
            raise AssertionError("tracked positions out of order")
        if qd != qd_pos[-1]:
            qd_times.append(t)
            qd_pos.append(qd)
        if qs != qs_pos[-1]:
            qs_times.append(t)
            qs_pos.append(qs)
        if record_environment and x_sites != env_snaps[-1]:
            env_times.append(t)
            env_snaps.append(list(x_sites))

    _evolve(
        topo,
        NearestNeighbor(rates),
        [xi_layer, zeta_layer],
        t_end,
        rng,
        record=False,
        on_event=on_event,
        aux=walk,
    )

    if any(x_sites[m] >= x_sites[m + 1] for m in range(len(x_sites) - 1)):
        raise AssertionError("second-class positions not strictly increasing")
    qd, qs = x_sites[walk.a], x_sites[walk.b]
    if qd != qd_pos[-1]:
        qd_times.append(t_end)
        qd_pos.append(qd)
    if qs != qs_pos[-1]:
        qs_times.append(t_end)
        qs_pos.append(qs)

    zeta_final = Configuration(topo, zeta_layer.occ.copy())
    zminus = zeta_layer.occ.copy()
    zminus[qd - lo] = 0
    tracker = SecondClassTracker(
        q_position=qd,
        x_positions=np.array(x_sites, dtype=np.int64),
        label_a=walk.a,
        label_b=walk.b,
        label_history=walk.history,
    )
    tracker.validate()
    env = (
        EnvironmentView(np.array(env_times), np.array(env_snaps, dtype=np.int64))
        if record_environment
        else None
    )
    return ConcavityTrajectory(
        zeta_minus_final=Configuration(topo, zminus),
        xi_final=Configuration(topo, xi_layer.occ.copy()),
        zeta_final=zeta_final,
        tracker=tracker,
        q_dense_path=(np.array(qd_times), np.array(qd_pos, dtype=np.int64)),
        q_sparse_path=(np.array(qs_times), np.array(qs_pos, dtype=np.int64)),
        flagged=False,
        environment=env,
    )


# ---------------------------------------------------------------------------
# Replica-scale drivers (numba kernels)


def concavity_chunk(params: dict, master_seed: int, lo: int, hi: int) -> dict:
    """One chunk of two-label coupling replicas: position histograms + violations."""
    plan: WindowPlan = params["plan"]
    seg = plan.segment
    n = seg.n_sites
    origin = seg.index(0)
    dens_z = plan.densities(params["rho"], {0: 1.0})
    dens_x = plan.densities(params["lam"], {0: 0.0})
    p, q, t = params["p"], params["q"], params["t"]
    zone = flag_zone(plan)
    lam_total = (n - 1) * (p + q) + 4.0 * p
    tag = params["tag"]
    hist_dense = np.zeros(n, dtype=np.int64)
    hist_sparse = np.zeros(n, dtype=np.int64)
    violations = 0
    flagged = 0
    for r in range(lo, hi):
        gen = RngStream(master_seed, (tag, r)).generator()
        u = gen.random(n)
        zeta = (u < dens_z).astype(np.uint8)
        xi = (u < dens_x).astype(np.uint8)
        xpos = np.flatnonzero(zeta != xi).astype(np.int64)
        site2x = np.full(n, -1, dtype=np.int64)
        site2x[xpos] = np.arange(len(xpos))
        start = int(np.searchsorted(xpos, origin))
        labels = np.array([start, start], dtype=np.int64)
        n_ev = gen.poisson(lam_total * t)
        flags, err = _kernels.evolve_concavity(
            xi, zeta, xpos, site2x, labels, p, q, n_ev, zone, gen
        )
        if err != 0 or labels[0] > labels[1] or np.any(np.diff(xpos) <= 0):
            violations += 1
            continue
        if flags & _kernels.FLAG_BOUNDARY:
            flagged += 1
        hist_dense[xpos[labels[0]]] += 1
        hist_sparse[xpos[labels[1]]] += 1
    return {
        "hist_dense": hist_dense,
        "hist_sparse": hist_sparse,
        "violations": violations,
        "flagged": flagged,
        "n": hi - lo,
    }


def label_tail_chunk(params: dict, master_seed: int, lo: int, hi: int) -> dict:
    """One chunk of label-walk replicas; returns the label histogram."""
    plan: WindowPlan = params["plan"]
    seg = plan.segment
    n = seg.n_sites
    p, q, t = params["p"], params["q"], params["t"]
    zone = flag_zone(plan)
    side = params["side"]
    tag = params["tag"]
    span = params["label_span"]
    start_site = params.get("start_site", 0)
    origin = seg.index(start_site)
    if side == "upper":
        dens_ref = plan.densities(params["lam"], {start_site: 0.0})  # eta
        dens_top = plan.densities(params["rho"], {start_site: 1.0})  # omega
        mode = _kernels.TRK_RANK_LOWEST
    else:
        n_off = params["n_off"]
        sites = seg.sites()
        base = np.where(
            (sites > -n_off) & (sites <= 0), params["lam"], params["rho"]
        )
        base[(sites < plan.core_lo) | (sites > plan.core_hi)] = 0.0
        base[seg.index(-n_off)] = 1.0
        dens_ref = base  # zeta profile
        dens_top = plan.densities(params["lam"], {start_site: 0.0})  # eta with vacant start
        mode = _kernels.TRK_RANK_OVER
    hist = np.zeros(2 * span + 1, dtype=np.int64)
    act_lo = np.zeros(2, dtype=np.int64)
    act_hi = np.full(2, n - 1, dtype=np.int64)
    trk_base = np.array([1], dtype=np.int64)
    trk_ref = np.array([0], dtype=np.int64)
    trk_mode = np.array([mode], dtype=np.int64)
    lam_total = float(n - 1) * (p + q)
    layers = np.empty((2, n), dtype=np.uint8)
    for r in range(lo, hi):
        gen = RngStream(master_seed, (tag, r)).generator()
        u = gen.random(n)
        if side == "upper":
            layers[0, :] = u < dens_ref  # eta
            omega = (u < dens_top).astype(np.uint8)
            omega[origin] = 0  # base layer omega-minus
            layers[1, :] = omega
        else:
            layers[0, :] = u < dens_ref  # zeta
            layers[1, :] = u < dens_top  # eta (start site already vacant)
        trk_q = np.array([origin], dtype=np.int64)
        trk_rank = np.zeros(1, dtype=np.int64)
        n_ev = gen.poisson(lam_total * t)
        _kernels.evolve_layers(
            layers, act_lo, act_hi, trk_base, trk_ref, trk_mode, trk_q, trk_rank,
            False, p, q, n_ev, zone, gen,
        )
        hist[min(max(trk_rank[0], -span), span) + span] += 1
    return {"rank_hist": hist, "n": hi - lo}


@dataclass
class LabelTailResult:
    """Empirical label tails against the exp(-2 theta k) bound."""

    side: str
    k_values: np.ndarray
    tails: np.ndarray
    stderrs: np.ndarray
    bounds: np.ndarray
    replicas: int

    @property
    def passed(self) -> bool:
        return bool(np.all(self.tails <= self.bounds + 3.0 * self.stderrs))


def measure_label_tail(
    rho: float,
    rates: Rates,
    t: float,
    k_values: Sequence[int],
    replicas: int,
    rng: RngStream,
    lam: float | None = None,
    side: str = "upper",
    workers: int = 1,
) -> LabelTailResult:
    """Estimate P(label >= k) (or <= -k for the mirrored setup) against e^{-2 theta k}.

    The walk rides the tracked discrepancy of a three-layer basic coupling
    started from monotone-coupled Bernoulli profiles; the auxiliary
    density defaults to rho/2 and must satisfy lam < rho.
    """
    from .parallel import run_replicas

    if not 0.0 < rho < 1.0:
        raise ValueError("density must be in (0, 1)")
    lam = rho / 2.0 if lam is None else lam
    if not 0.0 <= lam < rho:
        raise ValueError("auxiliary density must satisfy lam < rho")
    if side not in ("upper", "lower"):
        raise ValueError("side must be 'upper' or 'lower'")
    ks = np.asarray(sorted(k_values), dtype=np.int64)
    if len(ks) == 0 or ks.min() < 0:
        raise ValueError("k values must be nonnegative")
    theta = rates.theta
    expected = replicas * math.exp(-2.0 * theta * ks.max())
    if expected < 5.0:
        raise ValueError(
            f"replicas too small for k <= {ks.max()}: expected exceedance count "
            f"{expected:.2f} < 5 at the bound"
        )
    params: dict = {
        "rho": rho,
        "lam": lam,
        "p": rates.p,
        "q": rates.q,
        "t": t,
        "side": side,
        "label_span": 400,
        "tag": 31 if side == "upper" else 32,
    }
    if side == "upper":
        params["plan"] = auto_window(rates, t)
        params["start_site"] = 0
    else:
        speeds = (1.0 - 2.0 * lam) * theta, (1.0 - 2.0 * rho) * theta
        n_off = max(1, math.ceil(abs(speeds[0] - speeds[1]) * t + t ** (2.0 / 3.0)))
        params["n_off"] = n_off
        params["start_site"] = -n_off
        params["plan"] = auto_window(rates, t, obs_lo=-n_off, obs_hi=0)
    out = run_replicas(label_tail_chunk, params, replicas, rng.master_seed, workers)
    hist = out["rank_hist"]
    span = params["label_span"]
    n = out["n"]
    if side == "upper":
        tails = np.array([hist[span + k :].sum() for k in ks]) / n
    else:
        tails = np.array([hist[: span - k + 1].sum() for k in ks]) / n
    ses = np.sqrt(tails * (1.0 - tails) / n)
    bounds = np.exp(-2.0 * theta * ks)
    return LabelTailResult(side, ks, tails, ses, bounds, n)
