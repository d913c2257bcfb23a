"""Current bookkeeping and Monte Carlo estimators for the exact identities.

The net current across the line from (1/2, 0) to (x+1/2, t) is computed
from labeled particle positions: with nearest-neighbor exclusion labels
keep their order, so the ledger of sorted positions at times 0 and t
determines every J_x(t) exactly.  Estimators fan replicas out through
deterministic per-replica streams and aggregate exact integer or
fixed-order float sums, so results are reproducible for any worker count.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import stats

from . import _kernels
from .engine import FLAG_BOUNDARY_ZONE, WindowPlan, auto_window, flag_zone
from .lattice import Rates, Segment, char_speed
from .parallel import run_replicas
from .rng import RngStream

THREE_SIGMA = 0.9973002039367398


class BoundaryContamination(RuntimeError):
    """A particle reached the watched window boundary; the estimate is void."""


@dataclass(frozen=True)
class EstimateWithCI:
    """Monte Carlo point estimate with a normal-approximation interval."""

    estimate: float
    stderr: float
    replicas: int
    confidence: float = THREE_SIGMA

    def __post_init__(self):
        if self.stderr < 0:
            raise ValueError("stderr must be nonnegative")
        if not 0.0 < self.confidence < 1.0:
            raise ValueError("confidence must be in (0, 1)")

    @property
    def z_mult(self) -> float:
        return float(stats.norm.ppf(0.5 * (1.0 + self.confidence)))

    @property
    def ci_lo(self) -> float:
        return self.estimate - self.z_mult * self.stderr

    @property
    def ci_hi(self) -> float:
        return self.estimate + self.z_mult * self.stderr

    def agrees_with(self, reference: float, sigmas: float = 3.0) -> bool:
        return abs(self.estimate - reference) <= sigmas * self.stderr


# ---------------------------------------------------------------------------
# Exact per-trajectory current


@dataclass
class CurrentLedger:
    """Sorted labeled particle positions at times 0 and t on a segment."""

    initial_positions: np.ndarray
    final_positions: np.ndarray
    flagged: bool = False

    def __post_init__(self):
        if len(self.initial_positions) != len(self.final_positions):
            raise ValueError("particle count changed between the ledger's two times")
        for pos in (self.initial_positions, self.final_positions):
            if np.any(np.diff(pos) <= 0):
                raise ValueError("ledger positions must be strictly increasing")


def ledger_from_trajectory(traj) -> CurrentLedger:
    """Label particles by order; valid because nearest-neighbor moves preserve it."""
    return CurrentLedger(
        traj.initial.positions(), traj.final.positions(), flagged=traj.flagged
    )


def current(ledger: CurrentLedger, x: int) -> int:
    """Net left-to-right particle current across (1/2, 0) -> (x+1/2, t).

    Counts particles that started in (-inf, 0] and ended in [x+1, inf),
    minus those that started in [1, inf) and ended in (-inf, x].
    """
    if ledger.flagged:
        raise BoundaryContamination("ledger window was contaminated at the boundary")
    init, fin = ledger.initial_positions, ledger.final_positions
    k0 = int(np.searchsorted(init, 0, side="right"))  # labels started at sites <= 0
    plus = k0 - int(np.searchsorted(fin[:k0], x + 1, side="left"))
    minus = int(np.searchsorted(fin[k0:], x, side="right"))
    return plus - minus


def _currents(init_idx: np.ndarray, fin_idx: np.ndarray, origin: int, x_idx: np.ndarray) -> np.ndarray:
    """Vector of J_x for sorted array-index positions; origin is site 0's index."""
    k0 = int(np.searchsorted(init_idx, origin, side="right"))
    plus = k0 - np.searchsorted(fin_idx[:k0], x_idx + 1, side="left")
    minus = np.searchsorted(fin_idx[k0:], x_idx, side="right")
    return (plus - minus).astype(np.int64)


# ---------------------------------------------------------------------------
# Replica chunk tasks (top level: picklable for worker pools)

_E0 = np.zeros(0, dtype=np.int64)


def _chunk_setup(params):
    plan: WindowPlan = params["plan"]
    seg = plan.segment
    dens = plan.densities(params["rho"], params.get("overrides"))
    return seg, seg.n_sites, seg.index(0), dens


def stationary_current_chunk(params: dict, master_seed: int, lo: int, hi: int) -> dict:
    """Stationary-start replicas: power sums of J_x per requested site x."""
    seg, n, origin, dens = _chunk_setup(params)
    zone = flag_zone(params["plan"])
    p, q, t = params["p"], params["q"], params["t"]
    x_idx = np.array([seg.index(x) for x in params["x_sites"]], dtype=np.int64)
    lam = float(n - 1) * (p + q)
    act_lo = np.zeros(1, dtype=np.int64)
    act_hi = np.full(1, n - 1, dtype=np.int64)
    sums = np.zeros((4, len(x_idx)), dtype=np.int64)
    for r in range(lo, hi):
        gen = RngStream(master_seed, (params["tag"], r)).generator()
        occ = (gen.random(n) < dens).astype(np.uint8).reshape(1, n)
        init_idx = np.flatnonzero(occ[0])
        n_ev = gen.poisson(lam * t)
        flags = _kernels.evolve_layers(
            occ, act_lo, act_hi, _E0, _E0, _E0, _E0.copy(), _E0.copy(),
            False, p, q, n_ev, zone, gen,
        )
        if flags & _kernels.FLAG_BOUNDARY:
            raise BoundaryContamination("particle reached the window boundary zone")
        j = _currents(init_idx, np.flatnonzero(occ[0]), origin, x_idx)
        jj = j * j
        sums[0] += j
        sums[1] += jj
        sums[2] += jj * j
        sums[3] += jj * jj
    return {"j_sums": sums, "n": hi - lo}


def two_point_chunk(params: dict, master_seed: int, lo: int, hi: int) -> dict:
    """Stationary-start replicas: centered products (w_j(t)-rho)(w_0(0)-rho)."""
    seg, n, origin, dens = _chunk_setup(params)
    zone = flag_zone(params["plan"])
    p, q, t, rho = params["p"], params["q"], params["t"], params["rho"]
    j_idx = np.array([seg.index(j) for j in params["j_sites"]], dtype=np.int64)
    lam = float(n - 1) * (p + q)
    act_lo = np.zeros(1, dtype=np.int64)
    act_hi = np.full(1, n - 1, dtype=np.int64)
    s1 = np.zeros(len(j_idx))
    s2 = np.zeros(len(j_idx))
    for r in range(lo, hi):
        gen = RngStream(master_seed, (params["tag"], r)).generator()
        occ = (gen.random(n) < dens).astype(np.uint8).reshape(1, n)
        w0 = float(occ[0, origin]) - rho
        n_ev = gen.poisson(lam * t)
        flags = _kernels.evolve_layers(
            occ, act_lo, act_hi, _E0, _E0, _E0, _E0.copy(), _E0.copy(),
            False, p, q, n_ev, zone, gen,
        )
        if flags & _kernels.FLAG_BOUNDARY:
            raise BoundaryContamination("particle reached the window boundary zone")
        z = (occ[0, j_idx] - rho) * w0
        s1 += z
        s2 += z * z
    return {"z_sum": s1, "z_sq": s2, "n": hi - lo}


def tracker_chunk(params: dict, master_seed: int, lo: int, hi: int) -> dict:
    """Second-class tracker replicas: histogram of the tracked position."""
    seg, n, origin, dens = _chunk_setup(params)
    zone = flag_zone(params["plan"])
    p, q, t = params["p"], params["q"], params["t"]
    lam = float(n - 1) * (p + q)
    act_lo = np.zeros(1, dtype=np.int64)
    act_hi = np.full(1, n - 1, dtype=np.int64)
    tb = np.zeros(1, dtype=np.int64)
    tref = np.full(1, -1, dtype=np.int64)
    tmode = np.zeros(1, dtype=np.int64)
    hist = np.zeros(n, dtype=np.int64)
    for r in range(lo, hi):
        gen = RngStream(master_seed, (params["tag"], r)).generator()
        occ = (gen.random(n) < dens).astype(np.uint8).reshape(1, n)
        occ[0, origin] = 0
        tq = np.array([origin], dtype=np.int64)
        n_ev = gen.poisson(lam * t)
        flags = _kernels.evolve_layers(
            occ, act_lo, act_hi, tb, tref, tmode, tq, _E0.copy(),
            False, p, q, n_ev, zone, gen,
        )
        if flags & _kernels.FLAG_BOUNDARY:
            raise BoundaryContamination("particle reached the window boundary zone")
        hist[tq[0]] += 1
    return {"q_hist": hist, "n": hi - lo}


def tracker_series_chunk(params: dict, master_seed: int, lo: int, hi: int) -> dict:
    """Tracker replicas observed at several times along one path."""
    seg, n, origin, dens = _chunk_setup(params)
    zone = flag_zone(params["plan"])
    p, q = params["p"], params["q"]
    t_list = params["t_list"]
    lam = float(n - 1) * (p + q)
    act_lo = np.zeros(1, dtype=np.int64)
    act_hi = np.full(1, n - 1, dtype=np.int64)
    tb = np.zeros(1, dtype=np.int64)
    tref = np.full(1, -1, dtype=np.int64)
    tmode = np.zeros(1, dtype=np.int64)
    hist = np.zeros((len(t_list), n), dtype=np.int64)
    for r in range(lo, hi):
        gen = RngStream(master_seed, (params["tag"], r)).generator()
        occ = (gen.random(n) < dens).astype(np.uint8).reshape(1, n)
        occ[0, origin] = 0
        tq = np.array([origin], dtype=np.int64)
        t_prev = 0.0
        for k, t_k in enumerate(t_list):
            n_ev = gen.poisson(lam * (t_k - t_prev))
            flags = _kernels.evolve_layers(
                occ, act_lo, act_hi, tb, tref, tmode, tq, _E0.copy(),
                False, p, q, n_ev, zone, gen,
            )
            if flags & _kernels.FLAG_BOUNDARY:
                raise BoundaryContamination("particle reached the window boundary zone")
            hist[k, tq[0]] += 1
            t_prev = t_k
    return {"q_hist": hist, "n": hi - lo}


def derivative_chunk(params: dict, master_seed: int, lo: int, hi: int) -> dict:
    """Monotone-coupled current difference between densities rho +/- delta."""
    plan: WindowPlan = params["plan"]
    seg = plan.segment
    n = seg.n_sites
    origin = seg.index(0)
    dens_hi = plan.densities(params["rho"] + params["delta"])
    dens_lo = plan.densities(params["rho"] - params["delta"])
    zone = flag_zone(plan)
    p, q, t = params["p"], params["q"], params["t"]
    z_idx = np.array([seg.index(params["z"])], dtype=np.int64)
    lam = float(n - 1) * (p + q)
    act_lo = np.zeros(2, dtype=np.int64)
    act_hi = np.full(2, n - 1, dtype=np.int64)
    d_sum = 0
    d_sq = 0
    layers = np.empty((2, n), dtype=np.uint8)
    for r in range(lo, hi):
        gen = RngStream(master_seed, (params["tag"], r)).generator()
        u = gen.random(n)
        layers[0, :] = u < dens_hi
        layers[1, :] = u < dens_lo
        init_hi = np.flatnonzero(layers[0])
        init_lo = np.flatnonzero(layers[1])
        n_ev = gen.poisson(lam * t)
        flags = _kernels.evolve_layers(
            layers, act_lo, act_hi, _E0, _E0, _E0, _E0.copy(), _E0.copy(),
            False, p, q, n_ev, zone, gen,
        )
        if flags & _kernels.FLAG_BOUNDARY:
            raise BoundaryContamination("particle reached the window boundary zone")
        d = int(
            _currents(init_hi, np.flatnonzero(layers[0]), origin, z_idx)[0]
            - _currents(init_lo, np.flatnonzero(layers[1]), origin, z_idx)[0]
        )
        d_sum += d
        d_sq += d * d
    return {"d_sum": d_sum, "d_sq": d_sq, "n": hi - lo}


def locality_chunk(params: dict, master_seed: int, lo: int, hi: int) -> dict:
    """Full process vs reduced windows (-m, m) under shared clocks."""
    seg, n, origin, dens = _chunk_setup(params)
    p, q, t = params["p"], params["q"], params["t"]
    m_list = params["m_list"]
    n_lay = 1 + len(m_list)
    act_lo = np.zeros(n_lay, dtype=np.int64)
    act_hi = np.full(n_lay, n - 1, dtype=np.int64)
    for k, m in enumerate(m_list):
        act_lo[1 + k] = origin - m + 1
        act_hi[1 + k] = origin + m - 1
    lam = float(n - 1) * (p + q)
    diff = np.zeros(len(m_list), dtype=np.int64)
    layers = np.empty((n_lay, n), dtype=np.uint8)
    sites = seg.sites()
    for r in range(lo, hi):
        gen = RngStream(master_seed, (params["tag"], r)).generator()
        occ0 = (gen.random(n) < dens).astype(np.uint8)
        layers[0, :] = occ0
        for k, m in enumerate(m_list):
            layers[1 + k, :] = occ0 * ((sites > -m) & (sites < m))
        n_ev = gen.poisson(lam * t)
        _kernels.evolve_layers(
            layers, act_lo, act_hi, _E0, _E0, _E0, _E0.copy(), _E0.copy(),
            False, p, q, n_ev, 0, gen,
        )
        diff += np.abs(layers[1:, origin].astype(np.int64) - int(layers[0, origin]))
    return {"abs_diff": diff, "n": hi - lo}


def doubling_stationary_chunk(params: dict, master_seed: int, lo: int, hi: int) -> dict:
    """Stationary estimates on an auto window and its doubled version, coupled."""
    big: WindowPlan = params["plan_big"]
    small: WindowPlan = params["plan_small"]
    seg = big.segment
    n = seg.n_sites
    origin = seg.index(0)
    rho = params["rho"]
    p, q, t = params["p"], params["q"], params["t"]
    dens_big = big.densities(rho)
    sites = seg.sites()
    inside = (sites >= small.segment.lo) & (sites <= small.segment.hi)
    dens_small = np.zeros(n)
    dens_small[inside] = small.densities(rho)
    act_lo = np.array([0, seg.index(small.segment.lo)], dtype=np.int64)
    act_hi = np.array([n - 1, seg.index(small.segment.hi)], dtype=np.int64)
    x_idx = np.array([seg.index(x) for x in params["x_sites"]], dtype=np.int64)
    j_idx = np.array([seg.index(j) for j in params["j_sites"]], dtype=np.int64)
    lam = float(n - 1) * (p + q)
    j_sums = np.zeros((2, 4, len(x_idx)), dtype=np.int64)
    z_sum = np.zeros((2, len(j_idx)))
    z_sq = np.zeros((2, len(j_idx)))
    layers = np.empty((2, n), dtype=np.uint8)
    for r in range(lo, hi):
        gen = RngStream(master_seed, (params["tag"], r)).generator()
        u = gen.random(n)
        layers[0, :] = u < dens_big
        layers[1, :] = u < dens_small
        inits = [np.flatnonzero(layers[k]) for k in (0, 1)]
        w0 = [float(layers[k, origin]) - rho for k in (0, 1)]
        n_ev = gen.poisson(lam * t)
        _kernels.evolve_layers(
            layers, act_lo, act_hi, _E0, _E0, _E0, _E0.copy(), _E0.copy(),
            False, p, q, n_ev, 0, gen,
        )
        for k in (0, 1):
            jv = _currents(inits[k], np.flatnonzero(layers[k]), origin, x_idx)
            jj = jv * jv
            j_sums[k, 0] += jv
            j_sums[k, 1] += jj
            j_sums[k, 2] += jj * jv
            j_sums[k, 3] += jj * jj
            z = (layers[k, j_idx] - rho) * w0[k]
            z_sum[k] += z
            z_sq[k] += z * z
    return {"j_sums2": j_sums, "z_sum2": z_sum, "z_sq2": z_sq, "n": hi - lo}


def doubling_tracker_chunk(params: dict, master_seed: int, lo: int, hi: int) -> dict:
    """Tracked-discrepancy histograms on an auto window and its double, coupled."""
    big: WindowPlan = params["plan_big"]
    small: WindowPlan = params["plan_small"]
    seg = big.segment
    n = seg.n_sites
    origin = seg.index(0)
    rho = params["rho"]
    p, q, t = params["p"], params["q"], params["t"]
    dens_big = big.densities(rho, {0: 0.0})
    sites = seg.sites()
    inside = (sites >= small.segment.lo) & (sites <= small.segment.hi)
    dens_small = np.zeros(n)
    dens_small[inside] = small.densities(rho, {0: 0.0})
    act_lo = np.array([0, seg.index(small.segment.lo)], dtype=np.int64)
    act_hi = np.array([n - 1, seg.index(small.segment.hi)], dtype=np.int64)
    lam = float(n - 1) * (p + q)
    tb = np.array([0, 1], dtype=np.int64)
    tref = np.full(2, -1, dtype=np.int64)
    tmode = np.zeros(2, dtype=np.int64)
    hist = np.zeros((2, n), dtype=np.int64)
    layers = np.empty((2, n), dtype=np.uint8)
    for r in range(lo, hi):
        gen = RngStream(master_seed, (params["tag"], r)).generator()
        u = gen.random(n)
        layers[0, :] = u < dens_big
        layers[1, :] = u < dens_small
        tq = np.array([origin, origin], dtype=np.int64)
        n_ev = gen.poisson(lam * t)
        _kernels.evolve_layers(
            layers, act_lo, act_hi, tb, tref, tmode, tq, np.zeros(2, dtype=np.int64),
            False, p, q, n_ev, 0, gen,
        )
        hist[0, tq[0]] += 1
        hist[1, tq[1]] += 1
    return {"q_hist2": hist, "n": hi - lo}


# ---------------------------------------------------------------------------
# Estimators


def _plan_for(rates: Rates, t: float, window: int | None, obs_lo: int = 0, obs_hi: int = 0) -> WindowPlan:
    if window is None:
        return auto_window(rates, t, obs_lo, obs_hi)
    seg = Segment(obs_lo - window, obs_hi + window)
    return WindowPlan(seg, seg.lo, seg.hi)


def _check_replicas(replicas: int, minimum: int = 100) -> None:
    if replicas < minimum:
        raise ValueError(f"replica count {replicas} below minimum {minimum} for a usable CI")


def _hist_stats(hist: np.ndarray, seg: Segment, weight_fn) -> tuple[float, float, int]:
    n = int(hist.sum())
    w = weight_fn(seg.sites().astype(np.float64))
    s1 = float((hist * w).sum())
    s2 = float((hist * w * w).sum())
    mean = s1 / n
    var = max(s2 / n - mean * mean, 0.0) * n / max(n - 1, 1)
    return mean, math.sqrt(var / n), n


@dataclass
class TwoPointResult:
    """Both members of the two-point identity with per-offset CIs."""

    j_sites: np.ndarray
    covariance: list[EstimateWithCI]
    q_scaled: list[EstimateWithCI]  # rho (1-rho) P(Q(t) = j)
    q_norm: float  # total discrepancy-law mass inside the window

    def agreement_sigmas(self) -> np.ndarray:
        out = np.empty(len(self.j_sites))
        for k, (c, s) in enumerate(zip(self.covariance, self.q_scaled)):
            pooled = math.hypot(c.stderr, s.stderr)
            out[k] = abs(c.estimate - s.estimate) / pooled if pooled > 0 else 0.0
        return out

    @property
    def passed(self) -> bool:
        return bool(np.all(self.agreement_sigmas() <= 3.0))


def estimate_two_point(
    rho: float,
    rates: Rates,
    t: float,
    j_range: tuple[int, int],
    replicas: int,
    rng: RngStream,
    workers: int = 1,
    window: int | None = None,
) -> TwoPointResult:
    """Estimate Cov[w_j(t), w_0(0)] and rho(1-rho) P(Q(t)=j) from separate pools.

    The covariance side runs stationary-start replicas with products
    centered at the exact mean rho; the discrepancy side runs tracker
    replicas started from the paired initial law.  Both carry CIs.
    """
    _check_replicas(replicas)
    if not 0.0 < rho < 1.0:
        raise ValueError("density must be in (0, 1)")
    j_lo, j_hi = j_range
    j_sites = list(range(j_lo, j_hi + 1))
    plan = _plan_for(rates, t, window, min(j_lo, 0), max(j_hi, 0))
    base = {"rho": rho, "p": rates.p, "q": rates.q, "t": t, "plan": plan}
    cov_out = run_replicas(
        two_point_chunk, {**base, "j_sites": j_sites, "tag": 11}, replicas, rng.master_seed, workers
    )
    trk_out = run_replicas(
        tracker_chunk, {**base, "overrides": {0: 0.0}, "tag": 12}, replicas, rng.master_seed, workers
    )
    n = cov_out["n"]
    cov = []
    for k in range(len(j_sites)):
        mean = cov_out["z_sum"][k] / n
        var = max(cov_out["z_sq"][k] / n - mean * mean, 0.0) * n / (n - 1)
        cov.append(EstimateWithCI(mean, math.sqrt(var / n), n))
    hist = trk_out["q_hist"]
    m = trk_out["n"]
    scale = rho * (1.0 - rho)
    qs = []
    for j in j_sites:
        phat = hist[plan.segment.index(j)] / m
        qs.append(EstimateWithCI(scale * phat, scale * math.sqrt(phat * (1 - phat) / m), m))
    return TwoPointResult(np.array(j_sites), cov, qs, float(hist.sum() / m))


@dataclass
class IdentityCheck:
    """Two independently estimated members of one identity."""

    lhs: EstimateWithCI
    rhs: EstimateWithCI

    @property
    def difference(self) -> float:
        return self.lhs.estimate - self.rhs.estimate

    @property
    def pooled_stderr(self) -> float:
        return math.hypot(self.lhs.stderr, self.rhs.stderr)

    @property
    def sigmas(self) -> float:
        return abs(self.difference) / self.pooled_stderr if self.pooled_stderr > 0 else 0.0

    @property
    def passed(self) -> bool:
        return self.sigmas <= 3.0


def _variance_estimate(sums: np.ndarray, n: int) -> EstimateWithCI:
    """Unbiased sample variance of an integer sample from its power sums."""
    m1 = sums[0] / n
    m2 = sums[1] / n - m1 * m1
    m4 = sums[3] / n - 4 * m1 * sums[2] / n + 6 * m1 * m1 * sums[1] / n - 3 * m1**4
    s2 = m2 * n / (n - 1)
    var_of_var = max(m4 - (n - 3) / (n - 1) * s2 * s2, 0.0) / n
    return EstimateWithCI(float(s2), math.sqrt(var_of_var), n)


def variance_identity_check(
    rho: float,
    rates: Rates,
    t: float,
    z: int,
    replicas: int,
    rng: RngStream,
    workers: int = 1,
    window: int | None = None,
) -> IdentityCheck:
    """Var J_z(t) against rho(1-rho) E|Q(t) - z|, independent replica pools."""
    _check_replicas(replicas)
    if not 0.0 < rho < 1.0:
        raise ValueError("density must be in (0, 1)")
    plan = _plan_for(rates, t, window, min(z, 0), max(z, 0))
    base = {"rho": rho, "p": rates.p, "q": rates.q, "t": t, "plan": plan}
    cur = run_replicas(
        stationary_current_chunk, {**base, "x_sites": [z], "tag": 13},
        replicas, rng.master_seed, workers,
    )
    trk = run_replicas(
        tracker_chunk, {**base, "overrides": {0: 0.0}, "tag": 14},
        replicas, rng.master_seed, workers,
    )
    lhs = _variance_estimate(cur["j_sums"][:, 0].astype(np.float64), cur["n"])
    scale = rho * (1.0 - rho)
    mean, se, m = _hist_stats(trk["q_hist"], plan.segment, lambda s: np.abs(s - z))
    rhs = EstimateWithCI(scale * mean, scale * se, m)
    return IdentityCheck(lhs, rhs)


def derivative_identity_check(
    rho: float,
    delta: float,
    rates: Rates,
    t: float,
    z: int,
    replicas: int,
    rng: RngStream,
    workers: int = 1,
    window: int | None = None,
) -> IdentityCheck:
    """Central difference of E J_z(t) in the density against E Q(t) - z.

    The two stationary pools at rho +/- delta share initial uniforms and
    clocks (monotone coupling) so the difference has low variance.
    """
    _check_replicas(replicas)
    if not (0.0 < rho - delta and rho + delta < 1.0):
        raise ValueError("need 0 < rho - delta and rho + delta < 1")
    plan = _plan_for(rates, t, window, min(z, 0), max(z, 0))
    diff = run_replicas(
        derivative_chunk,
        {"rho": rho, "delta": delta, "p": rates.p, "q": rates.q, "t": t,
         "plan": plan, "z": z, "tag": 15},
        replicas, rng.master_seed, workers,
    )
    n = diff["n"]
    mean_d = diff["d_sum"] / n
    var_d = max(diff["d_sq"] / n - mean_d * mean_d, 0.0) * n / (n - 1)
    lhs = EstimateWithCI(mean_d / (2 * delta), math.sqrt(var_d / n) / (2 * delta), n)
    trk = run_replicas(
        tracker_chunk,
        {"rho": rho, "p": rates.p, "q": rates.q, "t": t, "plan": plan,
         "overrides": {0: 0.0}, "tag": 16},
        replicas, rng.master_seed, workers,
    )
    mean, se, m = _hist_stats(trk["q_hist"], plan.segment, lambda s: s - z)
    rhs = EstimateWithCI(mean, se, m)
    no_signal = var_d == 0.0 and mean_d == 0.0
    if no_signal or lhs.z_mult * lhs.stderr > max(abs(mean_d), 1e-12):
        warnings.warn(
            f"delta={delta} too small for Monte Carlo resolution: CI halfwidth "
            f"{lhs.z_mult * lhs.stderr:.3g} vs difference scale {abs(mean_d):.3g}",
            stacklevel=2,
        )
    return IdentityCheck(lhs, rhs)


def mean_current_estimate(
    rho: float,
    rates: Rates,
    t: float,
    x: int,
    replicas: int,
    rng: RngStream,
    workers: int = 1,
    window: int | None = None,
) -> EstimateWithCI:
    """Monte Carlo E J_x(t) in the stationary process."""
    _check_replicas(replicas)
    plan = _plan_for(rates, t, window, min(x, 0), max(x, 0))
    out = run_replicas(
        stationary_current_chunk,
        {"rho": rho, "p": rates.p, "q": rates.q, "t": t, "plan": plan,
         "x_sites": [x], "tag": 17},
        replicas, rng.master_seed, workers,
    )
    n = out["n"]
    s = out["j_sums"][:, 0].astype(np.float64)
    mean = s[0] / n
    var = max(s[1] / n - mean * mean, 0.0) * n / (n - 1)
    return EstimateWithCI(mean, math.sqrt(var / n), n)


def _tracker_hist(
    rho: float, rates: Rates, t: float, replicas: int, rng: RngStream,
    workers: int, window: int | None, tag: int = 18,
) -> tuple[np.ndarray, Segment, int]:
    plan = _plan_for(rates, t, window)
    out = run_replicas(
        tracker_chunk,
        {"rho": rho, "p": rates.p, "q": rates.q, "t": t, "plan": plan,
         "overrides": {0: 0.0}, "tag": tag},
        replicas, rng.master_seed, workers,
    )
    return out["q_hist"], plan.segment, out["n"]


def mean_q_estimate(
    rho: float, rates: Rates, t: float, replicas: int, rng: RngStream,
    workers: int = 1, window: int | None = None,
) -> EstimateWithCI:
    """Monte Carlo E Q(t) for the tracked discrepancy started at the origin."""
    _check_replicas(replicas)
    hist, seg, n = _tracker_hist(rho, rates, t, replicas, rng, workers, window)
    mean, se, n = _hist_stats(hist, seg, lambda s: s)
    return EstimateWithCI(mean, se, n)


def estimate_moment(
    rho: float, rates: Rates, t: float, m: float, replicas: int, rng: RngStream,
    workers: int = 1, window: int | None = None,
) -> EstimateWithCI:
    """Monte Carlo E |Q(t) - V t|^m across tracker replicas."""
    _check_replicas(replicas)
    if m < 1:
        raise ValueError("moment order must be >= 1")
    if t < 1:
        raise ValueError("moment estimates are defined for t >= 1")
    if not 0.0 <= rho <= 1.0:
        raise ValueError("density outside [0, 1]")
    v = char_speed(rho, rates)
    hist, seg, n = _tracker_hist(rho, rates, t, replicas, rng, workers, window)
    mean, se, n = _hist_stats(hist, seg, lambda s: np.abs(s - v * t) ** m)
    return EstimateWithCI(mean, se, n)


def estimate_psi(
    rho: float, rates: Rates, t: float, replicas: int, rng: RngStream,
    workers: int = 1, window: int | None = None,
) -> EstimateWithCI:
    """Psi(t) = E |Q(t) - V t|, the first absolute centered moment."""
    return estimate_moment(rho, rates, t, 1.0, replicas, rng, workers, window)


@dataclass
class PsiSeries:
    """Centered absolute-moment estimates along a time grid."""

    t_values: np.ndarray
    estimates: list[EstimateWithCI]

    def __post_init__(self):
        self.t_values = np.asarray(self.t_values, dtype=np.float64)
        if np.any(self.t_values < 1.0):
            raise ValueError("the series is defined for t >= 1")
        if any(e.estimate < 0 for e in self.estimates):
            raise ValueError("estimates must be nonnegative")


def psi_series(
    rho: float, rates: Rates, t_list: Sequence[float], replicas: int, rng: RngStream,
    workers: int = 1, window: int | None = None,
) -> PsiSeries:
    """Psi along a time grid from one replica pool observed at each time.

    One window sized for the largest time serves the whole grid, so the
    estimates share paths (valid pointwise, and monotone across times).
    """
    _check_replicas(replicas)
    t_list = sorted(float(t) for t in t_list)
    if t_list[0] < 1.0:
        raise ValueError("the series is defined for t >= 1")
    plan = _plan_for(rates, max(t_list), window)
    out = run_replicas(
        tracker_series_chunk,
        {"rho": rho, "p": rates.p, "q": rates.q, "t_list": t_list, "plan": plan,
         "overrides": {0: 0.0}, "tag": 19},
        replicas, rng.master_seed, workers,
    )
    v = char_speed(rho, rates)
    ests = []
    for k, t_k in enumerate(t_list):
        mean, se, n = _hist_stats(out["q_hist"][k], plan.segment, lambda s: np.abs(s - v * t_k))
        ests.append(EstimateWithCI(mean, se, n))
    return PsiSeries(np.array(t_list), ests)


@dataclass(frozen=True)
class ExponentFit:
    slope: float
    stderr: float
    intercept: float


def fit_exponent(series: PsiSeries) -> ExponentFit:
    """Least-squares slope of log Psi against log t with its regression stderr."""
    t = series.t_values
    y = np.array([e.estimate for e in series.estimates])
    if len(t) < 3:
        raise ValueError("need at least 3 points to fit an exponent")
    if len(np.unique(t)) != len(t):
        raise ValueError("time points must be distinct")
    if np.any(y <= 0):
        raise ValueError("degenerate series: nonpositive estimates")
    x = np.log(t)
    ly = np.log(y)
    xc = x - x.mean()
    slope = float((xc * ly).sum() / (xc * xc).sum())
    intercept = float(ly.mean() - slope * x.mean())
    resid = ly - intercept - slope * x
    dof = len(t) - 2
    se = math.sqrt(max((resid * resid).sum() / dof, 0.0) / (xc * xc).sum()) if dof > 0 else 0.0
    return ExponentFit(slope, se, intercept)
