import numpy as np
import pytest
from scipy import stats

from aseplab.engine import (
    General,
    NearestNeighbor,
    auto_window,
    check_product_invariance,
    run,
    run_general,
    run_reduced,
)
from aseplab.lattice import Configuration, DensityProfile, Rates, Ring, Segment, sample_config
from aseplab.oracle import product_invariance_residual
from aseplab.rng import RngStream


def bern(seg, rho, stream, overrides=None):
    return sample_config(seg, DensityProfile.constant(rho, overrides or {}), stream)


class TestRun:
    def test_empty_config(self):
        traj = run(Configuration.empty(Segment(-5, 5)), NearestNeighbor(Rates(1.0)), 3.0, RngStream(2))
        assert traj.final.n_particles == 0
        assert traj.effected.sum() == 0

    def test_particle_conservation_and_exclusion(self):
        seg = Segment(-20, 20)
        for seed in range(5):
            s = RngStream(seed)
            cfg = bern(seg, 0.5, s.child(0))
            traj = run(cfg, NearestNeighbor(Rates(0.7, 0.3)), 2.0, s.child(1))
            assert traj.final.n_particles == cfg.n_particles
            # replay the log and re-assert exclusion at every effected move
            occ = cfg.occupancy.copy()
            for o, d, eff in zip(traj.origins, traj.targets, traj.effected):
                if eff:
                    assert occ[o - seg.lo] == 1 and occ[d - seg.lo] == 0
                    occ[o - seg.lo] = 0
                    occ[d - seg.lo] = 1
            assert np.array_equal(occ, traj.final.occupancy)

    def test_event_times_strictly_increasing(self):
        s = RngStream(3)
        cfg = bern(Segment(-15, 15), 0.5, s.child(0))
        traj = run(cfg, NearestNeighbor(Rates(1.0)), 2.0, s.child(1))
        assert np.all(np.diff(traj.times) > 0)

    def test_determinism_bit_for_bit(self):
        s = RngStream(11)
        cfg = bern(Segment(-10, 10), 0.4, s.child(0))
        t1 = run(cfg, NearestNeighbor(Rates(0.8, 0.2)), 1.5, s.child(1))
        t2 = run(cfg, NearestNeighbor(Rates(0.8, 0.2)), 1.5, s.child(1))
        assert np.array_equal(t1.times, t2.times)
        assert np.array_equal(t1.origins, t2.origins)
        assert np.array_equal(t1.effected, t2.effected)
        assert np.array_equal(t1.final.occupancy, t2.final.occupancy)

    def test_single_particle_poisson_walk_desk(self):
        # lone TASEP particle: displacement at t is Poisson(t)
        plan = auto_window(Rates(1.0), 3.0)
        seg = plan.segment
        cfg = Configuration.from_sites(seg, [0])
        disp = []
        for r in range(400):
            traj = run(cfg, NearestNeighbor(Rates(1.0)), 3.0, RngStream(21, r), record_log=False)
            disp.append(int(traj.final.positions()[0]))
        disp = np.array(disp)
        assert abs(disp.mean() - 3.0) < 4 * np.sqrt(3.0 / len(disp))
        assert abs(disp.var() - 3.0) < 1.0

    def test_hooks(self):
        cfg = Configuration.from_sites(Segment(-3, 3), [0])
        traj = run(cfg, NearestNeighbor(Rates(1.0)), 1.0, RngStream(4),
                   hooks={"moves": lambda tr: int(tr.effected.sum())})
        assert traj.hooks["moves"] == traj.effected.sum()

    def test_ring_conserves(self):
        ring = Ring(6)
        cfg = Configuration.from_sites(ring, [0, 2, 4])
        traj = run(cfg, NearestNeighbor(Rates(0.7, 0.3)), 2.0, RngStream(5))
        assert traj.final.n_particles == 3


class TestRunGeneral:
    def test_constant_r1_identical_logs(self):
        s = RngStream(31)
        cfg = bern(Segment(-12, 12), 0.5, s.child(0))
        model = General.from_functions(1, [lambda w: 0.7], [lambda w: 0.3])
        t1 = run(cfg, NearestNeighbor(Rates(0.7, 0.3)), 2.0, s.child(1))
        t2 = run_general(cfg, model, 2.0, s.child(1))
        assert np.array_equal(t1.times, t2.times)
        assert np.array_equal(t1.origins, t2.origins)
        assert np.array_equal(t1.targets, t2.targets)
        assert np.array_equal(t1.effected, t2.effected)
        assert np.array_equal(t1.final.occupancy, t2.final.occupancy)

    def test_single_particle_tasep_tables(self):
        model = General.from_functions(1, [lambda w: 1.0], [lambda w: 0.0])
        plan = auto_window(Rates(1.0), 2.0)
        cfg = Configuration.from_sites(plan.segment, [0])
        disp = []
        for r in range(300):
            traj = run_general(cfg, model, 2.0, RngStream(32, r), record_log=False)
            disp.append(int(traj.final.positions()[0]))
        assert abs(np.mean(disp) - 2.0) < 4 * np.sqrt(2.0 / len(disp))

    def test_window_too_small(self):
        model = General.from_functions(
            2, [lambda w: 0.5, lambda w: 0.25], [lambda w: 0.0, lambda w: 0.0]
        )
        with pytest.raises(ValueError, match="too small"):
            run_general(Configuration.empty(Segment(0, 3)), model, 1.0, RngStream(1))

    def test_table_validation(self):
        with pytest.raises(ValueError):
            General(1, np.full((1, 8), 1.5), np.full((1, 8), 0.0))

    def test_r2_flux_against_product_formula(self):
        # jump sizes 1 and 2 at constant rates; Bernoulli stays invariant and
        # the mean edge flux is sum_k k E[p_k eff - q_k eff] under the product law
        from aseplab._kernels import evolve_general_ring, warm_up

        warm_up()
        rho = 0.4
        model = General.from_functions(
            2, [lambda w: 0.5, lambda w: 0.25], [lambda w: 0.0, lambda w: 0.0]
        )
        verdict = check_product_invariance(model, rho, 1.0, 4000, RngStream(33), ring_sites=20)
        assert verdict.passed, f"product law should be invariant: {verdict}"
        # H(rho) for constant rates: sum_k k * rate_k * rho * (1 - rho)
        h_ref = 1 * 0.5 * rho * (1 - rho) + 2 * 0.25 * rho * (1 - rho)
        n, t, reps = 24, 2.0, 6000
        disp = 0.0
        for r in range(reps):
            gen = RngStream(34, r).generator()
            occ = (gen.random(n) < rho).astype(np.uint8)
            disp += evolve_general_ring(occ, 2, model.p_tables, model.q_tables, t, gen)
        est = disp / (reps * n * t)
        se = np.sqrt(0.5 / (reps * n * t))  # loose bound on the flux estimator noise
        assert abs(est - h_ref) < 4 * se + 0.01


class TestRunReduced:
    def test_full_window_identical_to_run(self):
        s = RngStream(41)
        seg = Segment(-8, 8)
        cfg = bern(seg, 0.5, s.child(0))
        t1 = run(cfg, NearestNeighbor(Rates(1.0)), 1.0, s.child(1))
        t2 = run_reduced(cfg, (seg.lo - 1, seg.hi + 1), NearestNeighbor(Rates(1.0)), 1.0, s.child(1))
        assert np.array_equal(t1.times, t2.times)
        assert np.array_equal(t1.effected, t2.effected)
        assert np.array_equal(t1.final.occupancy, t2.final.occupancy)

    def test_delta0_frozen_in_tiny_window(self):
        cfg = Configuration.from_sites(Segment(-5, 5), [0])
        traj = run_reduced(cfg, (-1, 1), NearestNeighbor(Rates(1.0)), 5.0, RngStream(42))
        assert traj.final[0] == 1
        assert traj.effected.sum() == 0

    def test_degenerate_window(self):
        cfg = Configuration.empty(Segment(-5, 5))
        with pytest.raises(ValueError, match="degenerate"):
            run_reduced(cfg, (0, 1), NearestNeighbor(Rates(1.0)), 1.0, RngStream(1))

    def test_shared_clocks_couple_full_and_reduced(self):
        # outside the influence cone of the window boundary, paths agree
        s = RngStream(43)
        seg = Segment(-30, 30)
        cfg = bern(seg, 0.5, s.child(0))
        full = run(cfg, NearestNeighbor(Rates(1.0)), 0.5, s.child(1), record_log=False)
        reduced_cfg = Configuration(seg, cfg.occupancy * (np.abs(seg.sites()) < 20))
        red = run_reduced(reduced_cfg, (-20, 20), NearestNeighbor(Rates(1.0)), 0.5, s.child(1),
                          record_log=False)
        mid = slice(seg.index(-5), seg.index(5) + 1)
        assert np.array_equal(full.final.occupancy[mid], red.final.occupancy[mid])

    def test_locality_error_decays_in_window_width(self):
        from aseplab.observables import locality_chunk
        from aseplab.parallel import run_replicas

        plan = auto_window(Rates(1.0), 1.0)
        m_list = [2, 4, 6, 8, 10, 12, 14, 16]
        out = run_replicas(
            locality_chunk,
            {"rho": 0.5, "p": 1.0, "q": 0.0, "t": 1.0, "plan": plan,
             "m_list": m_list, "tag": 91},
            100000, 77, workers=2,
        )
        rate = out["abs_diff"] / out["n"]
        pos = rate > 0
        assert pos.sum() >= 3, f"need enough nonzero points, got {rate}"
        slope = np.polyfit(np.array(m_list)[pos], np.log(rate[pos]), 1)[0]
        assert slope < 0, f"coupling error should decay: {rate}"
        # monotone within noise: each successive estimate no larger than 3x prior
        assert np.all(rate[1:][pos[1:]] <= np.maximum(rate[:-1][pos[1:]] * 3, 1e-9))


class TestProductInvariance:
    def test_nearest_neighbor_passes(self):
        rep = check_product_invariance(
            NearestNeighbor(Rates(0.7, 0.3)), 0.5, 1.0, 4000, RngStream(51)
        )
        assert rep.passed and rep.verdict == "PASS"

    def test_constant_general_passes(self):
        model = General.from_functions(1, [lambda w: 0.7], [lambda w: 0.3])
        rep = check_product_invariance(model, 0.5, 1.0, 4000, RngStream(52))
        assert rep.passed

    def test_facilitated_fails_and_matches_exact_residual(self):
        fac = General.from_functions(1, [lambda w: float(w[0])], [lambda w: 0.0])
        rep = check_product_invariance(fac, 0.5, 1.0, 8000, RngStream(53))
        assert not rep.passed
        # exact stationarity verdicts on the tiny ring agree
        assert product_invariance_residual(fac, 6, 0.5) > 1e-3
        assert product_invariance_residual(NearestNeighbor(Rates(0.7, 0.3)), 6, 0.5) < 1e-13


class TestClockSuite:
    def test_per_edge_streams_are_poisson(self):
        # accepted attempts on a directed edge form a rate-p Poisson stream,
        # independent across edges
        seg = Segment(0, 9)
        cfg = Configuration(seg, np.ones(10, dtype=np.uint8))  # jam: no moves, pure clock log
        p = 0.7
        traj = run(cfg, NearestNeighbor(Rates(p, 0.3)), 400.0, RngStream(61))
        right = (traj.targets - traj.origins) == 1
        edge0 = np.sort(traj.times[right & (traj.origins == 3)])
        gaps = np.diff(edge0)
        # attempts at rate 1 per directed edge
        ks = stats.kstest(gaps, "expon")
        assert ks.pvalue > 0.001, "attempt gaps should be exponential"
        counts = [
            np.histogram(traj.times[right & (traj.origins == o)], bins=40, range=(0, 400))[0]
            for o in (2, 3)
        ]
        corr = np.corrcoef(counts[0], counts[1])[0, 1]
        assert abs(corr) < 0.5, "distinct directed edges must be independent"


class TestAutoWindow:
    def test_plan_contains_buffer(self):
        plan = auto_window(Rates(1.0), 4.0)
        assert plan.segment.lo < plan.core_lo < plan.core_hi < plan.segment.hi
        dens = plan.densities(0.5)
        assert dens[0] == 0.0 and dens[-1] == 0.0
        assert dens[plan.segment.index(0)] == 0.5

    def test_tiny_manual_window_contaminates(self):
        from aseplab.engine import WindowPlan
        from aseplab.observables import BoundaryContamination, stationary_current_chunk

        seg = Segment(-12, 12)
        plan = WindowPlan(seg, -4, 4)  # vacant margin too thin for t = 4
        with pytest.raises(BoundaryContamination):
            stationary_current_chunk(
                {"rho": 0.6, "p": 1.0, "q": 0.0, "t": 4.0, "plan": plan,
                 "x_sites": [0], "tag": 92},
                7, 0, 200,
            )
