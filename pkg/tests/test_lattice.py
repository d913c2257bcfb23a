import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from aseplab.lattice import (
    Configuration,
    DensityProfile,
    Rates,
    Ring,
    Segment,
    char_speed,
    flux,
    mean_current,
    sample_config,
)
from aseplab.rng import RngStream


class TestRates:
    def test_theta(self):
        assert Rates(1.0).theta == 1.0
        assert abs(Rates(0.6).theta - 0.2) < 1e-15

    @pytest.mark.parametrize("p,q", [(0.5, 0.5), (0.4, 0.6), (1.1, -0.1), (0.7, 0.2)])
    def test_rejects_bad_rates(self, p, q):
        with pytest.raises(ValueError):
            Rates(p, q)


class TestTopology:
    def test_segment(self):
        seg = Segment(-3, 4)
        assert seg.n_sites == 8 and seg.n_pairs == 7
        assert seg.index(-3) == 0 and seg.index(4) == 7
        with pytest.raises(KeyError):
            seg.index(5)
        with pytest.raises(ValueError):
            Segment(2, 2)

    def test_ring(self):
        assert Ring(6).n_pairs == 6
        assert Ring(6).index(-1) == 5
        with pytest.raises(ValueError):
            Ring(1)


class TestConfiguration:
    def test_validation(self):
        seg = Segment(0, 3)
        with pytest.raises(ValueError):
            Configuration(seg, np.array([1, 0, 2, 0], dtype=np.uint8))
        with pytest.raises(ValueError):
            Configuration(seg, np.zeros(3, dtype=np.uint8))

    def test_positions_and_density(self):
        c = Configuration.from_sites(Segment(-2, 2), [-2, 1])
        assert c.positions().tolist() == [-2, 1]
        assert c.n_particles == 2
        assert c[1] == 1 and c[0] == 0


class TestSampleConfig:
    def test_zero_density_vacant(self):
        c = sample_config(Segment(0, 99), DensityProfile.constant(0.0), RngStream(1))
        assert c.n_particles == 0

    def test_full_density_occupied(self):
        c = sample_config(Segment(0, 99), DensityProfile.constant(1.0), RngStream(1))
        assert c.n_particles == 100

    def test_monotone_coupling_paper_example(self):
        s = RngStream(77, 3)
        lo = sample_config(Segment(-50, 49), DensityProfile.constant(0.3), s)
        hi = sample_config(Segment(-50, 49), DensityProfile.constant(0.7), s)
        assert hi.dominates(lo)

    def test_monotone_coupling_many_seeds(self):
        # vectorized equivalent of >= 1e4 seeded draws at two ordered densities
        n_seeds, n_sites = 10000, 32
        u = np.vstack([RngStream(5, (0, k)).generator().random(n_sites) for k in range(n_seeds)])
        assert np.all((u < 0.25) <= (u < 0.65))

    def test_empirical_density(self):
        n = 10000
        rho = 0.37
        c = sample_config(Segment(0, n - 1), DensityProfile.constant(rho), RngStream(8))
        assert abs(c.density() - rho) <= 4 * np.sqrt(rho * (1 - rho) / n)

    def test_profile_overrides_and_mismatch(self):
        seg = Segment(-2, 2)
        prof = DensityProfile.constant(0.5, {0: 1.0, 2: 0.0})
        c = sample_config(seg, prof, RngStream(3))
        assert c[0] == 1 and c[2] == 0
        with pytest.raises(ValueError):
            sample_config(seg, DensityProfile(np.full(7, 0.5)), RngStream(3))
        with pytest.raises(ValueError):
            DensityProfile.constant(1.2)


class TestFormulas:
    def test_flux_values(self):
        assert flux(0.5, Rates(1.0)) == 0.25
        assert flux(0.0, Rates(0.8, 0.2)) == 0.0
        assert abs(flux(0.3, Rates(0.8, 0.2)) - 0.126) < 1e-15

    def test_speed_values(self):
        assert char_speed(0.5, Rates(0.9, 0.1)) == 0.0
        assert char_speed(0.0, Rates(1.0)) == 1.0

    def test_mean_current_values(self):
        assert mean_current(0.5, Rates(1.0), 0, 10.0) == 2.5
        # at x=0 the mean current is exactly t * flux
        assert mean_current(0.3, Rates(0.8, 0.2), 0, 7.0) == 7.0 * flux(0.3, Rates(0.8, 0.2))

    def test_domain_errors(self):
        with pytest.raises(ValueError):
            flux(-0.1, Rates(1.0))
        with pytest.raises(ValueError):
            char_speed(1.5, Rates(1.0))
        with pytest.raises(ValueError):
            mean_current(0.5, Rates(1.0), 0, -1.0)

    @given(rho=st.floats(0.0, 1.0), p=st.floats(0.51, 1.0))
    @settings(max_examples=60, deadline=None)
    def test_particle_hole_symmetry(self, rho, p):
        rates = Rates(p)
        assert flux(rho, rates) == pytest.approx(flux(1.0 - rho, rates), abs=1e-12)
        assert char_speed(rho, rates) == pytest.approx(-char_speed(1.0 - rho, rates), abs=1e-12)
