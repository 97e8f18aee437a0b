#!/usr/bin/env python3
"""
Tests for stable densities, semigroup oracles and the moment recursion
"""

import pytest
import numpy as np
import sys
import os

# Add app directory to path for imports
sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..', 'app'))

from branching import ParticlePopulation, simulate_population
from errors import ParameterDomainError, ParameterGateError
from monte_carlo import ReplicaRunner, mean_and_stderr, replica_stream
from stable_motion import StableLaw, survival_fraction
from moments import (FullSpaceOracle, KappaKilledOracle, MomentRecursion, PathKilledOracle, TimeGrid,
                     check_vn_envelopes, default_delta0, moments_of, raw_from_cumulants, stable_cdf, stable_density, v_n)


def ones(x):
    return np.ones_like(np.asarray(x, dtype=float))


class TestStableDensity:
    """Test the tabulated stable density"""

    @pytest.fixture
    def cauchy(self):
        return StableLaw.from_alpha(1.0)

    def test_cauchy_density(self, cauchy):
        """Test p_1 against the Cauchy density, table and tail"""
        x = np.array([0.0, 0.5, 1.0, 3.0, 10.0, 49.0, 60.0, 200.0])
        np.testing.assert_allclose(stable_density(cauchy, 1.0, x), 1.0 / (np.pi * (1.0 + x ** 2)), rtol=1e-5)

    def test_cauchy_cdf(self, cauchy):
        """Test the distribution function against arctan"""
        x = np.array([-80.0, -3.0, -0.2, 0.0, 0.7, 12.0, 55.0])
        np.testing.assert_allclose(stable_cdf(cauchy, 1.0, x), 0.5 + np.arctan(x) / np.pi, atol=1e-7)

    def test_scaling(self, cauchy):
        """Test p_t(x) = t^-1 p_1(x / t) for alpha = 1"""
        assert stable_density(cauchy, 2.0, 1.0) == pytest.approx(0.5 * stable_density(cauchy, 1.0, 0.5), rel=1e-12)

    def test_time_domain(self, cauchy):
        """Test rejection of t <= 0"""
        with pytest.raises(ParameterDomainError):
            stable_density(cauchy, 0.0, 1.0)


class TestOracles:
    """Test semigroup oracles"""

    def test_full_space_rows_sum_to_one(self):
        """Test the full-space oracle preserves constants"""
        oracle = FullSpaceOracle(StableLaw.from_alpha(0.5), half_width=5.0, spacing=0.1)
        matrix = oracle.matrix(0.3)
        np.testing.assert_allclose(matrix.sum(axis=1), 1.0, atol=1e-12)
        assert np.all(matrix >= -1e-9)
        np.testing.assert_allclose(oracle.apply(oracle.sample(ones), 0.7), 1.0, atol=1e-12)

    def test_full_space_identity_at_zero(self):
        """Test P_0 is the identity"""
        oracle = FullSpaceOracle(StableLaw.from_alpha(1.0), half_width=2.0, spacing=0.5)
        np.testing.assert_array_equal(oracle.matrix(0.0), np.eye(8))

    def test_killed_oracle(self):
        """Test the killed surrogate is non-negative on a grid inside the ball"""
        oracle = KappaKilledOracle(StableLaw.from_alpha(0.5), 1.0, level=0)
        matrix = oracle.matrix(0.1)
        assert np.all(matrix >= 0)
        assert np.all(np.abs(oracle.grid) < 1.0)
        values = oracle.sample(ones)
        np.testing.assert_array_equal(oracle.apply(values, 0.0), values)

    def test_path_killed_oracle(self):
        """Test P_s^R 1 is the killed survival fraction"""
        law = StableLaw.from_alpha(0.5)
        oracle = PathKilledOracle(law, 1.0, np.array([0.0]), 1000, replica_stream(21))
        value = oracle.apply(oracle.sample(ones), 0.32)
        expected = survival_fraction(law, 1.0, 0.0, 0.32, 0.32 / 32, 1000, replica_stream(21))
        assert value[0] == pytest.approx(expected)
        with pytest.raises(ParameterDomainError):
            PathKilledOracle(law, 1.0, np.array([1.0]), 10, replica_stream(0))


class TestTimeGrid:
    """Test the graded time quadrature"""

    def test_graded_toward_both_ends(self):
        """Test the panels are mirror images around s/2 and shrink toward 0 and s"""
        grid = TimeGrid(0.5)
        widths = np.diff(grid.breaks)
        assert grid.n_panels == 8
        assert grid.breaks[0] == 0.0
        assert grid.breaks[-1] == 0.5
        np.testing.assert_allclose(widths, widths[::-1], rtol=1e-12)
        assert widths[0] < widths[1] < widths[3]
        assert widths[-1] < widths[-2] < widths[-4]
        assert widths[-1] == pytest.approx(0.5 * 0.5 * 1e-3)

    def test_weights_integrate_polynomials(self):
        """Test the rule integrates u^5 exactly on (0, s)"""
        grid = TimeGrid(0.8, panels=6)
        assert np.sum(grid.weights) == pytest.approx(0.8, rel=1e-12)
        assert np.sum(grid.weights * grid.nodes ** 5) == pytest.approx(0.8 ** 6 / 6.0, rel=1e-10)

    def test_two_panels_split_at_midpoint(self):
        """Test the coarsest grid halves (0, s)"""
        np.testing.assert_allclose(TimeGrid(1.0, panels=2).breaks, [0.0, 0.5, 1.0])

    def test_domain(self):
        """Test s and the panel count are validated"""
        with pytest.raises(ParameterDomainError):
            TimeGrid(0.0)
        with pytest.raises(ParameterDomainError):
            TimeGrid(0.5, panels=1)


class TestMomentRecursion:
    """Test v_1..v_4 and the moments they determine"""

    @pytest.fixture
    def oracle(self):
        return FullSpaceOracle(StableLaw.from_alpha(1.0), half_width=5.0, spacing=0.1)

    def test_constant_phi(self, oracle):
        """Test v_n for phi = 1: v_2 = s, v_3 = 3 s^2 / 2, v_4 = 3 s^3"""
        s = 0.5
        values = MomentRecursion(oracle, oracle.sample(ones), TimeGrid(s)).run(4)
        np.testing.assert_allclose(values[1], 1.0, atol=1e-10)
        np.testing.assert_allclose(values[2], s, rtol=1e-8)
        np.testing.assert_allclose(values[3], 1.5 * s ** 2, rtol=1e-8)
        np.testing.assert_allclose(values[4], 3.0 * s ** 3, rtol=1e-8)

    def test_v_n_wrapper(self, oracle):
        """Test the single-order entry point"""
        np.testing.assert_allclose(v_n(oracle.sample(ones), 0.4, 2, oracle), 0.4, rtol=1e-8)
        with pytest.raises(ParameterDomainError):
            v_n(oracle.sample(ones), 0.4, 5, oracle)

    def test_negative_phi_rejected(self, oracle):
        """Test the recursion needs phi >= 0"""
        with pytest.raises(ParameterDomainError):
            MomentRecursion(oracle, -oracle.sample(ones), TimeGrid(0.5))

    def test_raw_from_cumulants(self):
        """Test the cumulant-to-moment map"""
        raw = raw_from_cumulants({1: 1.0, 2: 2.0, 3: 3.0, 4: 4.0})
        assert raw == {1: 1.0, 2: 3.0, 3: 1.0 + 6.0 + 3.0, 4: 1.0 + 12.0 + 12.0 + 12.0 + 4.0}

    def test_centered_moments_from_raw(self, oracle):
        """Test centered third and fourth moments against the raw moments for a random start and phi"""
        rng = replica_stream(23)
        positions = rng.uniform(-2.0, 2.0, 4)
        masses = rng.uniform(0.1, 0.5, 4)
        phi = rng.uniform(0.0, 1.0, oracle.grid.size)
        table = moments_of((positions, masses), phi, 0.4, oracle, phi_id='random')
        m1, m2, m3, m4 = (table.raw_moments[n] for n in range(1, 5))
        assert table.centered[3] == pytest.approx(m3 - 3.0 * m1 * m2 + 2.0 * m1 ** 3, rel=1e-9, abs=1e-12)
        assert table.centered[3] == pytest.approx(table.cumulants[3], rel=1e-12)
        fourth = m4 - 4.0 * m1 * m3 + 6.0 * m1 ** 2 * m2 - 3.0 * m1 ** 4
        assert table.centered[4] == pytest.approx(fourth, rel=1e-9, abs=1e-12)
        expected_first = np.sum(masses * np.interp(positions, oracle.grid, table.v_values[1]))
        assert table.cumulants[1] == pytest.approx(expected_first, rel=1e-12)

    def test_total_mass_moments(self, oracle):
        """Test moments of X_s(1) from mass 2 at the origin"""
        s = 0.5
        table = moments_of(([0.0], [2.0]), oracle.sample(ones), s, oracle, phi_id='one')
        assert table.cumulants[2] == pytest.approx(2.0 * s, rel=1e-8)
        assert table.raw_moments[1] == pytest.approx(2.0, rel=1e-10)
        assert table.raw_moments[2] == pytest.approx(4.0 + 2.0 * s, rel=1e-8)
        assert table.centered[4] == pytest.approx(2.0 * 3.0 * s ** 3 + 3.0 * (2.0 * s) ** 2, rel=1e-8)
        rows = table.to_rows({1: (2.0, 0.0)})
        assert [row['order'] for row in rows] == [1, 2, 3, 4]
        assert rows[0]['mc_value'] == 2.0
        assert np.isnan(rows[1]['mc_value'])

    @pytest.mark.slow
    def test_against_particle_system(self):
        """Test the first two moments of <X_s, phi> against the particle system"""
        law = StableLaw.from_alpha(1.0)
        oracle = FullSpaceOracle(law, half_width=15.0, spacing=0.1)
        s = 0.5

        def bump(x):
            return np.exp(-0.5 * np.asarray(x) ** 2)

        table = moments_of(([0.0], [1.0]), oracle.sample(bump), s, oracle, phi_id='bump')
        X0 = ParticlePopulation.from_positions(np.zeros(100), mass_unit=0.01)

        def replica(replica_id, rng):
            return simulate_population(X0, s, 0.005, law, rng).final.integrate(bump)

        values = np.array(ReplicaRunner(2024).run(replica, 2000))
        for order in (1, 2):
            mean, se = mean_and_stderr(values ** order)
            assert abs(mean - table.raw_moments[order]) < 3.0 * se + 0.01


class TestEnvelopes:
    """Test the v_n boundary envelopes"""

    def test_default_delta0(self):
        """Test delta_0 = (1 + eps_0)/4"""
        assert default_delta0(0.5) == pytest.approx(0.3125)
        assert default_delta0(0.25) == pytest.approx(0.375)

    def test_alpha_gate(self):
        """Test the envelopes need alpha < 2/3"""
        with pytest.raises(ParameterGateError, match="alpha < 2/3"):
            check_vn_envelopes(1.0, StableLaw.from_alpha(0.7), [0.1], [0.0])

    def test_delta0_gate(self):
        """Test the delta_0 window"""
        with pytest.raises(ParameterGateError, match="delta0"):
            check_vn_envelopes(1.0, StableLaw.from_alpha(0.5), [0.1], [0.0], delta0=0.2)

    def test_delta0_below_half(self):
        """Test eps_0 < 1 caps delta_0 below 1/2 even where 1/alpha - 1/2 allows more"""
        law = StableLaw.from_alpha(0.25)
        with pytest.raises(ParameterGateError, match="eps0 < 1"):
            check_vn_envelopes(1.0, law, [0.1], [0.0], delta0=0.6)
        with pytest.raises(ParameterGateError, match="eps0 < 1"):
            check_vn_envelopes(1.0, law, [0.1], [0.0], delta0=0.5)

    @pytest.mark.parametrize('phi_kind', ['f_R', 'F_R'])
    def test_reports(self, phi_kind):
        """Test one finite positive report per order"""
        reports = check_vn_envelopes(1.0, StableLaw.from_alpha(0.5), [0.05, 0.1], [0.0, 0.5, 0.9],
                                     phi_kind=phi_kind, levels=2)
        assert [report.lemma_id for report in reports] == [f'vn_envelope_{phi_kind}_n{n}' for n in range(1, 5)]
        for report in reports:
            assert len(report.refinement_trace) == 2
            assert report.finite
            assert report.sup_ratio > 0
            assert report.gamma == pytest.approx(0.3125)
