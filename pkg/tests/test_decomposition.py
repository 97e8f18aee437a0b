#!/usr/bin/env python3
"""
Tests for the V/W lineage decomposition
"""

import pytest
import numpy as np
import sys
import os

# Add app directory to path for imports
sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..', 'app'))

from branching import LABEL_V, LABEL_W, ParticlePopulation, simulate_population
from dirichlet_kernel import f_R
from errors import ConfigError, InvariantViolationError, ParameterDomainError, ParameterGateError
from monte_carlo import ReplicaRunner, two_sample_test
from stable_motion import StableLaw
from decomposition import (LabeledTrajectory, comparison_refinement, coupled_simulate, detect_support_collapse,
                           flux_comparison, immigration_rate, increment_moment_scan, mass_ledger_check,
                           sde_comparison)

# Exits are seen only at grid times, so a lineage that leaves and re-enters
# within one step stays V; this relative shortfall bounds that bias at dt = 0.004.
EXIT_MONITORING_BIAS = 0.05


@pytest.fixture
def law():
    return StableLaw.from_alpha(0.5)


@pytest.fixture
def start():
    return ParticlePopulation.from_positions(np.zeros(100), mass_unit=0.01)


class TestImmigrationRate:
    """Test A-dot"""

    def test_sum_of_flux(self, law):
        """Test A-dot sums f_R over V particles only"""
        pop = ParticlePopulation.from_positions([0.0, 0.5, 3.0], mass_unit=0.1)
        pop.labels[2] = LABEL_W
        expected = 0.1 * (f_R(0.0, 2.0, law) + f_R(0.5, 2.0, law))
        assert immigration_rate(pop, 2.0, law) == pytest.approx(expected, rel=1e-12)

    def test_no_v_particles(self, law):
        """Test A-dot vanishes without V particles"""
        pop = ParticlePopulation.from_positions([3.0], mass_unit=0.1).relabeled(LABEL_W)
        assert immigration_rate(pop, 2.0, law) == 0.0

    def test_v_outside_is_invariant_violation(self, law):
        """Test a V particle outside the ball is an internal error"""
        pop = ParticlePopulation.from_positions([2.5], mass_unit=0.1)
        with pytest.raises(InvariantViolationError):
            immigration_rate(pop, 2.0, law)


class TestCoupledSimulation:
    """Test the coupled V/W system"""

    def test_start_inside_half_ball(self, law):
        """Test the initial support must lie in |x| <= R/2"""
        pop = ParticlePopulation.from_positions([1.5], mass_unit=0.01)
        with pytest.raises(ConfigError, match="R/2"):
            coupled_simulate(pop, law, 2.0, 1.0, 0.001, np.random.default_rng(0))

    def test_labels_and_ledger(self, law, start):
        """Test V stays inside, W only grows by exits and the ledger balances"""
        runner = ReplicaRunner(31)
        trajectories = runner.run(lambda i, rng: coupled_simulate(start, law, 2.0, 0.5, 0.004, rng), 10)
        for traj in trajectories:
            assert np.all(np.isnan(traj.v_max) | (np.abs(traj.v_max) < 2.0))
            assert np.all(np.isnan(traj.v_min) | (np.abs(traj.v_min) < 2.0))
            np.testing.assert_allclose(np.add(traj.v_mass, traj.w_mass), traj.x_mass, atol=1e-12)
            assert mass_ledger_check(traj).exact
            if traj.final.count:
                w_positions = traj.final.positions[traj.final.labels == LABEL_W]
                v_positions = traj.final.positions[traj.final.labels == LABEL_V]
                assert np.all(np.abs(v_positions) < 2.0)
                assert w_positions.size + v_positions.size == traj.final.count

    def test_event_ledger(self, law, start):
        """Test V(k+1) = V(k) + splits - deaths - exits from the tallied events"""
        traj = coupled_simulate(start, law, 1.0, 0.5, 0.004, np.random.default_rng(2))
        steps = len(traj.exits)
        assert steps > 0
        assert len(traj.v_deaths) == len(traj.v_splits) == steps
        assert len(traj.v_count) == steps + 1
        assert sum(traj.exits) > 0
        assert sum(traj.v_deaths) > 0
        v = np.asarray(traj.v_count)
        np.testing.assert_array_equal(
            np.diff(v), np.subtract(np.subtract(traj.v_splits, traj.v_deaths), traj.exits))

    @pytest.mark.parametrize('event', ['v_deaths', 'v_splits', 'exits'])
    def test_ledger_detects_corrupted_event(self, law, start, event):
        """Test one miscounted event breaks the ledger"""
        traj = coupled_simulate(start, law, 1.0, 0.2, 0.004, np.random.default_rng(3))
        assert mass_ledger_check(traj).exact
        getattr(traj, event)[0] += 1
        check = mass_ledger_check(traj)
        assert check.exact is False
        assert check.max_ledger_error == pytest.approx(traj.mass_unit)

    def test_ledger_detects_corrupted_count(self, law, start):
        """Test a V count that disagrees with the events breaks the ledger"""
        traj = coupled_simulate(start, law, 1.0, 0.2, 0.004, np.random.default_rng(4))
        traj.v_count[-1] += 2
        assert mass_ledger_check(traj).exact is False

    def test_ledger_length_mismatch(self, law, start):
        """Test an event list missing a step is an internal error"""
        traj = coupled_simulate(start, law, 1.0, 0.2, 0.004, np.random.default_rng(5))
        traj.v_splits.pop()
        with pytest.raises(InvariantViolationError):
            mass_ledger_check(traj)

    def test_rows(self, law, start):
        """Test one row per recorded time"""
        traj = coupled_simulate(start, law, 2.0, 0.1, 0.004, np.random.default_rng(1))
        rows = traj.to_rows()
        assert len(rows) == len(traj.times)
        assert rows[0]['v_mass'] == pytest.approx(1.0)
        assert rows[0]['w_mass'] == 0.0

    def test_flux_balance(self, law, start):
        """Test relabeled mass per unit time against the mean immigration rate"""
        dt = 0.004
        trajectories = ReplicaRunner(17).run(
            lambda i, rng: coupled_simulate(start, law, 1.0, 0.5, dt, rng), 200)
        flux = flux_comparison(trajectories, dt)
        noise = 3.0 * np.hypot(flux.exit_flux_stderr, flux.immigration_stderr)
        assert abs(flux.exit_flux - flux.immigration) < noise + EXIT_MONITORING_BIAS * flux.immigration

    @pytest.fixture(scope='class')
    def total_masses(self):
        """Total mass at t = 0.25, 0.5 and 1 of 800 coupled and 800 plain runs"""
        law = StableLaw.from_alpha(0.5)
        start = ParticlePopulation.from_positions(np.zeros(100), mass_unit=0.01)
        times = (0.25, 0.5, 1.0)

        def coupled(replica_id, rng):
            traj = coupled_simulate(start, law, 4.0, 1.0, 2e-3, rng)
            return [traj.mass_at(t) for t in times]

        def plain(replica_id, rng):
            traj = simulate_population(start, 1.0, 2e-3, law, rng)
            return [traj.mass_at(t) for t in times]

        return np.array(ReplicaRunner(43).run(coupled, 800)), np.array(ReplicaRunner(44).run(plain, 800))

    @pytest.mark.slow
    @pytest.mark.parametrize('column,t', [(0, 0.25), (1, 0.5), (2, 1.0)])
    def test_total_mass_matches_plain_system(self, total_masses, column, t):
        """Test relabeling leaves the law of the total mass unchanged"""
        coupled, plain = total_masses
        result = two_sample_test(coupled[:, column], plain[:, column], level=1e-3)
        assert result.passed, f"KS p-value {result.p_value:.3g} at t={t}"


class TestIncrementScan:
    """Test the A-dot increment moments"""

    def test_alpha_gate(self, start):
        """Test the scan needs alpha < 2/3"""
        with pytest.raises(ParameterGateError):
            increment_moment_scan(start, StableLaw.from_alpha(0.8), 4.0, [0.01], 2, 0.005, 0)

    def test_lag_domain(self, law, start):
        """Test lags must keep t + s <= 1"""
        with pytest.raises(ParameterDomainError):
            increment_moment_scan(start, law, 4.0, [0.5], 2, 0.005, 0, t=0.6)

    def test_scan(self, law):
        """Test non-negative moments, one row per lag"""
        pop = ParticlePopulation.from_positions(np.zeros(20), mass_unit=0.05)
        scan = increment_moment_scan(pop, law, 4.0, [0.02, 0.04, 0.08], 20, 0.01, 5)
        assert len(scan.fourth_moments) == 3
        assert all(m >= 0 for m in scan.fourth_moments)
        assert [row['s'] for row in scan.to_rows()] == [0.02, 0.04, 0.08]

    @pytest.mark.slow
    def test_fourth_moment_slope_above_one(self, law):
        """Test the fitted s-exponent of the fourth increment moment has its lower 95% bound at or above 1"""
        pop = ParticlePopulation.from_positions(np.zeros(200), mass_unit=0.005)
        scan = increment_moment_scan(pop, law, 4.0, [0.01, 0.02, 0.04, 0.08], 2000, 1e-3, 45)
        assert scan.fit is not None
        assert scan.fit.ci_low >= 1.0, f"slope {scan.fit.slope:.3f} [{scan.fit.ci_low:.3f}, {scan.fit.ci_high:.3f}]"


class TestSdeComparison:
    """Test the square-root SDE comparison"""

    def test_delta_domain(self):
        """Test delta must lie in (0, 1/4)"""
        with pytest.raises(ParameterDomainError):
            sde_comparison([0.0, 0.1], 0.3, 0.01, 0)

    def test_negative_drift_rejected(self):
        """Test the immigration path must be non-negative"""
        with pytest.raises(ParameterDomainError):
            sde_comparison([0.0, -0.1], 0.1, 0.01, 0)

    def test_equal_drift_gives_equal_paths(self):
        """Test W = Z when A-dot equals delta throughout"""
        run = sde_comparison(np.full(500, 0.1), 0.1, 0.002, 3)
        np.testing.assert_array_equal(run.w_path, run.z_path)
        assert run.tau_index == 0

    def test_refinement(self):
        """Test violations are small and do not grow under refinement"""
        delta = 0.1
        runs = comparison_refinement(lambda times: delta * times, delta, 1.0, [1e-3, 5e-4, 2.5e-4], 8)
        assert [run.dt for run in runs] == [1e-3, 5e-4, 2.5e-4]
        assert runs[0].noise.size == 1000
        # coarse increments are block sums of the finest ones
        np.testing.assert_allclose(runs[0].noise, runs[2].noise.reshape(-1, 4).sum(axis=1), atol=1e-12)
        assert runs[-1].max_violation < 1e-2
        assert runs[-1].max_violation <= runs[0].max_violation + 1e-3
        assert len(runs[-1].to_rows()) == runs[-1].w_path.size

    def test_refinement_needs_nested_steps(self):
        """Test steps must be multiples of the finest step"""
        with pytest.raises(ParameterDomainError):
            comparison_refinement(lambda times: 0.0 * times, 0.1, 1.0, [1e-3, 3e-4], 0)


class TestSupportCollapse:
    """Test detection of W extinction while X survives"""

    def make_trajectory(self, v_counts, w_counts):
        traj = LabeledTrajectory(R=1.0, mass_unit=0.1)
        traj.times = [0.1 * k for k in range(len(v_counts))]
        traj.v_count = list(v_counts)
        traj.w_count = list(w_counts)
        traj.support_min = [-0.1 * k for k in range(len(v_counts))]
        traj.support_max = [0.1 * k for k in range(len(v_counts))]
        return traj

    def test_runs(self):
        """Test maximal collapsed runs become closed intervals"""
        traj = self.make_trajectory([3, 3, 2, 2, 1, 1, 0], [0, 1, 0, 0, 2, 0, 0])
        intervals = detect_support_collapse(traj)
        assert [(i.start, i.end) for i in intervals] == [(0.0, 0.0), (0.2, pytest.approx(0.3)),
                                                         (pytest.approx(0.5), pytest.approx(0.5))]
        assert intervals[1].support_min == pytest.approx(-0.3)
        assert intervals[1].support_max == pytest.approx(0.3)

    def test_extinct_times_excluded(self):
        """Test times with no particles are not collapse times"""
        traj = self.make_trajectory([0, 0], [0, 0])
        assert detect_support_collapse(traj) == []

    def test_open_run_at_end(self):
        """Test a run still open at the last time is closed there"""
        traj = self.make_trajectory([1, 1, 1], [1, 0, 0])
        intervals = detect_support_collapse(traj)
        assert len(intervals) == 1
        assert intervals[0].start == pytest.approx(0.1)
        assert intervals[0].end == pytest.approx(0.2)
