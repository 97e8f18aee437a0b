#!/usr/bin/env python3
"""
Tests for the branching particle system and the total-mass diffusion
"""

import pytest
import numpy as np
import sys
import os

# Add app directory to path for imports
sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..', 'app'))

from errors import ConfigError, ParameterDomainError, PopulationCapError
from monte_carlo import ReplicaRunner, replica_stream, two_sample_test
from stable_motion import StableLaw
from branching import (LABEL_V, LABEL_W, ParticlePopulation, branch_particles, check_branching_step, evolve_population,
                       evolve_step, extinction_probability_formula, sample_feller_transition, simulate_feller_mass,
                       simulate_feller_mass_exact, simulate_feller_masses, simulate_population, split_initial)


class TestParticlePopulation:
    """Test the empirical measure"""

    @pytest.fixture
    def population(self):
        return ParticlePopulation.from_positions([-2.0, -0.5, 0.0, 0.5, 3.0], mass_unit=0.1)

    def test_masses(self, population):
        """Test total, labeled and ball masses"""
        assert population.total_mass() == pytest.approx(0.5)
        assert population.labeled_mass(LABEL_V) == pytest.approx(0.5)
        assert population.labeled_mass(LABEL_W) == 0.0
        assert population.mass_in_ball(0.0, 1.0) == pytest.approx(0.3)
        assert population.branching_rate == pytest.approx(10.0)

    def test_support_and_integral(self, population):
        """Test support extremes and <X, phi>"""
        assert population.support_extremes() == (-2.0, 3.0)
        assert population.integrate(lambda x: x) == pytest.approx(0.1)
        assert np.isnan(ParticlePopulation.empty(0.1).support_extremes()[0])

    def test_particles_view(self, population):
        """Test the (position, mass, label) triples"""
        triples = list(population.particles)
        assert triples[0] == (-2.0, 0.1, LABEL_V)
        assert len(triples) == 5

    def test_split_initial(self, population):
        """Test the split at |x| = K partitions the particles"""
        inner, outer = split_initial(population, 1.0)
        assert inner.count == 3
        assert outer.count == 2
        assert inner.total_mass() + outer.total_mass() == pytest.approx(population.total_mass())
        with pytest.raises(ParameterDomainError):
            split_initial(population, 0.0)

    def test_translate(self, population):
        """Test translation moves every particle"""
        shifted = population.translate(1.5)
        np.testing.assert_allclose(shifted.positions, population.positions + 1.5)


class TestBranching:
    """Test critical binary branching"""

    def test_step_gate(self):
        """Test N dt must not exceed 1/2"""
        check_branching_step(0.01, 0.005)
        with pytest.raises(ConfigError, match="exceeds 0.5"):
            check_branching_step(0.01, 0.006)

    def test_offspring_counts(self):
        """Test each particle leaves 0, 1 or 2 copies at its own position"""
        pop = ParticlePopulation.from_positions(np.arange(1000, dtype=float), mass_unit=0.01)
        branched = branch_particles(pop, 0.005, replica_stream(3))
        _, counts = np.unique(branched.positions, return_counts=True)
        assert set(counts) <= {1, 2}
        assert np.all(np.diff(branched.positions) >= 0)

    def test_mean_preserved(self):
        """Test the offspring mean is one"""
        pop = ParticlePopulation.from_positions(np.zeros(100000), mass_unit=0.01)
        branched = branch_particles(pop, 0.004, replica_stream(4))
        # offspring variance is N dt = 0.4 per particle
        se = np.sqrt(0.4 / pop.count)
        assert abs(branched.count / pop.count - 1.0) < 4 * se

    def test_kill_radius(self):
        """Test killed positions all lie outside the radius"""
        law = StableLaw.from_alpha(0.5)
        pop = ParticlePopulation.from_positions(np.zeros(500), mass_unit=1.0)
        survivors, killed = evolve_step(pop, 0.2, law, replica_stream(8), kill_radius=0.5)
        assert np.all(np.abs(killed) >= 0.5)
        assert np.all(np.abs(survivors.positions) < 0.5)

    def test_evolve_population(self):
        """Test one step advances time and matches evolve_step under the same stream"""
        law = StableLaw.from_alpha(0.5)
        pop = ParticlePopulation.from_positions(np.zeros(200), mass_unit=0.01)
        evolved = evolve_population(pop, 0.005, law, replica_stream(2))
        stepped, _ = evolve_step(pop, 0.005, law, replica_stream(2))
        assert evolved.time == pytest.approx(0.005)
        np.testing.assert_array_equal(evolved.positions, stepped.positions)

    def test_population_cap(self):
        """Test the cap aborts the run"""
        law = StableLaw.from_alpha(1.0)
        pop = ParticlePopulation.from_positions(np.zeros(1000), mass_unit=1e-3)
        with pytest.raises(PopulationCapError) as info:
            simulate_population(pop, 1.0, 1e-4, law, replica_stream(0), cap=10)
        assert info.value.cap == 10


class TestPopulationRuns:
    """Test recorded particle-system runs"""

    def test_empty_start(self):
        """Test an empty start is extinct at time zero"""
        law = StableLaw.from_alpha(1.0)
        traj = simulate_population(ParticlePopulation.empty(0.01), 1.0, 0.01, law, replica_stream(0))
        assert traj.extinction_time == 0.0
        assert traj.mass_at(0.5) == 0.0

    def test_mass_after_extinction(self):
        """Test mass_at is zero from the extinction time on"""
        law = StableLaw.from_alpha(1.0)
        pop = ParticlePopulation.from_positions([0.0], mass_unit=1.0)
        traj = simulate_population(pop, 1000.0, 0.5, law, replica_stream(6))
        assert traj.extinction_time is not None
        assert traj.mass_at(traj.extinction_time) == 0.0
        assert traj.mass_at(0.0) == pytest.approx(1.0)

    def test_translation_equivariance(self):
        """Test a shifted start gives a shifted run under the same seed"""
        law = StableLaw.from_alpha(0.5)
        pop = ParticlePopulation.from_positions(np.linspace(-0.5, 0.5, 50), mass_unit=0.02)
        first = simulate_population(pop, 0.5, 0.01, law, replica_stream(12))
        second = simulate_population(pop.translate(2.0), 0.5, 0.01, law, replica_stream(12))
        assert first.counts == second.counts
        np.testing.assert_allclose(np.array(second.support_min) - 2.0, first.support_min, atol=1e-9)

    def test_rows_carry_labeled_mass(self):
        """Test each row splits the total mass into V and W"""
        pop = ParticlePopulation.from_positions(np.zeros(10), mass_unit=0.1)
        pop.labels[:3] = LABEL_W
        traj = simulate_population(pop, 0.0, 0.01, StableLaw.from_alpha(1.0), replica_stream(0))
        row = traj.to_rows()[0]
        assert row['v_mass'] == pytest.approx(0.7)
        assert row['w_mass'] == pytest.approx(0.3)
        assert row['total_mass'] == pytest.approx(1.0)

    def test_stop_when(self):
        """Test the run halts at the first population meeting the condition"""
        law = StableLaw.from_alpha(1.0)
        pop = ParticlePopulation.from_positions(np.zeros(100), mass_unit=0.01)
        traj = simulate_population(pop, 1.0, 0.005, law, replica_stream(1), stop_when=lambda p: p.time >= 0.3 - 1e-9)
        assert traj.stopped_at == pytest.approx(0.3)
        assert traj.final.time == pytest.approx(0.3)


class TestFellerDiffusion:
    """Test the total-mass process and its extinction law"""

    def test_formula(self):
        """Test P(zeta > t) = 1 - exp(-2 m0 / t)"""
        assert extinction_probability_formula(1.0, 1.0) == pytest.approx(1.0 - np.exp(-2.0))
        assert extinction_probability_formula(0.0, 1.0) == 0.0
        with pytest.raises(ParameterDomainError):
            extinction_probability_formula(1.0, 0.0)

    def test_euler_survival(self):
        """Test Euler survival at t = 1 against the formula"""
        masses = simulate_feller_masses(1.0, 1.0, 1e-3, 20000, replica_stream(5))
        assert np.mean(masses > 0) == pytest.approx(extinction_probability_formula(1.0, 1.0), abs=0.02)

    def test_exact_transition(self):
        """Test the exact transition's mean and atom at zero"""
        n = 50000
        samples = sample_feller_transition(np.full(n, 0.5), 1.0, replica_stream(9))
        p_zero = np.exp(-1.0)
        assert abs(np.mean(samples == 0.0) - p_zero) < 4 * np.sqrt(p_zero * (1 - p_zero) / n)
        # variance of M_1 from m = 0.5 is m t = 0.5
        assert abs(samples.mean() - 0.5) < 4 * np.sqrt(0.5 / n)

    def test_paths_absorbed(self):
        """Test both path samplers stay at zero after extinction"""
        rng = replica_stream(10)
        for path in (simulate_feller_mass(0.05, 2.0, 1e-3, rng), simulate_feller_mass_exact(0.05, 2.0, 0.01, rng)):
            if path.extinction_time is not None:
                after = path.times >= path.extinction_time
                assert np.all(path.masses[after] == 0.0)
            assert np.all(path.masses >= 0.0)

    @pytest.fixture(scope='class')
    def particle_masses(self):
        """Total mass at t = 0.5 and t = 1 of 1000 runs from N = 200 particles at the origin"""
        law = StableLaw.from_alpha(0.5)
        start = ParticlePopulation.from_positions(np.zeros(200), mass_unit=0.005)

        def task(replica_id, rng):
            traj = simulate_population(start, 1.0, 1e-3, law, rng)
            return traj.mass_at(0.5), traj.mass_at(1.0)

        return np.array(ReplicaRunner(41).run(task, 1000))

    @pytest.mark.slow
    @pytest.mark.parametrize('column,t', [(0, 0.5), (1, 1.0)])
    def test_particle_survival(self, particle_masses, column, t):
        """Test particle-system survival against 1 - exp(-2 m0 / t)"""
        survived = particle_masses[:, column] > 0
        se = np.sqrt(survived.mean() * (1.0 - survived.mean()) / survived.size)
        assert survived.mean() == pytest.approx(extinction_probability_formula(1.0, t), abs=max(0.02, 4 * se))

    @pytest.mark.slow
    def test_particle_mass_law(self, particle_masses):
        """Test the particle total mass at t = 1 against the exact Feller transition"""
        feller = sample_feller_transition(np.ones(20000), 1.0, replica_stream(42))
        result = two_sample_test(particle_masses[:, 1], feller, level=1e-3)
        assert result.passed, f"KS p-value {result.p_value:.3g}"
