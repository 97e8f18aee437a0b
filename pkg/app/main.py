#!/usr/bin/env python3
"""
Superprocess lab
Command-line entry point wiring configurations to the simulation and
verification pipelines
"""

import argparse
import logging
import os
import sys
from typing import Any, Callable, Dict, List, Optional

import numpy as np

from bessel import (box_dimension, lemma23_bound_check, simulate_besq_zero_sets, zero_gap_nested,
                    zero_gap_probability_beta, zero_gap_reduced)
from branching import ParticlePopulation, extinction_probability_formula, simulate_feller_masses, simulate_population
from config_manager import ConfigManager, ExperimentConfig, gates_for
from decomposition import (comparison_refinement, coupled_simulate, flux_comparison, increment_moment_scan,
                           mass_ledger_check)
from dirichlet_kernel import (KernelBoundParams, apply_frac_laplacian, check_lemma34, check_lemma35, check_lemma36,
                              f_R, flux_by_quadrature, kernel_ratio_scan)
from errors import exit_code_for
from experiments import dimension_of_detected_set, initial_population, run_theorem11, run_theorem12
from moments import FullSpaceOracle, check_vn_envelopes, moments_of
from monte_carlo import ReplicaRunner, mean_and_stderr, proportion_and_stderr, replica_stream, two_sample_test
from result_writer import ResultWriter

COMMANDS = ('simulate', 'verify-moments', 'verify-kernels', 'bessel', 'decompose',
            'exceptional-times', 'near-extinction')


def setup_logging(log_level: str = "INFO") -> None:
    """Setup logging configuration; data goes to files, logs to stderr"""
    numeric_level = getattr(logging, log_level.upper(), None)
    if not isinstance(numeric_level, int):
        numeric_level = logging.INFO

    logging.basicConfig(
        level=numeric_level,
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        handlers=[
            logging.StreamHandler(sys.stderr)
        ]
    )


def parse_overrides(pairs: List[str]) -> Dict[str, str]:
    overrides = {}
    for pair in pairs:
        if '=' not in pair:
            raise argparse.ArgumentTypeError(f"--set expects KEY=VALUE, got '{pair}'")
        key, value = pair.split('=', 1)
        overrides[key.strip()] = value.strip()
    return overrides


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='superprocess-lab',
                                     description='Simulation and verification lab for stable superprocesses')
    parser.add_argument('command', choices=COMMANDS)
    parser.add_argument('--config', help='key=value configuration file (default: $CONFIG_FILE or lab.conf)')
    parser.add_argument('--out', default=os.getenv('LAB_OUT_DIR', 'results'), help='output directory')
    parser.add_argument('--set', dest='overrides', action='append', default=[], metavar='KEY=VALUE',
                        help='override one configuration key (repeatable)')
    parser.add_argument('--replicas', type=int, help='number of Monte Carlo replicas')
    parser.add_argument('--seed', type=int, help='root seed')
    parser.add_argument('--threads', type=int, help='worker threads for replicas')
    return parser


class LabApplication:
    """Runs one lab command and writes its outputs"""

    def __init__(self, command: str, config: ExperimentConfig, out_dir: str):
        self.logger = logging.getLogger(__name__)
        self.command = command
        self.config = config
        self.writer = ResultWriter(out_dir)
        self.runner = ReplicaRunner(config.seed, config.threads)
        self.handlers: Dict[str, Callable[[], Dict[str, Any]]] = {
            'simulate': self.simulate,
            'verify-moments': self.verify_moments,
            'verify-kernels': self.verify_kernels,
            'bessel': self.bessel,
            'decompose': self.decompose,
            'exceptional-times': self.exceptional_times,
            'near-extinction': self.near_extinction,
        }

    def run(self) -> Dict[str, Any]:
        gates_for(self.config, self.command)
        self.logger.info(f"Running {self.command} (seed={self.config.seed}, replicas={self.config.n_replicas})")
        summary = self.handlers[self.command]()
        self.writer.write_manifest(self.command, self.config.resolved(), self.config.config_hash(),
                                   self.config.seed, self.runner.spawn_keys(self.config.n_replicas))
        self.writer.write_summary({'command': self.command, **summary})
        self.logger.info(f"Finished {self.command}; outputs in {self.writer.out_dir}")
        return summary

    def simulate(self) -> Dict[str, Any]:
        """Particle and Feller extinction laws against 1 - exp(-2 m0 / t)"""
        config, law = self.config, self.config.law
        X0 = initial_population(config)
        times = [0.5 * config.T, config.T, 2.0 * config.T]

        def replica(replica_id: int, rng: np.random.Generator):
            return simulate_population(X0, times[-1], config.dt, law, rng, cap=config.cap)

        trajectories = self.runner.run(replica, config.n_replicas)
        feller_rng = replica_stream(config.seed, config.n_replicas)
        rows = []
        for t in times:
            particle, particle_se = proportion_and_stderr([traj.mass_at(t) > 0 for traj in trajectories])
            terminal = simulate_feller_masses(X0.total_mass(), t, config.dt, 10 * config.n_replicas, feller_rng)
            sde, sde_se = proportion_and_stderr(terminal > 0)
            rows.append({'t': t, 'particle_survival': particle, 'particle_stderr': particle_se,
                         'sde_survival': sde, 'sde_stderr': sde_se,
                         'formula': extinction_probability_formula(X0.total_mass(), t)})
        self.writer.write_table('extinction_law', rows)
        self.writer.write_table('trajectory', trajectories[0].to_rows())
        return {f"survival_t={row['t']:g}": f"{row['particle_survival']:.4f} (formula {row['formula']:.4f})"
                for row in rows}

    def verify_moments(self) -> Dict[str, Any]:
        """Moment recursion on the full line against particle moments, plus boundary envelopes"""
        config, law = self.config, self.config.law
        s = config.moment_s
        oracle = FullSpaceOracle(law)
        tests = {
            'bump': lambda x: np.exp(-0.5 * np.asarray(x) ** 2),
            'one': lambda x: np.ones_like(np.asarray(x, dtype=float)),
        }
        X0 = ParticlePopulation.from_positions(np.zeros(config.N), config.mass_unit)

        def replica(replica_id: int, rng: np.random.Generator):
            final = simulate_population(X0, s, config.dt, law, rng, cap=config.cap).final
            return {name: final.integrate(phi) for name, phi in tests.items()}

        samples = self.runner.run(replica, config.n_replicas)
        rows, summary = [], {}
        for name, phi in tests.items():
            table = moments_of(([0.0], [1.0]), oracle.sample(phi), s, oracle, phi_id=name)
            values = np.array([sample[name] for sample in samples])
            mc = {order: mean_and_stderr(values ** order) for order in (1, 2)}
            rows.extend(table.to_rows(mc))
            summary[f'{name}_second_moment'] = f"{table.raw_moments[2]:.6g} (mc {mc[2][0]:.6g} +- {mc[2][1]:.2g})"
        self.writer.write_table('moment_table', rows)

        if law.alpha < 2.0 / 3.0:
            R = config.R
            y_grid = R * np.array([0.0, 0.5, 0.9, 0.99])
            s_grid = [0.05, 0.1, 0.2]
            reports = check_vn_envelopes(R, law, s_grid, y_grid, phi_kind='f_R', levels=config.levels) \
                + check_vn_envelopes(R, law, s_grid, y_grid, phi_kind='F_R', levels=config.levels)
            self.writer.write_table('bound_reports', [row for report in reports for row in report.to_rows()])
            summary['envelopes_diverging'] = sum(report.diverging for report in reports)
        return summary

    def verify_kernels(self) -> Dict[str, Any]:
        """Fractional-Laplacian symbol, flux closed form and kernel integral bounds"""
        config, law = self.config, self.config.law
        R = config.R

        symbol_rows = []
        for xi in (0.5, 1.0, 2.0):
            value = apply_frac_laplacian(lambda h, xi=xi: np.cos(xi * h), 0.0, law)
            exact = -abs(xi) ** law.alpha
            symbol_rows.append({'alpha': law.alpha, 'xi': xi, 'quadrature': value, 'exact': exact,
                                'relative_error': abs(value - exact) / abs(exact)})
        self.writer.write_table('symbol_check', symbol_rows)

        flux_rows = []
        for x in np.linspace(-0.99 * R, 0.99 * R, 100):
            closed, numeric = f_R(x, R, law), flux_by_quadrature(x, R, law)
            flux_rows.append({'x': x, 'closed_form': closed, 'quadrature': numeric,
                              'relative_error': abs(closed - numeric) / closed})
        self.writer.write_table('flux_check', flux_rows)

        params = KernelBoundParams(R=R, alpha=law.alpha, t_grid=[0.1, 0.5, 1.0],
                                   x_grid=R * np.array([0.0, 0.5, 0.9]),
                                   y_grid=R * np.array([0.0, 0.5, 0.9, 0.99]))
        # gamma = 0 is the limit of the integrability bound; use a value just above it
        gamma34 = config.gamma if config.gamma > 0 else 1e-3
        rng = replica_stream(config.seed)
        lemma35_params = KernelBoundParams(R=R, alpha=law.alpha, t_grid=[0.01, 0.02, 0.04],
                                           x_grid=R * np.array([0.0, 0.5, 0.8]))
        reports = [
            check_lemma34(gamma34, params, config.levels),
            check_lemma35(lemma35_params, config.kernel_paths, rng),
            check_lemma36(config.gamma, config.rho, params, config.levels),
        ]
        self.writer.write_table('bound_reports', [row for report in reports for row in report.to_rows()])

        ratios = kernel_ratio_scan(params, config.kernel_paths, config.kernel_bins, rng)
        self.writer.write_table('kernel_ratios', [{'t': t, 'x': x, 'y': y, 'ratio': ratio}
                                                  for t, x, y, ratio in ratios])
        return {
            'max_symbol_error': max(row['relative_error'] for row in symbol_rows),
            'max_flux_error': max(row['relative_error'] for row in flux_rows),
            **{report.lemma_id: f"{report.sup_ratio:.6g} flags={','.join(report.flags) or 'none'}"
               for report in reports},
        }

    def bessel(self) -> Dict[str, Any]:
        """Zero-gap oracle triangle, bound constant and zero-set dimension"""
        config = self.config
        delta, a, b = config.delta, config.bessel_a, config.bessel_b
        rng = replica_stream(config.seed)
        terminal, zero_sets = simulate_besq_zero_sets(delta, config.bessel_T, config.bessel_dt,
                                                      config.bessel_paths, rng)
        no_zero, no_zero_se = proportion_and_stderr([not zeros.hits(a, b) for zeros in zero_sets])
        self.writer.write_table('zero_gap', [{
            'a': a, 'b': b, 'delta': delta,
            'nested': zero_gap_nested(a, b, delta),
            'reduced': zero_gap_reduced(a, b, delta),
            'beta': zero_gap_probability_beta(a, b, delta),
            'simulated': no_zero, 'simulated_stderr': no_zero_se,
        }])

        report = lemma23_bound_check(delta, levels=config.levels)
        self.writer.write_table('bound_reports', report.to_rows())

        self.writer.write_table('zero_intervals', [row for path, zeros in enumerate(zero_sets[:10])
                                                   for row in zeros.to_rows(path)])
        window = (0.25 * config.bessel_T, config.bessel_T)
        length = window[1] - window[0]
        scales = length * np.geomspace(0.25, 2.5e-3, 6)
        estimates = [box_dimension(zeros, window, scales) for zeros in zero_sets]
        self.writer.write_table('dimension', [row for estimate in estimates[:10] for row in estimate.to_rows()])
        slopes = [estimate.slope for estimate in estimates if estimate.reliable]
        mean_slope, slope_se = mean_and_stderr(slopes)
        return {
            'zero_gap_simulated': f"{no_zero:.4f} +- {no_zero_se:.4f}",
            'zero_gap_beta': f"{zero_gap_probability_beta(a, b, delta):.6f}",
            'lemma23_constant': f"{report.sup_ratio:.6g}",
            'mean_terminal': f"{float(np.mean(terminal)):.4f} (expected {4 * delta * config.bessel_T:.4f})",
            'zero_set_dimension': f"{mean_slope:.4f} +- {slope_se:.4f} over {len(slopes)} reliable paths",
        }

    def decompose(self) -> Dict[str, Any]:
        """Coupled V/W runs, mass ledger, flux balance, SDE comparison and increment scan"""
        config, law = self.config, self.config.law
        X0 = initial_population(config)

        def coupled(replica_id: int, rng: np.random.Generator):
            return coupled_simulate(X0, law, config.R, config.T, config.dt, rng, config.cap)

        def plain(replica_id: int, rng: np.random.Generator):
            return simulate_population(X0, config.T, config.dt, law, rng, cap=config.cap)

        trajectories = self.runner.run(coupled, config.n_replicas)
        plain_runs = ReplicaRunner(config.seed + 1, config.threads).run(plain, config.n_replicas)
        self.writer.write_table('labeled_trajectory', trajectories[0].to_rows())

        ledger_exact = all(mass_ledger_check(traj).exact for traj in trajectories)
        flux = flux_comparison(trajectories, config.dt)
        tests = {}
        for t in (0.25 * config.T, 0.5 * config.T, config.T):
            result = two_sample_test([traj.mass_at(t) for traj in trajectories],
                                     [run.mass_at(t) for run in plain_runs])
            tests[t] = result

        delta = config.delta
        runs = comparison_refinement(lambda times: delta * times / config.T, delta, config.T,
                                     [1e-3, 5e-4, 2.5e-4], config.seed)
        self.writer.write_table('comparison', runs[-1].to_rows())

        summary = {
            'ledger_exact': ledger_exact,
            'exit_flux': f"{flux.exit_flux:.4f} +- {flux.exit_flux_stderr:.4f}",
            'immigration': f"{flux.immigration:.4f} +- {flux.immigration_stderr:.4f}",
            **{f'ks_pvalue_t={t:g}': f"{result.p_value:.4f}" for t, result in tests.items()},
            **{f'max_violation_dt={run.dt:g}': f"{run.max_violation:.3g}" for run in runs},
        }

        if law.alpha < 2.0 / 3.0:
            point = ParticlePopulation.from_positions(np.zeros(config.N), config.mass_unit)
            scan = increment_moment_scan(point, law, config.R, config.increment_lags, config.n_replicas,
                                         config.dt, config.seed, cap=config.cap)
            self.writer.write_table('increment_scan', scan.to_rows())
            if scan.fit is not None:
                summary['increment_slope'] = f"{scan.fit.slope:.3f} [{scan.fit.ci_low:.3f}, {scan.fit.ci_high:.3f}]"
        else:
            self.logger.warning(f"Increment scan skipped: alpha={law.alpha} is outside (0, 2/3)")
        return summary

    def _pipeline_outputs(self, records, summaries) -> None:
        self.writer.write_table('run_records', [record.to_row() for record in records])
        self.writer.write_table('pipeline_summary', [summary.to_row() for summary in summaries])

    def _sweep(self, pipeline) -> list:
        return [pipeline(self.config.replace(epsilon=float(eps)), self.runner)[1]
                for eps in self.config.epsilon_sweep if eps != self.config.epsilon]

    def exceptional_times(self) -> Dict[str, Any]:
        records, summary = run_theorem11(self.config, self.runner)
        self._pipeline_outputs(records, [summary] + self._sweep(run_theorem11))
        return {'split_frequency': f"{summary.split_frequency:.4f} (bound {summary.split_bound:.4f})",
                'detection_fraction': f"{summary.detection_fraction:.4f}"}

    def near_extinction(self) -> Dict[str, Any]:
        records, summary = run_theorem12(self.config, self.runner)
        self._pipeline_outputs(records, [summary] + self._sweep(run_theorem12))
        result = {'window_frequency': f"{summary.split_frequency:.4f} (bound {summary.split_bound:.4f})",
                  'detection_fraction': f"{summary.detection_fraction:.4f}",
                  'n_excluded': summary.n_excluded}
        if len(records) >= 100:
            eps = self.config.epsilon
            length = eps - eps ** 2
            estimate = dimension_of_detected_set(records, length * np.geomspace(0.25, 2.5e-3, 5))
            self.writer.write_table('dimension', estimate.to_rows())
            result['detected_set_dimension'] = f"{estimate.slope:.4f} (reliable={estimate.reliable})"
        else:
            self.logger.warning("Detected-set dimension needs at least 100 replicas; skipped")
        return result


def main(argv: Optional[List[str]] = None) -> int:
    """Main entry point"""
    args = build_parser().parse_args(argv)
    setup_logging(os.getenv('LOG_LEVEL', 'INFO'))
    logger = logging.getLogger(__name__)

    try:
        overrides = parse_overrides(args.overrides)
        for key, value in (('n_replicas', args.replicas), ('seed', args.seed), ('threads', args.threads)):
            if value is not None:
                overrides[key] = str(value)
        config = ConfigManager(args.config).load_config(overrides)
        if 'LOG_LEVEL' not in os.environ:
            logging.getLogger().setLevel(getattr(logging, config.log_level.upper(), logging.INFO))

        LabApplication(args.command, config, args.out).run()
        return 0

    except argparse.ArgumentTypeError as e:
        code, name, message = 2, 'ConfigError', str(e)
    except Exception as e:
        code, name, message = exit_code_for(e), type(e).__name__, str(e)
        if code == 1:
            logger.exception(f"Fatal error in {args.command}")

    logger.error(f"{args.command} failed: {message}")
    print(f"error_code={code} error={name} message={message}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
