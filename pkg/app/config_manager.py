"""
Configuration Manager for the superprocess lab
Handles loading and validation of flat key=value run configurations
"""

import dataclasses
import hashlib
import logging
import os
from dataclasses import dataclass
from typing import Any, Dict, Optional, Tuple

import yaml

from errors import ConfigError, ParameterGateError
from stable_motion import StableLaw

PROCESS_DEFAULTS = {
    'alpha': 0.5,
    'R': 4.0,
}

POPULATION_DEFAULTS = {
    'N': 200,
    'dt': 1e-3,
    'T': 1.0,
    'cap': 200000,
    'layout': 'point',
    'layout_width': 1.0,
    'keep_last': 10,
}

KERNEL_DEFAULTS = {
    'gamma': 0.0,
    'rho': 0.0,
    'levels': 3,
    'kernel_paths': 20000,
    'kernel_bins': 40,
}

BESSEL_DEFAULTS = {
    'delta': 0.1,
    'bessel_a': 0.25,
    'bessel_b': 0.5,
    'bessel_paths': 2000,
    'bessel_dt': 1e-4,
    'bessel_T': 1.0,
}

EXPERIMENT_DEFAULTS = {
    'K': 0.0,
    'r': 1.0,
    'epsilon': 0.1,
    'epsilon_prime': 0.1,
    'lattice_half_width': 20.0,
    'moment_s': 0.5,
    'increment_lags': (0.01, 0.02, 0.04, 0.08),
    'epsilon_sweep': (0.2, 0.1, 0.05),
}

RUN_DEFAULTS = {
    'n_replicas': 100,
    'seed': 20240601,
    'threads': 1,
    'log_level': 'INFO',
}

SECTIONS = {
    'process': PROCESS_DEFAULTS,
    'population': POPULATION_DEFAULTS,
    'kernel': KERNEL_DEFAULTS,
    'bessel': BESSEL_DEFAULTS,
    'experiment': EXPERIMENT_DEFAULTS,
    'run': RUN_DEFAULTS,
}

LAYOUTS = ('point', 'uniform', 'outlier')

# commands whose pipelines need the alpha < 2/3 regime
MOMENT_GATED = ('exceptional-times', 'near-extinction')
PARTICLE_COMMANDS = ('simulate', 'verify-moments', 'decompose', 'exceptional-times', 'near-extinction')


@dataclass(frozen=True)
class ExperimentConfig:
    """Resolved run configuration"""
    alpha: float
    R: float
    N: int
    dt: float
    T: float
    cap: int
    layout: str
    layout_width: float
    keep_last: int
    gamma: float
    rho: float
    levels: int
    kernel_paths: int
    kernel_bins: int
    delta: float
    bessel_a: float
    bessel_b: float
    bessel_paths: int
    bessel_dt: float
    bessel_T: float
    K: float
    r: float
    epsilon: float
    epsilon_prime: float
    lattice_half_width: float
    moment_s: float
    increment_lags: Tuple[float, ...]
    epsilon_sweep: Tuple[float, ...]
    n_replicas: int
    seed: int
    threads: int
    log_level: str

    @property
    def mass_unit(self) -> float:
        return 1.0 / self.N

    @property
    def law(self) -> StableLaw:
        return StableLaw.from_alpha(self.alpha)

    def replace(self, **changes) -> 'ExperimentConfig':
        return dataclasses.replace(self, **changes)

    def resolved(self) -> Dict[str, Any]:
        """Plain dict of every key, lists for tuples"""
        return {
            key: list(value) if isinstance(value, tuple) else value
            for key, value in dataclasses.asdict(self).items()
        }

    def config_hash(self) -> str:
        canonical = yaml.safe_dump(self.resolved(), sort_keys=True)
        return hashlib.sha256(canonical.encode('utf-8')).hexdigest()


def all_defaults() -> Dict[str, Any]:
    merged: Dict[str, Any] = {}
    for defaults in SECTIONS.values():
        merged.update(defaults)
    return merged


class ConfigManager:
    """Manages configuration loading and validation"""

    def __init__(self, config_file: Optional[str] = None):
        self.logger = logging.getLogger(__name__)
        self.config_file = config_file or os.getenv('CONFIG_FILE', 'lab.conf')

    def load_config(self, overrides: Optional[Dict[str, str]] = None) -> ExperimentConfig:
        """Load configuration from file (or LAB_* environment) plus overrides"""
        try:
            if os.path.exists(self.config_file):
                raw = self._parse_file(self.config_file)
                self.logger.info(f"Configuration loaded from {self.config_file}")
            else:
                raw = self._load_from_env()
                self.logger.info("Configuration loaded from environment variables")

            raw.update(overrides or {})
            config = self._validate_and_set_defaults(raw)
            return ExperimentConfig(**config)

        except ConfigError as e:
            self.logger.error(f"Failed to load configuration: {e}")
            raise

    def _parse_file(self, path: str) -> Dict[str, str]:
        """key = value lines; '#' starts a comment"""
        raw: Dict[str, str] = {}
        try:
            with open(path, 'r') as f:
                lines = f.readlines()
        except OSError as e:
            raise ConfigError(f"Cannot read configuration file {path}: {e}")

        for number, line in enumerate(lines, start=1):
            content = line.split('#', 1)[0].strip()
            if not content:
                continue
            if '=' not in content:
                raise ConfigError(f"{path}:{number}: expected key = value, got '{content}'")
            key, value = (part.strip() for part in content.split('=', 1))
            if not key:
                raise ConfigError(f"{path}:{number}: missing key")
            raw[key] = value
        return raw

    def _load_from_env(self) -> Dict[str, str]:
        """Load configuration from LAB_<key> environment variables as fallback"""
        raw = {}
        for key in all_defaults():
            value = os.getenv(f'LAB_{key}')
            if value is not None:
                raw[key] = value
        return raw

    def _coerce(self, key: str, value: Any, default: Any) -> Any:
        if not isinstance(value, str):
            return value
        try:
            if isinstance(default, bool):
                return value.lower() in ('1', 'true', 'yes', 'on')
            if isinstance(default, int):
                return int(float(value)) if float(value).is_integer() else int(value)
            if isinstance(default, float):
                return float(value)
            if isinstance(default, tuple):
                return tuple(float(item) for item in value.split(',') if item.strip())
        except ValueError:
            raise ConfigError(f"Invalid value for {key}: '{value}'")
        return value

    def _validate_and_set_defaults(self, raw: Dict[str, Any]) -> Dict[str, Any]:
        """Validate configuration and set defaults"""
        defaults = all_defaults()
        unknown = sorted(set(raw) - set(defaults))
        if unknown:
            raise ConfigError(f"Unknown configuration keys: {', '.join(unknown)}")

        config = {}
        for section_defaults in SECTIONS.values():
            for key, default in section_defaults.items():
                config[key] = self._coerce(key, raw[key], default) if key in raw else default

        self._validate_ranges(config)
        return config

    def _validate_ranges(self, config: Dict[str, Any]):
        """Validate configuration value ranges"""

        if not (0 < config['alpha'] < 2):
            raise ConfigError(f"Invalid alpha: {config['alpha']}. Must lie in (0, 2)")

        for key in ('R', 'dt', 'T', 'r', 'layout_width', 'bessel_dt', 'bessel_T'):
            if config[key] <= 0:
                raise ConfigError(f"{key} must be positive, got {config[key]}")

        for key in ('N', 'cap', 'n_replicas', 'threads', 'levels', 'kernel_paths', 'kernel_bins', 'bessel_paths'):
            if config[key] < 1:
                raise ConfigError(f"{key} must be at least 1, got {config[key]}")

        if config['layout'] not in LAYOUTS:
            raise ConfigError(f"Unknown layout '{config['layout']}'. Must be one of {', '.join(LAYOUTS)}")

        if not (0 < config['bessel_a'] < config['bessel_b']):
            raise ConfigError(f"Need 0 < bessel_a < bessel_b, got {config['bessel_a']}, {config['bessel_b']}")

        if config['keep_last'] < 0:
            raise ConfigError(f"keep_last must be non-negative, got {config['keep_last']}")

        if config['N'] * config['dt'] > 0.5:
            self.logger.warning(f"N*dt = {config['N'] * config['dt']:.4g} exceeds 0.5; particle commands will refuse to run")

        if config['n_replicas'] < 100:
            self.logger.warning(f"n_replicas {config['n_replicas']} is small for Monte Carlo summaries")

        self.logger.info("Configuration validation completed successfully")


def gates_for(config: ExperimentConfig, command: str) -> None:
    """Parameter gates a command needs before any simulation starts"""
    if command in MOMENT_GATED or (command == 'verify-moments' and config.alpha != 1.0):
        if not (0 < config.alpha < 2.0 / 3.0):
            raise ParameterGateError(f"{command} needs alpha in (0, 2/3), got {config.alpha}")

    if command in MOMENT_GATED or command in ('bessel', 'decompose'):
        if not (0 < config.delta < 0.25):
            raise ParameterGateError(f"delta must lie in (0, 1/4), got {config.delta}")

    if command in MOMENT_GATED:
        for key in ('epsilon', 'epsilon_prime'):
            value = getattr(config, key)
            if not (0 < value < 0.25):
                raise ParameterGateError(f"{key} must lie in (0, 1/4), got {value}")
        if config.T <= config.epsilon:
            raise ConfigError(f"Horizon T={config.T} must exceed epsilon={config.epsilon}")

    if command == 'exceptional-times' and config.K > 0 and not config.R > 2 * config.K + 1:
        raise ParameterGateError(f"Need R > 2K + 1, got R={config.R}, K={config.K}")

    if command in PARTICLE_COMMANDS and config.N * config.dt > 0.5:
        raise ConfigError(f"N*dt = {config.N * config.dt:.4g} exceeds 0.5; reduce dt or N")
