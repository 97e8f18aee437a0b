"""
Result emission for lab runs
Handles schema-versioned CSV tables, the run manifest and the text summary
"""

import logging
import os
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
import scipy
import yaml

from bessel import DIMENSION_COLUMNS, ZERO_INTERVAL_COLUMNS
from bound_report import BOUND_REPORT_COLUMNS
from decomposition import COMPARISON_COLUMNS, TRAJECTORY_COLUMNS
from experiments import RUN_RECORD_COLUMNS, SUMMARY_COLUMNS
from moments import MOMENT_TABLE_COLUMNS

SCHEMAS = {
    'extinction_law': (1, ['t', 'particle_survival', 'particle_stderr', 'sde_survival', 'sde_stderr', 'formula']),
    'trajectory': (2, ['time', 'total_mass', 'v_mass', 'w_mass', 'support_min', 'support_max', 'particle_count']),
    'moment_table': (1, MOMENT_TABLE_COLUMNS),
    'bound_reports': (1, BOUND_REPORT_COLUMNS),
    'symbol_check': (1, ['alpha', 'xi', 'quadrature', 'exact', 'relative_error']),
    'flux_check': (1, ['x', 'closed_form', 'quadrature', 'relative_error']),
    'kernel_ratios': (1, ['t', 'x', 'y', 'ratio']),
    'zero_gap': (1, ['a', 'b', 'delta', 'nested', 'reduced', 'beta', 'simulated', 'simulated_stderr']),
    'zero_intervals': (1, ZERO_INTERVAL_COLUMNS),
    'dimension': (1, DIMENSION_COLUMNS),
    'labeled_trajectory': (1, TRAJECTORY_COLUMNS),
    'comparison': (1, COMPARISON_COLUMNS),
    'increment_scan': (1, ['t', 's', 'fourth_moment', 'stderr']),
    'run_records': (1, RUN_RECORD_COLUMNS),
    'pipeline_summary': (1, SUMMARY_COLUMNS),
}


def library_versions() -> Dict[str, str]:
    return {
        'numpy': np.__version__,
        'scipy': scipy.__version__,
        'pandas': pd.__version__,
        'pyyaml': yaml.__version__,
    }


class ResultWriter:
    """Writes the tables, manifest and summary of one run into an output directory"""

    def __init__(self, out_dir: str):
        self.logger = logging.getLogger(__name__)
        self.out_dir = out_dir
        self.written: Dict[str, int] = {}
        os.makedirs(out_dir, exist_ok=True)

    def path(self, name: str) -> str:
        return os.path.join(self.out_dir, name)

    def write_table(self, name: str, rows: Sequence[Dict[str, Any]]) -> str:
        """CSV with the registered column order; extra keys are an error"""
        if name not in SCHEMAS:
            raise KeyError(f"No schema registered for table '{name}'")
        version, columns = SCHEMAS[name]
        frame = pd.DataFrame(list(rows), columns=columns)
        extra = {key for row in rows for key in row} - set(columns)
        if extra:
            raise ValueError(f"Rows for '{name}' carry unregistered columns: {sorted(extra)}")

        target = self.path(f'{name}.csv')
        frame.to_csv(target, index=False, float_format='%.12g')
        self.written[name] = version
        self.logger.info(f"Wrote {len(frame)} rows to {target}")
        return target

    def write_manifest(self, command: str, config: Dict[str, Any], config_hash: str, seed: int,
                       spawn_keys: Optional[List[List[int]]] = None) -> str:
        manifest = {
            'command': command,
            'config': config,
            'config_hash': config_hash,
            'seed': seed,
            'replica_spawn_keys': spawn_keys or [],
            'schemas': {name: {'version': self.written[name], 'columns': SCHEMAS[name][1]}
                        for name in sorted(self.written)},
            'libraries': library_versions(),
        }
        target = self.path('manifest.yaml')
        with open(target, 'w') as f:
            yaml.safe_dump(manifest, f, sort_keys=True)
        return target

    def write_summary(self, lines: Dict[str, Any]) -> str:
        target = self.path('summary.txt')
        with open(target, 'w') as f:
            for key, value in lines.items():
                f.write(f"{key}: {value}\n")
        return target
