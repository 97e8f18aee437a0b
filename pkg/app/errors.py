"""
Error types for the superprocess lab
Each class maps to one CLI exit code in main.py
"""


class LabError(Exception):
    """Base class for all lab errors"""


class ParameterDomainError(LabError, ValueError):
    """Argument lies outside the domain of the operation"""


class ConfigError(LabError):
    """Malformed configuration or violated configuration precondition"""


class ParameterGateError(ConfigError):
    """A parameter gate of the theory is violated (e.g. alpha >= 2/3)"""


class PopulationCapError(LabError):
    """Particle count exceeded the configured cap"""

    def __init__(self, count: int, cap: int):
        super().__init__(f"Particle count {count} exceeds population cap {cap}")
        self.count = count
        self.cap = cap


class InvariantViolationError(LabError):
    """An internal invariant of a simulation was broken"""


EXIT_CODES = {
    ParameterGateError: 3,
    ParameterDomainError: 3,
    ConfigError: 2,
    PopulationCapError: 4,
    InvariantViolationError: 1,
}


def exit_code_for(error: BaseException) -> int:
    """Map an exception to the CLI exit code"""
    # ParameterGateError must win over its ConfigError base
    for error_type, code in EXIT_CODES.items():
        if isinstance(error, error_type):
            return code
    if isinstance(error, OSError):
        return 5
    return 1
