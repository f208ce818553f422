"""Exception hierarchy shared across coral modules.

Errors that surface at the CLI carry an ``exit_code``; the mapping is
part of the public contract (0 clean, 2 config, 3 readiness, 4 runtime).
"""

from __future__ import annotations


class CoralError(Exception):
    exit_code = 1


class ConfigError(CoralError):
    """Invalid compose, params, tree or manifest input."""

    exit_code = 2


class ReadinessError(CoralError):
    """Startup barrier failed; ``missing`` names the components not ready."""

    exit_code = 3

    def __init__(self, message: str, missing=()):
        super().__init__(message)
        self.missing = sorted(missing)


class RuntimeFailure(CoralError):
    exit_code = 4


EXIT_OK = 0
EXIT_CONFIG = ConfigError.exit_code
EXIT_READINESS = ReadinessError.exit_code
EXIT_RUNTIME = RuntimeFailure.exit_code
