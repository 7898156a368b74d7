"""Exception types shared across the package, mapped to CLI exit codes."""


class InputError(ValueError):
    """Bad input data or file schema (CLI exit code 2)."""


class ConfigError(ValueError):
    """Bad configuration or grammar file (CLI exit code 2)."""


class ScorerError(RuntimeError):
    """External malignancy scorer failed for a candidate (CLI exit code 3)."""


class InvariantError(RuntimeError):
    """Internal consistency check failed (CLI exit code 4)."""
