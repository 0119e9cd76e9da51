"""Error types raised by the engine. Only the CLI turns them into exit codes."""


class EngineError(Exception):
    """Base class for every error the engine raises on purpose."""


class DimensionError(EngineError, ValueError):
    """Operand shapes do not conform."""


class ContractError(EngineError, ValueError):
    """A precondition of an operation was violated."""


class DegenerateScaleError(ContractError):
    """An in-sample window has no first-difference energy, so the scaled losses are undefined."""


class ConfigError(EngineError, ValueError):
    """An experiment or policy configuration is invalid."""

    def __init__(self, message, line=None):
        super().__init__(message)
        self.line = line

    def __str__(self):
        base = super().__str__()
        return f"line {self.line}: {base}" if self.line else base


class IngestionError(EngineError, ValueError):
    """A dataset file could not be turned into valid series."""


class TrainingAbortedError(EngineError, RuntimeError):
    """Training hit a non-finite loss or gradient; `snapshot` holds the diagnostics."""

    def __init__(self, message, snapshot=None):
        super().__init__(message)
        self.snapshot = snapshot or {}
