"""Exception types shared across the engine."""


class FlowExecError(Exception):
    """Base class for all engine errors."""


class ConfigError(FlowExecError):
    """Invalid or inconsistent run configuration."""


class NonFiniteState(FlowExecError):
    """A simulated state became NaN or infinite (parameter blow-up)."""


class EpisodeFinished(FlowExecError):
    """step() called on an environment whose episode is already done."""


class BlowUp(FlowExecError):
    """A Riccati coefficient escaped past the magnitude cap."""

    def __init__(self, t: float, value: float):
        super().__init__(f"Riccati coefficient blew up at t={t:.6g} (|value|={value:.3e})")
        self.t = t
        self.value = value


class ShapeMismatch(FlowExecError):
    """Array shape does not match the network specification."""


class Divergence(FlowExecError):
    """Training produced non-finite statistics."""


class MissingCheckpoint(FlowExecError):
    """A learned strategy was requested without a usable checkpoint."""


class SchemaVersionMismatch(FlowExecError):
    """Dataset on disk uses an unsupported schema version."""


class ChecksumMismatch(FlowExecError):
    """A dataset file does not match its manifest checksum."""


class MissingCell(FlowExecError):
    """A report table is missing a (scenario, strategy) cell."""
