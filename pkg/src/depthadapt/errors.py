"""Exception taxonomy shared across the package.

Every error raised by the library derives from DepthAdaptError so the CLI
can map failures to a category-coded message and a nonzero exit code.
"""


class DepthAdaptError(Exception):
    """Base class for all library errors."""

    category = "error"


class ShapeError(DepthAdaptError):
    """Operand shapes or dtypes are incompatible."""

    category = "shape"


class DomainError(DepthAdaptError):
    """Input values lie outside an operation's numeric domain."""

    category = "domain"


class ContractError(DepthAdaptError):
    """An operation was invoked in violation of its contract."""

    category = "contract"


class ConfigError(DepthAdaptError):
    """A configuration value is invalid; the message carries the field path."""

    category = "config"


class RankError(DepthAdaptError):
    """Adapter rank exceeds what a layer can host."""

    category = "rank"


class StateError(DepthAdaptError):
    """Object is in the wrong state for the requested operation."""

    category = "state"


class ScheduleError(DepthAdaptError):
    """Two-stage training schedule violated."""

    category = "schedule"


class ClassificationError(DepthAdaptError):
    """A model weight could not be assigned to a subspace."""

    category = "classification"


class EvalError(DepthAdaptError):
    """Depth-metric preconditions violated."""

    category = "evaluation"


class ReportError(DepthAdaptError):
    """Comparison-report preconditions violated."""

    category = "report"


class CheckpointError(DepthAdaptError):
    """Checkpoint files are missing, inconsistent, or malformed."""

    category = "checkpoint-format"
