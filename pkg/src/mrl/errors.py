"""Exception taxonomy shared across the package.

Every failure mode raised on purpose derives from MrlError so callers can
catch library errors without swallowing genuine bugs. The CLI maps
ConfigError (and argparse failures) to exit code 2 and everything else that
is a deliberate check failure to exit code 1.
"""


class MrlError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(MrlError):
    """Operands or arguments with incompatible or invalid shapes.

    Also covers partition violations (spatial size not divisible by the
    region size) since those are shape facts; inputs are never padded to fit.
    """


class ConfigError(MrlError):
    """Invalid hyperparameters, model specs, or run configuration."""


class GraphError(MrlError):
    """Misuse of the autodiff tape.

    Raised for a non-scalar loss, backward through a detached value, and a
    second backward over an already-consumed graph.
    """


class NonFiniteError(MrlError):
    """A validity check found NaN or Inf; the message names the step."""


class OracleError(MrlError):
    """A finite-difference oracle could not be evaluated (non-finite output)."""


class CheckpointError(MrlError):
    """Malformed, truncated, or mismatched checkpoint data."""


class CostModelError(MrlError):
    """Accounting failure: a layer kind the cost model does not know."""
