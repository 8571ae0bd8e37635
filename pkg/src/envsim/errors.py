"""Exception hierarchy shared by all envsim modules."""


class EnvsimError(Exception):
    """Base class for all envsim errors."""


# --- netlist parsing / partitioning ---

class NetlistError(EnvsimError):
    """Netlist source could not be turned into a valid circuit."""

    def __init__(self, message, lineno=None):
        if lineno is not None:
            message = f"line {lineno}: {message}"
        super().__init__(message)
        self.lineno = lineno


class NetlistSyntaxError(NetlistError):
    """Malformed netlist line (wrong arity, unparsable number, ...)."""


class UnknownDeviceError(NetlistError):
    """Device letter is not one of R, C, L, D, M, V, I."""


class UndefinedNodeError(NetlistError):
    """A directive references a node that no device declares."""


class DuplicateNameError(NetlistError):
    """Two devices or two partitions share a name."""


class MissingPeriodError(NetlistError):
    """Netlist lacks a .period directive."""


class UncoveredNodeError(EnvsimError):
    """A non-ground node is not assigned to any partition."""


class AmbiguousPartitionError(EnvsimError):
    """A node is assigned to more than one partition."""


class DeviceSpansThreeSubcircuitsError(EnvsimError):
    """A single device touches three or more partitions."""


# --- device model evaluation ---

class NonFiniteStateError(EnvsimError):
    """State vector passed to a model evaluator contains NaN or Inf."""


class ModelDomainError(EnvsimError):
    """A device model was evaluated outside its numeric domain."""


class TableOutOfRangeError(EnvsimError):
    """Tabulated envelope/frequency lookup outside the table domain."""


# --- spline bases ---

class SplineError(EnvsimError):
    """Invalid periodic spline construction or operation."""


class TooFewKnotsError(SplineError):
    """Fewer than degree + 1 knots."""


class NonIncreasingKnotsError(SplineError):
    """Knot sequence is not strictly increasing."""


class KnotOutOfDomainError(SplineError):
    """Knot outside the fundamental period (0, P]."""


class DuplicateKnotError(SplineError):
    """Knot insertion at an existing knot location."""


class MinimalGridError(SplineError):
    """Knot removal would drop the basis below degree + 1 knots."""


class InvalidIntervalError(SplineError):
    """Integration interval is reversed or longer than one period."""


class PeriodMismatchError(SplineError):
    """Operation mixing bases with different periods."""


# --- solvers ---

class SingularMatrixError(EnvsimError):
    """Structurally or numerically singular sparse system."""


class NoConvergenceError(EnvsimError):
    """Newton iteration exhausted its budget without converging."""

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


class InsufficientHistoryError(EnvsimError):
    """Multistep context requested with an empty waveform history."""


class StepSizeUnderflowError(EnvsimError):
    """Envelope step size fell below its minimum after repeated rejection."""


# --- CLI / reporting ---

class SchemaMismatchError(EnvsimError):
    """Stats files being compared do not share the required keys."""
