"""Exception hierarchy.

Errors fall in three families that the CLI maps to exit codes: scenario and
model definition problems (exit 1), numerical failures (exit 2), and
everything else raised by analysis routines.
"""


class GridSwitchError(Exception):
    pass


# --- definition problems -----------------------------------------------------

class ModelError(GridSwitchError):
    """A network, supply or load definition violates its invariants."""


class DimensionMismatch(ModelError, ValueError):
    pass


class DisconnectedGraph(ModelError):
    pass


class DuplicateLine(ModelError):
    pass


class NonPositiveParameter(ModelError, ValueError):
    pass


class DanglingReference(ModelError):
    pass


class ImproperTransferFunction(ModelError):
    pass


class UndeclaredIntegrator(ImproperTransferFunction):
    pass


class DegenerateLeadingCoefficient(ModelError):
    pass


class UnsupportedVariant(ModelError, TypeError):
    pass


class NonlinearModelUnsupported(UnsupportedVariant):
    pass


class EmptyGrid(ModelError, ValueError):
    pass


class NotInJumpSet(GridSwitchError):
    pass


class NonzeroFrequencyRequired(ModelError):
    """No bus carries integral action, so equilibria need not have zero frequency."""


class ScenarioError(ModelError):
    pass


class ScenarioSyntaxError(ScenarioError):
    pass


class SchemaError(ScenarioError):
    pass


class SemanticError(ScenarioError):
    pass


# --- numerical failures ------------------------------------------------------

class NumericalFailure(GridSwitchError):
    pass


class NoEquilibriumFound(NumericalFailure):
    pass


class NumericalBlowup(NumericalFailure):
    def __init__(self, message, trajectory=None):
        super().__init__(message)
        self.trajectory = trajectory


class StorageSearchFailed(NumericalFailure):
    pass


class MaxBisectionsExceeded(NumericalFailure):
    pass


# --- solver control flow -----------------------------------------------------

class StepRejected(GridSwitchError):
    """An event occurred inside the attempted step; the caller must localize it."""

    def __init__(self, message, buses=()):
        super().__init__(message)
        self.buses = tuple(buses)


class NoSignChange(GridSwitchError):
    pass


class NotAttracting(GridSwitchError):
    pass


class InvalidInitialSigma(GridSwitchError, ValueError):
    pass


class InsufficientSwitches(GridSwitchError):
    pass


class MissingEquilibrium(GridSwitchError):
    pass
