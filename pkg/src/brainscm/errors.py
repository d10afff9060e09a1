"""Exception types shared across the engine."""


class BrainScmError(Exception):
    """Base class for all engine errors."""


class GraphInvalidError(BrainScmError):
    """The causal graph violates a structural invariant (cycle, bad parent)."""


class UnknownVariableError(BrainScmError):
    """A referenced variable is not declared in the graph."""


class UnsupportedInterventionError(BrainScmError):
    """The intervention targets a variable that cannot be assigned."""


class InterventionRangeError(BrainScmError):
    """An assigned intervention value violates the variable's range."""

    def __init__(self, variable: str, message: str):
        super().__init__(f"{variable}: {message}")
        self.variable = variable


class InvalidRecordError(BrainScmError):
    """A covariate record violates its range invariants."""


class AbductionRangeError(BrainScmError):
    """A value cannot be inverted through its mechanism."""

    def __init__(self, variable: str, message: str):
        super().__init__(f"{variable}: {message}")
        self.variable = variable


class MechanismDomainError(BrainScmError):
    """A value lies outside the mechanism's transform domain."""


class EstimationError(BrainScmError):
    """Base-distribution estimation failed (too few or out-of-domain samples)."""


class ConfigurationError(BrainScmError):
    """An input does not match the configured model shapes."""


class UninitializedModelError(BrainScmError):
    """An operation requires a mechanism that has not been constructed."""


class TrainingDivergenceError(BrainScmError):
    """The loss or its gradients became non-finite."""

    def __init__(self, message: str, components: dict | None = None):
        super().__init__(message)
        self.components = components or {}


class RenderError(BrainScmError):
    """Phantom rendering received covariates it cannot draw."""


class DatasetIOError(BrainScmError):
    """A dataset manifest or one of its files is missing or corrupt."""
