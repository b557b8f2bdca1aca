"""Exception hierarchy shared by all modules."""


class IonKZMError(Exception):
    """Base class for library errors."""


class ConfigError(IonKZMError, ValueError):
    """Invalid or incomplete configuration."""


class DomainError(IonKZMError, ValueError):
    pass


class RangeError(IonKZMError, ValueError):
    pass


class StabilityError(IonKZMError, ValueError):
    """RF drive outside the Mathieu stability region used by the model."""


class StateError(IonKZMError, RuntimeError):
    """Operation called on an object in the wrong state."""


class ConvergenceError(IonKZMError, RuntimeError):
    def __init__(self, message, best=None):
        super().__init__(message)
        self.best = best


class SingularityError(IonKZMError, RuntimeError):
    """Two ions closer than the Coulomb singularity guard."""


class NumericalBlowupError(IonKZMError, RuntimeError):
    def __init__(self, message, ion=None):
        super().__init__(message)
        self.ion = ion


class InsufficientDataError(IonKZMError, ValueError):
    pass


class EmptyBatchError(IonKZMError, ValueError):
    pass


class ShapeError(IonKZMError, ValueError):
    pass


class PlanError(IonKZMError, ValueError):
    pass


class SweepError(IonKZMError, RuntimeError):
    pass


class InternalError(IonKZMError, AssertionError):
    pass
