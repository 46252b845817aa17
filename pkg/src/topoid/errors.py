"""Exception hierarchy shared by all topoid modules."""


class TopoIdError(Exception):
    """Base class for every error raised by this package."""


class ValidationError(TopoIdError, ValueError):
    """Input violates a documented contract."""


class NumericalError(TopoIdError, ArithmeticError):
    """A numerical routine failed."""


class SchemaMismatch(ValidationError):
    pass


class EmptyClass(ValidationError):
    pass


class SingularCovariance(NumericalError):
    pass


class AllSignalsMissing(ValidationError):
    pass


class NoSignalsMissing(ValidationError):
    pass


class NonPositiveDefinite(NumericalError):
    pass


class NoConvergence(NumericalError):
    pass


class EmptyValidation(ValidationError):
    pass


class NoValidTopology(ValidationError):
    pass


class DisconnectedLoadWithoutPD(ValidationError):
    pass


class FeederSpecError(ValidationError):
    pass


class DegenerateClass(ValidationError):
    pass
