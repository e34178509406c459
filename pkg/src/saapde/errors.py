"""Exception types shared across the package."""


class SaaPdeError(Exception):
    """Base class for all package errors."""


class DegenerateTriangle(SaaPdeError):
    pass


class NonpositiveCoefficient(SaaPdeError):
    pass


class EigSolveFailure(SaaPdeError):
    pass


class SpaceMismatch(SaaPdeError):
    pass


class UnsupportedContinuousModel(SaaPdeError):
    pass


class SingularJacobian(SaaPdeError):
    pass


class SingularSystem(SaaPdeError):
    pass


class NewtonDivergence(SaaPdeError):
    """Raised when damped Newton fails; carries the partial solve report."""

    def __init__(self, message, report=None, state=None):
        super().__init__(message)
        self.report = report
        self.state = state


class UnknownProblemTag(SaaPdeError):
    pass


class LineSearchStall(SaaPdeError):
    pass


class NonFiniteValue(SaaPdeError):
    pass


class SampleSolveError(SaaPdeError):
    """A per-sample solve failed inside a sample average; records the sample index."""

    def __init__(self, index, cause):
        super().__init__(f"solve failed for sample {index}: {cause}")
        self.index = index
        self.cause = cause


class ViolationFound(SaaPdeError):
    def __init__(self, message, control=None, value=None):
        super().__init__(message)
        self.control = control
        self.value = value


class ConfigError(SaaPdeError):
    pass
