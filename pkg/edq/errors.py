"""
(©) EDQ Lab

Exception types raised by the laboratory.

Library code raises these; `Lab.run` turns them into exit codes.
"""


class EdqError(Exception):
    """Base class for every error the laboratory raises on purpose."""


class ConfigError(EdqError):
    """An experiment config failed validation."""


class IntensityError(EdqError):
    """An intensity returned a negative or non-finite rate."""


class UpperBoundViolation(IntensityError):
    """A thinning upper bound was exceeded by the intensity it should bound."""

    def __init__(self, component: str, time: float, rate: float, bound: float):
        self.component = component
        self.time = time
        self.rate = rate
        self.bound = bound
        super().__init__(
            f"Intensity of component '{component}' is {rate!r} at t={time!r}, "
            f"above its declared upper bound {bound!r}."
        )


class DisagreementError(EdqError):
    """Augmented-process inputs are inconsistent."""


class SimulationError(EdqError):
    """A simulator left its valid numeric range."""


class TrainingDivergence(EdqError):
    """Training produced a non-finite loss or gradient."""

    def __init__(self, message: str, diagnostics: dict | None = None):
        self.diagnostics = diagnostics or {}
        super().__init__(f"{message} | diagnostics: {self.diagnostics}")


class OracleError(EdqError):
    """A discrete process or query is invalid for exact enumeration."""


class TabularKeyError(OracleError, KeyError):
    """A tabular Q-function was read at a key it does not hold."""

    def __str__(self):
        return Exception.__str__(self)


class ArtifactError(EdqError):
    """An artifact file is missing, malformed or does not match its manifest."""

    def __init__(self, message: str, path=None):
        self.path = path
        super().__init__(f"{message} (path: {path})" if path is not None else message)


class VerificationFailure(EdqError):
    """One or more verification checks failed."""
