"""Exception hierarchy shared by every jackfilter module."""


class JackfilterError(Exception):
    """Base class; ``exit_code`` is what the CLI returns for it."""

    exit_code = 4


class NotPSD(JackfilterError):
    pass


class TooFewPoints(JackfilterError):
    pass


class NonFiniteState(JackfilterError):
    pass


class NonFiniteObjective(JackfilterError):
    pass


class AllStartsFailed(JackfilterError):
    pass


class InvalidSizes(JackfilterError):
    exit_code = 2


class BatchMismatch(JackfilterError):
    pass


class SingularInnovation(JackfilterError):
    pass


class InsufficientHoldout(JackfilterError):
    exit_code = 2


class TooManySubsets(JackfilterError):
    exit_code = 2


class ConfigError(JackfilterError):
    exit_code = 2


class ParseError(JackfilterError):
    exit_code = 3


class GridMismatch(JackfilterError):
    exit_code = 3


class StepError(JackfilterError):
    """Wraps a failure inside the adaptive loop with the step index attached."""

    def __init__(self, step, cause):
        super().__init__(f"step {step}: {type(cause).__name__}: {cause}")
        self.step = step
        self.cause = cause
        self.exit_code = getattr(cause, "exit_code", 4)
