"""Exception hierarchy shared by every module."""


class CorrMAEError(Exception):
    """Base class for all library errors."""


# geometry
class ZeroTranslation(CorrMAEError, ValueError):
    pass


class DegenerateLine(CorrMAEError, ValueError):
    pass


class TooFewCorrespondences(CorrMAEError, ValueError):
    pass


class DegenerateConfiguration(CorrMAEError, ValueError):
    pass


class AmbiguousCheirality(CorrMAEError, ValueError):
    pass


class EmptyInput(CorrMAEError, ValueError):
    pass


# synthdata
class UnreachableConfig(CorrMAEError, ValueError):
    pass


class TooFewInliers(CorrMAEError, ValueError):
    pass


class DatasetIOError(CorrMAEError, OSError):
    pass


class FormatVersionMismatch(CorrMAEError, ValueError):
    pass


class ChecksumMismatch(CorrMAEError, ValueError):
    pass


# nn_core / models
class ShapeMismatch(CorrMAEError, ValueError):
    pass


class KTooLarge(CorrMAEError, ValueError):
    pass


class NonFiniteGradient(CorrMAEError, ArithmeticError):
    pass


class DegenerateMask(CorrMAEError, ValueError):
    pass


class NonFiniteLoss(CorrMAEError, ArithmeticError):
    def __init__(self, message, batch_id=None):
        super().__init__(message)
        self.batch_id = batch_id


class EmptyIteration(CorrMAEError, ValueError):
    pass


class NoInliers(CorrMAEError, ValueError):
    pass


# evalkit
class LengthMismatch(CorrMAEError, ValueError):
    pass


class ReportInconsistent(CorrMAEError, ValueError):
    pass


# cli / configs
class ConfigError(CorrMAEError, ValueError):
    """Raised with every validation problem found, not just the first."""

    def __init__(self, problems):
        if isinstance(problems, str):
            problems = [problems]
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))
