"""Exception types raised across the package."""


class OTGCDError(Exception):
    """Base class for all package errors."""


class DimensionMismatch(OTGCDError, ValueError):
    pass


class NonFiniteScaling(OTGCDError, FloatingPointError):
    """A Sinkhorn scaling vector left the finite range."""


class StaleCache(OTGCDError, ValueError):
    pass


class TooFewSamples(OTGCDError, ValueError):
    pass


class NoPositives(OTGCDError, ValueError):
    """Every supervised-contrastive anchor lacked a positive."""


class InvalidAssignment(OTGCDError, ValueError):
    pass


class PriorUnderflow(OTGCDError, ValueError):
    pass


class InfeasibleProfile(OTGCDError, ValueError):
    pass


class CorruptFile(OTGCDError, IOError):
    pass


class NonSquare(OTGCDError, ValueError):
    pass


class LengthMismatch(OTGCDError, ValueError):
    pass


class EmptyDataset(OTGCDError, ValueError):
    pass


class ConfigInvalid(OTGCDError, ValueError):
    pass


class MissingRun(OTGCDError, FileNotFoundError):
    pass
