"""Exception types shared across the package."""


class NacapError(Exception):
    """Base class for all package errors."""


class ShapeMismatch(NacapError):
    pass


class NotScalar(NacapError):
    pass


class EmptyTape(NacapError):
    pass


class InvalidProbability(NacapError):
    pass


class NonFiniteValue(NacapError):
    pass


class LengthExceedsMax(NacapError):
    pass


class UnknownToken(NacapError):
    pass


class UnknownCategory(NacapError):
    pass


class LengthOutOfRange(NacapError):
    pass


class EmptySentence(NacapError):
    pass


class NotADistribution(NacapError):
    pass


class IndexOutOfVocab(NacapError):
    pass


class EmptyCorpus(NacapError):
    pass


class DivergedLoss(NacapError):
    pass


class MissingFile(NacapError):
    pass


class UnknownSplit(NacapError):
    pass


class InvalidSpec(NacapError):
    pass


class EmptyInput(NacapError):
    pass


class ConfigError(NacapError):
    """Bad user configuration; maps to CLI exit code 2."""
