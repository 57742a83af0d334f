"""Exception hierarchy.

``DataError`` subclasses map to CLI exit code 2, ``NumericError`` to exit
code 3; anything else raised from a command is a usage error (exit 1).
"""


class FragPretrainError(Exception):
    """Base class for all package errors."""


class DataError(FragPretrainError):
    """Input data is malformed or inconsistent with other inputs."""


class NumericError(FragPretrainError):
    """A computation produced a non-finite value."""


# chemparse
class SmilesError(DataError):
    pass


class EmptyInput(SmilesError):
    pass


class UnbalancedParenthesis(SmilesError):
    pass


class UnmatchedRingClosure(SmilesError):
    pass


class UnknownElement(SmilesError):
    pass


class UnsupportedFeature(SmilesError):
    pass


class DisconnectedSubgraph(DataError):
    pass


# vocab / fragmenter
class EmptyCorpus(DataError):
    pass


class NoCandidates(DataError):
    pass


class TargetBelowAtomCount(DataError):
    pass


class UnknownAtomLabel(DataError):
    pass


class VocabularyFormatError(DataError):
    pass


# autodiff
class ShapeMismatch(FragPretrainError, ValueError):
    pass


class SegmentOutOfRange(FragPretrainError, IndexError):
    pass


class NotScalar(FragPretrainError, ValueError):
    pass


class DetachedLoss(FragPretrainError, ValueError):
    pass


# gnn
class FeatureOutOfRange(DataError, IndexError):
    pass


class MembershipGap(DataError):
    pass


class CheckpointError(DataError):
    pass


# pretrain
class NoNegatives(DataError):
    pass


class InsufficientNegatives(DataError):
    pass


class LengthMismatch(DataError):
    pass


class UnknownClass(DataError):
    pass


# downstream
class VocabularyMissing(DataError):
    pass


class ConfigMismatch(DataError):
    pass


class SingleClassTask(DataError):
    pass
