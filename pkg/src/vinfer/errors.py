"""Exception hierarchy shared by every module."""


class VinferError(Exception):
    """Base class for library errors."""


# bitstats / commitments
class NonFiniteScalar(VinferError, ValueError):
    pass


class ShapeMismatch(VinferError, ValueError):
    pass


class EmptyTrace(VinferError, ValueError):
    pass


class EmptyLeafSet(VinferError, ValueError):
    pass


class IndexOutOfRange(VinferError, IndexError):
    pass


class MalformedSalt(VinferError, ValueError):
    pass


# randomness
class SampleTooLarge(VinferError, ValueError):
    pass


# identity
class InsufficientStake(VinferError):
    pass


class DuplicateKey(VinferError):
    pass


class NotActive(VinferError):
    pass


class WithdrawalLocked(VinferError):
    pass


class UnknownNode(VinferError, KeyError):
    pass


class UncoveredSlice(VinferError):
    pass


class InsufficientGroupSize(VinferError):
    pass


# scheduler
class GroupTooSmall(VinferError):
    pass


class SignatureInvalid(VinferError):
    pass


class MissingTranscript(VinferError):
    pass


# contract
class WrongPhase(VinferError):
    pass


class CommitPhaseOpen(WrongPhase):
    """Sampling attempted before every verdict commitment is fixed."""


class NotInCommittee(VinferError):
    pass


class DoubleCommit(VinferError):
    pass


class VrfInvalid(VinferError):
    pass


class MerkleInvalid(VinferError):
    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class CommitMismatch(VinferError):
    pass


class MissingTailToken(VinferError):
    pass


class NotRejected(VinferError):
    pass


class CommitteeTooSmall(VinferError):
    pass


class InsufficientEscrow(VinferError):
    pass


class EvidenceInvalid(VinferError):
    pass


# clustering
class DimensionMismatch(VinferError, ValueError):
    pass


# experiments / cli
class ScenarioError(VinferError, ValueError):
    pass
