"""Exception hierarchy shared by every layer of the package."""

from __future__ import annotations


class SafeAggError(Exception):
    """Base class for all package errors."""


# ring arithmetic -------------------------------------------------------------


class LengthMismatch(SafeAggError, ValueError):
    pass


class TooFewContributors(SafeAggError):
    """Fewer than three contributions: unmasking would leak individual values."""


# crypto ----------------------------------------------------------------------


class CryptoError(SafeAggError):
    pass


class EntropyUnavailable(CryptoError):
    pass


class EncryptFailure(CryptoError):
    pass


class DecryptFailure(CryptoError):
    pass


class UnknownPeer(CryptoError, KeyError):
    pass


# controller ------------------------------------------------------------------


class ControllerError(SafeAggError):
    """An error the controller reports back to a caller.

    ``code`` travels on the wire so HTTP clients can re-raise the same class.
    """

    code = "controller_error"
    status = 400

    def __init__(self, message: str = ""):
        super().__init__(message or self.code)
        self.message = message or self.code


class BadRequest(ControllerError):
    code = "bad_request"


class UnknownNode(ControllerError):
    code = "unknown_node"
    status = 404


class SelfSend(ControllerError):
    code = "self_send"


class NotInitiator(ControllerError):
    code = "not_initiator"
    status = 409


class StaleEpoch(ControllerError):
    code = "stale_epoch"
    status = 409


class ChainConflict(ControllerError):
    code = "chain_conflict"
    status = 409


ERROR_CODES = {
    cls.code: cls
    for cls in (ControllerError, BadRequest, UnknownNode, SelfSend, NotInitiator, StaleEpoch, ChainConflict)
}


class ControllerUnreachable(SafeAggError):
    pass


# learner ---------------------------------------------------------------------


class RoundTimeout(SafeAggError):
    pass


class MaxAttemptsExceeded(SafeAggError):
    pass


class MissingKeys(SafeAggError):
    pass


class NonPositiveWeight(SafeAggError, ValueError):
    pass


class LearnerCrashed(SafeAggError):
    """Raised inside a learner to emulate a crash injected by the harness."""


# bench -----------------------------------------------------------------------


class InsufficientSamples(SafeAggError, ValueError):
    pass
