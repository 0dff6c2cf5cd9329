"""Exception types shared across the package."""


class DhdmmError(Exception):
    """Base class for all package errors."""


class InvalidRecord(DhdmmError):
    """A record does not match the domain (wrong arity or out-of-range value)."""


class DimensionError(DhdmmError):
    """Matrix or vector shapes are inconsistent with the domain."""


class NotSupported(DhdmmError):
    """The requested reconstruction is not defined (e.g. rank-deficient strategy)."""


class OptimizationFailed(DhdmmError):
    """Strategy search produced a non-finite objective or no valid candidate."""


class RangeOverflow(DhdmmError):
    """An encoded value falls outside the representable field range."""


class RecoveryFailure(DhdmmError):
    """Secret reconstruction from shares failed (too few or inconsistent shares)."""


class ProtocolAborted(DhdmmError):
    """The protocol stopped before producing an answer."""


class AbortInsufficientShares(ProtocolAborted):
    """Unmasking needs more shares than surviving clients can provide."""

    def __init__(self, secret_owner: int, needed: int, got: int):
        self.secret_owner = secret_owner
        self.needed = needed
        self.got = got
        super().__init__(
            f"cannot unmask: secret of client {secret_owner} needs {needed} shares, got {got}"
        )


class AbortBadSignature(ProtocolAborted):
    """A signed message failed verification; names the tampered edge."""

    def __init__(self, sender: int, receiver: int, round_tag: int):
        self.sender = sender
        self.receiver = receiver
        self.round_tag = round_tag
        super().__init__(
            f"bad signature on message round=0x{round_tag:02x} from {sender} to {receiver}"
        )


class AbortInconsistentView(ProtocolAborted):
    """Echo round found neighbours holding different survivor sets."""
