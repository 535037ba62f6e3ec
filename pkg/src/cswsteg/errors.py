"""Exception hierarchy shared by all cswsteg modules."""


class CswstegError(Exception):
    """Base class for all toolkit errors."""


class IndexOutOfRange(CswstegError):
    """A codeword index exceeds its codebook size.

    Carries the first violation found, in frame order then slot order.
    """

    def __init__(self, frame: int, slot: int, value: int, limit: int):
        self.frame = frame
        self.slot = slot
        self.value = value
        self.limit = limit
        super().__init__(
            f"codeword {value} at frame {frame}, slot {slot} outside [0, {limit - 1}]"
        )


class EmptyStream(CswstegError):
    """An operation that needs at least one frame received none."""


class FormatError(CswstegError):
    """Corrupt or malformed container/stream bytes."""

    def __init__(self, offset: int, reason: str):
        self.offset = offset
        self.reason = reason
        super().__init__(f"format error at byte {offset}: {reason}")


class VersionMismatch(CswstegError):
    """Container version not supported by this reader."""


class IoError(CswstegError):
    """Filesystem or socket failure while reading/writing toolkit data."""


class BadSize(CswstegError):
    """Requested codebook size is not a valid (even, >= 2) size."""


class BitsExhausted(CswstegError):
    """The supplied message ran out before every selected frame was embedded."""


class RateOutOfRange(CswstegError):
    """Embedding rate outside [0, 1]."""


class ConfigError(CswstegError):
    """Invalid or inconsistent configuration."""


class ShapeMismatch(CswstegError):
    """Operand shapes are incompatible for the requested operation."""


class TooShort(CswstegError):
    """Input sequence shorter than the pooling size k."""


class BatchTooSmall(CswstegError):
    """Batch normalization in train mode needs at least two rows."""


class DomainError(CswstegError):
    """Loss inputs outside their mathematical domain."""


class NonFiniteGradient(CswstegError):
    """A gradient or parameter became NaN/inf; training has diverged."""


class ClipTooShort(CswstegError):
    """Clip has fewer frames than the model's minimum input length."""

    def __init__(self, n_frames: int, minimum: int):
        self.n_frames = n_frames
        self.minimum = minimum
        super().__init__(f"clip of {n_frames} frames below model minimum {minimum}")


class ArchMismatch(CswstegError):
    """Checkpoint architecture hash does not match its stored config."""


class EmptySplit(CswstegError):
    """The requested manifest split has no usable entries."""


class IdleTimeout(CswstegError):
    """No bytes arrived on a live source within the configured timeout."""
