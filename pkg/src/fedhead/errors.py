"""Exception types shared across the package."""


class ShapeError(ValueError):
    """A tensor, blob, or sample has dimensions inconsistent with its peer."""


class DataExhaustedError(RuntimeError):
    """A one-shot device stream has fewer unseen samples than requested."""


class DatasetFormatError(ValueError):
    """A dataset file violates the on-disk format; message carries the offset."""


class WireError(ValueError):
    """Base class for model-codec and framing failures."""


class ProtocolError(WireError):
    """Malformed wire data: bad magic, invalid header fields, bad frame."""


class TruncationError(WireError):
    """Wire data is shorter or longer than its header declares."""


class CorruptionError(WireError):
    """Payload bytes fail the CRC32 check."""


class FrameSequenceError(WireError):
    """Frame sequence numbers have a gap, duplicate, or trailing frames."""


class IncompleteStreamError(WireError):
    """A frame stream ended without a last-frame marker."""
