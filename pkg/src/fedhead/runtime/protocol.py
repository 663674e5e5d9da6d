"""Message layer shared by the server and device agents.

Every message is a fixed 8-byte header followed by the body:

    u8 type | u8 device_id | u16 reserved (zero) | u32 body length | body

MODEL_DATA bodies carry a framed encoded model (wire module). A MODEL_DATA
is meaningful only in context: it either answers the receiver's PULL_MODEL
or follows the sender's PUSH_MODEL announcement. Both sides keep a FIFO of
pending purposes per peer so the two cases never get confused, which works
because the transport is ordered and each side writes sequentially.
"""
from __future__ import annotations

import enum
import logging
import os
from dataclasses import dataclass
from struct import Struct

from ..errors import ProtocolError
from ..federation import ModelBlob
from .. import wire

_HEADER = Struct("<BBHI")
HEADER_SIZE = _HEADER.size  # 8

# Body size cap; a desk-scale model is a few KB, real ones a few MB.
MAX_BODY = 1 << 28

# ASCII status placed in an ACK or ERROR body. Plain ACKs are empty.
STATUS_DATA_EXHAUSTED = b"DATA_EXHAUSTED"


class MessageType(enum.IntEnum):
    HELLO = 1
    PUSH_MODEL = 2
    PULL_MODEL = 3
    MODEL_DATA = 4
    ACK = 5
    ERROR = 6


@dataclass(frozen=True)
class Message:
    type: MessageType
    device_id: int
    body: bytes = b""

    def __post_init__(self) -> None:
        if not 0 <= self.device_id <= 0xFF:
            raise ProtocolError(f"device_id {self.device_id} outside u8 range")
        if len(self.body) > MAX_BODY:
            raise ProtocolError(f"body of {len(self.body)} bytes exceeds cap {MAX_BODY}")


def encode_message(msg: Message) -> bytes:
    return _HEADER.pack(int(msg.type), msg.device_id, 0, len(msg.body)) + msg.body


class MessageBuffer:
    """Incremental decoder over an ordered byte stream."""

    def __init__(self) -> None:
        self._buf = bytearray()

    def feed(self, data: bytes) -> None:
        self._buf.extend(data)

    def pop(self) -> Message | None:
        """Return the next complete message, or None if more bytes are needed."""
        if len(self._buf) < HEADER_SIZE:
            return None
        mtype, device_id, reserved, length = _HEADER.unpack_from(self._buf)
        if reserved != 0:
            raise ProtocolError(f"reserved header field must be 0, got {reserved}")
        try:
            mtype = MessageType(mtype)
        except ValueError:
            raise ProtocolError(f"unknown message type {mtype}") from None
        if length > MAX_BODY:
            raise ProtocolError(f"declared body of {length} bytes exceeds cap {MAX_BODY}")
        if len(self._buf) < HEADER_SIZE + length:
            return None
        body = bytes(self._buf[HEADER_SIZE : HEADER_SIZE + length])
        del self._buf[: HEADER_SIZE + length]
        return Message(mtype, device_id, body)

    def pop_all(self) -> list[Message]:
        out = []
        while (msg := self.pop()) is not None:
            out.append(msg)
        return out


def model_data_body(blob: ModelBlob) -> bytes:
    """Encode and frame a blob into a MODEL_DATA body."""
    return wire.frames_to_bytes(wire.frame_stream(wire.encode_model(blob)))


def blob_from_model_data(body: bytes) -> ModelBlob:
    """Inverse of model_data_body; raises WireError subclasses on bad bytes."""
    return wire.decode_model(wire.unframe_stream(wire.frames_from_bytes(body)))


def parse_endpoint(text: str) -> tuple[str, int]:
    """Split 'host:port'. Host may be empty (bind-all)."""
    host, sep, port = text.rpartition(":")
    if not sep or not port.isdigit():
        raise ValueError(f"endpoint must be host:port, got {text!r}")
    return host or "0.0.0.0", int(port)


_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}


def configure_logging() -> None:
    """Apply FTL_LOG_LEVEL (error|info|debug, default info) to our loggers."""
    raw = os.environ.get("FTL_LOG_LEVEL", "info").lower()
    if raw not in _LEVELS:
        raise ValueError(f"FTL_LOG_LEVEL must be one of {sorted(_LEVELS)}, got {raw!r}")
    logging.basicConfig(format="%(asctime)s %(name)s %(levelname)s %(message)s")
    logging.getLogger("fedhead").setLevel(_LEVELS[raw])
