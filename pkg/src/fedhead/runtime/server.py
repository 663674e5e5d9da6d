"""Global-model server: registers device agents, runs aggregation rounds.

Single-threaded selector loop. A round is triggered by policy (every K
device pushes, or a timer), then proceeds: PULL_MODEL to every live
registered device, collect the MODEL_DATA replies, average them in device-id
order, install the mean as the new global, and push it back to everyone.

Devices that miss the collection deadline are marked stale and excluded
until they next speak; a device whose MODEL_DATA fails wire validation gets
an ERROR reply and drops out of that round only. Writes use blocking
sendall: messages here are a few KB against default 64 KB socket buffers.
"""
from __future__ import annotations

import logging
import selectors
import socket
import time
import zlib
from collections import deque
from dataclasses import dataclass, field

from ..errors import ShapeError, WireError
from ..federation import ModelBlob, average_blobs, evaluate
from ..wire import encode_model
from .protocol import (
    Message,
    MessageBuffer,
    MessageType,
    STATUS_DATA_EXHAUSTED,
    encode_message,
    blob_from_model_data,
    model_data_body,
)
from ..errors import ProtocolError

log = logging.getLogger("fedhead.runtime.server")


@dataclass(frozen=True)
class RoundPolicy:
    """count: aggregate after every `value` device pushes; timer: every `value` s."""

    kind: str
    value: float

    def __post_init__(self) -> None:
        if self.kind not in ("count", "timer"):
            raise ValueError(f"policy kind must be count or timer, got {self.kind!r}")
        if self.kind == "count" and (self.value != int(self.value) or self.value < 1):
            raise ValueError(f"count policy needs a positive integer, got {self.value}")
        if self.kind == "timer" and self.value <= 0:
            raise ValueError(f"timer policy needs a positive interval, got {self.value}")

    @classmethod
    def parse(cls, text: str) -> "RoundPolicy":
        kind, sep, value = text.partition(":")
        if not sep:
            raise ValueError(f"policy must be count:K or timer:SECONDS, got {text!r}")
        return cls(kind, float(value))


@dataclass(eq=False)
class RoundRecord:
    index: int
    blob: ModelBlob
    checksum: int
    participants: tuple[int, ...]
    val_accuracy: float | None = None


class _Conn:
    def __init__(self, sock: socket.socket, addr) -> None:
        self.sock = sock
        self.addr = addr
        self.buf = MessageBuffer()
        self.device_id: int | None = None
        self.stale = False
        # Meaning of each not-yet-received MODEL_DATA from this device, FIFO.
        self.expect: deque[str] = deque()


class _PendingRound:
    def __init__(self, expected: set[int], deadline: float) -> None:
        self.expected = expected
        self.blobs: dict[int, ModelBlob] = {}
        self.deadline = deadline

    def complete(self) -> bool:
        return self.expected <= set(self.blobs)


@dataclass(eq=False)
class Server:
    host: str
    port: int
    initial_blob: ModelBlob
    policy: RoundPolicy
    validation: list | None = None
    round_timeout: float = 5.0
    max_rounds: int | None = None
    history: list[RoundRecord] = field(default_factory=list)

    def __post_init__(self) -> None:
        self.global_blob = self.initial_blob
        self._sel = selectors.DefaultSelector()
        self._listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self._listener.bind((self.host, self.port))
        self._listener.listen()
        self._listener.setblocking(False)
        self.address: tuple[str, int] = self._listener.getsockname()
        self._sel.register(self._listener, selectors.EVENT_READ, None)
        self._devices: dict[int, _Conn] = {}
        self._pending: _PendingRound | None = None
        self._updates = 0
        self._last_round = time.monotonic()
        self._stopped = False

    # -- lifecycle ---------------------------------------------------------

    def stop(self) -> None:
        self._stopped = True

    def run(self) -> None:
        """Serve until stop() or max_rounds; safe to run in a worker thread."""
        log.info(
            "serving on %s:%d policy=%s:%g shape=(%d,%d)",
            self.address[0], self.address[1], self.policy.kind, self.policy.value,
            self.global_blob.embedding_dim, self.global_blob.num_classes,
        )
        try:
            while not self._stopped:
                for key, _ in self._sel.select(timeout=0.05):
                    if key.data is None:
                        self._accept()
                    else:
                        self._service(key.data)
                self._drive_round()
                if self.max_rounds is not None and len(self.history) >= self.max_rounds:
                    break
        finally:
            self._shutdown()

    def _shutdown(self) -> None:
        for conn in list(self._conns()):
            self._drop(conn)
        self._sel.unregister(self._listener)
        self._listener.close()
        self._sel.close()

    def _conns(self):
        return [k.data for k in list(self._sel.get_map().values()) if k.data is not None]

    # -- connection handling -----------------------------------------------

    def _accept(self) -> None:
        sock, addr = self._listener.accept()
        sock.setblocking(True)  # reads are driven by readiness; writes block briefly
        # Rounds are chains of small sequential messages; Nagle + delayed ACK
        # would add ~40ms to every exchange.
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        conn = _Conn(sock, addr)
        self._sel.register(sock, selectors.EVENT_READ, conn)
        log.debug("connection from %s", addr)

    def _drop(self, conn: _Conn) -> None:
        try:
            self._sel.unregister(conn.sock)
        except (KeyError, ValueError):
            pass
        conn.sock.close()
        if conn.device_id is not None and self._devices.get(conn.device_id) is conn:
            del self._devices[conn.device_id]
            log.info("device %d disconnected", conn.device_id)
            if self._pending is not None:
                self._pending.expected.discard(conn.device_id)

    def _send(self, conn: _Conn, msg: Message) -> bool:
        try:
            conn.sock.sendall(encode_message(msg))
            return True
        except OSError as exc:
            log.warning("send to %s failed: %s", conn.addr, exc)
            self._drop(conn)
            return False

    def _service(self, conn: _Conn) -> None:
        try:
            data = conn.sock.recv(65536)
        except OSError as exc:
            log.warning("recv from %s failed: %s", conn.addr, exc)
            self._drop(conn)
            return
        if not data:
            self._drop(conn)
            return
        conn.buf.feed(data)
        try:
            messages = conn.buf.pop_all()
        except ProtocolError as exc:
            # Header-level corruption: framing is lost, drop the connection.
            log.error("protocol error from %s: %s", conn.addr, exc)
            self._send(conn, Message(MessageType.ERROR, 0, str(exc).encode()))
            self._drop(conn)
            return
        for msg in messages:
            self._handle(conn, msg)

    # -- message handling ----------------------------------------------------

    def _handle(self, conn: _Conn, msg: Message) -> None:
        if conn.stale:
            conn.stale = False
            log.info("device %s is live again", conn.device_id)
        if msg.type is MessageType.HELLO:
            self._register(conn, msg.device_id)
        elif msg.type is MessageType.PUSH_MODEL:
            conn.expect.append("push")
        elif msg.type is MessageType.MODEL_DATA:
            self._on_model_data(conn, msg)
        elif msg.type is MessageType.ACK:
            if msg.body == STATUS_DATA_EXHAUSTED:
                log.info("device %s reports data exhausted", conn.device_id)
        elif msg.type is MessageType.ERROR:
            log.warning("device %s sent ERROR: %s", conn.device_id, msg.body.decode(errors="replace"))
            if msg.body == b"NO_MODEL" and "pull" in conn.expect:
                # The device answered our oldest pull with an error, not a model.
                conn.expect.remove("pull")
                if self._pending is not None:
                    self._pending.expected.discard(conn.device_id)
        else:  # PULL_MODEL has no meaning in the device->server direction
            log.warning("unexpected %s from device %s", msg.type.name, conn.device_id)
            self._send(conn, Message(MessageType.ERROR, 0, b"UNEXPECTED_MESSAGE"))

    def _register(self, conn: _Conn, device_id: int) -> None:
        old = self._devices.get(device_id)
        if old is not None and old is not conn:
            log.warning("device %d re-registered from %s; dropping old connection", device_id, conn.addr)
            self._drop(old)
        conn.device_id = device_id
        self._devices[device_id] = conn
        log.info("device %d registered from %s", device_id, conn.addr)
        # Greet with the current global so the agent can start training.
        self._push_global(conn)

    def _push_global(self, conn: _Conn) -> None:
        if self._send(conn, Message(MessageType.PUSH_MODEL, 0)):
            self._send(conn, Message(MessageType.MODEL_DATA, 0, model_data_body(self.global_blob)))

    def _on_model_data(self, conn: _Conn, msg: Message) -> None:
        if not conn.expect:
            log.warning("MODEL_DATA from device %s with no pending pull or push", conn.device_id)
            self._send(conn, Message(MessageType.ERROR, 0, b"UNEXPECTED_MODEL_DATA"))
            return
        purpose = conn.expect.popleft()
        try:
            blob = blob_from_model_data(msg.body)
            if (blob.embedding_dim, blob.num_classes) != (
                self.global_blob.embedding_dim,
                self.global_blob.num_classes,
            ):
                raise ShapeError(
                    f"model shape ({blob.embedding_dim},{blob.num_classes}) does not match session"
                )
        except (WireError, ShapeError) as exc:
            log.warning("bad MODEL_DATA from device %s: %s", conn.device_id, exc)
            self._send(conn, Message(MessageType.ERROR, 0, type(exc).__name__.encode()))
            if purpose == "pull" and self._pending is not None:
                self._pending.expected.discard(conn.device_id)
            return
        if purpose == "push":
            self._updates += 1
            log.debug("device %s pushed an update (%d pending)", conn.device_id, self._updates)
        else:
            if self._pending is not None and conn.device_id in self._pending.expected:
                self._pending.blobs[conn.device_id] = blob
            else:
                log.debug("late pull reply from device %s ignored", conn.device_id)

    # -- rounds ---------------------------------------------------------------

    def _live_devices(self) -> dict[int, _Conn]:
        return {d: c for d, c in self._devices.items() if not c.stale}

    def _drive_round(self) -> None:
        now = time.monotonic()
        if self._pending is None:
            if self._should_trigger(now):
                self._start_round(now)
        if self._pending is not None:
            if self._pending.complete():
                self._finish_round()
            elif now >= self._pending.deadline:
                missing = self._pending.expected - set(self._pending.blobs)
                for device_id in missing:
                    conn = self._devices.get(device_id)
                    if conn is not None:
                        conn.stale = True
                    log.warning("device %d timed out; marked stale for this round", device_id)
                self._finish_round()

    def _should_trigger(self, now: float) -> bool:
        if not self._live_devices():
            return False
        if self.policy.kind == "count":
            return self._updates >= int(self.policy.value)
        return now - self._last_round >= self.policy.value

    def _start_round(self, now: float) -> None:
        live = self._live_devices()
        self._pending = _PendingRound(set(live), now + self.round_timeout)
        log.debug("round %d: pulling from %s", len(self.history) + 1, sorted(live))
        for device_id in sorted(live):
            conn = live[device_id]
            if self._send(conn, Message(MessageType.PULL_MODEL, 0)):
                conn.expect.append("pull")

    def _finish_round(self) -> None:
        pending = self._pending
        self._pending = None
        self._updates = 0
        self._last_round = time.monotonic()
        collected = pending.blobs
        if not collected:
            log.warning("round aborted: no device answered the pull")
            return
        ordered = [collected[d] for d in sorted(collected)]
        self.global_blob = average_blobs(ordered)
        checksum = zlib.crc32(encode_model(self.global_blob))
        acc = None
        if self.validation:
            acc = evaluate(self.global_blob, self.validation)
        record = RoundRecord(
            index=len(self.history) + 1,
            blob=self.global_blob,
            checksum=checksum,
            participants=tuple(sorted(collected)),
            val_accuracy=acc,
        )
        self.history.append(record)
        log.info(
            "round %d: %d devices, checksum %08x%s",
            record.index, len(record.participants), checksum,
            "" if acc is None else f", val_acc {acc:.4f}",
        )
        for conn in self._devices.values():
            self._push_global(conn)


def serve(
    endpoint: tuple[str, int],
    initial_blob: ModelBlob,
    policy: RoundPolicy,
    *,
    validation=None,
    round_timeout: float = 5.0,
    max_rounds: int | None = None,
) -> Server:
    """Run a server in the calling thread until stopped; returns its record."""
    server = Server(
        endpoint[0], endpoint[1], initial_blob, policy,
        validation=validation, round_timeout=round_timeout, max_rounds=max_rounds,
    )
    try:
        server.run()
    except KeyboardInterrupt:
        log.info("interrupted; shutting down")
    return server
