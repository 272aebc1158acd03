"""Rendezvous net channels: synchronized, unbuffered channels over TCP.

Wire format (everything on the wire is a frame):

    u32 big-endian length | u8 kind | u16 big-endian channel | payload

where length covers kind + channel + payload.  A writer sends one frame and
then blocks until the reader's acknowledgement frame comes back; the reader
acknowledges only when its owning process actually accepts the message, so a
completed write means the value was taken, not merely delivered.  Input ends
are created before output ends connect; the first frame on a fresh
connection is a channel-attach announcement answered by an accept/busy
acknowledgement.

Two transports share these semantics: :class:`TcpNetwork` (real sockets, one
connection per writer per channel) and :class:`LoopbackNetwork` (in-process,
frames still pass through the codec).  Output-side and input-side selection
(`select_write`, `select_read`) is available on the loopback transport and is
what node-internal fan-out/fan-in uses in every run mode.
"""

from __future__ import annotations

import itertools
import socket
import struct
import threading
import time
from collections import deque
from dataclasses import dataclass
from typing import Optional, Sequence

from .topology import ChannelAddress

REGISTER = 0x01
PLAN = 0x02
SYNC = 0x03
DATA = 0x04
ACK = 0x05
TIMING = 0x06

FRAME_KINDS = {REGISTER, PLAN, SYNC, DATA, ACK, TIMING}
KIND_NAMES = {REGISTER: "REGISTER", PLAN: "PLAN", SYNC: "SYNC",
              DATA: "DATA", ACK: "ACK", TIMING: "TIMING"}

_MAX_PAYLOAD = 0xFFFFFFFF - 3

ONE_TO_ONE = "one-to-one"
MANY_TO_ONE = "many-to-one"

_ACK_OK = b""
_ACK_BUSY = b"BUSY"
_ACK_REJECTED = b"REJECTED"


class ChannelError(Exception):
    pass


class Oversize(ChannelError):
    pass


class UnknownKind(ChannelError):
    pass


class Truncated(ChannelError):
    pass


class AddressInUse(ChannelError):
    pass


class WriterRejected(ChannelError):
    """A one-to-one input end already has an active writer."""


class NoListener(ChannelError):
    """No input end answered within the connect retry window."""


class PeerClosed(ChannelError):
    pass


class AllWritersClosed(ChannelError):
    """Every writer of this input end has disconnected and the queue is empty."""


class AckRejected(ChannelError):
    """The reader answered with an error acknowledgement instead of accepting."""


class ReadTimeout(ChannelError):
    pass


class UnexpectedFrame(ChannelError):
    pass


class SelectUnsupported(ChannelError):
    pass


class ProtocolViolation(ChannelError):
    """A peer spoke out of turn: wrong frame kind, phase, or request state."""


@dataclass(frozen=True)
class Frame:
    kind: int
    channel: int
    payload: bytes = b""

    def __post_init__(self) -> None:
        if self.kind not in FRAME_KINDS:
            raise UnknownKind(f"unknown frame kind {self.kind:#04x}")
        if not 0 <= self.channel <= 0xFFFF:
            raise ChannelError(f"channel out of range: {self.channel}")


def encode_frame(f: Frame) -> bytes:
    if len(f.payload) > _MAX_PAYLOAD:
        raise Oversize(f"payload of {len(f.payload)} bytes exceeds frame limit")
    return struct.pack(">IBH", 3 + len(f.payload), f.kind, f.channel) + f.payload


def decode_frame(data: bytes) -> tuple[Frame, int]:
    """Decode one frame from the head of ``data``; returns (frame, bytes consumed)."""
    if len(data) < 4:
        raise Truncated(f"need 4 length bytes, have {len(data)}")
    (length,) = struct.unpack_from(">I", data)
    if length < 3:
        raise Truncated(f"frame length {length} shorter than header")
    if len(data) < 4 + length:
        raise Truncated(f"frame claims {length} bytes, only {len(data) - 4} present")
    kind, channel = struct.unpack_from(">BH", data, 4)
    if kind not in FRAME_KINDS:
        raise UnknownKind(f"unknown frame kind {kind:#04x}")
    payload = bytes(data[7:4 + length])
    return Frame(kind, channel, payload), 4 + length


@dataclass(frozen=True)
class Envelope:
    """One unit of application traffic: a workload object or the terminator."""

    terminator: bool = False
    workload_name: str = ""
    body: bytes = b""

    def __post_init__(self) -> None:
        if self.terminator and self.body:
            raise ChannelError("terminator envelope must carry no body")


TERMINATOR = Envelope(terminator=True)


def encode_envelope(e: Envelope) -> bytes:
    name = e.workload_name.encode("utf-8")
    return struct.pack(">BH", 1 if e.terminator else 0, len(name)) + name + e.body


def decode_envelope(data: bytes) -> Envelope:
    if len(data) < 3:
        raise Truncated("envelope header missing")
    flag, name_len = struct.unpack_from(">BH", data)
    if len(data) < 3 + name_len:
        raise Truncated("envelope name truncated")
    name = data[3:3 + name_len].decode("utf-8")
    return Envelope(terminator=bool(flag), workload_name=name,
                    body=bytes(data[3 + name_len:]))


class EventLog:
    """Append-only event log with a logical clock, for ordering assertions."""

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self._events: list[tuple[int, str, tuple]] = []
        self._clock = itertools.count()

    def append(self, kind: str, *details) -> int:
        with self._lock:
            t = next(self._clock)
            self._events.append((t, kind, details))
            return t

    def events(self) -> list[tuple[int, str, tuple]]:
        with self._lock:
            return list(self._events)


class InputEnd:
    """The reading end of a channel; owned by one sequential process."""

    def __init__(self, net, impl, address: ChannelAddress, arity: str) -> None:
        self._net = net
        self._impl = impl
        self.address = address
        self.arity = arity

    def read_frame(self, auto_ack: bool = True,
                   timeout: Optional[float] = None) -> tuple[Frame, int]:
        """Accept the next frame in arrival order; returns (frame, writer id)."""
        return self._net._input_read_frame(self._impl, auto_ack, timeout)

    def read(self, timeout: Optional[float] = None) -> Envelope:
        frame, _ = self.read_frame(timeout=timeout)
        if frame.kind != DATA:
            raise UnexpectedFrame(
                f"expected DATA on {self.address}, got {KIND_NAMES[frame.kind]}")
        return decode_envelope(frame.payload)

    def ack_writer(self, writer_id: int, payload: bytes = _ACK_OK) -> None:
        self._net._input_ack(self._impl, writer_id, payload)

    def reject_writer(self, writer_id: int) -> None:
        """Answer the writer's pending frame with an error ack and drop it."""
        self._net._input_reject(self._impl, writer_id)

    def close(self) -> None:
        self._net._input_close(self._impl)


class OutputEnd:
    """The writing end of a channel; one rendezvous in flight at a time."""

    def __init__(self, net, impl, address: ChannelAddress) -> None:
        self._net = net
        self._impl = impl
        self.address = address

    def write_frame(self, frame: Frame) -> None:
        """Send one frame and block until the reader accepts it."""
        self._net._output_write_frame(self._impl, frame)

    def write(self, envelope: Envelope) -> None:
        self.write_frame(Frame(DATA, self.address.channel, encode_envelope(envelope)))

    def close(self) -> None:
        self._net._output_close(self._impl)


# ---------------------------------------------------------------------------
# Loopback transport
#
# All conditions share the one network lock, so state stays atomic, but each
# waiter parks on its own condition: a frame arrival wakes one reader, an ack
# wakes one writer.  Selection registers a watcher condition on every end it
# covers.  Broadcast wakeups would otherwise dominate the cost of a
# rendezvous when worker threads are compute-bound.

class _LoopConn:
    __slots__ = ("wid", "input", "ack", "closed", "cond")

    def __init__(self, wid, input_, lock) -> None:
        self.wid = wid
        self.input = input_
        self.ack: Optional[bytes] = None
        self.closed = False
        self.cond = threading.Condition(lock)


class _LoopInput:
    __slots__ = ("address", "arity", "queue", "readers_waiting", "conns",
                 "unacked", "ever_attached", "closed", "next_wid", "cond",
                 "watchers")

    def __init__(self, address, arity, lock) -> None:
        self.address = address
        self.arity = arity
        self.queue: deque = deque()          # (arrival seq, conn, frame bytes)
        self.readers_waiting = 0
        self.conns: dict[int, _LoopConn] = {}
        self.unacked: dict[int, _LoopConn] = {}
        self.ever_attached = 0
        self.closed = False
        self.next_wid = 0
        self.cond = threading.Condition(lock)
        self.watchers: list[threading.Condition] = []

    def wake(self) -> None:
        self.cond.notify_all()
        for watcher in self.watchers:
            watcher.notify_all()


class LoopbackNetwork:
    """In-process transport with the same frame, ack and arity discipline."""

    def __init__(self, event_log: Optional[EventLog] = None) -> None:
        self._lock = threading.RLock()
        self._cond = threading.Condition(self._lock)
        self._ports: dict[tuple[str, int], dict[int, _LoopInput]] = {}
        self._seq = itertools.count()
        self.event_log = event_log

    def _log(self, kind: str, *details) -> None:
        if self.event_log is not None:
            self.event_log.append(kind, *details)

    def create_input_end(self, address: ChannelAddress,
                         arity: str = MANY_TO_ONE) -> InputEnd:
        if arity not in (ONE_TO_ONE, MANY_TO_ONE):
            raise ChannelError(f"unknown arity {arity!r}")
        key = (address.ip, address.port)
        with self._cond:
            channels = self._ports.setdefault(key, {})
            if address.channel in channels:
                raise AddressInUse(f"input end already listening at {address}")
            impl = _LoopInput(address, arity, self._lock)
            channels[address.channel] = impl
            self._cond.notify_all()      # wake attach retries
        self._log("input_created", address)
        return InputEnd(self, impl, address, arity)

    def connect_output_end(self, address: ChannelAddress,
                           retry_window: float = 10.0,
                           retry_step: float = 0.05) -> OutputEnd:
        deadline = time.monotonic() + retry_window
        key = (address.ip, address.port)
        with self._cond:
            while True:
                impl = self._ports.get(key, {}).get(address.channel)
                if impl is not None and not impl.closed:
                    if impl.arity == ONE_TO_ONE and impl.conns:
                        raise WriterRejected(f"{address} already has a writer")
                    conn = _LoopConn(impl.next_wid, impl, self._lock)
                    impl.next_wid += 1
                    impl.conns[conn.wid] = conn
                    impl.ever_attached += 1
                    impl.wake()
                    self._log("attached", address, conn.wid)
                    return OutputEnd(self, conn, address)
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    raise NoListener(f"no input end at {address} "
                                     f"after {retry_window:.1f}s")
                self._cond.wait(min(retry_step, remaining))

    # -- input side

    def _input_read_frame(self, impl: _LoopInput, auto_ack: bool,
                          timeout: Optional[float]):
        deadline = time.monotonic() + timeout if timeout is not None else None
        with self._lock:
            while not impl.queue:
                if impl.closed:
                    raise ChannelError(f"input end {impl.address} is closed")
                if impl.ever_attached and not impl.conns:
                    raise AllWritersClosed(f"no writers left on {impl.address}")
                if deadline is not None and time.monotonic() >= deadline:
                    raise ReadTimeout(f"no frame on {impl.address} "
                                      f"within {timeout:.3f}s")
                impl.readers_waiting += 1
                for watcher in impl.watchers:
                    watcher.notify_all()
                try:
                    if deadline is None:
                        impl.cond.wait()
                    else:
                        impl.cond.wait(deadline - time.monotonic())
                finally:
                    impl.readers_waiting -= 1
            seq, conn, data = impl.queue.popleft()
            frame, _ = decode_frame(data)
            self._log("accepted", impl.address, seq)
            if auto_ack:
                conn.ack = _ACK_OK
                conn.cond.notify_all()
            else:
                impl.unacked[conn.wid] = conn
            return frame, conn.wid

    def _input_ack(self, impl: _LoopInput, wid: int, payload: bytes) -> None:
        with self._lock:
            conn = impl.unacked.pop(wid)
            conn.ack = payload
            conn.cond.notify_all()

    def _input_reject(self, impl: _LoopInput, wid: int) -> None:
        with self._lock:
            conn = impl.unacked.pop(wid, None) or impl.conns.get(wid)
            if conn is None:
                return
            conn.ack = _ACK_REJECTED
            conn.closed = True
            impl.conns.pop(wid, None)
            conn.cond.notify_all()
            impl.wake()

    def _input_close(self, impl: _LoopInput) -> None:
        with self._lock:
            impl.closed = True
            key = (impl.address.ip, impl.address.port)
            channels = self._ports.get(key)
            if channels is not None:
                channels.pop(impl.address.channel, None)
                if not channels:
                    del self._ports[key]
            for conn in impl.conns.values():
                conn.closed = True
                conn.cond.notify_all()
            impl.conns.clear()
            impl.wake()
        self._log("input_closed", impl.address)

    # -- output side

    def _output_write_frame(self, conn: _LoopConn, frame: Frame) -> None:
        data = encode_frame(frame)
        with self._lock:
            if conn.closed or conn.input.closed:
                raise PeerClosed(f"peer of {conn.input.address} is gone")
            seq = next(self._seq)
            conn.input.queue.append((seq, conn, data))
            conn.input.wake()
            self._log("sent", conn.input.address, seq)
            while conn.ack is None:
                if conn.closed or conn.input.closed:
                    raise PeerClosed(f"peer of {conn.input.address} closed "
                                     "before acknowledging")
                conn.cond.wait()
            payload, conn.ack = conn.ack, None
            self._log("write_complete", conn.input.address, seq)
            if payload == _ACK_REJECTED:
                raise AckRejected(f"reader at {conn.input.address} rejected the frame")

    def _output_close(self, conn: _LoopConn) -> None:
        with self._lock:
            conn.closed = True
            conn.input.conns.pop(conn.wid, None)
            conn.cond.notify_all()
            conn.input.wake()

    def open_handles(self) -> dict[str, int]:
        with self._lock:
            inputs = sum(len(chs) for chs in self._ports.values())
            writers = sum(len(impl.conns)
                          for chs in self._ports.values() for impl in chs.values())
        return {"inputs": inputs, "writers": writers}

    # -- selection (loopback only)

    def _select_write(self, ends: Sequence[OutputEnd], frames: Sequence[Frame]) -> int:
        datas = [encode_frame(f) for f in frames]
        watcher = threading.Condition(self._lock)
        with self._lock:
            targets = [end._impl.input for end in ends]
            for impl in targets:
                impl.watchers.append(watcher)
            try:
                while True:
                    chosen = -1
                    for i, end in enumerate(ends):
                        conn = end._impl
                        if conn.closed or conn.input.closed:
                            raise PeerClosed(f"peer of {conn.input.address} is gone")
                        if conn.input.readers_waiting > 0 and not conn.input.queue:
                            chosen = i
                            break
                    if chosen < 0:
                        watcher.wait()
                        continue
                    conn = ends[chosen]._impl
                    seq = next(self._seq)
                    conn.input.queue.append((seq, conn, datas[chosen]))
                    conn.input.wake()
                    while conn.ack is None:
                        if conn.closed or conn.input.closed:
                            raise PeerClosed(f"peer of {conn.input.address} "
                                             "closed before acknowledging")
                        conn.cond.wait()
                    payload, conn.ack = conn.ack, None
                    if payload == _ACK_REJECTED:
                        raise AckRejected(
                            f"reader at {conn.input.address} rejected the frame")
                    return chosen
            finally:
                for impl in targets:
                    impl.watchers.remove(watcher)

    def _select_read(self, ends: Sequence[InputEnd]):
        impls = [e._impl for e in ends]
        watcher = threading.Condition(self._lock)
        with self._lock:
            for impl in impls:
                impl.watchers.append(watcher)
                impl.readers_waiting += 1
            try:
                while True:
                    best = -1
                    best_seq = None
                    for i, impl in enumerate(impls):
                        if impl.queue:
                            seq = impl.queue[0][0]
                            if best_seq is None or seq < best_seq:
                                best, best_seq = i, seq
                    if best >= 0:
                        impl = impls[best]
                        seq, conn, data = impl.queue.popleft()
                        frame, _ = decode_frame(data)
                        self._log("accepted", impl.address, seq)
                        conn.ack = _ACK_OK
                        conn.cond.notify_all()
                        return best, frame, conn.wid
                    if all(impl.ever_attached and not impl.conns
                           for impl in impls):
                        raise AllWritersClosed("no writers left on any selected end")
                    watcher.wait()
            finally:
                for impl in impls:
                    impl.watchers.remove(watcher)
                    impl.readers_waiting -= 1


def select_write(ends: Sequence[OutputEnd], envelope: Envelope) -> int:
    """Write ``envelope`` to whichever end's reader is waiting, lowest index
    first; blocks until some reader accepts.  Loopback ends only."""
    net = ends[0]._net
    if not isinstance(net, LoopbackNetwork) or any(e._net is not net for e in ends):
        raise SelectUnsupported("select requires ends of one loopback network")
    frames = [Frame(DATA, e.address.channel, encode_envelope(envelope)) for e in ends]
    return net._select_write(ends, frames)


def select_read(ends: Sequence[InputEnd]) -> tuple[int, Envelope]:
    """Accept from whichever end has the earliest pending frame; blocks until
    one arrives.  Loopback ends only."""
    net = ends[0]._net
    if not isinstance(net, LoopbackNetwork) or any(e._net is not net for e in ends):
        raise SelectUnsupported("select requires ends of one loopback network")
    idx, frame, _ = net._select_read(ends)
    if frame.kind != DATA:
        raise UnexpectedFrame(f"expected DATA, got {KIND_NAMES[frame.kind]}")
    return idx, decode_envelope(frame.payload)


# ---------------------------------------------------------------------------
# TCP transport

def _recv_exact(sock: socket.socket, n: int) -> Optional[bytes]:
    """Read exactly n bytes; None on clean EOF at a frame boundary."""
    buf = b""
    while len(buf) < n:
        try:
            chunk = sock.recv(n - len(buf))
        except OSError:
            chunk = b""
        if not chunk:
            if buf:
                raise Truncated("connection closed mid-frame")
            return None
        buf += chunk
    return buf


def _read_frame_socket(sock: socket.socket) -> Optional[Frame]:
    header = _recv_exact(sock, 4)
    if header is None:
        return None
    (length,) = struct.unpack(">I", header)
    body = _recv_exact(sock, length)
    if body is None:
        raise Truncated("connection closed mid-frame")
    frame, _ = decode_frame(header + body)
    return frame


class _TcpConn:
    __slots__ = ("wid", "sock", "send_lock", "alive")

    def __init__(self, wid, sock) -> None:
        self.wid = wid
        self.sock = sock
        self.send_lock = threading.Lock()
        self.alive = True

    def send_ack(self, channel: int, payload: bytes) -> None:
        with self.send_lock:
            try:
                self.sock.sendall(encode_frame(Frame(ACK, channel, payload)))
            except OSError:
                pass


class _TcpInput:
    __slots__ = ("address", "arity", "queue", "readers_waiting", "conns",
                 "unacked", "ever_attached", "closed", "next_wid", "cond")

    def __init__(self, address, arity, lock) -> None:
        self.address = address
        self.arity = arity
        self.queue: deque = deque()          # (arrival seq, conn, frame)
        self.readers_waiting = 0
        self.conns: dict[int, _TcpConn] = {}
        self.unacked: dict[int, _TcpConn] = {}
        self.ever_attached = 0
        self.closed = False
        self.next_wid = 0
        self.cond = threading.Condition(lock)


class _TcpListener:
    def __init__(self, sock, thread) -> None:
        self.sock = sock
        self.thread = thread
        self.channels: dict[int, _TcpInput] = {}
        self.alive = True


class _TcpOutput:
    __slots__ = ("sock", "address", "closed")

    def __init__(self, sock, address) -> None:
        self.sock = sock
        self.address = address
        self.closed = False


class TcpNetwork:
    """Net channels over real TCP sockets; one connection per writer per channel."""

    def __init__(self, event_log: Optional[EventLog] = None) -> None:
        self._lock = threading.RLock()
        self._cond = threading.Condition(self._lock)
        self._listeners: dict[tuple[str, int], _TcpListener] = {}
        self._threads: set[threading.Thread] = set()
        self._seq = itertools.count()
        self.event_log = event_log

    def _log(self, kind: str, *details) -> None:
        if self.event_log is not None:
            self.event_log.append(kind, *details)

    def _spawn(self, target, *args) -> threading.Thread:
        def run():
            try:
                target(*args)
            finally:
                with self._cond:
                    self._threads.discard(threading.current_thread())
                    self._cond.notify_all()
        t = threading.Thread(target=run, daemon=True)
        with self._cond:
            self._threads.add(t)
        t.start()
        return t

    def create_input_end(self, address: ChannelAddress,
                         arity: str = MANY_TO_ONE) -> InputEnd:
        if arity not in (ONE_TO_ONE, MANY_TO_ONE):
            raise ChannelError(f"unknown arity {arity!r}")
        key = (address.ip, address.port)
        with self._cond:
            listener = self._listeners.get(key)
            if listener is not None and address.channel in listener.channels:
                raise AddressInUse(f"input end already listening at {address}")
            if listener is None:
                sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
                sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
                try:
                    sock.bind((address.ip, address.port))
                    sock.listen(64)
                except OSError as exc:
                    sock.close()
                    raise AddressInUse(
                        f"cannot bind {address.ip}:{address.port}: {exc}")
                listener = _TcpListener(sock, None)
                self._listeners[key] = listener
                listener.thread = self._spawn(self._accept_loop, key, listener)
            impl = _TcpInput(address, arity, self._lock)
            listener.channels[address.channel] = impl
        self._log("input_created", address)
        return InputEnd(self, impl, address, arity)

    def _accept_loop(self, key, listener: _TcpListener) -> None:
        while listener.alive:
            try:
                sock, _peer = listener.sock.accept()
            except OSError:
                break
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            self._spawn(self._conn_loop, listener, sock)

    def _conn_loop(self, listener: _TcpListener, sock: socket.socket) -> None:
        try:
            attach = _read_frame_socket(sock)
        except Truncated:
            attach = None
        if attach is None:
            sock.close()
            return
        channel = attach.channel
        with self._cond:
            impl = listener.channels.get(channel)
            if impl is None or impl.closed:
                conn = None
            elif impl.arity == ONE_TO_ONE and impl.conns:
                conn = False
            else:
                conn = _TcpConn(impl.next_wid, sock)
                impl.next_wid += 1
                impl.conns[conn.wid] = conn
                impl.ever_attached += 1
                impl.cond.notify_all()
        if conn is None:
            sock.close()
            return
        if conn is False:
            try:
                sock.sendall(encode_frame(Frame(ACK, channel, _ACK_BUSY)))
            except OSError:
                pass
            sock.close()
            return
        conn.send_ack(channel, _ACK_OK)
        self._log("attached", impl.address, conn.wid)
        try:
            while True:
                try:
                    frame = _read_frame_socket(sock)
                except Truncated:
                    frame = None
                if frame is None:
                    break
                with self._lock:
                    impl.queue.append((next(self._seq), conn, frame))
                    impl.cond.notify_all()
        finally:
            conn.alive = False
            with self._lock:
                impl.conns.pop(conn.wid, None)
                impl.cond.notify_all()
            sock.close()

    def connect_output_end(self, address: ChannelAddress,
                           retry_window: float = 10.0,
                           retry_step: float = 0.05) -> OutputEnd:
        deadline = time.monotonic() + retry_window
        while True:
            sock = None
            try:
                sock = socket.create_connection((address.ip, address.port), timeout=5.0)
                sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
                sock.sendall(encode_frame(Frame(SYNC, address.channel)))
                ack = _read_frame_socket(sock)
                if ack is not None and ack.kind == ACK:
                    if ack.payload == _ACK_BUSY:
                        sock.close()
                        raise WriterRejected(f"{address} already has a writer")
                    sock.settimeout(None)
                    impl = _TcpOutput(sock, address)
                    self._log("attached_out", address)
                    return OutputEnd(self, impl, address)
                sock.close()          # listener up but channel missing: retry
            except WriterRejected:
                raise
            except OSError:
                if sock is not None:
                    sock.close()
            if time.monotonic() >= deadline:
                raise NoListener(f"no input end at {address} "
                                 f"after {retry_window:.1f}s")
            time.sleep(retry_step)

    # -- input side

    def _input_read_frame(self, impl: _TcpInput, auto_ack: bool,
                          timeout: Optional[float]):
        deadline = time.monotonic() + timeout if timeout is not None else None
        with self._lock:
            while not impl.queue:
                if impl.closed:
                    raise ChannelError(f"input end {impl.address} is closed")
                if impl.ever_attached and not impl.conns:
                    raise AllWritersClosed(f"no writers left on {impl.address}")
                if deadline is not None and time.monotonic() >= deadline:
                    raise ReadTimeout(f"no frame on {impl.address} "
                                      f"within {timeout:.3f}s")
                impl.readers_waiting += 1
                try:
                    if deadline is None:
                        impl.cond.wait()
                    else:
                        impl.cond.wait(deadline - time.monotonic())
                finally:
                    impl.readers_waiting -= 1
            seq, conn, frame = impl.queue.popleft()
            self._log("accepted", impl.address, seq)
            if not auto_ack:
                impl.unacked[conn.wid] = conn
        if auto_ack:
            conn.send_ack(impl.address.channel, _ACK_OK)
        return frame, conn.wid

    def _input_ack(self, impl: _TcpInput, wid: int, payload: bytes) -> None:
        with self._lock:
            conn = impl.unacked.pop(wid)
        conn.send_ack(impl.address.channel, payload)

    def _input_reject(self, impl: _TcpInput, wid: int) -> None:
        with self._lock:
            conn = impl.unacked.pop(wid, None) or impl.conns.get(wid)
        if conn is None:
            return
        conn.send_ack(impl.address.channel, _ACK_REJECTED)
        try:
            conn.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass

    def _input_close(self, impl: _TcpInput) -> None:
        with self._lock:
            impl.closed = True
            conns = list(impl.conns.values())
            key = (impl.address.ip, impl.address.port)
            listener = self._listeners.get(key)
            close_listener = False
            if listener is not None:
                listener.channels.pop(impl.address.channel, None)
                if not listener.channels:
                    listener.alive = False
                    close_listener = True
                    del self._listeners[key]
            impl.cond.notify_all()
        for conn in conns:
            try:
                conn.sock.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
        if close_listener:
            try:
                # a plain close does not wake a thread blocked in accept()
                listener.sock.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            listener.sock.close()
        self._log("input_closed", impl.address)

    # -- output side

    def _output_write_frame(self, impl: _TcpOutput, frame: Frame) -> None:
        if impl.closed:
            raise PeerClosed(f"output end to {impl.address} is closed")
        try:
            impl.sock.sendall(encode_frame(frame))
            ack = _read_frame_socket(impl.sock)
        except (OSError, Truncated):
            raise PeerClosed(f"peer of {impl.address} is gone")
        if ack is None:
            raise PeerClosed(f"peer of {impl.address} closed before acknowledging")
        if ack.kind != ACK:
            raise UnexpectedFrame(f"expected ACK, got {KIND_NAMES[ack.kind]}")
        if ack.payload == _ACK_REJECTED:
            raise AckRejected(f"reader at {impl.address} rejected the frame")
        self._log("write_complete", impl.address)

    def _output_close(self, impl: _TcpOutput) -> None:
        impl.closed = True
        try:
            impl.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        impl.sock.close()

    def open_handles(self) -> dict[str, int]:
        with self._lock:
            inputs = sum(len(l.channels) for l in self._listeners.values())
            writers = sum(len(impl.conns) for l in self._listeners.values()
                          for impl in l.channels.values())
            return {"listeners": len(self._listeners), "inputs": inputs,
                    "writers": writers, "threads": len(self._threads)}

    def wait_idle(self, timeout: float = 5.0) -> bool:
        """Wait for all listener/connection threads to exit; True if they did."""
        deadline = time.monotonic() + timeout
        with self._cond:
            while self._threads:
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    return False
                self._cond.wait(remaining)
        return True
