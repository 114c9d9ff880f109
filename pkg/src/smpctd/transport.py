"""Framed point-to-point messaging between parties and the dealer.

Every message is a frame ``msg_type (1 byte) | payload_len (u64 LE) | payload``.
Two channel flavours share that format: in-process queues (tests, the
threaded runner) and TCP sockets (one OS process per party).
"""

from __future__ import annotations

import hashlib
import queue
import socket
import struct
import threading
import time
from dataclasses import dataclass, field, replace
from enum import IntEnum

import numpy as np

from .errors import ChannelClosed, ConnectTimeout, HandshakeMismatch, ProtocolError
from .ring import from_wire, to_wire

HEADER = struct.Struct("<BQ")
HEADER_SIZE = HEADER.size  # 9


class MsgType(IntEnum):
    HANDSHAKE = 0x01
    DATA = 0x02
    REVEAL = 0x03
    TRIPLE = 0x04


def encode_frame(msg_type: int, payload: bytes) -> bytes:
    return HEADER.pack(int(msg_type), len(payload)) + payload


def decode_frame(raw: bytes) -> tuple[MsgType, bytes]:
    if len(raw) < HEADER_SIZE:
        raise ProtocolError("truncated frame header")
    kind, length = HEADER.unpack_from(raw)
    if len(raw) - HEADER_SIZE != length:
        raise ProtocolError(f"payload_len {length} does not match payload of {len(raw) - HEADER_SIZE} bytes")
    try:
        msg_type = MsgType(kind)
    except ValueError:
        raise ProtocolError(f"unknown msg_type 0x{kind:02x}") from None
    return msg_type, raw[HEADER_SIZE:]


def session_tag(session_id: str) -> int:
    return int.from_bytes(hashlib.blake2b(session_id.encode(), digest_size=8).digest(), "little")


# -- channels ---------------------------------------------------------------

class Channel:
    def send(self, frame: bytes) -> None:
        raise NotImplementedError

    def recv(self) -> bytes:
        raise NotImplementedError

    def close(self) -> None:
        raise NotImplementedError


_CLOSED = object()


class LoopbackChannel(Channel):
    """One end of an in-process duplex pipe carrying encoded frames."""

    def __init__(self, inbox: queue.SimpleQueue, outbox: queue.SimpleQueue,
                 abort: threading.Event | None = None, poll: float = 0.25):
        self._inbox = inbox
        self._outbox = outbox
        self._abort = abort
        self._poll = poll
        self.closed = False

    def send(self, frame: bytes) -> None:
        if self.closed:
            raise ChannelClosed("send on closed channel")
        self._outbox.put(frame)

    def recv(self) -> bytes:
        if self.closed:
            raise ChannelClosed("recv on closed channel")
        while True:
            try:
                item = self._inbox.get(timeout=self._poll)
            except queue.Empty:
                if self._abort is not None and self._abort.is_set():
                    raise ChannelClosed("run aborted") from None
                continue
            if item is _CLOSED:
                self.closed = True
                raise ChannelClosed("peer closed the channel")
            return item

    def close(self) -> None:
        if not self.closed:
            self.closed = True
            self._outbox.put(_CLOSED)


def loopback_pair(abort: threading.Event | None = None) -> tuple[LoopbackChannel, LoopbackChannel]:
    a, b = queue.SimpleQueue(), queue.SimpleQueue()
    return LoopbackChannel(a, b, abort), LoopbackChannel(b, a, abort)


class SocketChannel(Channel):
    def __init__(self, sock: socket.socket):
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self._sock = sock
        self.closed = False

    def send(self, frame: bytes) -> None:
        if self.closed:
            raise ChannelClosed("send on closed channel")
        try:
            self._sock.sendall(frame)
        except OSError as exc:
            raise ChannelClosed(str(exc)) from exc

    def _read_exact(self, n: int) -> bytes:
        buf = bytearray()
        while len(buf) < n:
            try:
                chunk = self._sock.recv(n - len(buf))
            except OSError as exc:
                raise ChannelClosed(str(exc)) from exc
            if not chunk:
                self.closed = True
                raise ChannelClosed("peer closed the connection")
            buf += chunk
        return bytes(buf)

    def recv(self) -> bytes:
        if self.closed:
            raise ChannelClosed("recv on closed channel")
        header = self._read_exact(HEADER_SIZE)
        _, length = HEADER.unpack(header)
        return header + self._read_exact(length)

    def close(self) -> None:
        if not self.closed:
            self.closed = True
            try:
                self._sock.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            self._sock.close()


# -- metrics ----------------------------------------------------------------

@dataclass
class SessionMetrics:
    bytes_sent: int = 0
    bytes_received: int = 0
    rounds: int = 0
    wall_time: float = 0.0
    peak_ring_elements: int = 0
    # Dealer traffic is offline preprocessing; kept apart so the
    # party-to-party totals balance exactly.
    dealer_bytes_sent: int = 0
    dealer_bytes_received: int = 0

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


# -- sessions ---------------------------------------------------------------

DEALER = -1


@dataclass
class PartyConfig:
    party_id: int
    m: int
    listen_address: tuple[str, int] | None = None
    peer_addresses: dict[int, tuple[str, int]] = field(default_factory=dict)
    dealer_address: tuple[str, int] | None = None
    session_id: str = "smpctd"
    frac_bits: int = 20
    connect_timeout: float = 10.0

    def __post_init__(self):
        if self.m < 2:
            raise ValueError("need at least two parties")
        if not 0 <= self.party_id < self.m:
            raise ValueError(f"party_id {self.party_id} outside [0, {self.m})")


class Session:
    """A party's open channels plus its traffic counters."""

    def __init__(self, party_id: int, m: int, frac_bits: int, session_id: str,
                 peers: dict[int, Channel], dealer: Channel | None = None):
        self.party_id = party_id
        self.m = m
        self.frac_bits = frac_bits
        self.session_id = session_id
        self.peers = peers
        self.dealer = dealer
        self._metrics = SessionMetrics()
        self._lock = threading.Lock()
        self._t0 = time.perf_counter()
        self.closed = False

    # counters
    def _count(self, name: str, amount: int) -> None:
        with self._lock:
            setattr(self._metrics, name, getattr(self._metrics, name) + amount)

    def begin_round(self) -> None:
        self._count("rounds", 1)

    def note_live_elements(self, live: int) -> None:
        with self._lock:
            if live > self._metrics.peak_ring_elements:
                self._metrics.peak_ring_elements = live

    def metrics_snapshot(self) -> SessionMetrics:
        with self._lock:
            return replace(self._metrics, wall_time=time.perf_counter() - self._t0)

    def reset_metrics(self) -> None:
        with self._lock:
            self._metrics = SessionMetrics()
            self._t0 = time.perf_counter()

    # messaging
    def _channel(self, peer: int) -> Channel:
        if self.closed:
            raise ChannelClosed("session closed")
        if peer == DEALER:
            if self.dealer is None:
                raise ProtocolError("no dealer channel in this session")
            return self.dealer
        try:
            return self.peers[peer]
        except KeyError:
            raise ProtocolError(f"no channel to party {peer}") from None

    def send_bytes(self, peer: int, msg_type: MsgType, payload: bytes) -> None:
        frame = encode_frame(msg_type, payload)
        self._channel(peer).send(frame)
        self._count("dealer_bytes_sent" if peer == DEALER else "bytes_sent", len(frame))

    def recv_bytes(self, peer: int, expected: MsgType) -> bytes:
        frame = self._channel(peer).recv()
        self._count("dealer_bytes_received" if peer == DEALER else "bytes_received", len(frame))
        msg_type, payload = decode_frame(frame)
        if msg_type != expected:
            raise ProtocolError(f"expected {expected.name} from {peer}, got {msg_type.name}")
        return payload

    def send_block(self, peer: int, msg_type: MsgType, payload: np.ndarray) -> None:
        self.send_bytes(peer, msg_type, to_wire(payload))

    def recv_block(self, peer: int, expected: MsgType) -> np.ndarray:
        return from_wire(self.recv_bytes(peer, expected))

    def exchange(self, block: np.ndarray, msg_type: MsgType = MsgType.DATA) -> list[np.ndarray]:
        """Broadcast ``block`` and collect every peer's block: one round."""
        self.begin_round()
        flat = np.ascontiguousarray(block).reshape(-1)
        for peer in sorted(self.peers):
            self.send_block(peer, msg_type, flat)
        out: list[np.ndarray] = [None] * self.m  # type: ignore[list-item]
        out[self.party_id] = flat
        for peer in sorted(self.peers):
            got = self.recv_block(peer, msg_type)
            if got.size != flat.size:
                raise ProtocolError(f"party {peer} sent {got.size} elements, expected {flat.size}")
            out[peer] = got
        return out

    def close(self) -> None:
        if self.closed:
            return
        self.closed = True
        for ch in list(self.peers.values()) + ([self.dealer] if self.dealer else []):
            ch.close()


# -- handshake --------------------------------------------------------------

def _hello(tag: int, ident: int, m: int, f: int) -> bytes:
    return encode_frame(MsgType.HANDSHAKE, struct.pack("<QqQQ", tag, ident, m, f))


def _read_hello(raw: bytes) -> tuple[int, int, int, int]:
    msg_type, payload = decode_frame(raw)
    if msg_type != MsgType.HANDSHAKE or len(payload) != 32:
        raise ProtocolError("expected a handshake frame")
    return struct.unpack("<QqQQ", payload)


def handshake(channel: Channel, tag: int, me: int, m: int, f: int, expect: int | None) -> int:
    """Swap (session, id, m, f) with the other end; returns the peer's id."""
    channel.send(_hello(tag, me, m, f))
    their_tag, their_id, their_m, their_f = _read_hello(channel.recv())
    if (their_tag, their_m, their_f) != (tag, m, f):
        raise HandshakeMismatch(
            f"peer {their_id} has (session={their_tag:x}, m={their_m}, f={their_f}); "
            f"we have (session={tag:x}, m={m}, f={f})")
    if expect is not None and their_id != expect:
        raise HandshakeMismatch(f"expected party {expect}, got {their_id}")
    return their_id


def loopback_sessions(m: int, frac_bits: int = 20, session_id: str = "smpctd",
                      abort: threading.Event | None = None, with_dealer: bool = True,
                      party_frac_bits: list[int] | None = None):
    """Build a fully meshed in-process session per party.

    Returns ``(sessions, dealer_channels)``; the dealer end of each party's
    dealer link is ``dealer_channels[i]``.  Handshakes run on worker
    threads, so a parameter mismatch surfaces as HandshakeMismatch here.
    """
    tag = session_tag(session_id)
    fbits = party_frac_bits or [frac_bits] * m
    links: dict[tuple[int, int], LoopbackChannel] = {}
    for i in range(m):
        for j in range(i + 1, m):
            links[(i, j)], links[(j, i)] = loopback_pair(abort)
    dealer_side: list[LoopbackChannel] = []
    party_dealer: list[LoopbackChannel | None] = []
    for i in range(m):
        if with_dealer:
            p, d = loopback_pair(abort)
            party_dealer.append(p)
            dealer_side.append(d)
        else:
            party_dealer.append(None)

    errors: list[BaseException] = []

    def shake(ch, me, f, other):
        try:
            handshake(ch, tag, me, m, f, other)
        except BaseException as exc:  # noqa: BLE001 - reported below
            errors.append(exc)

    threads = []
    for (i, j), ch in links.items():
        threads.append(threading.Thread(target=shake, args=(ch, i, fbits[i], j)))
    for i in range(m):
        if with_dealer:
            threads.append(threading.Thread(target=shake, args=(party_dealer[i], i, fbits[i], DEALER)))
            threads.append(threading.Thread(target=shake, args=(dealer_side[i], DEALER, frac_bits, i)))
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    if errors:
        raise errors[0]
    sessions = []
    for i in range(m):
        peers = {j: links[(i, j)] for j in range(m) if j != i}
        sessions.append(Session(i, m, fbits[i], session_id, peers, party_dealer[i]))
    return sessions, dealer_side


def _connect(address: tuple[str, int], deadline: float) -> socket.socket:
    last: Exception | None = None
    while time.monotonic() < deadline:
        try:
            sock = socket.create_connection(address, timeout=max(0.05, deadline - time.monotonic()))
            sock.settimeout(None)
            return sock
        except OSError as exc:
            last = exc
            time.sleep(0.05)
    raise ConnectTimeout(f"could not reach {address[0]}:{address[1]}: {last}")


def establish_session(config: PartyConfig) -> Session:
    """Open the full TCP mesh described by ``config`` and verify parameters.

    Parties connect to the dealer and to every lower-numbered peer, and
    accept connections from higher-numbered peers.
    """
    tag = session_tag(config.session_id)
    deadline = time.monotonic() + config.connect_timeout
    f, m, me = config.frac_bits, config.m, config.party_id
    listener = None
    peers: dict[int, Channel] = {}
    dealer = None
    try:
        if me < m - 1:
            if config.listen_address is None:
                raise ValueError("parties other than the last need a listen address")
            listener = socket.create_server(config.listen_address, reuse_port=False)
        if config.dealer_address is not None:
            dealer = SocketChannel(_connect(config.dealer_address, deadline))
            handshake(dealer, tag, me, m, f, DEALER)
        for j in range(me):
            ch = SocketChannel(_connect(config.peer_addresses[j], deadline))
            handshake(ch, tag, me, m, f, j)
            peers[j] = ch
        while len(peers) < m - 1:
            listener.settimeout(max(0.01, deadline - time.monotonic()))
            try:
                sock, _ = listener.accept()
            except socket.timeout:
                raise ConnectTimeout(f"party {me} timed out waiting for peers") from None
            sock.settimeout(None)
            ch = SocketChannel(sock)
            other = handshake(ch, tag, me, m, f, None)
            if other <= me or other >= m or other in peers:
                raise HandshakeMismatch(f"unexpected connection from party {other}")
            peers[other] = ch
    except BaseException:
        for ch in peers.values():
            ch.close()
        if dealer is not None:
            dealer.close()
        raise
    finally:
        if listener is not None:
            listener.close()
    return Session(me, m, f, config.session_id, peers, dealer)


def dealer_listen(address: tuple[str, int], m: int, frac_bits: int, session_id: str,
                  timeout: float = 10.0) -> list[Channel]:
    """Accept one connection per party; returns channels indexed by party id."""
    tag = session_tag(session_id)
    deadline = time.monotonic() + timeout
    chans: dict[int, Channel] = {}
    with socket.create_server(address) as listener:
        while len(chans) < m:
            listener.settimeout(max(0.01, deadline - time.monotonic()))
            try:
                sock, _ = listener.accept()
            except socket.timeout:
                raise ConnectTimeout("dealer timed out waiting for parties") from None
            sock.settimeout(None)
            ch = SocketChannel(sock)
            pid = handshake(ch, tag, DEALER, m, frac_bits, None)
            if not 0 <= pid < m or pid in chans:
                raise HandshakeMismatch(f"dealer got unexpected party id {pid}")
            chans[pid] = ch
    return [chans[i] for i in range(m)]


def send_block(session: Session, peer: int, msg_type: MsgType, payload: np.ndarray) -> None:
    session.send_block(peer, msg_type, payload)


def metrics_snapshot(session: Session) -> SessionMetrics:
    return session.metrics_snapshot()
