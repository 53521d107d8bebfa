"""Epoch-based peer-to-peer state exchange with RoundComplete barriers.

Every peer broadcasts its state for round 0, then loops on received messages:

* ``RoundComplete`` marks the sender as done with the round;
* a ``State`` stamped with a later round first closes the current round
  (the peer has fallen behind), then the state is stored;
* once a state from every other peer is present, the local node update runs,
  the states are cleared and a ``RoundComplete`` is broadcast;
* once every peer, self included, is complete, the round is closed: flags are
  reset, the round counter advances and the new state is broadcast.

The loop ends when the round counter reaches ``max_round``. Messages are
assumed to be delivered exactly once, in any order, with finite delay.
"""

from __future__ import annotations

import enum
import heapq
import logging
import queue
import socket
import struct
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Protocol

import numpy as np

from .autodiff import Stream
from .model import StateVector

log = logging.getLogger(__name__)

MAGIC = b"PSX1"
# magic | kind u8 | sender u32 | round u32 | fingerprint 8s | payload_len u32 (count of float64)
HEADER = struct.Struct("<4sBII8sI")
HEADER_SIZE = HEADER.size


class Kind(enum.IntEnum):
    STATE = 0
    ROUND_COMPLETE = 1


class WireError(ValueError):
    """Malformed, truncated or foreign frame."""


class ProtocolError(RuntimeError):
    """A protocol invariant was violated."""


class LivenessFault(TimeoutError):
    """No message arrived before the deadline."""

    def __init__(self, message: str, snapshot: dict):
        super().__init__(f"{message}; state={snapshot}")
        self.snapshot = snapshot


@dataclass(frozen=True)
class PeerMessage:
    kind: Kind
    sender: int
    round: int
    state: StateVector | None = None
    fingerprint: bytes = b"\0" * 8

    def __post_init__(self):
        object.__setattr__(self, "kind", Kind(self.kind))
        if self.kind is Kind.STATE and self.state is None:
            raise ValueError("State message needs a state")
        if self.kind is Kind.ROUND_COMPLETE and self.state is not None:
            raise ValueError("RoundComplete carries no state")
        if self.round < 0 or self.sender < 0:
            raise ValueError("round and sender must be non-negative")
        if self.state is not None:
            object.__setattr__(self, "fingerprint", self.state.fingerprint)

    @classmethod
    def state_msg(cls, sender: int, round_no: int, state: StateVector) -> "PeerMessage":
        return cls(Kind.STATE, sender, round_no, state)

    @classmethod
    def complete(cls, sender: int, round_no: int, fingerprint: bytes = b"\0" * 8) -> "PeerMessage":
        return cls(Kind.ROUND_COMPLETE, sender, round_no, None, fingerprint)

    def __eq__(self, other) -> bool:
        if not isinstance(other, PeerMessage):
            return NotImplemented
        return (
            self.kind == other.kind
            and self.sender == other.sender
            and self.round == other.round
            and self.fingerprint == other.fingerprint
            and (self.state is None) == (other.state is None)
            and (self.state is None or self.state == other.state)
        )


@dataclass(frozen=True)
class StateLayout:
    """Block sizes a decoder needs to split a payload into mean and spread blocks."""

    fingerprint: bytes
    n_mu: int
    n_rho: int

    @classmethod
    def of(cls, state: StateVector) -> "StateLayout":
        return cls(state.fingerprint, state.mu_block.size, state.rho_block.size)


def wire_encode(msg: PeerMessage) -> bytes:
    if msg.state is None:
        payload = b""
        n = 0
    else:
        flat = np.concatenate([msg.state.mu_block, msg.state.rho_block]).astype("<f8")
        n = flat.size
        if n >= 2**32:
            raise WireError("state vector too long for the frame format")
        payload = flat.tobytes()
    return HEADER.pack(MAGIC, int(msg.kind), msg.sender, msg.round, msg.fingerprint, n) + payload


def decode_header(buf: bytes) -> tuple[Kind, int, int, bytes, int]:
    if len(buf) < HEADER_SIZE:
        raise WireError(f"truncated header ({len(buf)} of {HEADER_SIZE} bytes)")
    magic, kind, sender, rnd, fp, n = HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise WireError(f"bad magic {magic!r}")
    try:
        kind = Kind(kind)
    except ValueError:
        raise WireError(f"unknown message kind {kind}") from None
    return kind, sender, rnd, fp, n


def wire_decode(buf: bytes, layout: StateLayout | None = None) -> PeerMessage:
    """Parse one complete frame.

    ``layout`` is required for State frames; its fingerprint must match the frame's.
    """
    kind, sender, rnd, fp, n = decode_header(buf)
    expected = HEADER_SIZE + 8 * n
    if len(buf) != expected:
        raise WireError(f"frame length {len(buf)} != {expected}")
    if kind is Kind.ROUND_COMPLETE:
        if n:
            raise WireError("RoundComplete frame with payload")
        if layout is not None and fp not in (layout.fingerprint, b"\0" * 8):
            raise WireError("fingerprint mismatch")
        return PeerMessage(kind, sender, rnd, None, fp)
    if layout is None:
        raise WireError("cannot decode a State frame without a layout")
    if fp != layout.fingerprint:
        raise WireError("fingerprint mismatch")
    if n != layout.n_mu + layout.n_rho:
        raise WireError(f"payload of {n} values does not match layout {layout.n_mu}+{layout.n_rho}")
    flat = np.frombuffer(buf, dtype="<f8", offset=HEADER_SIZE, count=n).astype(np.float64)
    return PeerMessage(kind, sender, rnd, StateVector(flat[: layout.n_mu].copy(), flat[layout.n_mu :].copy(), fp))


# ----------------------------------------------------------------------------
# protocol state machine


class Transport(Protocol):
    def broadcast(self, msg: PeerMessage) -> None: ...

    def receive(self, timeout: float | None = None) -> PeerMessage: ...


NodeUpdate = Callable[[StateVector, Mapping[int, StateVector]], StateVector]


@dataclass
class ProtocolState:
    id: int
    peers: list[int]
    max_round: int
    own_state: StateVector
    round: int = 0
    peer_complete: dict[int, bool] = field(default_factory=dict)
    peer_state: dict[int, StateVector | None] = field(default_factory=dict)
    peer_state_round: dict[int, int] = field(default_factory=dict)
    buffered: list[PeerMessage] = field(default_factory=list)
    updates: list[int] = field(default_factory=list)
    stale_dropped: int = 0

    def __post_init__(self):
        if self.id not in self.peers:
            self.peers = sorted([*self.peers, self.id])
        if self.max_round < 0:
            raise ValueError("max_round must be non-negative")
        self.peer_complete = {p: False for p in self.peers}
        self.peer_state = {p: None for p in self.peers}
        self.peer_state[self.id] = self.own_state

    @property
    def others(self) -> list[int]:
        return [p for p in self.peers if p != self.id]

    @property
    def done(self) -> bool:
        return self.round >= self.max_round

    def snapshot(self) -> dict:
        return {
            "id": self.id,
            "round": self.round,
            "max_round": self.max_round,
            "peer_complete": dict(self.peer_complete),
            "have_state": {p: s is not None for p, s in self.peer_state.items()},
            "buffered": [(m.kind.name, m.sender, m.round) for m in self.buffered],
            "updates": list(self.updates),
        }


def start(ps: ProtocolState, transport: Transport) -> None:
    """Broadcast the initial state stamped with round 0."""
    transport.broadcast(PeerMessage.state_msg(ps.id, ps.round, ps.own_state))


def finish_round(ps: ProtocolState, transport: Transport) -> None:
    """Reset completion flags, advance the round and broadcast the current state.

    No broadcast once the last round is closed.
    """
    for p in ps.peer_complete:
        ps.peer_complete[p] = False
    ps.round += 1
    if ps.round < ps.max_round:
        transport.broadcast(PeerMessage.state_msg(ps.id, ps.round, ps.own_state))


def _maybe_update(ps: ProtocolState, transport: Transport, node_update: NodeUpdate) -> None:
    if ps.done or ps.peer_complete[ps.id]:
        return
    if any(ps.peer_state[p] is None for p in ps.others):
        return
    if ps.updates and ps.updates[-1] >= ps.round:
        raise ProtocolError(f"peer {ps.id}: second node update in round {ps.round}")
    received = {p: ps.peer_state[p] for p in ps.others}
    new_state = node_update(ps.own_state, received)
    ps.updates.append(ps.round)
    for p in ps.peer_state:
        ps.peer_state[p] = None
    ps.peer_complete[ps.id] = True
    ps.own_state = new_state
    ps.peer_state[ps.id] = new_state
    transport.broadcast(PeerMessage.complete(ps.id, ps.round, new_state.fingerprint))


def _close_if_complete(ps: ProtocolState, transport: Transport, node_update: NodeUpdate) -> None:
    if not ps.done and all(ps.peer_complete.values()):
        finish_round(ps, transport)
        _replay(ps, transport, node_update)


def _replay(ps: ProtocolState, transport: Transport, node_update: NodeUpdate) -> None:
    pending, ps.buffered = ps.buffered, []
    for m in pending:
        handle_message(ps, m, transport, node_update)


def handle_message(ps: ProtocolState, msg: PeerMessage, transport: Transport, node_update: NodeUpdate) -> None:
    """Process one received message (one iteration of the main loop)."""
    if ps.done:
        return
    if msg.sender not in ps.peer_complete or msg.sender == ps.id:
        raise ProtocolError(f"peer {ps.id}: message from unknown sender {msg.sender}")
    if msg.kind is Kind.ROUND_COMPLETE:
        if msg.round == ps.round:
            ps.peer_complete[msg.sender] = True
        elif msg.round > ps.round:
            ps.buffered.append(msg)
        else:
            # the round was already closed through the late-peer path
            ps.stale_dropped += 1
    else:
        if msg.state.fingerprint != ps.own_state.fingerprint:
            raise ProtocolError(f"peer {ps.id}: state fingerprint mismatch from peer {msg.sender}")
        if msg.round > ps.round:
            if not ps.peer_complete[ps.id]:
                raise ProtocolError(
                    f"peer {ps.id}: state for round {msg.round} arrived before own update of round {ps.round}"
                )
            finish_round(ps, transport)
            if msg.round > ps.round:
                ps.buffered.append(msg)
                return
        elif msg.round < ps.round:
            raise ProtocolError(f"peer {ps.id}: state for past round {msg.round} in round {ps.round}")
        if ps.peer_state[msg.sender] is not None:
            raise ProtocolError(f"peer {ps.id}: duplicate state from {msg.sender} in round {ps.round}")
        ps.peer_state[msg.sender] = msg.state
        ps.peer_state_round[msg.sender] = msg.round
        _replay(ps, transport, node_update)
    _maybe_update(ps, transport, node_update)
    _close_if_complete(ps, transport, node_update)


def run_rounds(
    ps: ProtocolState,
    transport: Transport,
    node_update: NodeUpdate,
    timeout: float | None = 60.0,
) -> StateVector:
    """Drive the protocol to ``max_round`` over a blocking transport; returns the final own state."""
    start(ps, transport)
    if ps.max_round > 0 and not ps.others:
        # alone: every round completes immediately
        while not ps.done:
            _maybe_update(ps, transport, node_update)
            _close_if_complete(ps, transport, node_update)
    while not ps.done:
        try:
            msg = transport.receive(timeout)
        except (queue.Empty, TimeoutError, socket.timeout):
            raise LivenessFault(f"peer {ps.id} timed out waiting for messages", ps.snapshot()) from None
        handle_message(ps, msg, transport, node_update)
    return ps.own_state


# ----------------------------------------------------------------------------
# deterministic in-memory simulation


@dataclass
class TraceEvent:
    step: int
    src: int
    dst: int
    kind: str
    round: int


class _SimEndpoint:
    def __init__(self, net: "SimNetwork", peer_id: int):
        self.net = net
        self.id = peer_id

    def broadcast(self, msg: PeerMessage) -> None:
        self.net._send(self.id, msg)

    def receive(self, timeout=None) -> PeerMessage:  # pragma: no cover - the simulator pushes messages
        raise NotImplementedError("the simulator delivers messages itself")


class SimNetwork:
    """Seeded delay/reorder model delivering every message exactly once.

    Each sent message gets a delivery time ``now + U{0..max_skew}``; the
    earliest pending message is delivered next (ties by send order).
    ``max_skew=None`` means uniformly random order among all in-flight
    messages. ``hold`` can defer matching messages for as long as anything
    else is deliverable.
    """

    def __init__(
        self,
        n_peers: int,
        seed: int = 0,
        max_skew: int | None = None,
        hold: Callable[[int, PeerMessage], bool] | None = None,
    ):
        self.n = n_peers
        self.rng = Stream(seed, ("scheduler",)).generator
        self.max_skew = max_skew
        self.hold = hold
        self.now = 0
        self._seq = 0
        self._pending: list[tuple[int, int, int, PeerMessage]] = []
        self.trace: list[TraceEvent] = []
        self.endpoints = [_SimEndpoint(self, i) for i in range(n_peers)]

    def _send(self, src: int, msg: PeerMessage) -> None:
        for dst in range(self.n):
            if dst == src:
                continue
            if self.max_skew is None:
                due = int(self.rng.integers(0, 1 << 30))
            else:
                due = self.now + int(self.rng.integers(0, self.max_skew + 1))
            self._seq += 1
            heapq.heappush(self._pending, (due, self._seq, dst, msg))

    def _pop(self) -> tuple[int, PeerMessage]:
        if self.hold is not None:
            held = []
            chosen = None
            while self._pending:
                item = heapq.heappop(self._pending)
                if self.hold(item[2], item[3]):
                    held.append(item)
                else:
                    chosen = item
                    break
            for item in held:
                heapq.heappush(self._pending, item)
            if chosen is None:
                chosen = heapq.heappop(self._pending)
        else:
            chosen = heapq.heappop(self._pending)
        return chosen[2], chosen[3]

    @property
    def in_flight(self) -> int:
        return len(self._pending)

    def run(
        self,
        states: list[ProtocolState],
        node_updates: list[NodeUpdate],
        max_steps: int = 10_000_000,
        check: Callable[[list[ProtocolState]], None] | None = None,
    ) -> list[StateVector]:
        """Run every peer to completion; ``check`` is called after each delivery."""
        for ps in states:
            start(ps, self.endpoints[ps.id])
        for ps, nu in zip(states, node_updates):
            if not ps.others:
                run_rounds(ps, self.endpoints[ps.id], nu)
        while not all(ps.done for ps in states):
            if not self._pending:
                raise LivenessFault("simulation deadlocked", {ps.id: ps.snapshot() for ps in states})
            if self.now >= max_steps:
                raise LivenessFault("simulation step budget exhausted", {ps.id: ps.snapshot() for ps in states})
            dst, msg = self._pop()
            self.now += 1
            self.trace.append(TraceEvent(self.now, msg.sender, dst, msg.kind.name, msg.round))
            ps = states[dst]
            handle_message(ps, msg, self.endpoints[dst], node_updates[dst])
            if check is not None:
                check(states)
        return [ps.own_state for ps in states]


def simulate(
    initial: list[StateVector],
    max_round: int,
    node_updates: list[NodeUpdate],
    seed: int = 0,
    max_skew: int | None = None,
    hold: Callable[[int, PeerMessage], bool] | None = None,
    check: Callable[[list[ProtocolState]], None] | None = None,
) -> tuple[list[StateVector], list[ProtocolState], SimNetwork]:
    n = len(initial)
    peers = list(range(n))
    states = [ProtocolState(i, peers, max_round, initial[i]) for i in peers]
    net = SimNetwork(n, seed, max_skew, hold)
    finals = net.run(states, node_updates, check=check)
    return finals, states, net


# ----------------------------------------------------------------------------
# TCP transport


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    chunks = []
    while n:
        chunk = sock.recv(min(n, 1 << 20))
        if not chunk:
            raise ConnectionError("connection closed")
        chunks.append(chunk)
        n -= len(chunk)
    return b"".join(chunks)


def read_frame(sock: socket.socket) -> bytes:
    head = _recv_exact(sock, HEADER_SIZE)
    *_, n = decode_header(head)
    return head + (_recv_exact(sock, 8 * n) if n else b"")


class SocketTransport:
    """Full-mesh TCP transport; one listening port per peer, frames per :func:`wire_encode`."""

    def __init__(
        self,
        peer_id: int,
        addresses: Mapping[int, tuple[str, int]],
        layout: StateLayout,
        connect_timeout: float = 60.0,
    ):
        self.id = peer_id
        self.addresses = dict(addresses)
        self.layout = layout
        self.connect_timeout = connect_timeout
        self._inbox: queue.Queue = queue.Queue()
        self._out: dict[int, socket.socket] = {}
        self._locks = {p: threading.Lock() for p in self.addresses}
        self._threads: list[threading.Thread] = []
        self._closed = threading.Event()
        host, port = self.addresses[peer_id]
        self._server = socket.create_server((host, port), reuse_port=False)
        self._server.settimeout(0.2)
        t = threading.Thread(target=self._accept_loop, daemon=True)
        t.start()
        self._threads.append(t)

    def _accept_loop(self) -> None:
        while not self._closed.is_set():
            try:
                conn, _ = self._server.accept()
            except socket.timeout:
                continue
            except OSError:
                return
            t = threading.Thread(target=self._reader, args=(conn,), daemon=True)
            t.start()
            self._threads.append(t)

    def _reader(self, conn: socket.socket) -> None:
        with conn:
            while not self._closed.is_set():
                try:
                    frame = read_frame(conn)
                except (ConnectionError, OSError):
                    return
                except WireError as exc:
                    self._inbox.put(exc)
                    return
                try:
                    self._inbox.put(wire_decode(frame, self.layout))
                except WireError as exc:
                    self._inbox.put(exc)

    def _connection(self, peer: int) -> socket.socket:
        sock = self._out.get(peer)
        if sock is not None:
            return sock
        deadline = time.monotonic() + self.connect_timeout
        while True:
            try:
                sock = socket.create_connection(self.addresses[peer], timeout=5.0)
                sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
                self._out[peer] = sock
                return sock
            except OSError:
                if time.monotonic() > deadline:
                    raise
                time.sleep(0.05)

    def send(self, peer: int, msg: PeerMessage) -> None:
        frame = wire_encode(msg)
        with self._locks[peer]:
            self._connection(peer).sendall(frame)

    def broadcast(self, msg: PeerMessage) -> None:
        for peer in sorted(self.addresses):
            if peer != self.id:
                self.send(peer, msg)

    def receive(self, timeout: float | None = None) -> PeerMessage:
        item = self._inbox.get(timeout=timeout)
        if isinstance(item, Exception):
            raise item
        return item

    def close(self) -> None:
        self._closed.set()
        for sock in self._out.values():
            try:
                sock.shutdown(socket.SHUT_WR)
            except OSError:
                pass
            sock.close()
        self._server.close()

    def __enter__(self) -> "SocketTransport":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def local_addresses(n: int, base_port: int, host: str = "127.0.0.1") -> dict[int, tuple[str, int]]:
    return {i: (host, base_port + i) for i in range(n)}


def free_port_block(n: int, host: str = "127.0.0.1", attempts: int = 50) -> int:
    """A base port such that base..base+n-1 are currently bindable."""
    rng = np.random.default_rng()
    for _ in range(attempts):
        base = int(rng.integers(20000, 60000 - n))
        socks = []
        try:
            for i in range(n):
                s = socket.socket()
                s.bind((host, base + i))
                socks.append(s)
            return base
        except OSError:
            continue
        finally:
            for s in socks:
                s.close()
    raise OSError("no free port block found")


def iter_peers(n: int) -> Iterable[int]:
    return range(n)
