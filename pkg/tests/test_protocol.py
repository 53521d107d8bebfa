import queue
import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bnnmap.model import StateVector
from bnnmap.protocol import (
    HEADER_SIZE,
    Kind,
    LivenessFault,
    PeerMessage,
    ProtocolError,
    ProtocolState,
    SocketTransport,
    StateLayout,
    WireError,
    finish_round,
    free_port_block,
    handle_message,
    local_addresses,
    run_rounds,
    simulate,
    wire_decode,
    wire_encode,
)

from oracles import averaging_update, check_protocol_run, toy_state


class Recorder:
    """Transport stub that records broadcasts."""

    def __init__(self):
        self.sent = []

    def broadcast(self, msg):
        self.sent.append(msg)

    def receive(self, timeout=None):
        raise queue.Empty


class QueueTransport:
    """In-process FIFO transport for run_rounds."""

    def __init__(self, me, boxes):
        self.me, self.boxes = me, boxes

    def broadcast(self, msg):
        for i, box in enumerate(self.boxes):
            if i != self.me:
                box.put(msg)

    def receive(self, timeout=None):
        return self.boxes[self.me].get(timeout=timeout)


def _noop_update(own, received):
    return own


# ---------------------------------------------------------------------------
# state machine


def test_two_peers_fifo_one_round():
    boxes = [queue.Queue(), queue.Queue()]
    logs = []
    states = [ProtocolState(i, [0, 1], 1, toy_state(i)) for i in range(2)]
    results = [None, None]

    def go(i):
        results[i] = run_rounds(states[i], QueueTransport(i, boxes), averaging_update(logs, i), timeout=5)

    threads = [threading.Thread(target=go, args=(i,)) for i in range(2)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert sorted(logs) == [(0, [1]), (1, [0])]
    assert [ps.updates for ps in states] == [[0], [0]]
    # each peer averaged its own initial state with the other's initial state
    assert results[0].mu_block.tolist() == [0.5] * 3 == results[1].mu_block.tolist()


def test_single_peer_runs_alone():
    ps = ProtocolState(0, [0], 3, toy_state(1))
    run_rounds(ps, Recorder(), _noop_update, timeout=1)
    assert ps.updates == [0, 1, 2]


def test_max_round_zero_does_nothing():
    finals, states, net = simulate([toy_state(0), toy_state(1)], 0, [_noop_update] * 2)
    assert all(ps.updates == [] for ps in states)
    assert [f.mu_block[0] for f in finals] == [0.0, 1.0]


def test_finish_round_resets_flags_and_broadcasts_next_round():
    ps = ProtocolState(0, [0, 1, 2], 3, toy_state(0))
    ps.peer_complete = {0: True, 1: True, 2: True}
    rec = Recorder()
    finish_round(ps, rec)
    assert not any(ps.peer_complete.values())
    assert ps.round == 1
    assert rec.sent[-1].kind is Kind.STATE and rec.sent[-1].round == 1


def test_no_broadcast_after_last_round():
    ps = ProtocolState(0, [0, 1], 1, toy_state(0))
    rec = Recorder()
    finish_round(ps, rec)
    assert ps.done and rec.sent == []


def test_double_trigger_increments_round_once():
    """A future-round state and the last RoundComplete arrive together."""
    rec = Recorder()
    ps = ProtocolState(0, [0, 1, 2], 3, toy_state(0))
    handle_message(ps, PeerMessage.state_msg(1, 0, toy_state(1)), rec, _noop_update)
    handle_message(ps, PeerMessage.state_msg(2, 0, toy_state(2)), rec, _noop_update)
    assert ps.updates == [0] and ps.peer_complete[0]
    # peer 1 finished round 0 everywhere and already sent its round-1 state
    handle_message(ps, PeerMessage.complete(1, 0), rec, _noop_update)
    handle_message(ps, PeerMessage.state_msg(1, 1, toy_state(1)), rec, _noop_update)
    assert ps.round == 1
    # peer 2's RoundComplete for round 0 is now stale and must not advance again
    handle_message(ps, PeerMessage.complete(2, 0), rec, _noop_update)
    assert ps.round == 1 and ps.stale_dropped == 1
    assert ps.peer_state[1] is not None


def test_future_round_complete_is_buffered_and_replayed():
    rec = Recorder()
    ps = ProtocolState(0, [0, 1, 2], 3, toy_state(0))
    handle_message(ps, PeerMessage.complete(1, 1), rec, _noop_update)
    assert ps.buffered and not any(ps.peer_complete.values())
    for sender in (1, 2):
        handle_message(ps, PeerMessage.state_msg(sender, 0, toy_state(sender)), rec, _noop_update)
    handle_message(ps, PeerMessage.complete(1, 0), rec, _noop_update)
    handle_message(ps, PeerMessage.complete(2, 0), rec, _noop_update)
    assert ps.round == 1
    assert ps.peer_complete[1] and not ps.buffered


@pytest.mark.parametrize(
    "msg, match",
    [
        (PeerMessage.state_msg(9, 0, toy_state(1)), "unknown sender"),
        (PeerMessage.state_msg(1, 0, StateVector(np.zeros(3), np.zeros(2), b"otherfp!")), "fingerprint"),
        (PeerMessage.state_msg(1, 2, toy_state(1)), "before own update"),
    ],
)
def test_protocol_violations(msg, match):
    ps = ProtocolState(0, [0, 1, 2], 3, toy_state(0))
    with pytest.raises(ProtocolError, match=match):
        handle_message(ps, msg, Recorder(), _noop_update)


def test_duplicate_state_is_rejected():
    ps = ProtocolState(0, [0, 1, 2], 3, toy_state(0))
    handle_message(ps, PeerMessage.state_msg(1, 0, toy_state(1)), Recorder(), _noop_update)
    with pytest.raises(ProtocolError, match="duplicate"):
        handle_message(ps, PeerMessage.state_msg(1, 0, toy_state(1)), Recorder(), _noop_update)


def test_timeout_raises_liveness_fault_with_snapshot():
    ps = ProtocolState(0, [0, 1], 2, toy_state(0))
    with pytest.raises(LivenessFault) as err:
        run_rounds(ps, Recorder(), _noop_update, timeout=0.01)
    snap = err.value.snapshot
    assert snap["id"] == 0 and snap["round"] == 0 and snap["peer_complete"] == {0: False, 1: False}


# ---------------------------------------------------------------------------
# simulation


@pytest.mark.parametrize("n", [3, 5, 7])
def test_random_schedules(n):
    for seed in range(60):
        check_protocol_run(n, 5, seed)
        check_protocol_run(n, 5, seed, max_skew=3)


def test_adversarial_hold_of_round_complete():
    """Delay peer 2's RoundComplete until round r + 1 states are in flight."""
    for r in range(4):
        def hold(dst, msg, r=r):
            return msg.kind is Kind.ROUND_COMPLETE and msg.sender == 2 and msg.round == r

        for seed in range(10):
            stats = check_protocol_run(3, 5, seed, max_skew=2, hold=hold)
            assert stats["skew"] <= 1


def test_simulation_is_deterministic():
    def run(seed):
        logs = []
        finals, _, net = simulate([toy_state(i) for i in range(4)], 3, [averaging_update(logs, i) for i in range(4)], seed=seed)
        return [(e.src, e.dst, e.kind, e.round) for e in net.trace], [f.mu_block.tolist() for f in finals]

    assert run(5) == run(5)
    assert run(5)[0] != run(6)[0]


def test_consensus_of_averaging_updates():
    logs = []
    finals, _, _ = simulate([toy_state(i) for i in range(3)], 1, [averaging_update(logs, i) for i in range(3)], seed=1)
    assert all(f.mu_block.tolist() == [1.0] * 3 for f in finals)


# ---------------------------------------------------------------------------
# wire format


def test_round_complete_frame_is_25_bytes():
    frame = wire_encode(PeerMessage.complete(3, 7))
    assert HEADER_SIZE == 25 and len(frame) == 25
    assert wire_decode(frame) == PeerMessage.complete(3, 7)


def test_state_frame_layout():
    s = toy_state(2.5)
    frame = wire_encode(PeerMessage.state_msg(1, 4, s))
    assert len(frame) == 25 + 8 * 5
    back = wire_decode(frame, StateLayout.of(s))
    assert back.state == s and back.round == 4 and back.sender == 1


@settings(max_examples=200, deadline=None)
@given(
    kind=st.sampled_from(list(Kind)),
    sender=st.integers(0, 2**32 - 1),
    rnd=st.integers(0, 2**32 - 1),
    n_mu=st.integers(0, 20),
    n_rho=st.integers(0, 20),
    data=st.data(),
)
def test_wire_round_trip_property(kind, sender, rnd, n_mu, n_rho, data):
    floats = st.floats(allow_nan=False, allow_infinity=False, width=64)
    mu = np.array(data.draw(st.lists(floats, min_size=n_mu, max_size=n_mu)), dtype=np.float64)
    rho = np.array(data.draw(st.lists(floats, min_size=n_rho, max_size=n_rho)), dtype=np.float64)
    fp = data.draw(st.binary(min_size=8, max_size=8))
    state = StateVector(mu, rho, fp)
    msg = PeerMessage(kind, sender, rnd, state) if kind is Kind.STATE else PeerMessage.complete(sender, rnd, fp)
    frame = wire_encode(msg)
    back = wire_decode(frame, StateLayout.of(state))
    assert back == msg
    assert wire_encode(back) == frame


def test_corrupted_frames_are_rejected():
    s = toy_state(1)
    layout = StateLayout.of(s)
    good = wire_encode(PeerMessage.state_msg(1, 0, s))
    cases = [
        b"XXXX" + good[4:],  # magic
        good[:4] + b"\x07" + good[5:],  # kind
        good[:10],  # truncated header
        good[:-3],  # truncated payload
        good + b"\0",  # trailing bytes
        good[:17] + b"badprint" + good[25:],  # fingerprint
    ]
    for frame in cases:
        with pytest.raises(WireError):
            wire_decode(frame, layout)
    with pytest.raises(WireError):
        wire_decode(good)  # state frame without layout
    with pytest.raises(WireError):
        wire_decode(wire_encode(PeerMessage.state_msg(1, 0, toy_state(1, n_mu=4))), layout)


@settings(max_examples=300, deadline=None)
@given(st.binary(max_size=80))
def test_random_bytes_never_crash_the_decoder(blob):
    try:
        wire_decode(blob, StateLayout(b"toystate", 3, 2))
    except WireError:
        pass


def test_message_invariants():
    with pytest.raises(ValueError):
        PeerMessage(Kind.STATE, 0, 0)
    with pytest.raises(ValueError):
        PeerMessage(Kind.ROUND_COMPLETE, 0, 0, toy_state(0))
    with pytest.raises(ValueError):
        PeerMessage.complete(0, -1)


# ---------------------------------------------------------------------------
# sockets


def test_socket_transport_runs_the_protocol():
    n = 3
    addrs = local_addresses(n, free_port_block(n))
    layout = StateLayout.of(toy_state(0))
    logs, results, errors = [], [None] * n, []

    def go(i):
        try:
            with SocketTransport(i, addrs, layout, connect_timeout=10) as tr:
                ps = ProtocolState(i, list(range(n)), 3, toy_state(i))
                results[i] = run_rounds(ps, tr, averaging_update(logs, i), timeout=10)
        except Exception as exc:  # surfaced below
            errors.append(exc)

    threads = [threading.Thread(target=go, args=(i,)) for i in range(n)]
    for t in threads:
        t.start()
    for t in threads:
        t.join(30)
    assert not errors
    assert len(logs) == 3 * n
    assert all(np.allclose(r.mu_block, 1.0) for r in results)
