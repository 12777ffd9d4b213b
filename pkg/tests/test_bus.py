import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fleetmind.bus import BROADCAST, Bus, Envelope, Kind, RejectedEnvelope


def status(sender, msg_id, tick, recipient="task_manager"):
    return Envelope(
        sender=sender,
        msg_id=msg_id,
        recipient=recipient,
        tick=tick,
        kind=Kind.STATUS_UPDATE,
        payload={"record_id": "r-1", "status": "completed"},
    )


class TestSend:
    def test_accepted_message_appears_once(self):
        bus = Bus()
        bus.register("task_manager")
        assert bus.send(status("a", 0, 1)) is True
        assert len(bus.drain("task_manager")) == 1

    def test_duplicate_dropped_idempotently(self):
        bus = Bus()
        bus.register("task_manager")
        env = status("a", 0, 1)
        assert bus.send(env) is True
        assert bus.send(env) is False
        assert len(bus.drain("task_manager")) == 1

    def test_schema_mismatch_rejected(self):
        bus = Bus()
        bad = Envelope("a", 0, "b", 1, Kind.ASSIGN_TASK, {"record_id": "r-1"})
        with pytest.raises(RejectedEnvelope):
            bus.send(bad)

    def test_backwards_tick_rejected(self):
        bus = Bus()
        bus.send(status("a", 0, 5))
        with pytest.raises(RejectedEnvelope):
            bus.send(status("a", 1, 3))

    def test_broadcast_reaches_all_registered(self):
        bus = Bus()
        for rid in ("r1", "r2"):
            bus.register(rid)
        bus.send(
            Envelope("m", 0, BROADCAST, 1, Kind.PLAN_POSTED, {"plan": {}})
        )
        assert len(bus.drain("r1")) == 1
        assert len(bus.drain("r2")) == 1


class TestDrain:
    def test_cross_sender_merge_order(self):
        bus = Bus()
        bus.register("task_manager")
        bus.send(status("a", 0, 3))
        bus.send(status("b", 0, 4))
        bus.send(status("a", 1, 5))
        order = [(e.sender, e.tick) for e in bus.drain("task_manager")]
        assert order == [("a", 3), ("b", 4), ("a", 5)]

    def test_empty_inbox(self):
        bus = Bus()
        assert bus.drain("nobody") == []

    def test_drained_never_redelivered(self):
        bus = Bus()
        bus.register("task_manager")
        bus.send(status("a", 0, 1))
        assert len(bus.drain("task_manager")) == 1
        assert bus.drain("task_manager") == []


# Randomized interleavings: per-sender FIFO, deterministic merge, and
# exactly-once visibility must hold for any send order.
senders = st.sampled_from(["alpha", "beta", "gamma"])


@st.composite
def interleavings(draw):
    events = []
    counters = {"alpha": 0, "beta": 0, "gamma": 0}
    tick = 1
    for _ in range(draw(st.integers(min_value=1, max_value=40))):
        sender = draw(senders)
        tick += draw(st.integers(min_value=0, max_value=2))
        duplicate = draw(st.booleans()) and counters[sender] > 0
        if duplicate:
            msg_id = draw(st.integers(min_value=0, max_value=counters[sender] - 1))
        else:
            msg_id = counters[sender]
            counters[sender] += 1
        events.append((sender, msg_id, tick, duplicate))
    return events


class TestBusProperties:
    @given(interleavings())
    @settings(max_examples=300)
    def test_fifo_exactly_once_and_merge(self, events):
        bus = Bus()
        bus.register("task_manager")
        sent_ticks = {}
        for sender, msg_id, tick, _dup in events:
            env = status(sender, msg_id, tick)
            bus.send(env)
            sent_ticks.setdefault((sender, msg_id), tick)

        delivered = bus.drain("task_manager")
        keys = [(e.sender, e.msg_id) for e in delivered]
        # exactly-once visibility
        assert len(keys) == len(set(keys))
        assert set(keys) == set(sent_ticks)
        # per-sender FIFO
        for sender in ("alpha", "beta", "gamma"):
            ids = [e.msg_id for e in delivered if e.sender == sender]
            assert ids == sorted(ids)
        # deterministic (tick, sender, msg_id) merge
        order_keys = [(e.tick, e.sender, e.msg_id) for e in delivered]
        assert order_keys == sorted(order_keys)
        # complete audit: every accepted envelope appears exactly once in the log
        log_keys = [(e.sender, e.msg_id) for e in bus.log()]
        assert sorted(log_keys) == sorted(set(log_keys))
        assert set(log_keys) == set(sent_ticks)

    @given(interleavings())
    @settings(max_examples=100)
    def test_merge_is_deterministic_across_buses(self, events):
        def run():
            bus = Bus()
            bus.register("task_manager")
            for sender, msg_id, tick, _ in events:
                bus.send(status(sender, msg_id, tick))
            return [(e.sender, e.msg_id, e.tick) for e in bus.drain("task_manager")]

        assert run() == run()
