import pytest

from moray.domain import client, sfu
from moray.events import (
    EventQueueList,
    Event,
    FeedbackPacket,
    GetDelayPacket,
    PacketArrival,
    SchedulingInPast,
    Simulator,
    StreamPacket,
    TimerExpiry,
)


def arrival(frm, to, kind="stream"):
    pkt = StreamPacket(client(0), 1, (to,), {to: 1}, 0)
    return PacketArrival(frm, to, pkt)


class TestQueueList:
    def test_time_ordering(self):
        q = EventQueueList()
        q.insert(Event(5.0, 0, TimerExpiry(client(0), "x")))
        q.insert(Event(3.0, 1, TimerExpiry(client(0), "y")))
        assert q.pop().payload.tag == "y"
        assert q.pop().payload.tag == "x"

    def test_sequence_tiebreak(self):
        q = EventQueueList()
        q.insert(Event(7.0, 0, TimerExpiry(client(0), "first")))
        q.insert(Event(7.0, 1, TimerExpiry(client(0), "second")))
        assert q.pop().payload.tag == "first"
        assert q.pop().payload.tag == "second"

    def test_strictly_increasing_node_timestamps(self):
        q = EventQueueList()
        for i, t in enumerate([5.0, 3.0, 5.0, 9.0, 3.0]):
            q.insert(Event(t, i, TimerExpiry(client(0), str(i))))
        node = q._head
        stamps = []
        while node is not None:
            stamps.append(node.timestamp)
            node = node.next
        assert stamps == sorted(set(stamps))


class TestSimulator:
    def test_link_delay_addition(self):
        sim = Simulator()
        sim.run_until(100.0)
        fired = []
        sim.handler = lambda now, p: fired.append(now)
        sim.schedule_in(12.0, TimerExpiry(client(0), "t"))
        sim.run_until(200.0)
        assert fired == [112.0]

    def test_empty_run(self):
        sim = Simulator()
        assert sim.run_until(10.0) == 0
        assert sim.now == 10.0

    def test_scheduling_in_past(self):
        sim = Simulator()
        sim.run_until(10.0)
        with pytest.raises(SchedulingInPast):
            sim.schedule(5.0, TimerExpiry(client(0), "t"))

    def test_spawned_events_processed_same_run(self):
        # a stream arrival at a client spawns a feedback send event
        sim = Simulator()
        log = []

        def handler(now, payload):
            log.append((now, payload))
            if isinstance(payload, PacketArrival) and payload.packet.kind == "get_delay":
                fb = FeedbackPacket(client(0), payload.dst, 1, payload.packet.origin_timestamp, payload.packet.origin, 0)
                sim.schedule_in(25.0, PacketArrival(payload.dst, payload.packet.origin, fb))

        sim.handler = handler
        probe = GetDelayPacket(client(0), sfu(0), 0.0, 0)
        sim.schedule(25.0, PacketArrival(sfu(0), client(1), probe))
        n = sim.run_until(100.0)
        assert n == 2
        assert log[-1][0] == 50.0
        assert log[-1][1].packet.kind == "feedback"

    def test_relay_chain(self):
        sim = Simulator()
        hops = [sfu(0), sfu(1), sfu(2), client(1)]
        seen = []

        def handler(now, payload):
            seen.append((now, payload.dst))
            idx = hops.index(payload.dst)
            if idx + 1 < len(hops):
                sim.schedule_in(1.0, PacketArrival(payload.dst, hops[idx + 1], payload.packet))

        sim.handler = handler
        sim.schedule(1.0, arrival(client(0), hops[0]))
        sim.run_until(3.0)
        assert [t for t, _ in seen] == [1.0, 2.0, 3.0]

    def test_no_out_of_order_processing(self):
        import random

        sim = Simulator()
        rng = random.Random(7)
        order = []
        sim.handler = lambda now, p: order.append((now, p.tag))
        stamps = [(rng.uniform(0, 100), str(i)) for i in range(200)]
        for t, tag in stamps:
            sim.schedule(t, TimerExpiry(client(0), tag))
        sim.run_until(100.0)
        assert order == sorted(order, key=lambda x: x[0])
        assert len(order) == 200

    def test_trace_determinism(self):
        def run():
            trace = []
            sim = Simulator(trace=trace)

            def handler(now, payload):
                if isinstance(payload, TimerExpiry) and payload.tag == "go":
                    sim.schedule_in(3.0, arrival(client(0), sfu(0)))

            sim.handler = handler
            sim.schedule(1.0, TimerExpiry(client(0), "go"))
            sim.run_until(10.0)
            return trace

        assert run() == run()

    def test_clock_never_decreases(self):
        sim = Simulator()
        times = []
        sim.handler = lambda now, p: times.append(sim.now)
        for i, t in enumerate([5.0, 1.0, 3.0]):
            sim.schedule(t, TimerExpiry(client(0), str(i)))
        sim.run_until(10.0)
        assert times == sorted(times)
