"""Deterministic discrete-event scheduler built on a linked list of timestamp queues."""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Optional, Union

from .domain import NodeId


class SchedulingInPast(ValueError):
    pass


# ---------------------------------------------------------------------------
# Packets
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class StreamPacket:
    """Media stream plus the forwarding metadata carried alongside it:
    the source's identity, layers sent on this hop, the recipient clients the
    receiver is responsible for, and their layer demands."""

    source: NodeId
    layers: int
    recipients: tuple[NodeId, ...]
    demands: dict[NodeId, int]
    round_no: int

    kind = "stream"


@dataclass(frozen=True)
class TriggerActionPacket:
    source: NodeId
    round_no: int

    kind = "trigger_action"


@dataclass(frozen=True)
class GetDelayPacket:
    """Delay probe: origin SFU id plus its send timestamp. Forwarding SFUs
    relay it downstream; each relay hop increments the hop counter."""

    source: NodeId
    origin: NodeId
    origin_timestamp: float
    round_no: int
    hops: int = 0

    kind = "get_delay"


@dataclass(frozen=True)
class FeedbackPacket:
    source: NodeId
    client: NodeId
    layers_received: int
    echoed_timestamp: float
    origin_sfu: NodeId
    round_no: int
    hops: int = 0

    kind = "feedback"


@dataclass(frozen=True)
class ConnectRequestPacket:
    source: NodeId
    requester: NodeId

    kind = "connect_request"


@dataclass(frozen=True)
class ConnectReplyPacket:
    source: NodeId
    target: NodeId
    accepted: bool

    kind = "connect_reply"


Packet = Union[
    StreamPacket,
    TriggerActionPacket,
    GetDelayPacket,
    FeedbackPacket,
    ConnectRequestPacket,
    ConnectReplyPacket,
]


@dataclass(frozen=True)
class PacketArrival:
    src: NodeId
    dst: NodeId
    packet: Packet


@dataclass(frozen=True)
class TimerExpiry:
    owner: NodeId
    tag: str


Payload = Union[PacketArrival, TimerExpiry]


@dataclass(frozen=True)
class Event:
    fire_time: float
    sequence: int
    payload: Payload


@dataclass
class _QueueNode:
    timestamp: float
    events: deque = field(default_factory=deque)
    next: Optional["_QueueNode"] = None


class EventQueueList:
    """Ordered linked list of (timestamp, FIFO event queue) nodes.

    Node timestamps strictly increase along the list; events inside a node
    share its timestamp and leave in insertion (sequence) order.
    """

    def __init__(self):
        self._head: Optional[_QueueNode] = None
        self._len = 0

    def __len__(self) -> int:
        return self._len

    def insert(self, event: Event) -> None:
        t = event.fire_time
        if self._head is None or t < self._head.timestamp:
            node = _QueueNode(t)
            node.next = self._head
            self._head = node
            node.events.append(event)
        else:
            cur = self._head
            while cur.next is not None and cur.next.timestamp <= t:
                cur = cur.next
            if cur.timestamp == t:
                cur.events.append(event)
            else:
                node = _QueueNode(t)
                node.next = cur.next
                cur.next = node
                node.events.append(event)
        self._len += 1

    def peek_time(self) -> Optional[float]:
        return self._head.timestamp if self._head else None

    def pop(self) -> Event:
        if self._head is None:
            raise IndexError("pop from empty event queue")
        node = self._head
        ev = node.events.popleft()
        if not node.events:
            self._head = node.next
        self._len -= 1
        return ev


class EventHandle:
    __slots__ = ("event",)

    def __init__(self, event: Event):
        self.event = event


class Simulator:
    """Single-threaded event loop; the only mutator of simulation state."""

    def __init__(self, trace: Optional[list[str]] = None):
        self.queue = EventQueueList()
        self.now = 0.0
        self._seq = 0
        self.processed = 0
        self.handler: Optional[Callable[[float, Payload], None]] = None
        self.trace = trace

    def schedule(self, at: float, payload: Payload) -> EventHandle:
        if at < self.now:
            raise SchedulingInPast(f"schedule at {at} < now {self.now}")
        ev = Event(at, self._seq, payload)
        self._seq += 1
        self.queue.insert(ev)
        return EventHandle(ev)

    def schedule_in(self, delay: float, payload: Payload) -> EventHandle:
        return self.schedule(self.now + delay, payload)

    def _trace(self, ev: Event) -> None:
        if self.trace is None:
            return
        p = ev.payload
        if isinstance(p, PacketArrival):
            self.trace.append(f"{ev.fire_time:.6f} {p.packet.kind} {p.src} {p.dst}")
        else:
            self.trace.append(f"{ev.fire_time:.6f} timer:{p.tag} {p.owner} {p.owner}")

    def run_until(self, t: float) -> int:
        if t < self.now:
            raise SchedulingInPast(f"run_until({t}) < now {self.now}")
        count = 0
        while True:
            nxt = self.queue.peek_time()
            if nxt is None or nxt > t:
                break
            ev = self.queue.pop()
            self.now = ev.fire_time
            self._trace(ev)
            if self.handler is not None:
                self.handler(self.now, ev.payload)
            self.processed += 1
            count += 1
        self.now = t
        return count

    def run_all(self, limit: int = 10_000_000) -> int:
        count = 0
        while len(self.queue) and count < limit:
            ev = self.queue.pop()
            self.now = ev.fire_time
            self._trace(ev)
            if self.handler is not None:
                self.handler(self.now, ev.payload)
            self.processed += 1
            count += 1
        return count
