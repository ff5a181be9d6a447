"""Topology primitives: nodes, ports, point-to-point links, FIFO queues, forwarding capacity."""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import TYPE_CHECKING, Callable, Optional

from .engine import Event, Scheduler

if TYPE_CHECKING:
    from .bonding import Bond

log = logging.getLogger(__name__)

TOKEN_SCALE = 1_000_000  # forwarding credit tracked in micro-tokens


class FrameKind(Enum):
    VIDEO = "VIDEO"
    VOICE = "VOICE"
    DATA = "DATA"
    PROBE = "PROBE"
    PROBE_REPLY = "PROBE_REPLY"
    LACPDU = "LACPDU"
    ROUTING = "ROUTING"
    ACK = "ACK"


SERVICE_KINDS = (FrameKind.VIDEO, FrameKind.VOICE, FrameKind.DATA)


class DropReason(Enum):
    LINK_DOWN = "LINK_DOWN"
    QUEUE_FULL = "QUEUE_FULL"
    NO_ROUTE = "NO_ROUTE"
    OVERLOAD = "OVERLOAD"


class TopologyError(Exception):
    """Scenario-construction error (double attachment, duplicate names, ...)."""


@dataclass(frozen=True, order=True)
class MacAddress:
    octets: tuple[int, int, int, int, int, int]

    def __str__(self) -> str:
        return ":".join(f"{o:02x}" for o in self.octets)

    @classmethod
    def from_int(cls, value: int) -> "MacAddress":
        return cls(tuple((value >> (8 * i)) & 0xFF for i in range(5, -1, -1)))

    @property
    def last_octet(self) -> int:
        return self.octets[5]

    @property
    def is_zero(self) -> bool:
        return all(o == 0 for o in self.octets)


BROADCAST_MAC = MacAddress((0xFF,) * 6)
ZERO_MAC = MacAddress((0,) * 6)


@dataclass(frozen=True, order=True)
class NetAddress:
    network: str  # dotted-quad /24 prefix, e.g. "192.168.1.0"
    host: int

    def __str__(self) -> str:
        base = self.network.rsplit(".", 1)[0]
        return f"{base}.{self.host}"


class Frame:
    """Unit of simulated traffic. Fields are never modified in transit except received_at."""

    __slots__ = (
        "id", "src_mac", "dst_mac", "src_addr", "dst_addr", "size_bytes", "kind",
        "conversation", "seq_in_conversation", "sent_at", "received_at", "payload",
    )

    def __init__(self, id: int, src_mac: MacAddress, dst_mac: MacAddress,
                 src_addr: NetAddress, dst_addr: NetAddress, size_bytes: int,
                 kind: FrameKind, conversation: int, seq_in_conversation: int,
                 sent_at: int, payload: object = None):
        self.id = id
        self.src_mac = src_mac
        self.dst_mac = dst_mac
        self.src_addr = src_addr
        self.dst_addr = dst_addr
        self.size_bytes = size_bytes
        self.kind = kind
        self.conversation = conversation
        self.seq_in_conversation = seq_in_conversation
        self.sent_at = sent_at
        self.received_at: Optional[int] = None
        self.payload = payload

    def snapshot(self) -> tuple:
        """Immutable view of every field except received_at, for transit-integrity checks."""
        return (self.id, self.src_mac, self.dst_mac, self.src_addr, self.dst_addr,
                self.size_bytes, self.kind, self.conversation, self.seq_in_conversation,
                self.sent_at, self.payload)


class FrameLedger:
    """Central accounting: creations, deliveries and itemized drops per conversation."""

    def __init__(self) -> None:
        self.created: dict[int, int] = {}
        self.delivered: dict[int, int] = {}
        self.drops: dict[tuple[int, DropReason], int] = {}
        self.drops_by_reason: dict[DropReason, int] = {r: 0 for r in DropReason}

    def on_created(self, frame: Frame) -> None:
        self.created[frame.conversation] = self.created.get(frame.conversation, 0) + 1

    def on_delivered(self, frame: Frame) -> None:
        self.delivered[frame.conversation] = self.delivered.get(frame.conversation, 0) + 1

    def on_dropped(self, frame: Frame, reason: DropReason) -> None:
        key = (frame.conversation, reason)
        self.drops[key] = self.drops.get(key, 0) + 1
        self.drops_by_reason[reason] += 1

    def drops_for(self, conversation: int) -> dict[DropReason, int]:
        return {r: self.drops.get((conversation, r), 0) for r in DropReason}


class Port:
    """Physical interface: FIFO queue plus a transmitter serializing at speed_bps."""

    def __init__(self, node: "Node", index: int, mac: MacAddress,
                 speed_bps: int = 100_000_000, queue_capacity: int = 100,
                 name: str = ""):
        if speed_bps <= 0:
            raise TopologyError(f"port speed must be positive, got {speed_bps}")
        self.node = node
        self.index = index
        self.mac = mac
        self.speed_bps = speed_bps
        self.queue_capacity = queue_capacity
        self.name = name or f"{node.id}.eth{index}"
        self.link: Optional[Link] = None
        self.addr: Optional[NetAddress] = None  # set only on addressed (routed) ports
        self.bond: Optional["Bond"] = None      # set when the port is a bond member
        self.lacp = None                        # attached by the lacp module
        self.queue: deque[Frame] = deque()
        self._tx_frame: Optional[Frame] = None
        self._tx_event: Optional[Event] = None
        self._ser_carry = 0  # sub-microsecond serialization remainder, numerator over speed_bps
        self.tx_frames = 0
        self.rx_frames = 0

    @property
    def carrier_up(self) -> bool:
        return self.link is not None and self.link.up

    def carrier_reading(self, at: int) -> bool:
        """Carrier as sampled by a poll at time `at`: changes at exactly `at` are not yet visible."""
        if self.link is None:
            return False
        return self.link.state_reading(at)

    @property
    def network(self) -> Optional[str]:
        return self.addr.network if self.addr else None

    def send(self, frame: Frame) -> None:
        self.transmit(frame)

    def transmit(self, frame: Frame) -> None:
        world = self.node.world
        if not self.carrier_up:
            world.drop(frame, DropReason.LINK_DOWN)
            return
        if len(self.queue) >= self.queue_capacity:
            world.drop(frame, DropReason.QUEUE_FULL)
            return
        self.queue.append(frame)
        if self._tx_frame is None:
            self._start_tx()

    def _serialization_us(self, size_bytes: int) -> int:
        # Exact long-run rate: the fractional microsecond remainder carries to the next frame.
        num = size_bytes * 8 * 1_000_000 + self._ser_carry
        delay, self._ser_carry = divmod(num, self.speed_bps)
        return delay

    def _start_tx(self) -> None:
        frame = self.queue.popleft()
        self._tx_frame = frame
        delay = self._serialization_us(frame.size_bytes)
        self._tx_event = self.node.world.scheduler.schedule_in(
            delay, self._finish_tx, f"tx-done {self.name}")

    def _finish_tx(self) -> None:
        frame = self._tx_frame
        self._tx_frame = None
        self._tx_event = None
        assert frame is not None and self.link is not None
        self.tx_frames += 1
        self.link.put_on_wire(self, frame)
        if self.queue:
            self._start_tx()

    def flush(self, reason: DropReason) -> None:
        """Drop the in-service frame and everything queued (carrier loss)."""
        world = self.node.world
        if self._tx_event is not None:
            world.scheduler.cancel(self._tx_event)
            self._tx_event = None
        if self._tx_frame is not None:
            world.drop(self._tx_frame, reason)
            self._tx_frame = None
        while self.queue:
            world.drop(self.queue.popleft(), reason)

    def on_receive(self, frame: Frame) -> None:
        self.rx_frames += 1
        self.node.receive(self, frame)

    def frames_in_port(self) -> int:
        return len(self.queue) + (1 if self._tx_frame is not None else 0)


class Link:
    """Full-duplex point-to-point link. Going DOWN destroys frames on the wire."""

    def __init__(self, a: Port, b: Port, propagation_us: int = 5, name: str = ""):
        self.a = a
        self.b = b
        self.propagation_us = propagation_us
        self.name = name or f"{a.name}--{b.name}"
        self.up = True
        self._prev_up = True
        self._changed_at = -1
        self._in_flight: list[tuple[Event, Frame]] = []
        self.carrier_listeners: list[Callable[[bool], None]] = []

    def state_reading(self, at: int) -> bool:
        # A change at exactly `at` is observed only by later samples (strict boundary).
        return self.up if self._changed_at < at else self._prev_up

    def peer(self, port: Port) -> Port:
        return self.b if port is self.a else self.a

    def put_on_wire(self, from_port: Port, frame: Frame) -> None:
        dest = self.peer(from_port)
        world = from_port.node.world
        entry_holder: list[tuple[Event, Frame]] = []

        def arrive() -> None:
            self._in_flight.remove(entry_holder[0])
            dest.on_receive(frame)

        ev = world.scheduler.schedule_in(self.propagation_us, arrive, f"wire {self.name}")
        entry = (ev, frame)
        entry_holder.append(entry)
        self._in_flight.append(entry)

    def set_state(self, up: bool, world: "World") -> None:
        if up == self.up:
            return
        now = world.scheduler.now
        if now == self._changed_at:
            self.up = up  # several transitions at one instant: keep the pre-instant reading
        else:
            self._prev_up = self.up
            self.up = up
            self._changed_at = now
        if not up:
            for ev, frame in self._in_flight:
                world.scheduler.cancel(ev)
                world.drop(frame, DropReason.LINK_DOWN)
            self._in_flight.clear()
            self.a.flush(DropReason.LINK_DOWN)
            self.b.flush(DropReason.LINK_DOWN)
        for cb in self.carrier_listeners:
            cb(up)

    def frames_on_wire(self) -> int:
        return len(self._in_flight)


class NodeRole(Enum):
    ROUTER = "ROUTER"
    HOST = "HOST"


@dataclass
class RouteEntry:
    next_hop: Optional[str]  # neighbor router id; None for directly connected
    iface: object            # Port or Bond
    cost: int


class Node:
    """Router or host. Routers forward subject to a token-bucket capacity model."""

    def __init__(self, world: "World", node_id: str, role: NodeRole,
                 forward_capacity_fps: int = 20_000):
        self.world = world
        self.id = node_id
        self.role = role
        self.forward_capacity_fps = forward_capacity_fps
        self.ports: list[Port] = []
        self.interfaces: list = []  # addressed interfaces: Ports and Bonds
        self.route_table: dict[str, RouteEntry] = {}
        self.routing = None          # attached by the routing module
        # forwarding token bucket: starts full; burst is one millisecond of capacity
        self._credit = max(TOKEN_SCALE, forward_capacity_fps * 1000)
        self._credit_burst = self._credit
        self._credit_at = 0

    def add_port(self, speed_bps: int = 100_000_000, queue_capacity: int = 100) -> Port:
        port = Port(self, len(self.ports), self.world.alloc_mac(),
                    speed_bps=speed_bps, queue_capacity=queue_capacity)
        self.ports.append(port)
        return port

    @property
    def addresses(self) -> list[NetAddress]:
        return [i.addr for i in self.interfaces if i.addr is not None]

    @property
    def mac(self) -> MacAddress:
        # Canonical destination identity used for frame addressing and hashing.
        iface = self.interfaces[0] if self.interfaces else self.ports[0]
        return iface.mac

    def iface_for_network(self, network: str):
        for iface in self.interfaces:
            if iface.addr is not None and iface.addr.network == network:
                return iface
        return None

    # -- origination ------------------------------------------------------

    def originate(self, frame: Frame) -> None:
        """Send a locally generated frame; not charged against forwarding capacity."""
        self._route_out(frame)

    def _route_out(self, frame: Frame) -> None:
        local = self.iface_for_network(frame.dst_addr.network)
        if local is not None:
            local.send(frame)
            return
        if self.role is NodeRole.HOST:
            # hosts use their single uplink as default gateway
            self.interfaces[0].send(frame)
            return
        entry = self.route_table.get(frame.dst_addr.network)
        if entry is None:
            self.world.drop(frame, DropReason.NO_ROUTE)
            return
        entry.iface.send(frame)

    # -- receive path ------------------------------------------------------

    def receive(self, port: Port, frame: Frame) -> None:
        if frame.kind is FrameKind.LACPDU:
            if port.lacp is not None:
                port.lacp.on_pdu(frame)
            return
        if port.bond is not None:
            port.bond.collect(port, frame)
            self._receive_upper(port.bond, frame)
        else:
            self._receive_upper(port, frame)

    def _receive_upper(self, iface, frame: Frame) -> None:
        if frame.kind is FrameKind.ROUTING:
            if self.routing is not None:
                self.routing.on_frame(iface, frame)
            return
        if frame.dst_addr in self.addresses:
            self.deliver_local(frame)
            return
        if self.role is NodeRole.ROUTER:
            self.forward(frame)
        else:
            self.world.drop(frame, DropReason.NO_ROUTE)

    def deliver_local(self, frame: Frame) -> None:
        frame.received_at = self.world.scheduler.now
        self.world.ledger.on_delivered(frame)
        if frame.kind is FrameKind.PROBE:
            self._reply_to_probe(frame)
        for cb in self.world.delivery_listeners:
            cb(self, frame)

    def _reply_to_probe(self, frame: Frame) -> None:
        reply = self.world.new_frame(
            src=self, dst_mac=frame.src_mac, dst_addr=frame.src_addr,
            size_bytes=frame.size_bytes, kind=FrameKind.PROBE_REPLY,
            conversation=self.world.probe_reply_conversation(frame.conversation),
            payload=frame.payload)
        self.originate(reply)

    def forward(self, frame: Frame) -> None:
        if not self._consume_credit():
            self.world.drop(frame, DropReason.OVERLOAD)
            return
        entry = self.route_table.get(frame.dst_addr.network)
        if entry is None:
            self.world.drop(frame, DropReason.NO_ROUTE)
            return
        entry.iface.send(frame)

    def _consume_credit(self) -> bool:
        now = self.world.scheduler.now
        if now > self._credit_at:
            self._credit = min(self._credit_burst,
                               self._credit + self.forward_capacity_fps * (now - self._credit_at))
            self._credit_at = now
        if self._credit >= TOKEN_SCALE:
            self._credit -= TOKEN_SCALE
            return True
        return False


class World:
    """Everything owned by one simulation run: scheduler, topology, accounting."""

    def __init__(self, seed: int = 0):
        self.scheduler = Scheduler(seed)
        self.ledger = FrameLedger()
        self.nodes: dict[str, Node] = {}
        self.links: list[Link] = []
        self.bonds: list = []
        self._next_mac = 0x020000000001
        self._next_frame_id = 0
        self._next_conversation = 1
        self._probe_reply_conv: dict[int, int] = {}
        self._conv_seq: dict[int, int] = {}
        self.delivery_listeners: list[Callable[[Node, Frame], None]] = []

    def alloc_mac(self) -> MacAddress:
        mac = MacAddress.from_int(self._next_mac)
        self._next_mac += 1
        return mac

    def add_node(self, node_id: str, role: NodeRole, forward_capacity_fps: int = 20_000) -> Node:
        if node_id in self.nodes:
            raise TopologyError(f"duplicate node id {node_id!r}")
        node = Node(self, node_id, role, forward_capacity_fps)
        self.nodes[node_id] = node
        return node

    def connect(self, a: Port, b: Port, propagation_us: int = 5) -> Link:
        if a.link is not None or b.link is not None:
            raise TopologyError(f"port already attached: {a.name if a.link else b.name}")
        if a.node is b.node:
            log.warning("loopback link on node %s (%s -- %s)", a.node.id, a.name, b.name)
        link = Link(a, b, propagation_us)
        a.link = link
        b.link = link
        self.links.append(link)
        return link

    def set_link_state(self, link: Link, up: bool) -> None:
        link.set_state(up, self)

    def new_conversation(self) -> int:
        conv = self._next_conversation
        self._next_conversation += 1
        return conv

    def probe_reply_conversation(self, probe_conv: int) -> int:
        conv = self._probe_reply_conv.get(probe_conv)
        if conv is None:
            conv = self.new_conversation()
            self._probe_reply_conv[probe_conv] = conv
        return conv

    def new_frame(self, src: Node, dst_mac: MacAddress, dst_addr: NetAddress,
                  size_bytes: int, kind: FrameKind, conversation: int,
                  payload: object = None, src_iface=None) -> Frame:
        seq = self._conv_seq.get(conversation, 0) + 1
        self._conv_seq[conversation] = seq
        iface = src_iface if src_iface is not None else (
            src.interfaces[0] if src.interfaces else src.ports[0])
        frame = Frame(
            id=self._next_frame_id, src_mac=iface.mac, dst_mac=dst_mac,
            src_addr=iface.addr if iface.addr else NetAddress("0.0.0.0", 0),
            dst_addr=dst_addr, size_bytes=size_bytes, kind=kind,
            conversation=conversation, seq_in_conversation=seq,
            sent_at=self.scheduler.now, payload=payload)
        self._next_frame_id += 1
        self.ledger.on_created(frame)
        return frame

    def drop(self, frame: Frame, reason: DropReason) -> None:
        self.ledger.on_dropped(frame, reason)

    # -- conservation audit -------------------------------------------------

    def frames_in_flight(self) -> int:
        total = 0
        for node in self.nodes.values():
            for port in node.ports:
                total += port.frames_in_port()
        for link in self.links:
            total += link.frames_on_wire()
        return total

    def conservation_errors(self) -> list[str]:
        """Exact per-conversation check: created == delivered + drops (+ in-flight at end)."""
        in_flight = self._in_flight_by_conversation()
        errors = []
        for conv, created in self.ledger.created.items():
            delivered = self.ledger.delivered.get(conv, 0)
            dropped = sum(self.ledger.drops_for(conv).values())
            flight = in_flight.get(conv, 0)
            if created != delivered + dropped + flight:
                errors.append(
                    f"conversation {conv}: created={created} delivered={delivered} "
                    f"dropped={dropped} in_flight={flight}")
        return errors

    def _in_flight_by_conversation(self) -> dict[int, int]:
        counts: dict[int, int] = {}

        def bump(frame: Frame) -> None:
            counts[frame.conversation] = counts.get(frame.conversation, 0) + 1

        for node in self.nodes.values():
            for port in node.ports:
                for frame in port.queue:
                    bump(frame)
                if port._tx_frame is not None:
                    bump(port._tx_frame)
        for link in self.links:
            for _, frame in link._in_flight:
                bump(frame)
        return counts
