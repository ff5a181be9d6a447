"""Bond virtual interface: MII carrier polling, destination-keyed distribution,
failover remapping, and a collector that audits ordering/duplication."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Optional

from . import lacp
from .engine import US_PER_MS
from .netmodel import DropReason, Frame, MacAddress, NetAddress, Node, Port

log = logging.getLogger(__name__)


class TxPolicy(Enum):
    DEST_MAC_MOD_N = "DEST_MAC_MOD_N"
    ROUND_ROBIN = "ROUND_ROBIN"


@dataclass
class MiiConfig:
    poll_interval_ms: int = 100
    updelay_ms: int = 0
    downdelay_ms: int = 0

    def __post_init__(self) -> None:
        if self.poll_interval_ms < 1:
            raise ValueError("poll_interval_ms must be >= 1")
        for attr in ("updelay_ms", "downdelay_ms"):
            value = getattr(self, attr)
            if value % self.poll_interval_ms:
                rounded = -(-value // self.poll_interval_ms) * self.poll_interval_ms
                log.warning("%s=%d is not a multiple of poll_interval_ms=%d; rounding up to %d",
                            attr, value, self.poll_interval_ms, rounded)
                setattr(self, attr, rounded)

    def polls_for(self, delay_ms: int) -> int:
        # number of consecutive differing readings before a transition commits
        return 1 + delay_ms // self.poll_interval_ms


@dataclass
class FailoverEvent:
    at_us: int
    port: str
    transition: str  # "down" or "up"
    active_after: int


@dataclass
class ConversationLedger:
    """Assertion-only record of per-conversation delivery order and identity."""
    last_seq: dict[int, int] = field(default_factory=dict)
    seen_ids: set = field(default_factory=set)
    ordering_violations: int = 0
    duplicate_violations: int = 0

    def observe(self, frame: Frame) -> None:
        if frame.id in self.seen_ids:
            self.duplicate_violations += 1
        self.seen_ids.add(frame.id)
        last = self.last_seq.get(frame.conversation)
        if last is not None and frame.seq_in_conversation < last:
            self.ordering_violations += 1
        else:
            self.last_seq[frame.conversation] = frame.seq_in_conversation


class Bond:
    """Aggregates member ports behind one MAC and one network address."""

    def __init__(self, node: Node, name: str, members: list[Port],
                 addr: Optional[NetAddress] = None,
                 policy: TxPolicy = TxPolicy.DEST_MAC_MOD_N,
                 mii: Optional[MiiConfig] = None):
        if not members:
            raise ValueError("a bond needs at least one member port")
        if len(members) == 1:
            log.warning("bond %s has a single member; it behaves as a plain link", name)
        self.node = node
        self.name = name
        self.members = members
        self.mac = node.world.alloc_mac()
        self.addr = addr
        self.policy = policy
        self.mii = mii or MiiConfig()
        self.active: list[Port] = []
        self.ledger = ConversationLedger()
        self.failover_events: list[FailoverEvent] = []
        self.carrier_listeners: list[Callable[[bool], None]] = []
        self.tx_frames = 0
        self.rx_frames = 0
        self._rr_counter = 0
        self._member_up: dict[Port, bool] = {p: False for p in members}
        self._pending_count: dict[Port, int] = {p: 0 for p in members}
        for port in members:
            port.bond = self
        node.world.bonds.append(self)

    @property
    def carrier_up(self) -> bool:
        return bool(self.active)

    @property
    def network(self) -> Optional[str]:
        return self.addr.network if self.addr else None

    def start(self, at_us: int = 0) -> None:
        """Snapshot carriers and begin MII polling one interval after `at_us`."""
        for port in self.members:
            self._member_up[port] = port.carrier_up
        self._recompute_active()
        poll_us = self.mii.poll_interval_ms * US_PER_MS
        self.node.world.scheduler.schedule_at(at_us + poll_us, self._poll, f"mii {self.name}")

    # -- monitoring ---------------------------------------------------------

    def _poll(self) -> None:
        now = self.node.world.scheduler.now
        self.mii_poll(now)
        poll_us = self.mii.poll_interval_ms * US_PER_MS
        self.node.world.scheduler.schedule_at(now + poll_us, self._poll, f"mii {self.name}")

    def mii_poll(self, at: int) -> list[tuple[Port, bool]]:
        """One polling pass; returns committed (port, up) transitions."""
        transitions: list[tuple[Port, bool]] = []
        for port in self.members:
            reading = port.carrier_reading(at)
            if reading == self._member_up[port]:
                self._pending_count[port] = 0
                continue
            self._pending_count[port] += 1
            needed = self.mii.polls_for(self.mii.updelay_ms if reading else self.mii.downdelay_ms)
            if self._pending_count[port] >= needed:
                self._member_up[port] = reading
                self._pending_count[port] = 0
                transitions.append((port, reading))
        self._recompute_active()
        for port, up in transitions:
            self.failover_events.append(FailoverEvent(
                at_us=at, port=port.name, transition="up" if up else "down",
                active_after=len(self.active)))
        return transitions

    def reselect(self) -> None:
        """Called by LACP when partner state changes; may alter the active set."""
        if lacp.reselect(self):
            self._recompute_active()

    def _recompute_active(self) -> None:
        was_up = bool(self.active)
        self.active = [p for p in lacp.selected_ports(self) if self._member_up[p]]
        is_up = bool(self.active)
        if was_up != is_up:
            for cb in self.carrier_listeners:
                cb(is_up)

    # -- distribution -------------------------------------------------------

    def select_tx_port(self, frame: Frame) -> Port:
        active = self.active
        if self.policy is TxPolicy.DEST_MAC_MOD_N:
            return active[frame.dst_mac.last_octet % len(active)]
        port = active[self._rr_counter % len(active)]
        self._rr_counter += 1
        return port

    def send(self, frame: Frame) -> None:
        if not self.active:
            # bond reports carrier down; a stale route transmitting into it loses the frame
            self.node.world.drop(frame, DropReason.LINK_DOWN)
            return
        self.tx_frames += 1
        self.select_tx_port(frame).transmit(frame)

    # -- collection ---------------------------------------------------------

    def collect(self, port: Port, frame: Frame) -> None:
        self.rx_frames += 1
        self.ledger.observe(frame)
