"""Minimal LACP: identifiers, periodic control-frame exchange, aggregation selection.

Ports with equal LAG identity (local system+key, partner system+key) and equal
speed may aggregate; everything else stays out of the active set.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING, Optional

from .engine import US_PER_S, Scheduler
from .netmodel import FrameKind, MacAddress, NetAddress, Port

if TYPE_CHECKING:
    from .bonding import Bond

LACPDU_SIZE_BYTES = 124
# reserved multicast address for slow protocols; delivered by the receiving port itself
SLOW_PROTOCOLS_MAC = MacAddress((0x01, 0x80, 0xC2, 0x00, 0x00, 0x02))
NULL_ADDR = NetAddress("0.0.0.0", 0)

DEFAULT_TX_INTERVAL_US = 1 * US_PER_S
PARTNER_EXPIRY_MULTIPLE = 3


@dataclass(frozen=True, order=True)
class SystemId:
    priority: int
    mac: MacAddress


@dataclass(frozen=True, order=True)
class PortIdent:
    priority: int
    number: int


@dataclass(frozen=True)
class AggKey:
    key: int


@dataclass(frozen=True)
class LagId:
    local_system: SystemId
    local_key: AggKey
    partner_system: SystemId
    partner_key: AggKey


@dataclass(frozen=True)
class LacpduInfo:
    system: SystemId
    key: AggKey
    port: PortIdent
    activity: bool = True
    sync: bool = True
    collecting: bool = True
    distributing: bool = True


@dataclass(frozen=True)
class Lacpdu:
    actor: LacpduInfo
    partner: Optional[LacpduInfo]


class PortLacp:
    """Per-member protocol state; collapsed SELECTED/UNSELECTED machine."""

    def __init__(self, port: Port, bond: "Bond", system: SystemId, key: AggKey,
                 ident: PortIdent, tx_interval_us: int = DEFAULT_TX_INTERVAL_US):
        self.port = port
        self.bond = bond
        self.system = system
        self.key = key
        self.ident = ident
        self.tx_interval_us = tx_interval_us
        self.partner: Optional[LacpduInfo] = None
        self.partner_seen_at = -1
        self.selected = False
        self.malformed_count = 0
        self.pdus_sent = 0
        self.pdus_received = 0
        self.conversation = port.node.world.new_conversation()
        port.lacp = self

    @property
    def scheduler(self) -> Scheduler:
        return self.port.node.world.scheduler

    def start(self, at_us: int = 0) -> None:
        self.scheduler.schedule_at(at_us, self._tick, f"lacp-tx {self.port.name}")

    def _tick(self) -> None:
        self._expire_partner()
        if self.port.carrier_up:
            self._send_pdu()
        self.scheduler.schedule_in(self.tx_interval_us, self._tick, f"lacp-tx {self.port.name}")

    def _expire_partner(self) -> None:
        if self.partner is None:
            return
        if self.scheduler.now - self.partner_seen_at > PARTNER_EXPIRY_MULTIPLE * self.tx_interval_us:
            self.partner = None
            self.bond.reselect()

    def _send_pdu(self) -> None:
        world = self.port.node.world
        pdu = Lacpdu(actor=LacpduInfo(self.system, self.key, self.ident),
                     partner=self.partner)
        frame = world.new_frame(
            src=self.port.node, dst_mac=SLOW_PROTOCOLS_MAC, dst_addr=NULL_ADDR,
            size_bytes=LACPDU_SIZE_BYTES, kind=FrameKind.LACPDU,
            conversation=self.conversation, payload=pdu, src_iface=self.port)
        self.pdus_sent += 1
        self.port.transmit(frame)

    def on_pdu(self, frame: Frame) -> None:
        pdu = frame.payload
        if not isinstance(pdu, Lacpdu) or pdu.actor.system.mac.is_zero:
            self.malformed_count += 1
            return
        frame.received_at = self.scheduler.now
        self.port.node.world.ledger.on_delivered(frame)
        self.pdus_received += 1
        self.partner = pdu.actor
        self.partner_seen_at = self.scheduler.now
        self.bond.reselect()

    def lag_id(self) -> Optional[LagId]:
        if self.partner is None:
            return None
        return LagId(self.system, self.key, self.partner.system, self.partner.key)


def attach(bond: "Bond", system_priority: int = 32768,
           key: int = 1, tx_interval_us: int = DEFAULT_TX_INTERVAL_US,
           start_at_us: int = 0) -> None:
    """Enable LACP on every member of a bond and schedule the periodic exchange."""
    system = SystemId(system_priority, bond.mac)
    agg_key = AggKey(key)
    for i, port in enumerate(bond.members):
        state = PortLacp(port, bond, system, agg_key,
                         PortIdent(priority=32768, number=i + 1),
                         tx_interval_us=tx_interval_us)
        state.start(start_at_us)


def selected_ports(bond: "Bond") -> list[Port]:
    """SELECTED members with carrier up, in PortIdent order; feeds the distributor."""
    members = sorted(bond.members, key=lambda p: (p.lacp.ident if p.lacp else PortIdent(0, p.index)))
    return [p for p in members
            if (p.lacp is None or p.lacp.selected) and p.carrier_up]


def reselect(bond: "Bond") -> bool:
    """Recompute SELECTED flags from LAG identities and speeds. True if anything changed."""
    states = [p.lacp for p in sorted(bond.members, key=lambda p: p.lacp.ident)
              if p.lacp is not None]
    reference = None
    for st in states:
        lag = st.lag_id()
        if lag is not None:
            reference = (lag, st.port.speed_bps)
            break
    changed = False
    for st in states:
        lag = st.lag_id()
        selected = reference is not None and lag == reference[0] and st.port.speed_bps == reference[1]
        if selected != st.selected:
            st.selected = selected
            changed = True
    return changed
