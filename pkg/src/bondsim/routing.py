"""Link-state routing core: hello/dead neighbor tracking, LSA flooding, Dijkstra SPF.

Reduced to the mechanism that matters here: when an entire adjacency dies, the
surviving graph is re-flooded and every router recomputes shortest paths.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from heapq import heappop, heappush
from typing import Optional

from .engine import US_PER_MS, US_PER_S, Event
from .netmodel import (BROADCAST_MAC, Frame, FrameKind, NetAddress, Node, NodeRole,
                       RouteEntry, World)

HELLO_SIZE_BYTES = 64
LSA_SIZE_BYTES = 100
NULL_ADDR = NetAddress("0.0.0.0", 0)


class DetectionMode(Enum):
    DEAD_INTERVAL = "DEAD_INTERVAL"
    CARRIER_TRIGGERED = "CARRIER_TRIGGERED"


@dataclass
class RoutingConfig:
    hello_interval_s: float = 10.0
    dead_interval_s: float = 40.0
    spf_delay_ms: int = 200
    detection_mode: DetectionMode = DetectionMode.DEAD_INTERVAL
    lsa_refresh_s: float = 5.0
    start_offset_ms: int = 200

    def __post_init__(self) -> None:
        if self.dead_interval_s <= self.hello_interval_s:
            raise ValueError("dead_interval_s must exceed hello_interval_s")


@dataclass(frozen=True)
class Hello:
    origin: str


@dataclass(frozen=True)
class Lsa:
    origin: str
    seq: int
    links: tuple  # tuple of (neighbor_id or None, network, cost)

    def lists_neighbor(self, router_id: str) -> bool:
        return any(nbr == router_id for nbr, _, _ in self.links)


@dataclass
class RouteChange:
    at_us: int
    router: str
    network: str
    old_next: str
    new_next: str


@dataclass
class NeighborState:
    router_id: str
    last_seen: int
    expiry_event: Optional[Event] = None


class RouterRouting:
    """Per-router protocol instance."""

    def __init__(self, domain: "RoutingDomain", node: Node,
                 transit: list, stubs: list):
        self.domain = domain
        self.node = node
        self.transit = list(transit)   # addressed inter-router interfaces (Bond or Port)
        self.stubs = list(stubs)       # addressed host-facing interfaces
        self.neighbors: dict[str, NeighborState] = {}  # keyed by interface name
        self.lsdb: dict[str, Lsa] = {}
        self.my_seq = 0
        self.spf_runs = 0
        self.lsa_originated = 0
        self._spf_pending = False
        self._hello_conv = {i.name: node.world.new_conversation() for i in self.transit}
        self._lsa_conv = node.world.new_conversation()
        node.routing = self
        for iface in self.transit:
            listeners = getattr(iface, "carrier_listeners", None)
            if listeners is None and iface.link is not None:
                listeners = iface.link.carrier_listeners
            if listeners is not None:
                listeners.append(self._make_carrier_handler(iface))

    def _make_carrier_handler(self, iface):
        def on_carrier(up: bool) -> None:
            if not up and self.domain.config.detection_mode is DetectionMode.CARRIER_TRIGGERED:
                self._expire_iface(iface.name)
        return on_carrier

    @property
    def scheduler(self):
        return self.node.world.scheduler

    # -- startup ------------------------------------------------------------

    def start(self, at_us: int) -> None:
        self.scheduler.schedule_at(at_us, self._boot, f"routing-start {self.node.id}")

    def _boot(self) -> None:
        self.originate_lsa()
        for iface in self.transit:
            self._hello_tick(iface)
        self._refresh_tick()

    def _hello_tick(self, iface) -> None:
        if iface.carrier_up:
            frame = self.node.world.new_frame(
                src=self.node, dst_mac=BROADCAST_MAC, dst_addr=NULL_ADDR,
                size_bytes=HELLO_SIZE_BYTES, kind=FrameKind.ROUTING,
                conversation=self._hello_conv[iface.name],
                payload=Hello(self.node.id), src_iface=iface)
            iface.send(frame)
        self.scheduler.schedule_in(
            round(self.domain.config.hello_interval_s * US_PER_S),
            lambda: self._hello_tick(iface), f"hello {self.node.id}/{iface.name}")

    def _refresh_tick(self) -> None:
        own = self.lsdb.get(self.node.id)
        if own is not None:
            self.flood(own, except_iface=None)
        self.scheduler.schedule_in(
            round(self.domain.config.lsa_refresh_s * US_PER_S),
            self._refresh_tick, f"lsa-refresh {self.node.id}")

    # -- protocol input -----------------------------------------------------

    def on_frame(self, iface, frame: Frame) -> None:
        frame.received_at = self.scheduler.now
        self.node.world.ledger.on_delivered(frame)
        payload = frame.payload
        if isinstance(payload, Hello):
            self._on_hello(iface, payload)
        elif isinstance(payload, Lsa):
            self._on_lsa(iface, payload)

    def _on_hello(self, iface, hello: Hello) -> None:
        now = self.scheduler.now
        ns = self.neighbors.get(iface.name)
        if ns is None or ns.router_id != hello.origin:
            self.neighbors[iface.name] = ns = NeighborState(hello.origin, now)
            self._send_db(iface)
            self.originate_lsa()
            self.schedule_spf()
        ns.last_seen = now
        if ns.expiry_event is not None:
            self.scheduler.cancel(ns.expiry_event)
        dead_us = round(self.domain.config.dead_interval_s * US_PER_S)
        ns.expiry_event = self.scheduler.schedule_at(
            now + dead_us + 1, lambda: self._expire_iface(iface.name),
            f"dead {self.node.id}/{iface.name}")

    def _expire_iface(self, iface_name: str) -> None:
        ns = self.neighbors.pop(iface_name, None)
        if ns is None:
            return
        if ns.expiry_event is not None:
            self.scheduler.cancel(ns.expiry_event)
        self.originate_lsa()
        self.schedule_spf()

    def neighbor_check(self) -> list[str]:
        """Expired neighbors by the dead-interval rule (timers normally handle this)."""
        now = self.scheduler.now
        dead_us = round(self.domain.config.dead_interval_s * US_PER_S)
        expired = [name for name, ns in self.neighbors.items()
                   if now - ns.last_seen > dead_us]
        for name in expired:
            self._expire_iface(name)
        return expired

    def _on_lsa(self, iface, lsa: Lsa) -> None:
        current = self.lsdb.get(lsa.origin)
        if current is not None and current.seq >= lsa.seq:
            return
        self.lsdb[lsa.origin] = lsa
        self.flood(lsa, except_iface=iface)
        self.schedule_spf()

    # -- origination and flooding --------------------------------------------

    def originate_lsa(self) -> None:
        links = []
        for iface in self.transit:
            ns = self.neighbors.get(iface.name)
            if ns is not None and iface.network is not None:
                links.append((ns.router_id, iface.network, 1))
        for iface in self.stubs:
            if iface.network is not None and iface.carrier_up:
                links.append((None, iface.network, 1))
        self.my_seq += 1
        lsa = Lsa(self.node.id, self.my_seq, tuple(sorted(links, key=str)))
        self.lsdb[self.node.id] = lsa
        self.lsa_originated += 1
        self.flood(lsa, except_iface=None)

    def flood(self, lsa: Lsa, except_iface) -> None:
        for iface in self.transit:
            if iface is except_iface or not iface.carrier_up:
                continue
            frame = self.node.world.new_frame(
                src=self.node, dst_mac=BROADCAST_MAC, dst_addr=NULL_ADDR,
                size_bytes=LSA_SIZE_BYTES, kind=FrameKind.ROUTING,
                conversation=self._lsa_conv, payload=lsa, src_iface=iface)
            iface.send(frame)

    def _send_db(self, iface) -> None:
        for lsa in self.lsdb.values():
            frame = self.node.world.new_frame(
                src=self.node, dst_mac=BROADCAST_MAC, dst_addr=NULL_ADDR,
                size_bytes=LSA_SIZE_BYTES, kind=FrameKind.ROUTING,
                conversation=self._lsa_conv, payload=lsa, src_iface=iface)
            iface.send(frame)

    # -- shortest paths -------------------------------------------------------

    def schedule_spf(self) -> None:
        if self._spf_pending:
            return
        self._spf_pending = True
        self.scheduler.schedule_in(self.domain.config.spf_delay_ms * US_PER_MS,
                                   self._run_spf, f"spf {self.node.id}")

    def _run_spf(self) -> None:
        self._spf_pending = False
        self.spf()

    def spf(self) -> dict[str, RouteEntry]:
        """Dijkstra over the LSA database; installs and returns the route table."""
        self.spf_runs += 1
        dist, first_hop = self._router_distances()
        table: dict[str, RouteEntry] = {}
        best: dict[str, tuple] = {}
        for origin, lsa in self.lsdb.items():
            if origin not in dist:
                continue
            for _, network, cost in lsa.links:
                key = (dist[origin] + cost, first_hop.get(origin) or "", origin)
                if network not in best or key < best[network]:
                    best[network] = key
        iface_by_neighbor = {ns.router_id: name for name, ns in self.neighbors.items()}
        ifaces = {i.name: i for i in self.transit + self.stubs}
        for network, (cost, hop, origin) in best.items():
            if origin == self.node.id:
                iface = self._own_iface_for(network)
                if iface is not None:
                    table[network] = RouteEntry(None, iface, cost)
                continue
            iface_name = iface_by_neighbor.get(hop)
            if iface_name is None:
                continue
            table[network] = RouteEntry(hop, ifaces[iface_name], cost)
        self._log_changes(table)
        self.node.route_table = table
        return table

    def _own_iface_for(self, network: str):
        for iface in self.transit + self.stubs:
            if iface.network == network:
                return iface
        return None

    def _router_distances(self) -> tuple[dict[str, int], dict[str, Optional[str]]]:
        # two-way check: an edge exists only if both ends currently advertise it
        adjacency: dict[str, list[tuple[str, int]]] = {}
        for origin, lsa in self.lsdb.items():
            edges = []
            for nbr, _, cost in lsa.links:
                if nbr is None:
                    continue
                other = self.lsdb.get(nbr)
                if other is not None and other.lists_neighbor(origin):
                    edges.append((nbr, cost))
            adjacency[origin] = sorted(edges)
        src = self.node.id
        dist: dict[str, int] = {src: 0}
        first_hop: dict[str, Optional[str]] = {src: None}
        heap: list[tuple[int, str, str]] = [(0, "", src)]
        while heap:
            d, hop, u = heappop(heap)
            if d > dist.get(u, 1 << 60) or (d == dist[u] and (first_hop[u] or "") != hop):
                continue
            for v, cost in adjacency.get(u, ()):
                nd = d + cost
                nhop = v if u == src else hop
                cur = dist.get(v)
                if cur is None or nd < cur or (nd == cur and nhop < (first_hop[v] or "\xff")):
                    dist[v] = nd
                    first_hop[v] = nhop
                    heappush(heap, (nd, nhop, v))
        return dist, first_hop

    def _log_changes(self, new_table: dict[str, RouteEntry]) -> None:
        def label(entry: Optional[RouteEntry]) -> str:
            if entry is None:
                return "-"
            return entry.next_hop if entry.next_hop is not None else "direct"

        old = self.node.route_table
        for network in sorted(set(old) | set(new_table)):
            before, after = label(old.get(network)), label(new_table.get(network))
            if before != after:
                self.domain.route_log.append(RouteChange(
                    self.scheduler.now, self.node.id, network, before, after))


class RoutingDomain:
    """All routers of one run sharing a config and a route-change log."""

    def __init__(self, world: World, config: Optional[RoutingConfig] = None):
        self.world = world
        self.config = config or RoutingConfig()
        self.routers: list[RouterRouting] = []
        self.route_log: list[RouteChange] = []

    def attach(self, node: Node, transit: list, stubs: list) -> RouterRouting:
        if node.role is not NodeRole.ROUTER:
            raise ValueError(f"routing runs on routers only, not {node.id}")
        router = RouterRouting(self, node, transit, stubs)
        self.routers.append(router)
        return router

    def start(self) -> None:
        at = self.config.start_offset_ms * US_PER_MS
        for router in self.routers:
            router.start(at)

    def routes_complete(self, networks: list[str]) -> bool:
        return all(net in r.node.route_table for r in self.routers for net in networks)

    def total_spf_runs(self) -> int:
        return sum(r.spf_runs for r in self.routers)

    def total_lsa_originated(self) -> int:
        return sum(r.lsa_originated for r in self.routers)
