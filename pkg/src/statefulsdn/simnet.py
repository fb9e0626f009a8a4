"""Deterministic discrete-event network simulator.

Links have a fixed one-way delay and infinite capacity, so the only way a
packet is lost is a failure (in flight on a link that goes down, sent on a
down port, or dropped by a rule). Time is integral microseconds; events with
equal time run in scheduling order.
"""

from __future__ import annotations

import csv
import heapq
import io
import itertools
import random
from dataclasses import dataclass, field
from typing import Optional

from .errors import ConfigError, UnknownFlow, UnknownLink
from .pipeline import CONTROLLER, HeaderField, Match, Packet, Switch

US_PER_S = 1_000_000
US_PER_MS = 1_000


# -- topology ----------------------------------------------------------------

@dataclass
class Link:
    a: tuple  # (node, port)
    b: tuple
    delay: int
    up: bool = True
    epoch: int = 0  # bumped on every down transition; in-flight packets compare it

    @property
    def name(self) -> str:
        return f"{self.a[0]}-{self.b[0]}"

    def other(self, node):
        return self.b if self.a[0] == node else self.a


@dataclass
class Host:
    id: str
    addresses: frozenset
    switch: str


class Topology:
    def __init__(self):
        self.switches: list[str] = []
        self.hosts: dict[str, Host] = {}
        self.links: list[Link] = []
        self._by_port: dict[tuple, Link] = {}
        self._next_port: dict[str, int] = {}

    @property
    def nodes(self):
        return self.switches + list(self.hosts)

    def has_node(self, node) -> bool:
        return node in self._next_port

    def add_switch(self, node: str) -> None:
        if self.has_node(node):
            raise ConfigError(f"duplicate node {node}")
        self.switches.append(node)
        self._next_port[node] = 1

    def add_host(self, host: str, switch: str, addresses, delay: int = 0) -> Host:
        if self.has_node(host):
            raise ConfigError(f"duplicate node {host}")
        self._next_port[host] = 1
        h = Host(host, frozenset(addresses), switch)
        self.hosts[host] = h
        self.add_link(host, switch, delay)
        return h

    def add_link(self, u: str, v: str, delay: int, port_u: Optional[int] = None,
                 port_v: Optional[int] = None) -> Link:
        for n in (u, v):
            if not self.has_node(n):
                raise ConfigError(f"link {u}-{v} references unknown node {n}")
        if delay < 0:
            raise ConfigError(f"link {u}-{v} has negative delay")
        pu = port_u if port_u is not None else self._next_port[u]
        pv = port_v if port_v is not None else self._next_port[v]
        for end in ((u, pu), (v, pv)):
            if end in self._by_port:
                raise ConfigError(f"port {end[1]} of node {end[0]} already linked")
        self._next_port[u] = max(self._next_port[u], pu + 1)
        self._next_port[v] = max(self._next_port[v], pv + 1)
        link = Link((u, pu), (v, pv), delay)
        self.links.append(link)
        self._by_port[(u, pu)] = link
        self._by_port[(v, pv)] = link
        return link

    def link_at(self, node, port) -> Optional[Link]:
        return self._by_port.get((node, port))

    def ports(self, node) -> list:
        return sorted(p for (n, p) in self._by_port if n == node)

    def port_to(self, node, neighbor) -> int:
        for (n, p), link in self._by_port.items():
            if n == node and link.other(node)[0] == neighbor:
                return p
        raise ConfigError(f"no link between {node} and {neighbor}")

    def neighbors(self, node) -> list:
        return [self._by_port[(node, p)].other(node)[0] for p in self.ports(node)]

    def find_link(self, u, v) -> Link:
        for link in self.links:
            if {link.a[0], link.b[0]} == {u, v}:
                return link
        raise UnknownLink(f"{u}-{v}")

    def host_of(self, switch) -> Optional[Host]:
        for h in self.hosts.values():
            if h.switch == switch:
                return h
        return None

    def path_delay(self, path) -> int:
        return sum(self.find_link(u, v).delay for u, v in zip(path, path[1:]))


# -- traffic -----------------------------------------------------------------

@dataclass
class TcpFlowArrivals:
    """New flows at ``rate`` flows/s; each flow is a train of packets with a fresh l4_src."""
    name: str
    src: str
    header: dict
    rate: float
    count: int
    pkts_per_flow: int = 1
    pkt_gap: int = 0
    start: int = 0
    l4_base: int = 10000

    def packets(self, rng):
        def one(n):
            t0 = self.start + int(n * US_PER_S // self.rate)
            for j in range(self.pkts_per_flow):
                yield t0 + j * self.pkt_gap, n, j

        for t, n, j in heapq.merge(*(one(n) for n in range(self.count))):
            hdr = dict(self.header)
            hdr[HeaderField.L4_SRC] = self.l4_base + n
            yield t, f"{self.name}:{n}", j, hdr


@dataclass
class Cbr:
    """Evenly spaced packets at ``rate`` pkts/s of a single flow, in [start, stop)."""
    name: str
    src: str
    header: dict
    rate: float
    start: int = 0
    stop: Optional[int] = None
    jitter: int = 0

    def packets(self, rng):
        if self.rate <= 0:
            return
        for n in itertools.count():
            t = self.start + int(n * US_PER_S // self.rate)
            if self.jitter:
                t += rng.randrange(self.jitter + 1)
            if self.stop is not None and t >= self.stop:
                return
            yield t, self.name, n, dict(self.header)


@dataclass
class TracePackets:
    """Explicit packet times for a single flow."""
    name: str
    src: str
    header: dict
    times: list

    def packets(self, rng):
        for n, t in enumerate(sorted(self.times)):
            yield t, self.name, n, dict(self.header)


# -- controller channel ------------------------------------------------------

@dataclass
class ControllerChannel:
    one_way_delay: int = 0
    proc_delay: int = 1000

    @classmethod
    def from_rtt(cls, rtt: int, proc_delay: int = 1000):
        if rtt % 2:
            raise ConfigError("RTT must be an even number of microseconds")
        return cls(rtt // 2, proc_delay)


@dataclass
class PacketIn:
    switch: str
    packet: Packet


@dataclass
class PortStatus:
    switch: str
    port: int
    up: bool
    sent_at: int = 0


@dataclass
class FlowMod:
    switch: str
    match: Optional[Match] = None
    actions: list = field(default_factory=list)
    cookie: Optional[str] = None
    command: str = "add"
    note: Optional[dict] = None


@dataclass
class PacketOut:
    switch: str
    packet: Packet
    actions: list


# -- metrics -----------------------------------------------------------------

@dataclass
class Hop:
    node: str
    in_port: Optional[int]
    arrive: int
    depart: Optional[int]
    out_port: Optional[int]
    tag_in: Optional[int] = None
    tag_out: Optional[int] = None
    state_before: Optional[int] = None
    state_after: Optional[int] = None


@dataclass
class CopyRecord:
    status: str
    reason: str
    time: int
    hops: list


@dataclass
class PacketRecord:
    pkt_id: str
    flow_id: str
    seq: int
    created_at: int
    copies: list = field(default_factory=list)

    @property
    def delivered(self) -> bool:
        return any(c.status == "delivered" for c in self.copies)

    @property
    def status(self) -> str:
        if not self.copies:
            return "in_flight"
        return "delivered" if self.delivered else "dropped"

    @property
    def drop_reason(self) -> str:
        if self.delivered or not self.copies:
            return ""
        return self.copies[0].reason

    @property
    def main_copy(self) -> Optional[CopyRecord]:
        for c in self.copies:
            if c.status == "delivered":
                return c
        return self.copies[0] if self.copies else None


@dataclass
class CtrlEvent:
    time: int
    direction: str  # "to_controller" | "to_switch"
    kind: str
    switch: str
    detail: str = ""


@dataclass
class MetricsLog:
    packets: dict = field(default_factory=dict)
    flows: dict = field(default_factory=dict)
    ctrl_events: list = field(default_factory=list)
    recoveries: list = field(default_factory=list)  # (notified_at, updated_at, switch, detail)
    restorations: list = field(default_factory=list)  # (time, switch, detail)
    violations: list = field(default_factory=list)
    until: int = 0

    def add_packet(self, rec: PacketRecord) -> None:
        self.packets[rec.pkt_id] = rec
        self.flows.setdefault(rec.flow_id, []).append(rec.pkt_id)

    def flow_packets(self, flow_id) -> list:
        try:
            return [self.packets[p] for p in self.flows[flow_id]]
        except KeyError:
            raise UnknownFlow(flow_id) from None

    @property
    def generated(self) -> int:
        return len(self.packets)

    def count(self, status) -> int:
        return sum(1 for r in self.packets.values() if r.status == status)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["flow_id", "pkt_id", "created_at", "status", "drop_reason", "hop_list"])
        for r in self.packets.values():
            c = r.main_copy
            hops = "" if c is None else " ".join(h.node for h in c.hops)
            w.writerow([r.flow_id, r.pkt_id, r.created_at, r.status, r.drop_reason, hops])
        return buf.getvalue()

    def summary_row(self, scenario_id, seed, rate, rtt) -> dict:
        delays = [upd - sent for sent, upd, _, _ in self.recoveries]
        return {
            "scenario": scenario_id, "seed": seed, "rate": rate, "rtt": rtt,
            "losses": self.count("dropped"),
            "recovery_delay": max(delays) if delays else 0,
        }


def measure_processing_time(log: MetricsLog, flow_id, node=None) -> int:
    """Departure minus arrival of the flow's first packet at ``node``.

    ``node`` defaults to the first switch the packet traversed.
    """
    first = log.flow_packets(flow_id)[0]
    c = first.main_copy
    if c is None or not c.hops:
        raise UnknownFlow(f"{flow_id}: first packet never reached a switch")
    hops = [h for h in c.hops if h.node == (node if node is not None else c.hops[0].node)]
    if not hops:
        raise UnknownFlow(f"{flow_id}: first packet never visited {node}")
    data = [h for h in hops if h.depart is not None and h.out_port not in (None, CONTROLLER)]
    if not data:
        raise UnknownFlow(f"{flow_id}: first packet never departed {hops[0].node}")
    return data[-1].depart - hops[0].arrive


def count_losses(log: MetricsLog, window=None) -> int:
    t1, t2 = window if window is not None else (float("-inf"), float("inf"))
    return sum(1 for r in log.packets.values() if t1 <= r.created_at <= t2 and r.status == "dropped")


# -- simulation --------------------------------------------------------------

@dataclass
class Scenario:
    topology: Topology
    switches: dict
    generators: list = field(default_factory=list)
    link_events: list = field(default_factory=list)  # (time, u, v, up)
    controller: Optional[ControllerChannel] = None
    app: object = None
    detection_delay: int = 0
    switch_latency: int = 0
    seed: int = 0
    name: str = ""


class Simulator:
    def __init__(self, scenario: Scenario):
        self.sc = scenario
        self.topo = scenario.topology
        self.log = MetricsLog()
        self.now = 0
        self._queue: list = []
        self._seq = itertools.count()
        self._rng = random.Random(scenario.seed)
        for sid, sw in scenario.switches.items():
            for p in self.topo.ports(sid):
                link = self.topo.link_at(sid, p)
                sw.ports.setdefault(p, link.up)
        for gen in scenario.generators:
            if gen.src not in self.topo.hosts:
                raise ConfigError(f"generator {gen.name}: unknown source host {gen.src}")
            self._pull(gen, gen.packets(self._rng))
        for t, u, v, up in scenario.link_events:
            self.inject_link_status(self.topo.find_link(u, v), up, t)

    # scheduling
    def schedule(self, time: int, handler, *args) -> None:
        if time < self.now:
            raise ValueError(f"cannot schedule in the past ({time} < {self.now})")
        heapq.heappush(self._queue, (time, next(self._seq), handler, args))

    def inject_link_status(self, link: Link, up: bool, at: int) -> None:
        self.schedule(at, self._on_link_status, link, up)

    def run(self, until: int) -> MetricsLog:
        """Generate traffic up to ``until``, then drain packets still in flight."""
        while self._queue:
            time, _, handler, args = heapq.heappop(self._queue)
            if time > until and handler in (self._on_gen_tick, self._on_link_status):
                continue
            self.now = time
            handler(*args)
        self.log.until = until
        return self.log

    # traffic
    def _pull(self, gen, it) -> None:
        item = next(it, None)
        if item is not None:
            self.schedule(item[0], self._on_gen_tick, gen, it, item)

    def _on_gen_tick(self, gen, it, item) -> None:
        t, flow_id, seq, hdr = item
        pkt_id = f"{flow_id}#{seq}"
        self.log.add_packet(PacketRecord(pkt_id, flow_id, seq, t))
        pkt = Packet(hdr, None, t, flow_id, pkt_id)
        self._transmit(gen.src, 1, pkt)
        self._pull(gen, it)

    # links
    def _transmit(self, node, port, pkt: Packet) -> None:
        link = self.topo.link_at(node, port)
        if link is None:
            self._terminate(pkt, "dropped", "no_link")
        elif not link.up:
            self._terminate(pkt, "dropped", "link_down")
        else:
            peer, peer_port = link.other(node)
            self.schedule(self.now + link.delay, self._on_arrival, peer, peer_port, pkt, link, link.epoch)

    def _on_arrival(self, node, port, pkt: Packet, link: Link, epoch: int) -> None:
        if not link.up or link.epoch != epoch:
            self._terminate(pkt, "dropped", "link_down")
            return
        pkt.ingress_port = port
        host = self.topo.hosts.get(node)
        if host is not None:
            self._deliver(host, pkt)
        else:
            self._switch_receive(self.sc.switches[node], pkt)

    def _deliver(self, host: Host, pkt: Packet) -> None:
        pkt.trace.append(Hop(host.id, pkt.ingress_port, self.now, None, None, pkt.tag, pkt.tag))
        if pkt.header.get(HeaderField.IP_DST) not in host.addresses:
            self._terminate(pkt, "dropped", "misdelivered")
        elif pkt.tag is not None:
            self.log.violations.append((self.now, pkt.pkt_id, f"tagged delivery tag={pkt.tag}"))
            self._terminate(pkt, "dropped", "tagged_delivery")
        else:
            self._terminate(pkt, "delivered", "")

    def _terminate(self, pkt: Packet, status: str, reason: str) -> None:
        rec = self.log.packets[pkt.pkt_id]
        rec.copies.append(CopyRecord(status, reason, self.now, pkt.trace))

    # switches
    def _switch_receive(self, sw: Switch, pkt: Packet) -> None:
        out = sw.process(pkt, self.now)
        self._emit(sw, pkt, out, self.now)
        if not out.emissions:
            pkt.trace.append(Hop(sw.id, pkt.ingress_port, self.now, None, None, pkt.tag, None,
                                 out.state_before, out.state_after))
            self._terminate(pkt, "dropped", "table_miss" if out.miss else "rule_drop")

    def _emit(self, sw: Switch, pkt: Packet, out, arrive: int) -> None:
        depart = self.now + self.sc.switch_latency
        for port, copy in out.emissions:
            copy.trace.append(Hop(sw.id, pkt.ingress_port, arrive, depart, port, pkt.tag, copy.tag,
                                  out.state_before, out.state_after))
            if port == CONTROLLER:
                self._to_controller(PacketIn(sw.id, copy), "packet_in")
            elif depart > self.now:
                self.schedule(depart, self._transmit, sw.id, port, copy)
            else:
                self._transmit(sw.id, port, copy)

    def _on_port_status(self, node, port, up: bool) -> None:
        sw = self.sc.switches.get(node)
        if sw is None:
            return
        sw.set_port(port, up)
        if self.sc.app is not None and hasattr(self.sc.app, "on_port_status"):
            self._to_controller(PortStatus(node, port, up, self.now), "port_status")

    def _on_link_status(self, link: Link, up: bool) -> None:
        if link.up == up:
            return
        link.up = up
        if not up:
            link.epoch += 1
        for node, port in (link.a, link.b):
            self.schedule(self.now + self.sc.detection_delay, self._on_port_status, node, port, up)

    # controller
    def _to_controller(self, msg, kind: str) -> None:
        ch = self.sc.controller
        if ch is None or self.sc.app is None:
            if isinstance(msg, PacketIn):
                self._terminate(msg.packet, "dropped", "no_controller")
            return
        self.log.ctrl_events.append(CtrlEvent(self.now, "to_controller", kind, msg.switch))
        self.schedule(self.now + ch.one_way_delay, self._controller_handle, msg)

    def _controller_handle(self, msg) -> None:
        ch = self.sc.controller
        app = self.sc.app
        if isinstance(msg, PacketIn):
            replies = app.on_packet_in(msg.switch, msg.packet, self.now)
        else:
            replies = app.on_port_status(msg.switch, msg.port, msg.up, self.now, sent_at=msg.sent_at)
        send_at = self.now + ch.proc_delay
        for reply in replies:
            self.schedule(send_at, self._controller_send, reply)

    def _controller_send(self, reply) -> None:
        kind = "flow_mod" if isinstance(reply, FlowMod) else "packet_out"
        self.log.ctrl_events.append(CtrlEvent(self.now, "to_switch", kind, reply.switch))
        self.schedule(self.now + self.sc.controller.one_way_delay, self._switch_ctrl_msg, reply)

    def _switch_ctrl_msg(self, msg) -> None:
        sw = self.sc.switches[msg.switch]
        if isinstance(msg, FlowMod):
            if msg.command == "add":
                sw.add_flow(msg.match, msg.actions, msg.cookie)
            else:
                sw.remove_flows(msg.cookie)
            note = msg.note or {}
            if note.get("kind") == "recovery":
                self.log.recoveries.append((note["notified_at"], self.now, msg.switch, note.get("detail", "")))
            elif note.get("kind") == "restore":
                self.log.restorations.append((self.now, msg.switch, note.get("detail", "")))
            return
        pkt = msg.packet
        out = sw.packet_out(pkt, msg.actions, self.now)
        arrive = pkt.trace[-1].arrive if pkt.trace else self.now
        self._emit(sw, pkt, out, arrive)
        if not out.emissions:
            self._terminate(pkt, "dropped", "rule_drop")


def run(scenario: Scenario, until: int) -> MetricsLog:
    return Simulator(scenario).run(until)


def inject_link_status(sim: Simulator, u, v, up: bool, at: int) -> None:
    sim.inject_link_status(sim.topo.find_link(u, v), up, at)
