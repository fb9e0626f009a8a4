"""Rule compilers: forwarding-consistent load balancing, data-plane failure
recovery with bounce-back tags and probing, and a MAC-learning switch.
"""

from __future__ import annotations

import copy
import enum
from dataclasses import dataclass, field
from typing import Optional

from .errors import ConfigError, StatefulSdnError
from .pipeline import (
    ABSENT, CONTROLLER, DEFAULT_STATE, STATE, Bucket, Drop, Group, GroupEntry, GroupKind,
    HeaderField, Match, Output, Packet, PopTag, PushTag, SetState, StateTable, Switch, as_scope,
)

TAG = HeaderField.TAG_LABEL
IN_PORT = HeaderField.IN_PORT

PRIO_BASE = 10
PRIO_TAG = 20
PRIO_FSM = 30
PRIO_OVERRIDE = 40


# -- tag labels --------------------------------------------------------------

class TagKind(enum.IntEnum):
    F = 0  # element unreachable, packet on (or bounced towards) the detour
    P = 1  # probe for element


def encode_tag(kind: TagKind, element_id: int) -> int:
    if element_id < 0:
        raise ValueError("element id must be non-negative")
    return 2 * element_id + int(kind)


def decode_tag(label: int) -> tuple:
    return TagKind(label % 2), label // 2


def tag_name(label: Optional[int]) -> str:
    if label is None:
        return "-"
    kind, eid = decode_tag(label)
    return f"{kind.name}{eid}"


def element_ids(topology) -> dict:
    """Integer id per switch: the switch name itself when every name is numeric."""
    names = topology.switches
    if all(str(n).isdigit() for n in names):
        return {n: int(n) for n in names}
    return {n: i + 1 for i, n in enumerate(names)}


# -- forwarding consistency --------------------------------------------------

@dataclass
class ConsistencyIntent:
    out_ports: list
    destinations: list  # ip_dst values balanced by this switch
    delta: int  # idle timeout, microseconds
    lookup_scope: tuple = (HeaderField.IP_SRC, HeaderField.IP_DST, HeaderField.L4_SRC, HeaderField.L4_DST)
    selection: str = "random"  # random | hash | round_robin
    weights: Optional[list] = None


def port_label(k: int) -> int:
    return k + 1


_SELECTION = {
    "random": GroupKind.SELECT_RANDOM,
    "hash": GroupKind.SELECT_HASH,
    "round_robin": GroupKind.SELECT_ROUND_ROBIN,
}


def build_consistency(intent: ConsistencyIntent, switch_id="lb", seed: int = 0) -> Switch:
    if len(intent.out_ports) < 2:
        raise ConfigError("load balancing needs at least two output ports")
    if intent.delta is None or intent.delta <= 0:
        raise ConfigError("idle timeout delta must be positive")
    if intent.selection not in _SELECTION:
        raise ConfigError(f"unknown selection {intent.selection!r}")
    if intent.weights is not None:
        if intent.selection != "random":
            raise ConfigError("weights only apply to random selection")
        if len(intent.weights) != len(intent.out_ports) or any(w <= 0 for w in intent.weights):
            raise ConfigError("weights must be positive, one per output port")
    if not intent.destinations:
        raise ConfigError("no destinations to balance")
    scope = as_scope(intent.lookup_scope)
    sw = Switch(switch_id, StateTable(scope, scope), seed=seed, ports=intent.out_ports)
    weights = intent.weights or [1] * len(intent.out_ports)
    kind = _SELECTION[intent.selection]

    def pin(k, port):
        return [SetState(port_label(k), idle_timeout=intent.delta), Output(port)]

    for gid, dst in enumerate(intent.destinations, start=1):
        buckets = [Bucket(pin(k, p), weight=w) for k, (p, w) in enumerate(zip(intent.out_ports, weights))]
        sw.add_group(GroupEntry(gid, kind, buckets, hash_fields=scope if kind is GroupKind.SELECT_HASH else ()))
        sw.add_flow(Match(PRIO_BASE, {STATE: DEFAULT_STATE, HeaderField.IP_DST: dst}), [Group(gid)])
        for k, port in enumerate(intent.out_ports):
            sw.add_flow(Match(PRIO_BASE, {STATE: port_label(k), HeaderField.IP_DST: dst}), pin(k, port))
    return sw


# -- MAC learning ------------------------------------------------------------

def build_mac_learning(ports, switch_id="l2", seed: int = 0) -> Switch:
    """Port ``p`` doubles as the state label recording "host seen behind p"."""
    ports = list(ports)
    if len(ports) < 2:
        raise ConfigError("MAC learning needs at least two ports")
    if any(p <= 0 for p in ports) or len(set(ports)) != len(ports):
        raise ConfigError("ports must be distinct positive integers")
    sw = Switch(switch_id, StateTable([HeaderField.ETH_DST], [HeaderField.ETH_SRC]), seed=seed, ports=ports)
    for p in ports:
        sw.add_group(GroupEntry(p, GroupKind.ALL, [Bucket([Output(q)]) for q in ports if q != p]))
        learn = SetState(p)
        sw.add_flow(Match(PRIO_BASE, {IN_PORT: p, STATE: DEFAULT_STATE}), [learn, Group(p)])
        for q in ports:
            sw.add_flow(Match(PRIO_BASE, {IN_PORT: p, STATE: q}), [learn, Output(q) if q != p else Drop()])
    return sw


# -- failure recovery --------------------------------------------------------

@dataclass
class FailurePlan:
    reroute: str
    detour: list
    delta: int = 1_000_000  # probe period (hard timeout of F state)


@dataclass
class ProtectedDemand:
    name: str
    src: str
    dst: str
    match: dict  # header field -> value identifying the demand
    primary: list
    plans: dict = field(default_factory=dict)  # failed node -> FailurePlan
    scope: Optional[tuple] = None  # state key fields; defaults to the match fields

    def __post_init__(self):
        self.match = {HeaderField(k): v for k, v in self.match.items()}
        if self.scope is None:
            self.scope = tuple(self.match)
        self.scope = as_scope(self.scope)

    def detect_node(self, failed) -> str:
        return self.primary[self.primary.index(failed) - 1]


def check_demand(topology, d: ProtectedDemand) -> None:
    p = d.primary
    if len(p) < 1 or p[0] != d.src or p[-1] != d.dst:
        raise ConfigError(f"demand {d.name}: primary path must run from {d.src} to {d.dst}")
    if len(set(p)) != len(p):
        raise ConfigError(f"demand {d.name}: primary path has a loop")
    for u, v in zip(p, p[1:]):
        try:
            topology.find_link(u, v)
        except KeyError:
            raise ConfigError(f"demand {d.name}: primary hop {u}-{v} is not a link") from None
    if not set(d.scope) <= set(d.match):
        raise ConfigError(f"demand {d.name}: state scope must use match fields")
    if _dst_host_port(topology, d) is None:
        raise ConfigError(f"demand {d.name}: no host at {d.dst} owns the destination address")
    for i, plan in d.plans.items():
        if i not in p or p.index(i) == 0:
            raise ConfigError(f"demand {d.name}: failed node {i} is not a transit/egress node of the primary path")
        idx_i = p.index(i)
        if plan.reroute not in p or p.index(plan.reroute) >= idx_i:
            raise ConfigError(f"demand {d.name}: reroute node {plan.reroute} must precede {i} on the primary path")
        det = plan.detour
        if len(det) < 2 or det[0] != plan.reroute:
            raise ConfigError(f"demand {d.name}: detour for {i} must start at reroute node {plan.reroute}")
        if det[-1] not in p[idx_i + 1:]:
            raise ConfigError(f"demand {d.name}: detour for {i} must rejoin the primary path after {i}")
        if i in det or len(set(det)) != len(det):
            raise ConfigError(f"demand {d.name}: detour for {i} must avoid {i} and be loop free")
        for u, v in zip(det, det[1:]):
            try:
                topology.find_link(u, v)
            except KeyError:
                raise ConfigError(f"demand {d.name}: unreachable detour hop {u}-{v}") from None
        if plan.delta <= 0:
            raise ConfigError(f"demand {d.name}: probe period must be positive")


def _dst_host_port(topology, d: ProtectedDemand):
    ip = d.match.get(HeaderField.IP_DST)
    for h in topology.hosts.values():
        if h.switch == d.dst and (ip is None or ip in h.addresses):
            return topology.port_to(d.dst, h.id)
    return None


def _overlap(m1: dict, m2: dict) -> bool:
    return all(m1[f] == m2[f] for f in set(m1) & set(m2))


def _detour_hops(d: ProtectedDemand, i):
    """{(node, previous hop): next hop or 'pop'} along the tagged part of the detour."""
    det = d.plans[i].detour
    hops = {(n, prev): nxt for prev, n, nxt in zip(det, det[1:-1], det[2:])}
    hops[(det[-1], det[-2])] = "pop"
    return hops


def plan_conflicts(demands) -> list:
    """Pairs of overlapping demands whose F-tagged detours share a link but
    continue differently after it (the per-node rules would clash)."""
    out = []
    for a_idx, a in enumerate(demands):
        for b in demands[a_idx + 1:]:
            if not _overlap(a.match, b.match):
                continue
            for i in sorted(set(a.plans) & set(b.plans)):
                ha, hb = _detour_hops(a, i), _detour_hops(b, i)
                for node, prev in sorted(set(ha) & set(hb)):
                    if ha[(node, prev)] != hb[(node, prev)]:
                        out.append(f"tag collision: demands {a.name} and {b.name} share F-tag for {i} "
                                   f"on link {prev}-{node} but continue to {ha[(node, prev)]} vs {hb[(node, prev)]}")
    return out


class _ProtectionCompiler:
    """Emits per-switch rules for a set of protected demands.

    With ``reactive`` set, only the parts a reactive controller relies on are
    emitted: primary forwarding, fast-failover groups that drop instead of
    bouncing, and pre-provisioned detour rules. The reroute decision is then
    left to the controller.
    """

    def __init__(self, topology, demands, reactive: bool = False, seed: int = 0, miss_policy="drop"):
        self.topo = topology
        self.demands = list(demands)
        self.reactive = reactive
        self.ids = element_ids(topology)
        self.switches: dict = {}
        for k, sid in enumerate(topology.switches):
            self.switches[sid] = Switch(sid, seed=seed * 1_000_003 + k, miss_policy=miss_policy,
                                        ports=topology.ports(sid))
        self._gid: dict = {}
        self._ff_groups: dict = {}

    def tag(self, kind, node) -> int:
        return encode_tag(kind, self.ids[node])

    def port(self, u, v) -> int:
        return self.topo.port_to(u, v)

    def add(self, node, conditions, actions, priority):
        self.switches[node].add_flow(Match(priority, dict(conditions)), actions)

    def new_group(self, node, kind, buckets) -> int:
        gid = self._gid.get(node, 0) + 1
        self._gid[node] = gid
        self.switches[node].add_group(GroupEntry(gid, kind, buckets))
        return gid

    def ensure_state_table(self, node, scope):
        sw = self.switches[node]
        if sw.state_table is None:
            sw.state_table = StateTable(scope, scope)
        elif sw.state_table.lookup_scope != tuple(scope):
            raise ConfigError(f"switch {node} is a reroute node for demands with different state scopes")

    # forwarding helpers
    def down_port(self, d, node):
        p = d.primary
        idx = p.index(node)
        return self.port(node, p[idx + 1]) if idx + 1 < len(p) else _dst_host_port(self.topo, d)

    def up_port(self, d, node):
        p = d.primary
        return self.port(node, p[p.index(node) - 1])

    def primary_actions(self, d, node) -> list:
        gid = self._ff_groups.get((d.name, node))
        return [Group(gid)] if gid is not None else [Output(self.down_port(d, node))]

    def compile(self) -> dict:
        for d in self.demands:
            check_demand(self.topo, d)
        conflicts = plan_conflicts(self.demands)
        if conflicts:
            raise ConfigError("; ".join(conflicts))
        for d in self.demands:
            self._detect_groups(d)
        for d in self.demands:
            untagged = {**d.match, TAG: ABSENT}
            for node in d.primary:
                self.add(node, untagged, self.primary_actions(d, node), PRIO_BASE)
            for i, plan in d.plans.items():
                self._plan(d, i, plan)
        return self.switches

    def _detect_groups(self, d):
        for i, plan in d.plans.items():
            q = d.detect_node(i)
            if (d.name, q) in self._ff_groups:
                raise ConfigError(f"demand {d.name}: two plans share detect node {q}")
            F = self.tag(TagKind.F, i)
            if plan.reroute == q:
                backup = [PushTag(F), Output(self.port(q, plan.detour[1]))]
            elif self.reactive:
                backup = [Drop()]
            else:
                backup = [PushTag(F), Output(self.up_port(d, q))]
            down = self.port(q, i)
            gid = self.new_group(q, GroupKind.FAST_FAILOVER, [Bucket([Output(down)], watch_port=down), Bucket(backup)])
            self._ff_groups[(d.name, q)] = gid

    def _plan(self, d, i, plan: FailurePlan):
        p, m = d.primary, d.match
        q, r = d.detect_node(i), plan.reroute
        F, P = self.tag(TagKind.F, i), self.tag(TagKind.P, i)
        det = plan.detour

        # detour hops keep the F tag; the rejoin node pops it
        for k in range(1, len(det)):
            node = det[k]
            cond = {**m, TAG: F, IN_PORT: self.port(node, det[k - 1])}
            if k < len(det) - 1:
                self.add(node, cond, [Output(self.port(node, det[k + 1]))], PRIO_TAG)
            else:
                self.add(node, cond, [PopTag()] + self.primary_actions(d, node), PRIO_TAG)

        if self.reactive or r == q:
            return

        # detect node: probes go out only on a live primary port (else dropped)
        down_q, up_q = self.port(q, i), self.up_port(d, q)
        probe_gid = self.new_group(q, GroupKind.FAST_FAILOVER,
                                   [Bucket([Output(down_q)], watch_port=down_q), Bucket([Drop()])])
        self.add(q, {**m, TAG: P, IN_PORT: up_q}, [Group(probe_gid)], PRIO_TAG)
        self.add(q, {**m, TAG: P, IN_PORT: down_q}, [Output(up_q)], PRIO_TAG)

        # bounce segment between reroute and detect node
        for node in p[p.index(r) + 1:p.index(q)]:
            up, down = self.up_port(d, node), self.down_port(d, node)
            self.add(node, {**m, TAG: F, IN_PORT: down}, [Output(up)], PRIO_TAG)
            self.add(node, {**m, TAG: P, IN_PORT: up}, [Output(down)], PRIO_TAG)
            self.add(node, {**m, TAG: P, IN_PORT: down}, [Output(up)], PRIO_TAG)

        # a repaired node reflects the probe back upstream
        back = self.up_port(d, i)
        self.add(i, {**m, TAG: P, IN_PORT: back}, [Output(back)], PRIO_TAG)

        # reroute node state machine
        self.ensure_state_table(r, d.scope)
        to_detour = Output(self.port(r, det[1]))
        down_r = self.down_port(d, r)
        arm = SetState(F, hard_timeout=plan.delta, hard_rollback=P)
        fsm = [
            ({STATE: DEFAULT_STATE, TAG: ABSENT}, self.primary_actions(d, r)),
            ({STATE: DEFAULT_STATE, TAG: F, IN_PORT: down_r}, [arm, to_detour]),
            ({STATE: F, TAG: ABSENT}, [PushTag(F), to_detour]),
            ({STATE: F, TAG: F, IN_PORT: down_r}, [to_detour]),
            ({STATE: P, TAG: F, IN_PORT: down_r}, [to_detour]),
        ]
        dup = self.new_group(r, GroupKind.ALL, [
            Bucket([PushTag(F), to_detour]),
            Bucket([PushTag(P), Output(down_r)]),
        ])
        fsm.append(({STATE: P, TAG: ABSENT}, [arm, Group(dup)]))
        for cond, actions in fsm:
            self.add(r, {**m, **cond}, actions, PRIO_FSM)
        # returning probe: failure resolved, from any state
        self.add(r, {**m, TAG: P, IN_PORT: down_r}, [SetState(DEFAULT_STATE), PopTag()] + self.primary_actions(d, r),
                 PRIO_FSM)


def build_failure_recovery(topology, demands, seed: int = 0) -> dict:
    """Switch per topology switch, keyed by node id."""
    return _ProtectionCompiler(topology, demands, seed=seed).compile()


# -- static validation -------------------------------------------------------

def _producible_labels(sw: Switch) -> set:
    labels = {DEFAULT_STATE}

    def scan(actions):
        for a in actions:
            if isinstance(a, SetState):
                labels.update({a.label, a.idle_rollback, a.hard_rollback})

    for e in sw.flow_table:
        scan(e.actions)
    for g in sw.groups.values():
        for b in g.buckets:
            scan(b.actions)
    return labels


def _push_sites(sw: Switch):
    """(entry, actions) pairs where a tag push is followed by an output."""
    referencing = {}
    for e in sw.flow_table:
        for a in e.actions:
            if isinstance(a, Group):
                referencing.setdefault(a.group_id, e)
    lists = [(e, e.actions) for e in sw.flow_table]
    for gid, g in sw.groups.items():
        if gid in referencing:
            lists += [(referencing[gid], b.actions) for b in g.buckets]
    for entry, actions in lists:
        tag = None
        for a in actions:
            if isinstance(a, PushTag):
                tag = a.label
            elif isinstance(a, Output) and tag is not None:
                yield entry, tag, a.port


def _walk(topology, switches, node, port, pkt: Packet, diags: list, origin: str, max_hops=64) -> None:
    """Follow a concrete packet (and its copies) through the configured network."""
    todo = [(node, port, pkt, 0, frozenset())]
    while todo:
        node, port, pkt, hops, seen = todo.pop()
        link = topology.link_at(node, port)
        if link is None:
            diags.append(f"{origin}: output to unlinked port {port} at {node}")
            continue
        peer, peer_port = link.other(node)
        pkt.ingress_port = peer_port
        if peer in topology.hosts:
            if pkt.tag is not None:
                diags.append(f"{origin}: tag {tag_name(pkt.tag)} reaches host {peer} without being popped")
            continue
        key = (peer, peer_port, pkt.tag)
        if key in seen or hops > max_hops:
            diags.append(f"{origin}: forwarding loop at {peer} with tag {tag_name(pkt.tag)}")
            continue
        try:
            out = switches[peer].process(pkt, 0)
        except StatefulSdnError as exc:
            diags.append(f"{origin}: {peer}: {exc}")
            continue
        if not out.emissions and pkt.tag is not None:
            diags.append(f"{origin}: tag {tag_name(pkt.tag)} dropped at {peer} before being popped")
        for p, c in out.emissions:
            if p != CONTROLLER:
                todo.append((peer, p, c, hops + 1, seen | {key}))


def _header_from(match: Match) -> dict:
    return {f: v for f, v in match.conditions.items()
            if isinstance(f, HeaderField) and f not in (TAG, IN_PORT) and v is not ABSENT}


def validate_config(topology, configs: dict, demands=()) -> list:
    """Static checks; returns human-readable diagnostics (empty when clean)."""
    diags = []
    for sid, sw in configs.items():
        linked = set(topology.ports(sid))
        for e in sw.flow_table:
            for a in e.actions:
                if isinstance(a, Output) and a.port not in linked:
                    diags.append(f"{sid}: flow output to unlinked port {a.port}")
                if isinstance(a, Group) and a.group_id not in sw.groups:
                    diags.append(f"{sid}: flow references unknown group {a.group_id}")
        for gid, g in sw.groups.items():
            for b in g.buckets:
                for a in b.actions:
                    if isinstance(a, Output) and a.port not in linked:
                        diags.append(f"{sid}: group {gid} output to unlinked port {a.port}")
        labels = _producible_labels(sw)
        for e in sw.flow_table:
            want = e.match.conditions.get(STATE)
            if want is not None and want not in labels:
                diags.append(f"{sid}: match on state {want} that no set-state produces")
        seen = {}
        for e in sw.flow_table:
            key = (e.match.priority, tuple(sorted((str(k), repr(v)) for k, v in e.match.conditions.items())))
            if key in seen and seen[key] != e.actions:
                diags.append(f"{sid}: conflicting rules for identical match {key[1]}")
            seen.setdefault(key, e.actions)

    # every pushed tag must be popped before reaching a host, on all paths
    for sid, sw in configs.items():
        for entry, tag, port in _push_sites(sw):
            net = copy.deepcopy(configs)
            for s in net.values():
                for p in s.ports:
                    s.ports[p] = True
            hdr = _header_from(entry.match)
            hdr[TAG] = tag
            _walk(topology, net, sid, port, Packet(hdr), diags, f"{sid} push {tag_name(tag)}")

    demands = list(demands)
    diags += plan_conflicts(demands)
    for d in demands:
        for i in d.plans:
            _check_protection(topology, configs, d, i, diags)
    return sorted(set(diags), key=diags.index)


def _check_protection(topology, configs, d: ProtectedDemand, i, diags) -> None:
    """Two packets of ``d`` with ``i`` cut off must both reach the destination."""
    net = copy.deepcopy(configs)
    q = d.detect_node(i)
    try:
        net[q].set_port(topology.port_to(q, i), False)
        src_host = topology.host_of(d.src)
    except (ConfigError, KeyError) as exc:
        diags.append(f"demand {d.name}: {exc}")
        return
    if src_host is None:
        diags.append(f"demand {d.name}: no host attached to {d.src}")
        return
    for n in range(2):
        reached = []
        pkt = Packet(dict(d.match), pkt_id=f"{d.name}#{n}")
        local = []
        _walk_collect(topology, net, src_host.id, 1, pkt, local, reached)
        if not reached:
            diags.append(f"demand {d.name}: no detour/bounce rules deliver packet {n} when {i} is unreachable")
        diags.extend(f"demand {d.name} failure {i}: {x}" for x in local)


def _walk_collect(topology, switches, node, port, pkt, diags, reached) -> None:
    todo = [(node, port, pkt, 0)]
    while todo:
        node, port, pkt, hops = todo.pop()
        link = topology.link_at(node, port)
        if link is None or hops > 64:
            diags.append(f"lost at {node}")
            continue
        if node in switches and not switches[node].port_up(port):
            diags.append(f"sent on down port {port} at {node}")
            continue
        peer, peer_port = link.other(node)
        pkt.ingress_port = peer_port
        if peer in topology.hosts:
            if pkt.tag is None and pkt.header.get(HeaderField.IP_DST) in topology.hosts[peer].addresses:
                reached.append(peer)
            continue
        try:
            out = switches[peer].process(pkt, 0)
        except StatefulSdnError as exc:
            diags.append(f"{peer}: {exc}")
            continue
        for p, c in out.emissions:
            if p != CONTROLLER:
                todo.append((peer, p, c, hops + 1))
