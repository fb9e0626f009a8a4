"""Reactive OpenFlow counterparts: the controller pins new flows and
enables detours after a port-down notification.

Apps are plain objects called by the simulator's controller node; they
return the messages to send, and the simulator adds channel latency.
"""

from __future__ import annotations

import logging
import random

from .apps import (
    ABSENT, PRIO_BASE, PRIO_OVERRIDE, TAG, ConsistencyIntent, TagKind, _ProtectionCompiler, encode_tag,
    element_ids,
)
from .errors import ConfigError
from .pipeline import HeaderField, Match, Output, PushTag, Switch, ToController, as_scope, extract_key
from .simnet import FlowMod, PacketOut

log = logging.getLogger(__name__)


def build_reactive_balancer(intent: ConsistencyIntent, switch_id="lb") -> Switch:
    """Balancer without consistency support: every new flow goes to the controller."""
    if len(intent.out_ports) < 2:
        raise ConfigError("load balancing needs at least two output ports")
    sw = Switch(switch_id, miss_policy="controller", ports=intent.out_ports)
    for dst in intent.destinations:
        sw.add_flow(Match(PRIO_BASE, {HeaderField.IP_DST: dst}), [ToController()])
    return sw


class ReactiveConsistencyApp:
    def __init__(self, intent: ConsistencyIntent, seed: int = 0):
        self.out_ports = list(intent.out_ports)
        self.scope = as_scope(intent.lookup_scope)
        self.rng = random.Random(seed)
        self.pinned: dict = {}  # flow key -> chosen port
        self.packet_ins = 0

    def on_packet_in(self, switch, packet, now):
        self.packet_ins += 1
        key = extract_key(packet, self.scope)
        out = []
        if key not in self.pinned:
            port = self.out_ports[self.rng.randrange(len(self.out_ports))]
            self.pinned[key] = port
            match = Match(PRIO_OVERRIDE, dict(zip(self.scope, key)))
            out.append(FlowMod(switch, match, [Output(port)], cookie=f"pin:{key}"))
        # packets of a flow whose pin is still in transit follow the same port
        out.append(PacketOut(switch, packet, [Output(self.pinned[key])]))
        return out


class ReactiveRecoveryApp:
    """Switches protected demands onto their detour on port-down reports."""

    def __init__(self, topology, demands):
        self.topo = topology
        self.ids = element_ids(topology)
        # (detect node, port towards failed node) -> [(demand, failed node)]
        self.plans: dict = {}
        for d in demands:
            for i, plan in d.plans.items():
                q = d.detect_node(i)
                if plan.reroute == q:
                    continue  # local fast-failover, no controller needed
                self.plans.setdefault((q, topology.port_to(q, i)), []).append((d, i))
        self.unplanned: list = []

    def on_packet_in(self, switch, packet, now):
        return []

    def on_port_status(self, switch, port, up, now, sent_at=None):
        affected = self.plans.get((switch, port))
        if not affected:
            if not up:
                self.unplanned.append((now, switch, port))
                log.debug("port %s of %s down with no recovery plan", port, switch)
            return []
        sent_at = now if sent_at is None else sent_at
        msgs = []
        for d, i in affected:
            plan = d.plans[i]
            cookie = f"reroute:{d.name}:{i}"
            if up:
                msgs.append(FlowMod(plan.reroute, cookie=cookie, command="delete",
                                    note={"kind": "restore", "detail": d.name}))
                continue
            tag = encode_tag(TagKind.F, self.ids[i])
            match = Match(PRIO_OVERRIDE, {**d.match, TAG: ABSENT})
            actions = [PushTag(tag), Output(self.topo.port_to(plan.reroute, plan.detour[1]))]
            msgs.append(FlowMod(plan.reroute, match, actions, cookie=cookie,
                                note={"kind": "recovery", "notified_at": sent_at, "detail": d.name}))
        return msgs


def build_reactive_recovery(topology, demands, seed: int = 0):
    """(switches, app) for the controller-driven recovery baseline."""
    switches = _ProtectionCompiler(topology, demands, reactive=True, seed=seed).compile()
    return switches, ReactiveRecoveryApp(topology, demands)


def on_packet_in(app, packet, now, switch="lb"):
    return app.on_packet_in(switch, packet, now)


def on_port_status(app, switch, port, up, now):
    return app.on_port_status(switch, port, up, now)
