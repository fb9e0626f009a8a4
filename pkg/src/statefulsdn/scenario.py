"""Scenario files (YAML, ``schema: 1``) and their compilation into
runnable :class:`~statefulsdn.simnet.Scenario` objects.

A file declares the topology, hosts, the intent (``consistency``,
``failure_recovery`` or ``mac_learning``), traffic, failure schedule and
controller latency. The same file is compiled either for stateful switches
(``mode="os"``) or for the reactive-controller baseline (``mode="of"``).
"""

from __future__ import annotations

import dataclasses
import ipaddress
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Optional

import yaml

from . import apps, baseline, sndlib
from .errors import ConfigError
from .pipeline import HeaderField
from .simnet import US_PER_MS, Cbr, ControllerChannel, Scenario, TcpFlowArrivals, Topology, TracePackets

SCHEMA_VERSION = 1
MODES = ("os", "of")


def parse_addr(value) -> int:
    if isinstance(value, int):
        return value
    try:
        return int(ipaddress.ip_address(str(value)))
    except ValueError:
        raise ConfigError(f"bad address {value!r}") from None


def _ms(value) -> int:
    """Milliseconds (possibly fractional) to integral microseconds."""
    us = round(float(value) * US_PER_MS)
    if abs(us - float(value) * US_PER_MS) > 1e-6:
        raise ConfigError(f"{value} ms is not a whole number of microseconds")
    return us


@dataclass
class ScenarioSpec:
    """Parsed scenario file; ``overrides`` are applied by :func:`build`."""
    name: str
    kind: str
    raw: dict
    topology: Topology
    base_dir: Path
    seed: int = 0
    until: int = 0
    rtt: int = 0
    proc_delay: int = 1000
    detection_delay: int = 0
    switch_latency: int = 0
    demands: list = field(default_factory=list)
    link_events: list = field(default_factory=list)

    def with_(self, **kw) -> "ScenarioSpec":
        return dataclasses.replace(self, **kw)


def _switch_name(n) -> str:
    return str(n)


def _load_topology(raw: dict, base_dir: Path) -> Topology:
    t = raw.get("topology")
    if not isinstance(t, dict):
        raise ConfigError("missing topology section")
    default_delay = _ms(t.get("default_delay_ms", 1))
    if "sndlib" in t:
        text = (base_dir / t["sndlib"]).read_text()
        topo = sndlib.load_topology(text, delay=default_delay if t.get("uniform_delay") else None)
    else:
        topo = Topology()
        for n in t.get("switches", []):
            topo.add_switch(_switch_name(n))
        for link in t.get("links", []):
            if isinstance(link, dict):
                u, v, d = link["a"], link["b"], link.get("delay_ms")
            else:
                u, v, *rest = link
                d = rest[0] if rest else None
            topo.add_link(_switch_name(u), _switch_name(v), default_delay if d is None else _ms(d))
    hosts = raw.get("hosts", [])
    if hosts == "auto":
        # one host per switch, addressed 10.0.0.<element id>
        ids = apps.element_ids(topo)
        for sw in list(topo.switches):
            topo.add_host(f"h{sw}", sw, [int(ipaddress.ip_address("10.0.0.0")) + ids[sw]])
    else:
        for h in hosts:
            addrs = [parse_addr(a) for a in h.get("addresses", [h.get("ip")]) if a is not None]
            if not addrs:
                raise ConfigError(f"host {h.get('id')} has no address")
            topo.add_host(str(h["id"]), _switch_name(h["switch"]), addrs, _ms(h.get("delay_ms", 0)))
    return topo


def host_ip(topo: Topology, switch) -> int:
    h = topo.host_of(switch)
    if h is None:
        raise ConfigError(f"no host attached to switch {switch}")
    return min(h.addresses)


def _load_demands(raw: dict, topo: Topology) -> list:
    fr = raw.get("failure_recovery") or {}
    delta = _ms(fr.get("delta_ms", 1000))
    fields = [HeaderField(f) for f in fr.get("match", ["ip_dst"])]
    out = []
    for d in fr.get("demands", []):
        src, dst = _switch_name(d["src"]), _switch_name(d["dst"])
        values = {HeaderField.IP_SRC: host_ip(topo, src), HeaderField.IP_DST: host_ip(topo, dst)}
        match = {f: values[f] for f in fields}
        plans = {}
        for p in d.get("plans", []):
            plans[_switch_name(p["failed"])] = apps.FailurePlan(
                _switch_name(p["reroute"]), [_switch_name(n) for n in p["detour"]],
                _ms(p["delta_ms"]) if "delta_ms" in p else delta)
        out.append(apps.ProtectedDemand(d.get("name", f"{src}-{dst}"), src, dst, match,
                                        [_switch_name(n) for n in d["primary"]], plans))
    return out


def load(path) -> ScenarioSpec:
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return parse(raw, path.parent)


def load_bundled(name: str) -> ScenarioSpec:
    ref = resources.files("statefulsdn") / "data" / f"{name}.yaml"
    with resources.as_file(ref) as p:
        return load(p)


def parse(raw: dict, base_dir=Path(".")) -> ScenarioSpec:
    if not isinstance(raw, dict):
        raise ConfigError("scenario must be a mapping")
    if raw.get("schema") != SCHEMA_VERSION:
        raise ConfigError(f"unsupported scenario schema {raw.get('schema')!r} (expected {SCHEMA_VERSION})")
    kind = raw.get("kind")
    if kind not in ("consistency", "failure_recovery", "mac_learning"):
        raise ConfigError(f"unknown scenario kind {kind!r}")
    topo = _load_topology(raw, Path(base_dir))
    ctrl = raw.get("controller") or {}
    spec = ScenarioSpec(
        name=raw.get("name", kind), kind=kind, raw=raw, topology=topo, base_dir=Path(base_dir),
        seed=int(raw.get("seed", 0)), until=_ms(raw.get("until_ms", 1000)),
        rtt=_ms(ctrl.get("rtt_ms", 0)), proc_delay=_ms(ctrl.get("proc_ms", 1)),
        detection_delay=_ms(raw.get("detection_delay_ms", 0)),
        switch_latency=_ms(raw.get("switch_latency_ms", 0)),
    )
    if kind == "failure_recovery":
        spec.demands = _load_demands(raw, topo)
    for ev in raw.get("failures", []):
        u, v = (_switch_name(n) for n in ev["link"])
        topo.find_link(u, v)
        status = ev.get("status", "down")
        if status not in ("up", "down"):
            raise ConfigError(f"bad link status {status!r}")
        spec.link_events.append((_ms(ev["at_ms"]), u, v, status == "up"))
    return spec


# -- compilation -------------------------------------------------------------

def _fresh_topology(spec: ScenarioSpec) -> Topology:
    # link up/down state lives on the topology, so every run gets its own copy
    return _load_topology(spec.raw, spec.base_dir)


def consistency_intent(spec: ScenarioSpec, topo: Topology):
    c = spec.raw.get("consistency") or {}
    sw = _switch_name(c.get("switch", "lb"))
    ports = [topo.port_to(sw, _switch_name(n)) for n in c.get("out_to", [])]
    intent = apps.ConsistencyIntent(
        out_ports=ports,
        destinations=[parse_addr(a) for a in c.get("destinations", [])],
        delta=_ms(c.get("delta_ms", 10_000)),
        lookup_scope=tuple(HeaderField(f) for f in c.get("scope", ["ip_src", "ip_dst", "l4_src", "l4_dst"])),
        selection=c.get("selection", "random"),
        weights=c.get("weights"),
    )
    return sw, intent


def _generators(spec: ScenarioSpec, topo: Topology, rate=None) -> list:
    gens = []
    t = spec.raw.get("traffic") or {}
    kind = t.get("kind")
    if kind is None:
        return gens
    if kind == "tcp_flows":
        hdr = {
            HeaderField.IP_SRC: host_ip(topo, topo.hosts[t["src"]].switch),
            HeaderField.IP_DST: parse_addr(t["dst"]),
            HeaderField.IP_PROTO: 6,
            HeaderField.L4_DST: int(t.get("l4_dst", 80)),
        }
        gens.append(TcpFlowArrivals(
            t.get("name", "flow"), str(t["src"]), hdr,
            rate=float(rate if rate is not None else t["rate"]), count=int(t.get("count", 1000)),
            pkts_per_flow=int(t.get("pkts_per_flow", 1)), pkt_gap=_ms(t.get("pkt_gap_ms", 0)),
            start=_ms(t.get("start_ms", 0))))
    elif kind == "cbr_per_demand":
        r = float(rate if rate is not None else t["rate"])
        stop = _ms(t["stop_ms"]) if "stop_ms" in t else None
        n = len(spec.demands)
        for k, d in enumerate(spec.demands):
            src_host = topo.host_of(d.src)
            hdr = {HeaderField.IP_SRC: host_ip(topo, d.src), HeaderField.IP_DST: host_ip(topo, d.dst),
                   HeaderField.IP_PROTO: 17}
            start = _ms(t.get("start_ms", 0))
            if t.get("stagger") and r > 0:
                # spread the demands' phases evenly over one inter-packet gap
                start += int(k * 1_000_000 // (r * n))
            gens.append(Cbr(d.name, src_host.id, hdr, r, start=start, stop=stop, jitter=_ms(t.get("jitter_ms", 0))))
    elif kind == "trace":
        for f in t.get("flows", []):
            hdr = {HeaderField(k): parse_addr(v) for k, v in f["header"].items()}
            gens.append(TracePackets(f["name"], str(f["src"]), hdr, [_ms(x) for x in f["times_ms"]]))
    else:
        raise ConfigError(f"unknown traffic kind {kind!r}")
    return gens


def build(spec: ScenarioSpec, mode: str = "os", *, rtt: Optional[int] = None, rate=None,
          seed: Optional[int] = None) -> Scenario:
    """Compile ``spec`` into a runnable scenario. ``rtt`` is in microseconds."""
    if mode not in MODES:
        raise ConfigError(f"unknown mode {mode!r}")
    seed = spec.seed if seed is None else seed
    rtt = spec.rtt if rtt is None else rtt
    topo = _fresh_topology(spec)
    controller = None
    app = None
    if spec.kind == "consistency":
        sw_id, intent = consistency_intent(spec, topo)
        if mode == "os":
            switches = {sw_id: apps.build_consistency(intent, sw_id, seed=seed)}
        else:
            switches = {sw_id: baseline.build_reactive_balancer(intent, sw_id)}
            app = baseline.ReactiveConsistencyApp(intent, seed=seed)
    elif spec.kind == "failure_recovery":
        demands = _load_demands(spec.raw, topo)
        if mode == "os":
            switches = apps.build_failure_recovery(topo, demands, seed=seed)
        else:
            switches, app = baseline.build_reactive_recovery(topo, demands, seed=seed)
    else:
        ports = topo.ports(_switch_name(spec.raw.get("mac_learning", {}).get("switch", "l2")))
        sw_id = _switch_name(spec.raw.get("mac_learning", {}).get("switch", "l2"))
        switches = {sw_id: apps.build_mac_learning(ports, sw_id, seed=seed)}
    if app is not None:
        controller = ControllerChannel.from_rtt(rtt, spec.proc_delay)
    extra = set(topo.switches) - set(switches)
    if extra:
        raise ConfigError(f"no configuration for switches {sorted(extra)}")
    return Scenario(
        topology=topo, switches=switches, generators=_generators(spec, topo, rate),
        link_events=list(spec.link_events), controller=controller, app=app,
        detection_delay=spec.detection_delay, switch_latency=spec.switch_latency,
        seed=seed, name=spec.name,
    )
