"""Stateful switch pipeline: one exact-match state table in front of a flow
table, plus an OpenFlow-style group table.

Packets carry opaque integer header values. A packet is first keyed by the
state table's lookup scope; the returned label (0 when nothing is stored)
is matched by flow entries like any other header field, and the
``SetState`` action writes back under the update scope.
"""

from __future__ import annotations

import bisect
import enum
import random
import zlib
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

from .errors import EmptyGroup, MalformedAction, MissingField, NoMatch, UnknownGroup

DEFAULT_STATE = 0
CONTROLLER = -1  # pseudo port for ToController emissions


class HeaderField(str, enum.Enum):
    ETH_SRC = "eth_src"
    ETH_DST = "eth_dst"
    IP_SRC = "ip_src"
    IP_DST = "ip_dst"
    IP_PROTO = "ip_proto"
    L4_SRC = "l4_src"
    L4_DST = "l4_dst"
    TAG_LABEL = "tag_label"
    IN_PORT = "in_port"

    def __str__(self):
        return self.value


STATE = "state"


class _Absent:
    """Singleton; survives copy/deepcopy/pickle as the same object."""

    def __repr__(self):
        return "ABSENT"

    def __copy__(self):
        return self

    def __deepcopy__(self, memo):
        return self

    def __reduce__(self):
        return "ABSENT"


# Match value requiring the field to be missing (e.g. an untagged packet).
ABSENT = _Absent()

ScopeSpec = tuple  # tuple[HeaderField, ...]
FlowKey = tuple

FOUR_TUPLE: ScopeSpec = (HeaderField.IP_SRC, HeaderField.IP_DST, HeaderField.L4_SRC, HeaderField.L4_DST)


def as_scope(fields) -> ScopeSpec:
    return tuple(HeaderField(f) for f in fields)


@dataclass
class Packet:
    header: dict
    ingress_port: Optional[int] = None
    created_at: int = 0
    flow_id: str = ""
    pkt_id: str = ""
    # per-copy hop records, appended by the simulator; never matched on
    trace: list = field(default_factory=list)

    def get(self, f: HeaderField):
        if f is HeaderField.IN_PORT:
            return self.ingress_port
        return self.header.get(f)

    @property
    def tag(self) -> Optional[int]:
        return self.header.get(HeaderField.TAG_LABEL)

    def copy(self) -> "Packet":
        return Packet(dict(self.header), self.ingress_port, self.created_at,
                      self.flow_id, self.pkt_id, list(self.trace))


# -- actions -----------------------------------------------------------------

@dataclass(frozen=True)
class Output:
    port: int


@dataclass(frozen=True)
class PushTag:
    label: int


@dataclass(frozen=True)
class PopTag:
    pass


@dataclass(frozen=True)
class SetState:
    label: int
    idle_timeout: Optional[int] = None
    hard_timeout: Optional[int] = None
    idle_rollback: int = 0
    hard_rollback: int = 0


@dataclass(frozen=True)
class Group:
    group_id: int


@dataclass(frozen=True)
class Drop:
    pass


@dataclass(frozen=True)
class ToController:
    pass


Action = Union[Output, PushTag, PopTag, SetState, Group, Drop, ToController]


# -- state table -------------------------------------------------------------

@dataclass
class StateEntry:
    key: FlowKey
    label: int
    idle_timeout: Optional[int] = None
    hard_timeout: Optional[int] = None
    idle_rollback: int = 0
    hard_rollback: int = 0
    last_hit: int = 0
    installed_at: int = 0


class Expiry(enum.Enum):
    KEPT = "kept"
    REPLACED = "replaced"
    DELETED = "deleted"


def extract_key(packet: Packet, scope: ScopeSpec) -> FlowKey:
    values = []
    for f in scope:
        v = packet.get(f)
        if v is None:
            raise MissingField(f)
        values.append(v)
    return tuple(values)


def _next_deadline(entry: StateEntry):
    """(deadline, rollback) of the timeout that fires first, or None."""
    hard = entry.installed_at + entry.hard_timeout if entry.hard_timeout else None
    idle = entry.last_hit + entry.idle_timeout if entry.idle_timeout else None
    if hard is None and idle is None:
        return None
    # hard wins ties
    if idle is None or (hard is not None and hard <= idle):
        return hard, entry.hard_rollback
    return idle, entry.idle_rollback


def expire_entry(entry: StateEntry, now: int) -> Expiry:
    """Apply every timeout of ``entry`` that has elapsed by ``now``.

    A timeout fires once ``now - reference >= duration``. Rolling back to a
    non-zero label re-arms both configured timeouts from the instant the
    timeout fired, so repeated expiries over a long gap are replayed
    (in closed form once the sequence becomes periodic).
    """
    outcome = Expiry.KEPT
    nxt = _next_deadline(entry)
    while nxt is not None and nxt[0] <= now:
        fired_at, rollback = nxt
        if rollback == DEFAULT_STATE:
            return Expiry.DELETED
        outcome = Expiry.REPLACED
        entry.label = rollback
        entry.installed_at = entry.last_hit = fired_at
        nxt = _next_deadline(entry)
        if nxt is not None and nxt[1] == rollback and nxt[0] <= now:
            # same timer keeps winning from here on: skip whole periods
            period = nxt[0] - fired_at
            periods = (now - fired_at) // period
            entry.installed_at = entry.last_hit = fired_at + periods * period
            nxt = _next_deadline(entry)
    return outcome


class StateTable:
    def __init__(self, lookup_scope, update_scope=None):
        self.lookup_scope: ScopeSpec = as_scope(lookup_scope)
        self.update_scope: ScopeSpec = as_scope(update_scope) if update_scope is not None else self.lookup_scope
        if not self.lookup_scope or not self.update_scope:
            raise ValueError("state table scopes must be non-empty")
        if len(self.lookup_scope) != len(self.update_scope):
            raise ValueError("lookup and update scopes must have equal arity")
        self.entries: dict[FlowKey, StateEntry] = {}

    def __len__(self):
        return len(self.entries)

    def peek(self, key: FlowKey) -> int:
        """Stored label for ``key`` without expiring or refreshing anything."""
        entry = self.entries.get(key)
        return entry.label if entry else DEFAULT_STATE

    def expire_all(self, now: int) -> None:
        for key in list(self.entries):
            if expire_entry(self.entries[key], now) is Expiry.DELETED:
                del self.entries[key]


def state_lookup(table: StateTable, packet: Packet, now: int) -> int:
    key = extract_key(packet, table.lookup_scope)
    entry = table.entries.get(key)
    if entry is None:
        return DEFAULT_STATE
    if expire_entry(entry, now) is Expiry.DELETED:
        del table.entries[key]
        return DEFAULT_STATE
    entry.last_hit = now
    return entry.label


def set_state(table: StateTable, packet: Packet, act: SetState, now: int) -> None:
    key = extract_key(packet, table.update_scope)
    if act.label == DEFAULT_STATE:
        table.entries.pop(key, None)
        return
    table.entries[key] = StateEntry(
        key=key, label=act.label,
        idle_timeout=act.idle_timeout, hard_timeout=act.hard_timeout,
        idle_rollback=act.idle_rollback, hard_rollback=act.hard_rollback,
        last_hit=now, installed_at=now,
    )


# -- flow and group tables ---------------------------------------------------

@dataclass
class Match:
    priority: int = 0
    conditions: dict = field(default_factory=dict)

    def matches(self, packet: Packet, state: int) -> bool:
        for f, want in self.conditions.items():
            have = state if f == STATE else packet.get(f)
            if want is ABSENT:
                if have is not None:
                    return False
            elif have != want:
                return False
        return True


@dataclass
class FlowEntry:
    match: Match
    actions: list
    cookie: Optional[str] = None


class GroupKind(str, enum.Enum):
    SELECT_RANDOM = "select_random"
    SELECT_HASH = "select_hash"
    SELECT_ROUND_ROBIN = "select_rr"
    ALL = "all"
    FAST_FAILOVER = "fast_failover"


@dataclass
class Bucket:
    actions: list
    watch_port: Optional[int] = None
    weight: int = 1


@dataclass
class GroupEntry:
    group_id: int
    kind: GroupKind
    buckets: list
    hash_fields: ScopeSpec = ()
    rr_cursor: int = 0


@dataclass
class Outcome:
    emissions: list
    state_before: Optional[int] = None
    state_after: Optional[int] = None
    entry: Optional[FlowEntry] = None
    miss: bool = False
    groups: list = field(default_factory=list)


class Switch:
    def __init__(self, switch_id, state_table: Optional[StateTable] = None, *,
                 miss_policy: str = "drop", seed: int = 0, ports: Sequence[int] = ()):
        if miss_policy not in ("drop", "controller"):
            raise ValueError(f"unknown table-miss policy {miss_policy!r}")
        self.id = switch_id
        self.state_table = state_table
        self.miss_policy = miss_policy
        self.flow_table: list[FlowEntry] = []
        self._neg_prio: list[int] = []  # sort keys kept parallel to flow_table
        self.groups: dict[int, GroupEntry] = {}
        self.ports: dict[int, bool] = {p: True for p in ports}
        self.rng = random.Random(seed)
        self.group_hits: dict[int, int] = {}

    def add_flow(self, match: Match, actions, cookie=None) -> FlowEntry:
        entry = FlowEntry(match, list(actions), cookie)
        # after every entry of equal priority: earlier insertion wins ties
        i = bisect.bisect_right(self._neg_prio, -match.priority)
        self._neg_prio.insert(i, -match.priority)
        self.flow_table.insert(i, entry)
        return entry

    def remove_flows(self, cookie) -> int:
        keep = [(k, e) for k, e in zip(self._neg_prio, self.flow_table) if e.cookie != cookie]
        removed = len(self.flow_table) - len(keep)
        self._neg_prio = [k for k, _ in keep]
        self.flow_table = [e for _, e in keep]
        return removed

    def add_group(self, group: GroupEntry) -> GroupEntry:
        self.groups[group.group_id] = group
        return group

    def set_port(self, port: int, up: bool) -> None:
        self.ports[port] = up

    def port_up(self, port) -> bool:
        return self.ports.get(port, False)

    def process(self, packet: Packet, now: int) -> Outcome:
        """Full pipeline pass with bookkeeping used for traces."""
        if packet.ingress_port is None:
            raise ValueError("packet has no ingress port")
        state = None
        if self.state_table is not None:
            state = state_lookup(self.state_table, packet, now)
        out = Outcome(emissions=[], state_before=state)
        try:
            entry = flow_match(self, packet, DEFAULT_STATE if state is None else state)
        except NoMatch:
            out.miss = True
            if self.miss_policy == "controller":
                out.emissions.append((CONTROLLER, packet.copy()))
        else:
            out.entry = entry
            _run_actions(self, entry.actions, packet.copy(), now, out)
        if self.state_table is not None:
            out.state_after = self.state_table.peek(extract_key(packet, self.state_table.lookup_scope))
        return out

    def packet_out(self, packet: Packet, actions, now: int) -> Outcome:
        """Execute controller-supplied actions on a held packet."""
        out = Outcome(emissions=[])
        _run_actions(self, actions, packet.copy(), now, out)
        return out


def flow_match(switch: Switch, packet: Packet, state: int) -> FlowEntry:
    for entry in switch.flow_table:
        if entry.match.matches(packet, state):
            return entry
    raise NoMatch(f"switch {switch.id}: no flow entry for packet {packet.pkt_id or packet.header}")


def _run_actions(switch: Switch, actions, pkt: Packet, now: int, out: Outcome) -> None:
    for act in actions:
        match act:
            case Output(port=port):
                out.emissions.append((port, pkt.copy()))
            case PushTag(label=label):
                if pkt.tag is not None:
                    raise MalformedAction(f"switch {switch.id}: push on already tagged packet")
                pkt.header[HeaderField.TAG_LABEL] = label
            case PopTag():
                if pkt.tag is None:
                    raise MalformedAction(f"switch {switch.id}: pop on untagged packet")
                del pkt.header[HeaderField.TAG_LABEL]
            case SetState():
                if switch.state_table is None:
                    raise MalformedAction(f"switch {switch.id}: set-state without a state table")
                set_state(switch.state_table, pkt, act, now)
            case Group(group_id=gid):
                _run_group(switch, pkt, gid, now, out)
            case Drop():
                return
            case ToController():
                out.emissions.append((CONTROLLER, pkt.copy()))
            case _:
                raise MalformedAction(f"unknown action {act!r}")


def _hash_bucket(pkt: Packet, fields: ScopeSpec, n: int) -> int:
    data = b"".join(int(v).to_bytes(16, "big") for v in extract_key(pkt, fields))
    return zlib.crc32(data) % n


def _run_group(switch: Switch, pkt: Packet, gid, now: int, out: Outcome) -> None:
    group = switch.groups.get(gid)
    if group is None:
        raise UnknownGroup(gid)
    buckets = group.buckets
    if not buckets:
        raise EmptyGroup(f"group {gid} has no buckets")
    switch.group_hits[gid] = switch.group_hits.get(gid, 0) + 1
    out.groups.append(gid)
    kind = group.kind
    if kind is GroupKind.ALL:
        for b in buckets:
            _run_actions(switch, b.actions, pkt.copy(), now, out)
        return
    if kind is GroupKind.FAST_FAILOVER:
        for b in buckets:
            if b.watch_port is None or switch.port_up(b.watch_port):
                _run_actions(switch, b.actions, pkt.copy(), now, out)
                return
        return  # no live bucket: dropped
    if kind is GroupKind.SELECT_RANDOM:
        if any(b.weight != 1 for b in buckets):
            chosen = switch.rng.choices(buckets, weights=[b.weight for b in buckets])[0]
        else:
            chosen = buckets[switch.rng.randrange(len(buckets))]
    elif kind is GroupKind.SELECT_HASH:
        chosen = buckets[_hash_bucket(pkt, group.hash_fields, len(buckets))]
    elif kind is GroupKind.SELECT_ROUND_ROBIN:
        chosen = buckets[group.rr_cursor % len(buckets)]
        group.rr_cursor = (group.rr_cursor + 1) % len(buckets)
    else:
        raise MalformedAction(f"unknown group kind {kind}")
    _run_actions(switch, chosen.actions, pkt.copy(), now, out)


def group_execute(switch: Switch, packet: Packet, gid, now: int = 0) -> list:
    out = Outcome(emissions=[])
    _run_group(switch, packet.copy(), gid, now, out)
    return out.emissions


def process_packet(switch: Switch, packet: Packet, now: int) -> list:
    return switch.process(packet, now).emissions


# -- diagnostic dump ---------------------------------------------------------

def _fmt_value(v):
    return "-" if v is None else str(v)


def _fmt_match(m: Match) -> str:
    parts = []
    for f, v in m.conditions.items():
        name = f if f == STATE else str(f)
        parts.append(f"{name}={'absent' if v is ABSENT else v}")
    return ",".join(parts) or "*"


def format_action(act) -> str:
    match act:
        case Output(port=p):
            return f"output:{p}"
        case PushTag(label=l):
            return f"push_tag:{l}"
        case PopTag():
            return "pop_tag"
        case SetState():
            s = f"set_state:{act.label}"
            if act.idle_timeout:
                s += f"/idle={act.idle_timeout}>{act.idle_rollback}"
            if act.hard_timeout:
                s += f"/hard={act.hard_timeout}>{act.hard_rollback}"
            return s
        case Group(group_id=g):
            return f"group:{g}"
        case Drop():
            return "drop"
        case ToController():
            return "controller"
    return repr(act)


def _fmt_actions(actions) -> str:
    return ",".join(format_action(a) for a in actions) or "drop"


def dump(switch: Switch) -> str:
    """One tab-separated line per state, flow and group entry."""
    lines = []
    if switch.state_table is not None:
        for key in sorted(switch.state_table.entries):
            e = switch.state_table.entries[key]
            lines.append("\t".join([
                "state", ",".join(map(str, key)), str(e.label),
                _fmt_value(e.idle_timeout), _fmt_value(e.hard_timeout),
                str(e.idle_rollback), str(e.hard_rollback), str(e.last_hit), str(e.installed_at),
            ]))
    for e in switch.flow_table:
        lines.append("\t".join(["flow", str(e.match.priority), _fmt_match(e.match), _fmt_actions(e.actions)]))
    for gid in sorted(switch.groups):
        g = switch.groups[gid]
        buckets = ";".join(
            f"{_fmt_value(b.watch_port)}|{b.weight}|{_fmt_actions(b.actions)}" for b in g.buckets)
        lines.append("\t".join(["group", str(gid), g.kind.value, buckets]))
    return "\n".join(lines) + ("\n" if lines else "")
