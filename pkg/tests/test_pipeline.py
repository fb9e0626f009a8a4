import copy
import random

import pytest
from hypothesis import given, settings, strategies as st

from oracles import ScalarStateTable
from statefulsdn.errors import EmptyGroup, MalformedAction, MissingField, NoMatch, UnknownGroup
from statefulsdn.pipeline import (
    ABSENT, FOUR_TUPLE, STATE, Bucket, Drop, Expiry, Group, GroupEntry, GroupKind, HeaderField as H,
    Match, Output, Packet, PopTag, PushTag, SetState, StateEntry, StateTable, Switch, dump,
    expire_entry, extract_key, flow_match, group_execute, process_packet, set_state, state_lookup,
)

S = 1_000_000


def pkt(port=1, **fields):
    return Packet({H(k): v for k, v in fields.items()}, ingress_port=port)


def tcp(src=1, dst=2, sport=1000, dport=80, port=1):
    return pkt(port, ip_src=src, ip_dst=dst, l4_src=sport, l4_dst=dport)


# -- extract_key --------------------------------------------------------------

def test_extract_key_single_field():
    assert extract_key(pkt(ip_dst=0x0A000002), (H.IP_DST,)) == (0x0A000002,)


def test_extract_key_mac_scopes_pick_different_fields():
    p = pkt(eth_src=0xA, eth_dst=0xB)
    assert extract_key(p, (H.ETH_DST,)) == (0xB,)
    assert extract_key(p, (H.ETH_SRC,)) == (0xA,)


def test_extract_key_four_tuple_is_positional():
    assert extract_key(tcp(1, 2, 3, 4), FOUR_TUPLE) == (1, 2, 3, 4)
    assert extract_key(tcp(2, 1, 4, 3), FOUR_TUPLE) != extract_key(tcp(1, 2, 3, 4), FOUR_TUPLE)


def test_extract_key_missing_field():
    with pytest.raises(MissingField) as ei:
        extract_key(pkt(ip_src=1), (H.IP_SRC, H.L4_DST))
    assert ei.value.field == H.L4_DST


def test_untagged_packet_has_no_tag_field():
    with pytest.raises(MissingField):
        extract_key(pkt(ip_dst=1), (H.TAG_LABEL,))


def test_in_port_comes_from_metadata():
    assert extract_key(pkt(7, ip_dst=1), (H.IN_PORT,)) == (7,)


# -- lookup / set / expire -----------------------------------------------------

def test_empty_table_returns_default():
    assert state_lookup(StateTable([H.IP_DST]), pkt(ip_dst=5), 0) == 0


def test_hit_refreshes_idle_timer():
    t = StateTable(FOUR_TUPLE)
    set_state(t, tcp(), SetState(3, idle_timeout=10 * S), 0)
    assert state_lookup(t, tcp(), 5 * S) == 3
    assert t.entries[(1, 2, 1000, 80)].last_hit == 5 * S
    # 14 s after install but only 9 s after the last hit
    assert state_lookup(t, tcp(), 14 * S) == 3


def test_idle_expiry_deletes_entry():
    t = StateTable(FOUR_TUPLE)
    set_state(t, tcp(), SetState(3, idle_timeout=10 * S), 0)
    assert state_lookup(t, tcp(), 11 * S) == 0
    assert len(t) == 0


def test_timeout_fires_at_exact_boundary():
    t = StateTable([H.IP_DST])
    set_state(t, pkt(ip_dst=1), SetState(2, idle_timeout=10), 0)
    assert state_lookup(t, pkt(ip_dst=1), 9) == 2
    assert state_lookup(t, pkt(ip_dst=1), 19) == 0


def test_set_state_zero_deletes():
    t = StateTable([H.IP_DST])
    set_state(t, pkt(ip_dst=1), SetState(4), 0)
    set_state(t, pkt(ip_dst=1), SetState(0), 1)
    assert len(t) == 0 and state_lookup(t, pkt(ip_dst=1), 2) == 0


def test_hard_timeout_rolls_back_to_probe_and_rearms():
    e = StateEntry((1,), label=22, hard_timeout=S, hard_rollback=23, installed_at=0, last_hit=0)
    assert expire_entry(e, S - 1) is Expiry.KEPT
    assert expire_entry(e, S) is Expiry.REPLACED
    assert (e.label, e.installed_at) == (23, S)


def test_rearm_from_expiry_instant_not_lookup_instant():
    # F -> P after 1 s; P's own hard timeout (back to F) must count from the 1 s mark
    t = StateTable([H.IP_DST])
    set_state(t, pkt(ip_dst=1), SetState(22, hard_timeout=S, hard_rollback=23), 0)
    assert state_lookup(t, pkt(ip_dst=1), S + 300) == 23
    assert t.entries[(1,)].installed_at == S


def test_simultaneous_idle_and_hard_prefers_hard():
    e = StateEntry((1,), label=5, idle_timeout=10, hard_timeout=10, idle_rollback=0, hard_rollback=7)
    assert expire_entry(e, 10) is Expiry.REPLACED and e.label == 7


def test_long_gap_replays_whole_periods():
    # a label that rolls back to itself every 10 us: 100 periods elapse in 1005 us
    t = StateTable([H.IP_DST])
    set_state(t, pkt(ip_dst=1), SetState(1, hard_timeout=10, hard_rollback=1), 0)
    assert state_lookup(t, pkt(ip_dst=1), 1005) == 1
    assert t.entries[(1,)].installed_at == 1000
    ref = ScalarStateTable()
    ref.set(1, 0, 1, hard=10, hrb=1)
    assert ref.lookup(1, 1005) == 1 and ref.rows[1][6] == 1000


def test_cross_flow_update_mac_learning_shape():
    t = StateTable([H.ETH_DST], [H.ETH_SRC])
    set_state(t, pkt(1, eth_src=0xA, eth_dst=0xB), SetState(1), 0)
    assert state_lookup(t, pkt(2, eth_src=0xB, eth_dst=0xA), 1) == 1
    assert state_lookup(t, pkt(1, eth_src=0xA, eth_dst=0xB), 1) == 0


def test_state_table_scopes_validated():
    with pytest.raises(ValueError):
        StateTable([])
    with pytest.raises(ValueError):
        StateTable([H.IP_DST], [H.IP_SRC, H.IP_DST])


# -- property tests ------------------------------------------------------------

keys = st.tuples(st.integers(0, 3), st.integers(0, 3))
labels = st.integers(1, 50)


@given(keys, st.integers(0, 10**9))
def test_miss_is_default(k, now):
    t = StateTable([H.IP_SRC, H.IP_DST])
    assert state_lookup(t, pkt(ip_src=k[0], ip_dst=k[1]), now) == 0


@given(keys, labels, st.integers(0, 10**9), st.one_of(st.none(), st.integers(1, 10**6)))
def test_write_then_read(k, label, now, idle):
    t = StateTable([H.IP_SRC, H.IP_DST])
    p = pkt(ip_src=k[0], ip_dst=k[1])
    set_state(t, p, SetState(label, idle_timeout=idle), now)
    assert state_lookup(t, p, now) == label


@given(keys, keys, labels)
def test_cross_flow_update_only_touches_update_key(a, b, label):
    # lookup=(src,dst), update=(dst,src): the writer's own lookup key changes only if symmetric
    t = StateTable([H.IP_SRC, H.IP_DST], [H.IP_DST, H.IP_SRC])
    p = pkt(ip_src=a[0], ip_dst=a[1])
    set_state(t, p, SetState(label), 0)
    expected = label if a[0] == a[1] else 0
    assert state_lookup(t, p, 0) == expected
    q = pkt(ip_src=a[1], ip_dst=a[0])
    assert state_lookup(t, q, 0) == label


@given(st.integers(1, 1000), st.lists(st.integers(0, 2000), min_size=1, max_size=30))
def test_idle_timeout_monotonicity(delta, gaps):
    t = StateTable([H.IP_DST])
    p = pkt(ip_dst=1)
    set_state(t, p, SetState(9, idle_timeout=delta), 0)
    now, alive = 0, True
    for g in gaps:
        now += g
        got = state_lookup(t, p, now)
        if alive and g >= delta:
            alive = False
        assert got == (9 if alive else 0)


def _ops(rng):
    """A random small lifecycle: <=5 keys, <=20 steps of set/lookup/advance."""
    out, now = [], 0
    for _ in range(rng.randint(1, 20)):
        now += rng.choice([0, 1, 3, 5, 10, 17, 40, 100])
        key = rng.randrange(5)
        if rng.random() < 0.4:
            label = rng.choice([0, 1, 2, 3])
            idle = rng.choice([None, 5, 10, 20])
            hard = rng.choice([None, 7, 10, 30])
            out.append(("set", now, key, label, idle, hard, rng.choice([0, 1, 2]), rng.choice([0, 1, 3])))
        else:
            out.append(("get", now, key))
    return out


def _replay_both(ops):
    real = StateTable([H.IP_DST])
    ref = ScalarStateTable()
    got, want = [], []
    for op in ops:
        now, key = op[1], op[2]
        if op[0] == "set":
            _, _, _, label, idle, hard, irb, hrb = op
            set_state(real, pkt(ip_dst=key), SetState(label, idle, hard, irb, hrb), now)
            ref.set(key, now, label, idle, hard, irb, hrb)
        else:
            got.append(state_lookup(real, pkt(ip_dst=key), now))
            want.append(ref.lookup(key, now))
    return got, want


def test_lifecycles_match_scalar_replay():
    rng = random.Random(2024)
    for n in range(200):
        ops = _ops(rng)
        got, want = _replay_both(ops)
        assert got == want, (n, ops)


@settings(max_examples=150)
@given(st.randoms(use_true_random=False))
def test_lifecycles_match_scalar_replay_property(rnd):
    got, want = _replay_both(_ops(rnd))
    assert got == want


# -- flow table ----------------------------------------------------------------

def test_state_match_selects_entry():
    sw = Switch("s", StateTable([H.IP_DST]))
    e0 = sw.add_flow(Match(10, {STATE: 0}), [Group(1)])
    e1 = sw.add_flow(Match(10, {STATE: 1}), [Output(1)])
    assert flow_match(sw, pkt(ip_dst=1), 1) is e1
    assert flow_match(sw, pkt(ip_dst=1), 0) is e0


def test_equal_priority_earlier_wins_and_higher_priority_first():
    sw = Switch("s")
    a = sw.add_flow(Match(5, {}), [Output(1)])
    sw.add_flow(Match(5, {}), [Output(2)])
    assert flow_match(sw, pkt(ip_dst=1), 0) is a
    c = sw.add_flow(Match(6, {}), [Output(3)])
    assert flow_match(sw, pkt(ip_dst=1), 0) is c


def test_no_match_raises():
    with pytest.raises(NoMatch):
        flow_match(Switch("s"), pkt(ip_dst=1), 0)


def test_absent_tag_condition():
    sw = Switch("s")
    sw.add_flow(Match(5, {H.TAG_LABEL: ABSENT}), [Output(1)])
    sw.add_flow(Match(1, {}), [Output(2)])
    assert process_packet(sw, pkt(ip_dst=1), 0)[0][0] == 1
    assert process_packet(sw, pkt(ip_dst=1, tag_label=4), 0)[0][0] == 2


def test_absent_sentinel_survives_copy():
    m = Match(1, {H.TAG_LABEL: ABSENT})
    assert copy.deepcopy(m).conditions[H.TAG_LABEL] is ABSENT
    assert copy.copy(ABSENT) is ABSENT


def test_miss_policy_drop_and_controller():
    assert process_packet(Switch("s"), pkt(ip_dst=1), 0) == []
    out = Switch("s", miss_policy="controller").process(pkt(ip_dst=1), 0)
    assert out.miss and out.emissions[0][0] == -1
    with pytest.raises(ValueError):
        Switch("s", miss_policy="flood")


# -- actions -------------------------------------------------------------------

def test_actions_run_left_to_right():
    sw = Switch("s")
    sw.add_flow(Match(1, {}), [Output(1), PushTag(8), Output(2), PopTag(), Output(3)])
    tags = [(p, q.tag) for p, q in process_packet(sw, pkt(ip_dst=1), 0)]
    assert tags == [(1, None), (2, 8), (3, None)]


def test_drop_stops_the_list():
    sw = Switch("s")
    sw.add_flow(Match(1, {}), [Output(1), Drop(), Output(2)])
    assert [p for p, _ in process_packet(sw, pkt(ip_dst=1), 0)] == [1]


def test_pop_untagged_is_malformed():
    sw = Switch("s")
    sw.add_flow(Match(1, {}), [PopTag()])
    with pytest.raises(MalformedAction):
        process_packet(sw, pkt(ip_dst=1), 0)


def test_single_level_tag_stack():
    sw = Switch("s")
    sw.add_flow(Match(1, {}), [PushTag(3)])
    with pytest.raises(MalformedAction):
        process_packet(sw, pkt(ip_dst=1, tag_label=2), 0)


def test_set_state_visible_to_next_packet_and_input_untouched():
    sw = Switch("s", StateTable(FOUR_TUPLE))
    sw.add_flow(Match(1, {STATE: 0}), [SetState(2), Output(1)])
    sw.add_flow(Match(1, {STATE: 2}), [Output(2)])
    p = tcp()
    assert process_packet(sw, p, 0)[0][0] == 1
    assert process_packet(sw, tcp(), 1)[0][0] == 2
    assert p.header == tcp().header


# -- groups ----------------------------------------------------------------------

def test_all_group_isolates_copies():
    sw = Switch("s")
    sw.add_group(GroupEntry(1, GroupKind.ALL, [Bucket([PushTag(8), Output(2)]), Bucket([PushTag(9), Output(3)])]))
    out = group_execute(sw, pkt(ip_dst=1), 1)
    assert [(p, q.tag) for p, q in out] == [(2, 8), (3, 9)]


def test_fast_failover_picks_first_live_bucket():
    sw = Switch("s", ports=[1, 2])
    sw.add_group(GroupEntry(1, GroupKind.FAST_FAILOVER, [Bucket([Output(1)], watch_port=1),
                                                         Bucket([Output(2)], watch_port=2)]))
    assert group_execute(sw, pkt(ip_dst=1), 1)[0][0] == 1
    sw.set_port(1, False)
    assert group_execute(sw, pkt(ip_dst=1), 1)[0][0] == 2
    sw.set_port(2, False)
    assert group_execute(sw, pkt(ip_dst=1), 1) == []


def test_fast_failover_unconditional_fallback():
    sw = Switch("s", ports=[1])
    sw.add_group(GroupEntry(1, GroupKind.FAST_FAILOVER, [Bucket([Output(1)], watch_port=1),
                                                         Bucket([PushTag(22), Output(4)])]))
    sw.set_port(1, False)
    [(port, q)] = group_execute(sw, pkt(ip_dst=1), 1)
    assert (port, q.tag) == (4, 22)


@given(st.lists(st.booleans(), min_size=3, max_size=3), st.integers(0, 100))
def test_fast_failover_ignores_rng(status, seed):
    outs = []
    for s in (seed, seed + 1):
        sw = Switch("s", seed=s, ports=[1, 2, 3])
        for p, up in zip([1, 2, 3], status):
            sw.set_port(p, up)
        sw.add_group(GroupEntry(1, GroupKind.FAST_FAILOVER, [Bucket([Output(p)], watch_port=p) for p in (1, 2, 3)]))
        outs.append([p for p, _ in group_execute(sw, pkt(ip_dst=1), 1)])
    expected = [next((p for p, up in zip([1, 2, 3], status) if up), None)]
    assert outs[0] == outs[1] == ([] if expected == [None] else expected)


def _rand_group(seed, n=3, weights=None):
    sw = Switch("s", seed=seed)
    ws = weights or [1] * n
    sw.add_group(GroupEntry(1, GroupKind.SELECT_RANDOM, [Bucket([Output(k + 1)], weight=w) for k, w in enumerate(ws)]))
    return sw


def test_select_random_reproducible():
    seq = lambda: [group_execute(_sw, pkt(ip_dst=1), 1)[0][0] for _ in range(50)]
    _sw = _rand_group(7)
    a = seq()
    _sw = _rand_group(7)
    assert seq() == a


@pytest.mark.parametrize("seed", range(10))
def test_select_random_uniform_over_3000_draws(seed):
    sw = _rand_group(seed)
    counts = {1: 0, 2: 0, 3: 0}
    for _ in range(3000):
        counts[group_execute(sw, pkt(ip_dst=1), 1)[0][0]] += 1
    # 3 sigma of Binomial(3000, 1/3) is ~77
    assert all(900 <= c <= 1100 for c in counts.values()), counts


def test_select_random_weights_bias():
    sw = _rand_group(0, weights=[3, 1])
    n1 = sum(group_execute(sw, pkt(ip_dst=1), 1)[0][0] == 1 for _ in range(4000))
    assert 2850 <= n1 <= 3150


def test_select_hash_is_stable_per_key():
    sw = Switch("s")
    sw.add_group(GroupEntry(1, GroupKind.SELECT_HASH, [Bucket([Output(k)]) for k in (1, 2, 3)], hash_fields=FOUR_TUPLE))
    for sport in range(20):
        first = group_execute(sw, tcp(sport=sport), 1)[0][0]
        assert all(group_execute(sw, tcp(sport=sport), 1)[0][0] == first for _ in range(3))


def test_round_robin_cycles():
    sw = Switch("s")
    g = sw.add_group(GroupEntry(1, GroupKind.SELECT_ROUND_ROBIN, [Bucket([Output(k)]) for k in (1, 2, 3)]))
    assert [group_execute(sw, pkt(ip_dst=1), 1)[0][0] for _ in range(7)] == [1, 2, 3, 1, 2, 3, 1]
    assert g.rr_cursor == 1


def test_group_errors():
    sw = Switch("s")
    with pytest.raises(UnknownGroup):
        group_execute(sw, pkt(ip_dst=1), 9)
    sw.add_group(GroupEntry(2, GroupKind.ALL, []))
    with pytest.raises(EmptyGroup):
        group_execute(sw, pkt(ip_dst=1), 2)


def test_dump_is_tab_separated_and_stable():
    sw = Switch("s", StateTable([H.IP_DST]))
    sw.add_flow(Match(10, {STATE: 0, H.IP_DST: 5}), [SetState(1, idle_timeout=10), Output(1)])
    sw.add_group(GroupEntry(1, GroupKind.FAST_FAILOVER, [Bucket([Output(1)], watch_port=1), Bucket([Drop()])]))
    process_packet(sw, pkt(ip_dst=5), 3)
    assert dump(sw).splitlines() == [
        "state\t5\t1\t10\t-\t0\t0\t3\t3",
        "flow\t10\tstate=0,ip_dst=5\tset_state:1/idle=10>0,output:1",
        "group\t1\tfast_failover\t1|1|output:1;-|1|drop",
    ]
