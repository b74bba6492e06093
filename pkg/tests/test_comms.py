"""Message store and budgeted sync tests.

The end-to-end delivery check re-runs each random contact schedule
through a time-expanded flooding model (instant, infinite-bandwidth
union at every contact) and demands the real sync reach the same
stores when its budget is effectively unlimited.
"""

import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from agsim import comms
from agsim.comms import (
    HEADER_BYTES,
    Message,
    MessageDB,
    DuplicateKey,
    delivered,
    link_trigger,
    pending_between,
    publish,
    sync,
)


def msg(origin, topic, seq, size=10, t=0.0):
    return Message(origin, topic, seq, b"x" * size, t)


def test_publish_and_duplicate_key():
    db = MessageDB("uav")
    publish(db, msg("uav", "report", 1))
    with pytest.raises(DuplicateKey):
        publish(db, msg("uav", "report", 1, size=99))
    assert len(db) == 1


def test_unknown_topic_rejected():
    with pytest.raises(comms.CommsError):
        Message("uav", "gossip", 1, b"", 0.0)


def test_priority_defaults_follow_topic_table():
    for topic, pri in comms.TOPIC_PRIORITY.items():
        assert msg("r", topic, 1).priority == pri


def test_headers_sorted_by_priority_then_created_at():
    rng = random.Random(7)
    db = MessageDB("uav")
    topics = list(comms.TOPIC_PRIORITY)
    for i in range(1000):
        topic = rng.choice(topics)
        publish(db, Message(f"r{i}", topic, 1, b"p", rng.uniform(0, 500)))
    order = [(db.store[k].priority, db.store[k].created_at) for k in db.headers()]
    assert order == sorted(order)


def test_sync_unlimited_budget_equalizes_stores():
    a, b = MessageDB("a"), MessageDB("b")
    for i in range(1, 6):
        publish(a, msg("a", "report", i, t=i))
        publish(b, msg("b", "aerial_graph", i, size=50, t=i))
    res = sync(a, b, byte_budget=10**9)
    assert set(a.store) == set(b.store)
    assert res.delivered == 10
    again = sync(a, b, byte_budget=10**9)
    assert again.delivered == 0  # resync moves nothing new


def test_sync_byte_accounting_is_exact():
    a, b = MessageDB("a"), MessageDB("b")
    publish(a, msg("a", "report", 1, size=100))
    publish(a, msg("a", "report", 2, size=200))
    publish(b, msg("b", "task", 1, size=30))
    res = sync(a, b, byte_budget=10**9)
    assert res.bytes_transferred == HEADER_BYTES * 3 + 100 + 200 + 30


def test_header_cost_charged_even_when_nothing_fits():
    a, b = MessageDB("a"), MessageDB("b")
    publish(a, msg("a", "report", 1, size=500))
    res = sync(a, b, byte_budget=HEADER_BYTES + 10)
    assert res.delivered == 0
    assert res.bytes_transferred == HEADER_BYTES
    assert len(b) == 0


def test_tight_budget_ships_urgent_topics_first():
    a, b = MessageDB("a"), MessageDB("b")
    publish(a, msg("a", "aerial_graph", 1, size=40, t=0.0))
    publish(a, msg("a", "report", 1, size=40, t=5.0))
    publish(a, msg("a", "task", 1, size=40, t=9.0))
    # Room for headers plus exactly two payloads.
    res = sync(a, b, byte_budget=HEADER_BYTES * 3 + 80)
    got = {m.topic for m in res.a_to_b}
    assert got == {"task", "report"}
    assert ("a", "aerial_graph", 1) not in b.store


def test_transfer_stops_at_first_nonfitting_message():
    a, b = MessageDB("a"), MessageDB("b")
    publish(a, msg("a", "task", 1, size=60, t=0.0))
    publish(a, msg("a", "task", 2, size=100, t=1.0))
    publish(a, msg("a", "task", 3, size=5, t=2.0))
    res = sync(a, b, byte_budget=HEADER_BYTES * 3 + 70)
    # seq 2 does not fit; the queue stops there even though seq 3 would fit.
    assert [m.seq for m in res.a_to_b] == [1]
    assert res.bytes_transferred == HEADER_BYTES * 3 + 60


def test_partial_transfers_resume_on_next_contact():
    a, b = MessageDB("a"), MessageDB("b")
    for i in range(1, 4):
        publish(a, msg("a", "report", i, size=50, t=float(i)))
    sync(a, b, byte_budget=HEADER_BYTES * 3 + 60)
    assert delivered(b, "a", "report") == 1
    sync(a, b, byte_budget=10**6)
    assert delivered(b, "a", "report") == 3


def test_odometry_supersession_keeps_latest_only():
    db = MessageDB("uav")
    publish(db, msg("ugv1", "ugv_odometry", 1, t=1.0))
    publish(db, msg("ugv1", "ugv_odometry", 4, t=4.0))
    keys = [k for k in db.store if k[1] == "ugv_odometry"]
    assert keys == [("ugv1", "ugv_odometry", 4)]
    # Older seq arriving later is refused, newer from another origin kept.
    publish(db, msg("ugv1", "ugv_odometry", 2, t=2.0))
    publish(db, msg("ugv2", "ugv_odometry", 1, t=1.0))
    keys = sorted(k for k in db.store if k[1] == "ugv_odometry")
    assert keys == [("ugv1", "ugv_odometry", 4), ("ugv2", "ugv_odometry", 1)]


def test_sync_does_not_ship_superseded_odometry():
    a, b = MessageDB("a"), MessageDB("b")
    publish(a, msg("ugv1", "ugv_odometry", 3, t=3.0))
    publish(b, msg("ugv1", "ugv_odometry", 7, t=7.0))
    res = sync(a, b, byte_budget=10**6)
    assert [m.seq for m in res.b_to_a] == [7]
    assert res.a_to_b == []
    assert ("ugv1", "ugv_odometry", 3) not in a.store


def test_delivered_counts_contiguous_prefix():
    db = MessageDB("base")
    for seq in (1, 2, 3, 5, 6):
        publish(db, msg("uav", "report", seq))
    assert delivered(db, "uav", "report") == 3
    publish(db, msg("uav", "report", 4))
    assert delivered(db, "uav", "report") == 6
    assert delivered(db, "uav", "task") == 0


def test_pending_between_reaches_zero_after_full_sync():
    a, b = MessageDB("a"), MessageDB("b")
    publish(a, msg("a", "report", 1))
    publish(b, msg("b", "report", 1))
    assert pending_between(a, b) == 2
    sync(a, b, byte_budget=10**6)
    assert pending_between(a, b) == 0


def test_link_trigger_threshold():
    assert link_trigger(-84.9)
    assert link_trigger(-85.0)
    assert not link_trigger(-85.1)


def test_payload_builders_allocate_sequences():
    db = MessageDB("ugv1")
    m1 = comms.odometry_message(db, "ugv1", 1.0, 2.0, 0.1, t=5.0)
    m2 = comms.odometry_message(db, "ugv1", 1.5, 2.5, 0.2, t=6.0)
    assert (m1.seq, m2.seq) == (1, 2)
    publish(db, m1)
    publish(db, m2)
    assert list(db.store) == [("ugv1", "ugv_odometry", 2)]  # seq 1 superseded
    r = comms.report_message(db, "ugv1", {"answer": "found"}, t=7.0)
    assert r.seq == 1 and r.topic == "report"
    assert len(m1.payload) <= 128


# --- flooding oracle ----------------------------------------------------------

def flood(publishes, contacts, robots):
    """Instant-union model of the same publish and contact schedule.

    Returns robot -> set of message keys, with odometry keep-latest
    applied the same way the stores apply it.
    """
    events = [("pub", t, who, m) for who, m, t in publishes]
    events += [("meet", t, pair, None) for pair, t in contacts]
    events.sort(key=lambda e: (e[1], e[0] != "pub"))
    held = {r: {} for r in robots}  # key -> message

    def add(store, m):
        if m.topic == "ugv_odometry":
            newer = [k for k in store if k[0] == m.origin and k[1] == m.topic and k[2] >= m.seq]
            if newer:
                return
            for k in [k for k in store if k[0] == m.origin and k[1] == m.topic]:
                del store[k]
        store[m.key] = m

    for kind, _t, who, m in events:
        if kind == "pub":
            add(held[who], m)
        else:
            x, y = who
            for msg_ in list(held[x].values()):
                add(held[y], msg_)
            for msg_ in list(held[y].values()):
                add(held[x], msg_)
    return {r: set(store) for r, store in held.items()}


def test_mule_relay_matches_flooding_oracle():
    rng = random.Random(42)
    for trial in range(15):
        robots = ["uav", "ugv1", "ugv2", "base"]
        dbs = {r: MessageDB(r) for r in robots}
        publishes, contacts = [], []
        t = 0.0
        seq = {r: 0 for r in robots}
        schedule = []
        for _ in range(40):
            t += rng.uniform(0.5, 3.0)
            if rng.random() < 0.55:
                who = rng.choice(robots)
                topic = rng.choice(list(comms.TOPIC_PRIORITY))
                seq[who] += 1
                m = Message(who, topic, seq[who], bytes(rng.randrange(5, 60)), t)
                publishes.append((who, m, t))
                schedule.append(("pub", t, who, m))
            else:
                x, y = rng.sample(robots, 2)
                contacts.append(((x, y), t))
                schedule.append(("meet", t, (x, y), None))
        for kind, _t, who, m in schedule:
            if kind == "pub":
                comms._insert(dbs[who], m)
            else:
                sync(dbs[who[0]], dbs[who[1]], byte_budget=10**9)
        expect = flood(publishes, contacts, robots)
        for r in robots:
            assert set(dbs[r].store) == expect[r], f"trial {trial} robot {r}"


def test_two_ugvs_exchange_via_uav_mule_only():
    # ugv1 and ugv2 never meet; the uav ferries both directions.
    dbs = {r: MessageDB(r) for r in ("uav", "ugv1", "ugv2")}
    publish(dbs["ugv1"], msg("ugv1", "report", 1, t=0.0))
    publish(dbs["ugv2"], msg("ugv2", "report", 1, t=0.0))
    sync(dbs["uav"], dbs["ugv1"], byte_budget=10**6)
    sync(dbs["uav"], dbs["ugv2"], byte_budget=10**6)
    sync(dbs["uav"], dbs["ugv1"], byte_budget=10**6)
    assert ("ugv2", "report", 1) in dbs["ugv1"].store
    assert ("ugv1", "report", 1) in dbs["ugv2"].store


@given(
    st.lists(
        st.tuples(
            st.sampled_from(["a", "b"]),
            st.sampled_from(list(comms.TOPIC_PRIORITY)),
            st.integers(1, 5),
            st.integers(0, 40),
        ),
        max_size=30,
    )
)
@settings(max_examples=60, deadline=None)
def test_sync_never_loses_nonodometry_messages(entries):
    dbs = {"a": MessageDB("a"), "b": MessageDB("b")}
    before = set()
    for who, topic, s, size in entries:
        m = Message(who, topic, s, b"z" * size, 0.0)
        comms._insert(dbs[who], m)
        if topic != "ugv_odometry":
            before.add(m.key)
    sync(dbs["a"], dbs["b"], byte_budget=10**9)
    for db in dbs.values():
        held = {k for k in db.store if k[1] != "ugv_odometry"}
        assert held == {k for k in before if k[1] != "ugv_odometry"}


@given(st.integers(0, 4000))
@settings(max_examples=40, deadline=None)
def test_sync_transfer_never_exceeds_budget_when_headers_fit(budget):
    a, b = MessageDB("a"), MessageDB("b")
    for i in range(1, 8):
        publish(a, msg("a", "report", i, size=37 * i, t=float(i)))
    res = sync(a, b, byte_budget=budget)
    header_cost = HEADER_BYTES * 7
    if budget >= header_cost:
        assert res.bytes_transferred <= max(budget, header_cost)
    sizes = [len(m.payload) for m in res.a_to_b]
    assert res.bytes_transferred == header_cost + sum(sizes)
