from __future__ import annotations

import itertools
import json
import math
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from agsim import semgraph as sg


def region(i, x, y, label="road", attrs=None):
    return sg.Node(i, sg.REGION, x, y, label, attrs or {})


def obj(i, x, y, label, attrs=None):
    return sg.Node(i, sg.OBJECT, x, y, label, attrs or {})


def tedge(a, b):
    return sg.Edge(a, b, sg.TRAVERSABLE)


def oedge(a, b):
    return sg.Edge(a, b, sg.OBSERVABLE)


def small_graph():
    g = sg.empty_graph()
    delta = sg.GraphDelta(
        added_nodes=(
            region("road_1", 0, 0),
            region("road_2", 10, 0),
            region("road_3", 10, 10),
            obj("barrel_1", 12, 1, "barrel"),
        ),
        added_edges=(tedge("road_1", "road_2"), tedge("road_2", "road_3"), oedge("barrel_1", "road_2")),
        sequence=1,
    )
    return sg.apply_delta(g, delta)


# --- delta application ------------------------------------------------------

def test_empty_delta_bumps_version_only():
    g = small_graph()
    g2 = sg.apply_delta(g, sg.GraphDelta())
    assert g2.version == g.version + 1
    assert g2.nodes == g.nodes
    assert g2.edges == g.edges


def test_apply_is_functional_not_in_place():
    g = small_graph()
    before = (dict(g.nodes), set(g.edges), g.version)
    sg.apply_delta(g, sg.GraphDelta(removed_nodes=("barrel_1",)))
    assert (dict(g.nodes), set(g.edges), g.version) == before


def test_add_nodes_and_edges():
    g = small_graph()
    assert set(g.nodes) == {"road_1", "road_2", "road_3", "barrel_1"}
    assert tedge("road_1", "road_2") in g.edges
    assert oedge("road_2", "barrel_1") in g.edges  # endpoint order is free
    sg.validate_graph(g)


def test_duplicate_identical_add_is_noop():
    g = small_graph()
    g2 = sg.apply_delta(g, sg.GraphDelta(added_nodes=(region("road_1", 0, 0),)))
    assert g2.nodes == g.nodes
    g3 = sg.apply_delta(g, sg.GraphDelta(added_edges=(tedge("road_1", "road_2"),)))
    assert g3.edges == g.edges


def test_duplicate_conflicting_add_raises():
    g = small_graph()
    with pytest.raises(sg.DuplicateNode):
        sg.apply_delta(g, sg.GraphDelta(added_nodes=(region("road_1", 5, 5),)))


def test_remove_node_removes_incident_edges():
    g = small_graph()
    g2 = sg.apply_delta(g, sg.GraphDelta(removed_nodes=("road_2",)))
    assert "road_2" not in g2.nodes
    assert all(not e.touches("road_2") for e in g2.edges)
    assert g2.edges == frozenset()  # road_2 touched every edge


def test_dangling_references_raise():
    g = small_graph()
    with pytest.raises(sg.DanglingReference):
        sg.apply_delta(g, sg.GraphDelta(removed_nodes=("ghost",)))
    with pytest.raises(sg.DanglingReference):
        sg.apply_delta(g, sg.GraphDelta(removed_edges=(tedge("road_1", "road_3"),)))
    with pytest.raises(sg.DanglingReference):
        sg.apply_delta(g, sg.GraphDelta(added_edges=(tedge("road_1", "ghost"),)))
    with pytest.raises(sg.DanglingReference):
        sg.apply_delta(g, sg.GraphDelta(updated_nodes=(("ghost", {"a": "1"}),)))


def test_kind_violations_raise():
    g = small_graph()
    with pytest.raises(sg.KindViolation):
        sg.apply_delta(g, sg.GraphDelta(added_edges=(tedge("road_1", "barrel_1"),)))
    with pytest.raises(sg.KindViolation):
        sg.apply_delta(g, sg.GraphDelta(added_edges=(oedge("road_1", "road_2"),)))
    with pytest.raises(sg.KindViolation):
        sg.Edge("road_1", "road_1", sg.TRAVERSABLE)


def test_failed_apply_is_atomic():
    g = small_graph()
    bad = sg.GraphDelta(
        added_nodes=(region("road_9", 1, 1),),
        removed_nodes=("ghost",),
    )
    with pytest.raises(sg.DanglingReference):
        sg.apply_delta(g, bad)
    assert "road_9" not in g.nodes


def test_update_nodes_patches_attributes_only():
    g = small_graph()
    g2 = sg.apply_delta(g, sg.GraphDelta(updated_nodes=(("barrel_1", {"color": "red"}),)))
    assert g2.nodes["barrel_1"].attributes == {"color": "red"}
    assert g2.nodes["barrel_1"].position == g.nodes["barrel_1"].position
    g3 = sg.apply_delta(g2, sg.GraphDelta(updated_nodes=(("barrel_1", {"size": "big"}),)))
    assert g3.nodes["barrel_1"].attributes == {"color": "red", "size": "big"}


def test_replace_moves_node_within_one_delta():
    g = small_graph()
    moved = obj("barrel_1", 13, 2, "barrel")
    delta = sg.GraphDelta(
        added_nodes=(moved,),
        removed_nodes=("barrel_1",),
        added_edges=(oedge("barrel_1", "road_2"),),
    )
    g2 = sg.apply_delta(g, delta)
    assert g2.nodes["barrel_1"].position == (13.0, 2.0)
    assert oedge("barrel_1", "road_2") in g2.edges


# --- inverse property -------------------------------------------------------

def _rand_delta(g, rng):
    node_ids = sorted(g.nodes)
    removable = [i for i in node_ids if rng.random() < 0.3]
    k = rng.randrange(1000, 9999)
    new_nodes = tuple(
        region(f"r{k}_{j}", rng.uniform(-50, 50), rng.uniform(-50, 50)) for j in range(rng.randrange(0, 3))
    )
    survivors = [i for i in node_ids if i not in removable and g.nodes[i].kind == sg.REGION]
    new_edges = []
    pool = survivors + [n.id for n in new_nodes]
    rng.shuffle(pool)
    for a, b in zip(pool, pool[1:]):
        e = tedge(a, b)
        if e not in g.edges and rng.random() < 0.5:
            new_edges.append(e)
    updates = tuple((i, {"seen": "yes"}) for i in survivors[:1])
    return sg.GraphDelta(
        added_nodes=new_nodes,
        removed_nodes=tuple(removable),
        added_edges=tuple(new_edges),
        removed_edges=(),
        updated_nodes=updates,
        sequence=1,
    )


def test_apply_then_inverse_restores_sets():
    rng = random.Random(7)
    for _ in range(50):
        g = small_graph()
        delta = _rand_delta(g, rng)
        g2 = sg.apply_delta(g, delta)
        g3 = sg.apply_delta(g2, sg.invert_delta(g, delta))
        assert set(g3.nodes) == set(g.nodes)
        assert {(i, n.position, n.kind) for i, n in g3.nodes.items()} == {
            (i, n.position, n.kind) for i, n in g.nodes.items()
        }
        assert g3.edges == g.edges


# --- merge ------------------------------------------------------------------

def test_merge_conflict_remote_object_position_wins_attributes_union():
    g = sg.apply_delta(
        small_graph(),
        sg.GraphDelta(updated_nodes=(("barrel_1", {"color": "blue", "origin": "local"}),)),
    )
    remote = sg.GraphDelta(
        added_nodes=(obj("barrel_1", 12.4, 1.1, "barrel", {"color": "rusty", "height": "1m"}),),
        sequence=5,
    )
    merged = sg.merge_remote(g, [remote])
    node = merged.nodes["barrel_1"]
    assert node.position == (12.4, 1.1)
    # union with local values winning on conflicting keys
    assert node.attributes == {"color": "blue", "origin": "local", "height": "1m"}


def test_merge_keeps_local_region_position():
    g = small_graph()
    remote = sg.GraphDelta(added_nodes=(region("road_1", 3, 3, "road", {"w": "5"}),), sequence=2)
    merged = sg.merge_remote(g, [remote])
    assert merged.nodes["road_1"].position == (0.0, 0.0)
    assert merged.nodes["road_1"].attributes == {"w": "5"}


def test_merge_skips_dangling_ops_without_error():
    g = small_graph()
    remote = sg.GraphDelta(
        removed_nodes=("ghost",),
        removed_edges=(tedge("road_1", "road_3"),),
        added_edges=(tedge("road_1", "phantom"),),
        updated_nodes=(("phantom", {"a": "b"}),),
        sequence=3,
    )
    merged = sg.merge_remote(g, [remote])
    assert set(merged.nodes) == set(g.nodes)
    assert merged.edges == g.edges


def test_merge_is_idempotent_on_node_and_edge_sets():
    g = small_graph()
    stream = [
        sg.GraphDelta(added_nodes=(region("road_4", 20, 10),), added_edges=(tedge("road_3", "road_4"),), sequence=1),
        sg.GraphDelta(added_nodes=(obj("car_1", 21, 11, "car"),), added_edges=(oedge("car_1", "road_4"),), sequence=2),
        sg.GraphDelta(removed_edges=(tedge("road_1", "road_2"),), sequence=3),
    ]
    once = sg.merge_remote(g, stream)
    twice = sg.merge_remote(once, stream)
    assert set(twice.nodes) == set(once.nodes)
    assert twice.edges == once.edges
    assert all(twice.nodes[i].same_content(once.nodes[i]) for i in once.nodes)


def test_merge_applies_in_sequence_order():
    g = small_graph()
    d_add = sg.GraphDelta(added_nodes=(region("road_4", 20, 10),), sequence=1)
    d_rm = sg.GraphDelta(removed_nodes=("road_4",), sequence=2)
    merged = sg.merge_remote(g, [d_rm, d_add])  # out of order on purpose
    assert "road_4" not in merged.nodes


def test_version_strictly_increases():
    g = small_graph()
    v = g.version
    for delta in (sg.GraphDelta(), sg.GraphDelta(added_nodes=(region("road_7", 1, 9),))):
        g = sg.apply_delta(g, delta)
        assert g.version == v + 1
        v = g.version


# --- serialization ----------------------------------------------------------

def test_round_trip_identity():
    g = sg.apply_delta(
        small_graph(),
        sg.GraphDelta(updated_nodes=(("barrel_1", {"caption": "a dented blue barrel"}),)),
    )
    g2 = sg.deserialize(sg.serialize(g))
    assert set(g2.nodes) == set(g.nodes)
    assert g2.edges == g.edges
    assert g2.version == g.version
    for i in g.nodes:
        assert abs(g2.nodes[i].x - g.nodes[i].x) < 1e-6
        assert abs(g2.nodes[i].y - g.nodes[i].y) < 1e-6
        assert g2.nodes[i].attributes == g.nodes[i].attributes
    # canonical: serializing again yields identical bytes
    assert sg.serialize(g2) == sg.serialize(g)


def test_serialize_is_canonical_and_sorted():
    g = small_graph()
    doc = json.loads(sg.serialize(g))
    ids = [n["id"] for n in doc["nodes"]]
    assert ids == sorted(ids)
    pairs = [(e["a"], e["b"], e["kind"]) for e in doc["edges"]]
    assert pairs == sorted(pairs)
    for n in doc["nodes"]:
        assert round(n["x"], 2) == n["x"]
        assert round(n["y"], 2) == n["y"]


def test_schema_violations():
    with pytest.raises(sg.SchemaViolation):
        sg.deserialize(b"not json at all")
    with pytest.raises(sg.SchemaViolation):
        sg.deserialize(json.dumps({"origin": [0, 0], "version": 0, "nodes": []}))
    bad_edge = {
        "origin": [0, 0],
        "version": 0,
        "nodes": [{"id": "a", "kind": "region", "label": "road", "x": 0, "y": 0}],
        "edges": [{"a": "a", "b": "missing", "kind": "traversable"}],
    }
    with pytest.raises(sg.SchemaViolation):
        sg.deserialize(json.dumps(bad_edge))
    bad_kind = {
        "origin": [0, 0],
        "version": 0,
        "nodes": [{"id": "a", "kind": "blob", "label": "x", "x": 0, "y": 0}],
        "edges": [],
    }
    with pytest.raises(sg.SchemaViolation):
        sg.deserialize(json.dumps(bad_kind))


def test_caption_attribute_grows_size_by_payload_plus_small_overhead():
    g = small_graph()
    base = len(sg.serialize(g))
    caption = "x" * 1024
    g2 = sg.apply_delta(g, sg.GraphDelta(updated_nodes=(("barrel_1", {"caption": caption}),)))
    grown = len(sg.serialize(g2))
    overhead = grown - base - len(caption)
    assert 0 < overhead <= 64


def test_serialized_size_monotone_in_node_count():
    g = sg.empty_graph()
    last = len(sg.serialize(g))
    for i in range(40):
        g = sg.apply_delta(g, sg.GraphDelta(added_nodes=(region(f"road_{i}", i * 7.5, 0.0),)))
        size = len(sg.serialize(g))
        assert size > last
        last = size


def test_flight_scale_graph_serializes_compactly():
    # Graph shaped like a kilometer of aerial mapping output: a region
    # chain every 10 m plus a few hundred objects hanging off it.
    g = sg.empty_graph()
    nodes = [region(f"road_{i}", i * 10.0, 0.0) for i in range(100)]
    edges = [tedge(f"road_{i}", f"road_{i+1}") for i in range(99)]
    alloc = sg.NodeIdAllocator()
    alloc.next("road")  # namespace parity with the chain above is irrelevant
    labels = ["car", "person", "barrel", "crate"]
    k = 0
    for i in range(300):
        label = labels[i % len(labels)]
        k += 1
        node = obj(f"{label}_{k}", (i * 3.3) % 1000.0, 6.0 + (i % 5), label)
        nodes.append(node)
        edges.append(oedge(node.id, f"road_{min(int(node.x // 10), 99)}"))
    g = sg.apply_delta(g, sg.GraphDelta(added_nodes=tuple(nodes), added_edges=tuple(edges)))
    size = len(sg.serialize(g))
    assert 400 == len(g.nodes)
    assert 10_000 <= size <= 50_000


# --- queries vs brute-force oracles ----------------------------------------

def _oracle_shortest(g, src, dst):
    # Exhaustive simple-path enumeration; min by (length, path) with the
    # same left-to-right float accumulation as the implementation.
    adj = {}
    for e in g.edges:
        if e.kind != sg.TRAVERSABLE:
            continue
        adj.setdefault(e.a, set()).add(e.b)
        adj.setdefault(e.b, set()).add(e.a)
    best = None

    def walk(path, length):
        nonlocal best
        head = path[-1]
        if head == dst:
            key = (length, tuple(path))
            if best is None or key < best:
                best = key
            return
        for nxt in sorted(adj.get(head, ())):
            if nxt not in path:
                na, nb = g.nodes[head], g.nodes[nxt]
                walk(path + [nxt], length + math.hypot(na.x - nb.x, na.y - nb.y))

    walk([src], 0.0)
    return list(best[1]) if best else None


def _random_region_graph(rng, n_nodes, n_edges):
    g = sg.empty_graph()
    nodes = tuple(region(f"r{i}", rng.randrange(0, 40), rng.randrange(0, 40)) for i in range(n_nodes))
    pairs = list(itertools.combinations(range(n_nodes), 2))
    rng.shuffle(pairs)
    edges = []
    seen_pos = {n.position for n in nodes}
    del seen_pos
    for a, b in pairs[:n_edges]:
        edges.append(tedge(f"r{a}", f"r{b}"))
    return sg.apply_delta(g, sg.GraphDelta(added_nodes=nodes, added_edges=tuple(edges)))


def test_shortest_path_matches_exhaustive_oracle():
    rng = random.Random(42)
    for trial in range(120):
        n = rng.randrange(2, 8)
        g = _random_region_graph(rng, n, rng.randrange(0, n * 2))
        src, dst = "r0", f"r{n - 1}"
        got = sg.shortest_path(g, src, dst)
        want = _oracle_shortest(g, src, dst)
        assert got == want, f"trial {trial}: {got} != {want}"


def test_shortest_path_tie_breaks_lexicographically():
    # Two geometrically identical routes; ids force the winner.
    g = sg.empty_graph()
    nodes = (
        region("a", 0, 0),
        region("b", 10, 10),
        region("m1", 10, 0),
        region("m2", 0, 10),
    )
    edges = (tedge("a", "m1"), tedge("m1", "b"), tedge("a", "m2"), tedge("m2", "b"))
    g = sg.apply_delta(g, sg.GraphDelta(added_nodes=nodes, added_edges=edges))
    assert sg.shortest_path(g, "a", "b") == ["a", "m1", "b"]


def test_shortest_path_errors_and_absent():
    g = small_graph()
    g = sg.apply_delta(g, sg.GraphDelta(added_nodes=(region("island", 99, 99),)))
    assert sg.shortest_path(g, "road_1", "island") is None
    with pytest.raises(sg.UnknownNode):
        sg.shortest_path(g, "road_1", "nope")
    with pytest.raises(sg.NotARegion):
        sg.shortest_path(g, "road_1", "barrel_1")


def test_nearest_node_matches_linear_scan():
    rng = random.Random(9)
    g = _random_region_graph(rng, 25, 0)
    g = sg.apply_delta(
        g,
        sg.GraphDelta(added_nodes=tuple(obj(f"o{i}", rng.uniform(0, 40), rng.uniform(0, 40), "car") for i in range(10))),
    )
    for _ in range(60):
        p = (rng.uniform(-5, 45), rng.uniform(-5, 45))
        for kind in (None, sg.REGION, sg.OBJECT):
            cands = [n for n in g.nodes.values() if kind is None or n.kind == kind]
            want = min(cands, key=lambda n: (math.hypot(n.x - p[0], n.y - p[1]), n.id)).id
            assert sg.nearest_node(g, p, kind) == want


def test_nearest_node_empty():
    assert sg.nearest_node(sg.empty_graph(), (0, 0)) is None
    g = small_graph()
    assert sg.nearest_node(g, (0, 0), "object") == "barrel_1"


# --- hypothesis properties --------------------------------------------------

coord = st.floats(min_value=-100, max_value=100, allow_nan=False, allow_infinity=False)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(coord, coord), min_size=1, max_size=12, unique=True))
def test_property_round_trip_any_node_set(points):
    nodes = tuple(region(f"r{i}", x, y) for i, (x, y) in enumerate(points))
    g = sg.apply_delta(sg.empty_graph(), sg.GraphDelta(added_nodes=nodes))
    g2 = sg.deserialize(sg.serialize(g))
    assert set(g2.nodes) == set(g.nodes)
    for i in g.nodes:
        assert abs(g2.nodes[i].x - g.nodes[i].x) < 1e-6
        assert abs(g2.nodes[i].y - g.nodes[i].y) < 1e-6


@settings(max_examples=60, deadline=None)
@given(st.integers(min_value=0, max_value=30), st.integers(min_value=1, max_value=30))
def test_property_size_monotone(n_base, n_extra):
    def build(count):
        nodes = tuple(region(f"r{i}", float(i), 0.0) for i in range(count))
        return sg.apply_delta(sg.empty_graph(), sg.GraphDelta(added_nodes=nodes)) if count else sg.empty_graph()

    assert len(sg.serialize(build(n_base + n_extra))) > len(sg.serialize(build(n_base)))


def test_id_allocator_is_per_label_and_prefixed():
    a = sg.NodeIdAllocator()
    assert [a.next("road"), a.next("road"), a.next("car")] == ["road_1", "road_2", "car_1"]
    b = sg.NodeIdAllocator("g1.")
    assert b.next("road") == "g1.road_1"
    c = sg.NodeIdAllocator()
    assert c.next("parking lot") == "parking_lot_1"
