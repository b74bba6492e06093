"""Shared semantic-topological map.

Nodes are either traversable regions or observed objects; edges are either
traversable (region-region) or observable (object-region).  Robots never
edit a graph in place: every change is a :class:`GraphDelta`, applied
atomically, so the same delta stream can be shipped over the radio and
replayed by every consumer.  Positions are quantized to centimeters at
node construction, which keeps the canonical JSON encoding stable under
serialize/deserialize round trips.
"""

from __future__ import annotations

import heapq
import json
import logging
import math
from dataclasses import dataclass, field

log = logging.getLogger(__name__)

REGION = "region"
OBJECT = "object"
NODE_KINDS = (REGION, OBJECT)

TRAVERSABLE = "traversable"
OBSERVABLE = "observable"
EDGE_KINDS = (TRAVERSABLE, OBSERVABLE)


class GraphError(Exception):
    pass


class DanglingReference(GraphError):
    """Delta references a node or edge that does not exist."""


class KindViolation(GraphError):
    """Edge endpoints do not match the edge kind."""


class DuplicateNode(GraphError):
    """Added node id already exists with different content."""


class SchemaViolation(GraphError):
    """Serialized document does not match the graph schema."""


class UnknownNode(GraphError):
    pass


class NotARegion(GraphError):
    pass


class UnknownEdge(GraphError):
    pass


def _q(v: float) -> float:
    # Centimeter quantization; canonical JSON prints at most 2 decimals.
    return round(float(v), 2)


@dataclass(frozen=True)
class Node:
    id: str
    kind: str
    x: float
    y: float
    label: str
    attributes: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in NODE_KINDS:
            raise KindViolation(f"bad node kind {self.kind!r}")
        object.__setattr__(self, "x", _q(self.x))
        object.__setattr__(self, "y", _q(self.y))
        object.__setattr__(self, "attributes", dict(self.attributes))

    @property
    def position(self) -> tuple[float, float]:
        return (self.x, self.y)

    def same_content(self, other: "Node") -> bool:
        return (
            self.id == other.id
            and self.kind == other.kind
            and self.x == other.x
            and self.y == other.y
            and self.label == other.label
            and self.attributes == other.attributes
        )

    def with_attributes(self, patch: dict) -> "Node":
        merged = dict(self.attributes)
        merged.update(patch)
        return Node(self.id, self.kind, self.x, self.y, self.label, merged)


@dataclass(frozen=True, order=True)
class Edge:
    a: str
    b: str
    kind: str

    def __post_init__(self):
        if self.kind not in EDGE_KINDS:
            raise KindViolation(f"bad edge kind {self.kind!r}")
        if self.a == self.b:
            raise KindViolation(f"self loop at {self.a!r}")
        # Endpoints are unordered; store them sorted so set semantics hold.
        if self.a > self.b:
            a, b = self.b, self.a
            object.__setattr__(self, "a", a)
            object.__setattr__(self, "b", b)

    def touches(self, node_id: str) -> bool:
        return node_id == self.a or node_id == self.b

    def other(self, node_id: str) -> str:
        return self.b if node_id == self.a else self.a


@dataclass(frozen=True)
class GraphDelta:
    """Atomic graph change, the only unit of map exchange between robots.

    An id present in both removed_nodes and added_nodes is a replace: the
    old node (with incident edges) goes away before the new one lands.
    That is how a position refinement ships, since update_nodes patches
    attributes only.
    """

    added_nodes: tuple = ()
    removed_nodes: tuple = ()
    added_edges: tuple = ()
    removed_edges: tuple = ()
    updated_nodes: tuple = ()  # pairs of (node_id, attribute patch)
    sequence: int = 0

    def is_empty(self) -> bool:
        return not (
            self.added_nodes
            or self.removed_nodes
            or self.added_edges
            or self.removed_edges
            or self.updated_nodes
        )

    def to_json(self) -> str:
        doc = {
            "sequence": self.sequence,
            "added_nodes": [_node_doc(n) for n in self.added_nodes],
            "removed_nodes": list(self.removed_nodes),
            "added_edges": [_edge_doc(e) for e in self.added_edges],
            "removed_edges": [_edge_doc(e) for e in self.removed_edges],
            "updated_nodes": [[i, dict(p)] for i, p in self.updated_nodes],
        }
        return json.dumps(doc, sort_keys=True, separators=(",", ":"))

    @staticmethod
    def from_json(text: str) -> "GraphDelta":
        try:
            doc = json.loads(text)
            return GraphDelta(
                added_nodes=tuple(_node_from_doc(d) for d in doc["added_nodes"]),
                removed_nodes=tuple(str(i) for i in doc["removed_nodes"]),
                added_edges=tuple(_edge_from_doc(d) for d in doc["added_edges"]),
                removed_edges=tuple(_edge_from_doc(d) for d in doc["removed_edges"]),
                updated_nodes=tuple((str(i), dict(p)) for i, p in doc["updated_nodes"]),
                sequence=int(doc["sequence"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise SchemaViolation(f"bad delta document: {exc}") from exc


class SemanticGraph:
    """Immutable snapshot of the shared map."""

    __slots__ = ("nodes", "edges", "origin", "version")

    def __init__(self, nodes=None, edges=None, origin=(0.0, 0.0), version=0):
        self.nodes: dict[str, Node] = dict(nodes) if nodes else {}
        self.edges: frozenset[Edge] = frozenset(edges) if edges else frozenset()
        self.origin = (float(origin[0]), float(origin[1]))
        self.version = int(version)

    def node(self, node_id: str) -> Node:
        try:
            return self.nodes[node_id]
        except KeyError:
            raise UnknownNode(node_id) from None

    def has_edge(self, edge: Edge) -> bool:
        return edge in self.edges

    def incident(self, node_id: str):
        return [e for e in self.edges if e.touches(node_id)]

    def regions(self):
        return [n for n in self.nodes.values() if n.kind == REGION]

    def objects(self):
        return [n for n in self.nodes.values() if n.kind == OBJECT]

    def stats(self) -> dict:
        return {
            "nodes": len(self.nodes),
            "edges": len(self.edges),
            "regions": sum(1 for n in self.nodes.values() if n.kind == REGION),
            "objects": sum(1 for n in self.nodes.values() if n.kind == OBJECT),
            "version": self.version,
        }


def empty_graph(origin=(0.0, 0.0)) -> SemanticGraph:
    return SemanticGraph(origin=origin)


def _check_edge_kind(edge: Edge, na: Node, nb: Node):
    kinds = {na.kind, nb.kind}
    if edge.kind == TRAVERSABLE and kinds != {REGION}:
        raise KindViolation(f"traversable edge {edge.a}-{edge.b} needs two regions")
    if edge.kind == OBSERVABLE and kinds != {REGION, OBJECT}:
        raise KindViolation(f"observable edge {edge.a}-{edge.b} needs object+region")


def apply_delta(graph: SemanticGraph, delta: GraphDelta) -> SemanticGraph:
    """Apply one delta atomically; returns a new graph with version+1.

    Raises before touching anything, so a failed apply leaves no partial
    state.  Adding a node identical to an existing one is a no-op (gossip
    redelivers), as is adding an edge that is already present.
    """
    nodes = graph.nodes
    replaced = {i for i in delta.removed_nodes if any(n.id == i for n in delta.added_nodes)}

    for node_id in delta.removed_nodes:
        if node_id not in nodes:
            raise DanglingReference(f"remove of unknown node {node_id!r}")
    for node in delta.added_nodes:
        if node.id in nodes and node.id not in replaced:
            if not nodes[node.id].same_content(node):
                raise DuplicateNode(node.id)
    for edge in delta.removed_edges:
        if edge not in graph.edges:
            raise DanglingReference(f"remove of unknown edge {edge.a}-{edge.b}")
    for node_id, patch in delta.updated_nodes:
        if node_id not in nodes and not any(n.id == node_id for n in delta.added_nodes):
            raise DanglingReference(f"update of unknown node {node_id!r}")
        if not isinstance(patch, dict):
            raise SchemaViolation("attribute patch must be a mapping")

    # Edge adds may reference nodes introduced by this same delta.
    after_nodes = {i: n for i, n in nodes.items() if i not in set(delta.removed_nodes)}
    for node in delta.added_nodes:
        after_nodes[node.id] = node
    for edge in delta.added_edges:
        if edge.a not in after_nodes or edge.b not in after_nodes:
            raise DanglingReference(f"edge {edge.a}-{edge.b} has missing endpoint")
        _check_edge_kind(edge, after_nodes[edge.a], after_nodes[edge.b])

    removed_node_set = set(delta.removed_nodes)
    new_edges = set(graph.edges)
    new_edges.difference_update(delta.removed_edges)
    new_edges = {e for e in new_edges if e.a not in removed_node_set and e.b not in removed_node_set}
    new_edges.update(delta.added_edges)

    new_nodes = dict(after_nodes)
    for node_id, patch in delta.updated_nodes:
        new_nodes[node_id] = new_nodes[node_id].with_attributes(patch)

    return SemanticGraph(new_nodes, new_edges, graph.origin, graph.version + 1)


def invert_delta(before: SemanticGraph, delta: GraphDelta) -> GraphDelta:
    """Delta that undoes `delta` when applied to apply_delta(before, delta).

    Restores node and edge sets exactly; attribute patches are inverted to
    the node's prior attribute map.
    """
    removed_node_set = set(delta.removed_nodes)
    implicit_edges = [
        e
        for e in before.edges
        if (e.a in removed_node_set or e.b in removed_node_set) and e not in set(delta.removed_edges)
    ]
    re_add = tuple(before.nodes[i] for i in delta.removed_nodes)
    re_remove = tuple(n.id for n in delta.added_nodes)
    undo_updates = tuple(
        (node_id, dict(before.nodes[node_id].attributes))
        for node_id, _ in delta.updated_nodes
        if node_id in before.nodes and node_id not in removed_node_set
    )
    return GraphDelta(
        added_nodes=re_add,
        removed_nodes=re_remove,
        added_edges=tuple(delta.removed_edges) + tuple(implicit_edges),
        removed_edges=tuple(delta.added_edges),
        updated_nodes=undo_updates,
        sequence=delta.sequence + 1,
    )


def merge_remote(graph: SemanticGraph, deltas) -> SemanticGraph:
    """Fold a remote delta stream into a local graph.

    Unlike apply_delta nothing here is fatal: conflicting operations are
    resolved by fixed rules and logged.  On an id collision the remote
    position wins for objects (the aerial mapper owns object geometry),
    the local position wins for regions, and attributes are unioned with
    local values kept on key conflicts.  Applying the same stream twice
    leaves the node and edge sets unchanged.
    """
    for delta in sorted(deltas, key=lambda d: d.sequence):
        graph = _merge_one(graph, delta)
    return graph


def _merge_one(graph: SemanticGraph, delta: GraphDelta) -> SemanticGraph:
    removed_nodes = []
    for node_id in delta.removed_nodes:
        if node_id in graph.nodes:
            removed_nodes.append(node_id)
        else:
            log.debug("merge: skip remove of unknown node %s", node_id)
    removed_edges = []
    for edge in delta.removed_edges:
        if edge in graph.edges:
            removed_edges.append(edge)
        else:
            log.debug("merge: skip remove of unknown edge %s-%s", edge.a, edge.b)

    survivors = {i: n for i, n in graph.nodes.items() if i not in set(removed_nodes)}
    added_nodes = []
    replace_ids = []
    for node in delta.added_nodes:
        local = survivors.get(node.id)
        if local is None:
            added_nodes.append(node)
            continue
        if local.same_content(node):
            continue
        if local.kind != node.kind:
            log.warning("merge: kind conflict on %s, keeping local", node.id)
            continue
        attrs = dict(node.attributes)
        attrs.update(local.attributes)  # local wins on conflicting keys
        if node.kind == OBJECT:
            merged = Node(node.id, node.kind, node.x, node.y, node.label, attrs)
        else:
            merged = Node(node.id, node.kind, local.x, local.y, local.label, attrs)
        if not merged.same_content(local):
            replace_ids.append(node.id)
            added_nodes.append(merged)

    after = dict(survivors)
    for n in added_nodes:
        after[n.id] = n
    added_edges = []
    for edge in delta.added_edges:
        if edge in graph.edges and edge.a in after and edge.b in after:
            continue
        if edge.a not in after or edge.b not in after:
            log.debug("merge: skip edge %s-%s with missing endpoint", edge.a, edge.b)
            continue
        try:
            _check_edge_kind(edge, after[edge.a], after[edge.b])
        except KindViolation:
            log.warning("merge: skip kind-violating edge %s-%s", edge.a, edge.b)
            continue
        added_edges.append(edge)
    # Replaced nodes keep their surviving incident edges.
    for node_id in replace_ids:
        for e in graph.edges:
            if e.touches(node_id) and e not in set(removed_edges) and e.other(node_id) in after:
                added_edges.append(e)

    updates = []
    for node_id, patch in delta.updated_nodes:
        if node_id in after:
            updates.append((node_id, dict(patch)))
        else:
            log.debug("merge: skip update of unknown node %s", node_id)

    effective = GraphDelta(
        added_nodes=tuple(added_nodes),
        removed_nodes=tuple(removed_nodes) + tuple(replace_ids),
        added_edges=tuple(dict.fromkeys(added_edges)),
        removed_edges=tuple(removed_edges),
        updated_nodes=tuple(updates),
        sequence=delta.sequence,
    )
    return apply_delta(graph, effective)


# --- canonical JSON codec ---------------------------------------------------

def _node_doc(n: Node) -> dict:
    doc = {"id": n.id, "kind": n.kind, "label": n.label, "x": n.x, "y": n.y}
    if n.attributes:
        doc["attributes"] = n.attributes
    return doc


def _node_from_doc(doc: dict) -> Node:
    try:
        return Node(
            id=str(doc["id"]),
            kind=str(doc["kind"]),
            x=float(doc["x"]),
            y=float(doc["y"]),
            label=str(doc["label"]),
            attributes=dict(doc.get("attributes", {})),
        )
    except (KeyError, TypeError, ValueError, KindViolation) as exc:
        raise SchemaViolation(f"bad node document: {exc}") from exc


def _edge_doc(e: Edge) -> dict:
    return {"a": e.a, "b": e.b, "kind": e.kind}


def _edge_from_doc(doc: dict) -> Edge:
    try:
        return Edge(a=str(doc["a"]), b=str(doc["b"]), kind=str(doc["kind"]))
    except (KeyError, TypeError, ValueError, KindViolation) as exc:
        raise SchemaViolation(f"bad edge document: {exc}") from exc


def serialize(graph: SemanticGraph) -> bytes:
    """Canonical JSON bytes: sorted keys, sorted node/edge lists, compact
    separators, 2-decimal positions.  Equal graphs serialize identically."""
    doc = {
        "origin": [_q(graph.origin[0]), _q(graph.origin[1])],
        "version": graph.version,
        "nodes": [_node_doc(n) for n in sorted(graph.nodes.values(), key=lambda n: n.id)],
        "edges": [_edge_doc(e) for e in sorted(graph.edges)],
    }
    return json.dumps(doc, sort_keys=True, separators=(",", ":"), allow_nan=False).encode()


def deserialize(blob) -> SemanticGraph:
    if isinstance(blob, bytes):
        blob = blob.decode()
    try:
        doc = json.loads(blob)
    except json.JSONDecodeError as exc:
        raise SchemaViolation(f"not JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise SchemaViolation("top level must be an object")
    for key in ("origin", "version", "nodes", "edges"):
        if key not in doc:
            raise SchemaViolation(f"missing key {key!r}")
    origin = doc["origin"]
    if not (isinstance(origin, list) and len(origin) == 2):
        raise SchemaViolation("origin must be [x, y]")
    nodes = {}
    for nd in doc["nodes"]:
        node = _node_from_doc(nd)
        if node.id in nodes:
            raise SchemaViolation(f"duplicate node id {node.id!r}")
        nodes[node.id] = node
    edges = set()
    for ed in doc["edges"]:
        edge = _edge_from_doc(ed)
        if edge.a not in nodes or edge.b not in nodes:
            raise SchemaViolation(f"edge {edge.a}-{edge.b} has missing endpoint")
        try:
            _check_edge_kind(edge, nodes[edge.a], nodes[edge.b])
        except KindViolation as exc:
            raise SchemaViolation(str(exc)) from exc
        edges.add(edge)
    try:
        version = int(doc["version"])
    except (TypeError, ValueError) as exc:
        raise SchemaViolation("version must be an integer") from exc
    return SemanticGraph(nodes, edges, (float(origin[0]), float(origin[1])), version)


# --- queries ----------------------------------------------------------------

def _dist(a: Node, b: Node) -> float:
    return math.hypot(a.x - b.x, a.y - b.y)


def shortest_path(graph: SemanticGraph, src: str, dst: str):
    """Minimum Euclidean-length region path over traversable edges.

    Returns the node-id list, or None when disconnected.  Among equal
    length paths the lexicographically smallest id sequence wins, so the
    result is deterministic across runs and machines.
    """
    for node_id in (src, dst):
        if node_id not in graph.nodes:
            raise UnknownNode(node_id)
        if graph.nodes[node_id].kind != REGION:
            raise NotARegion(node_id)
    adj: dict[str, list[tuple[str, float]]] = {}
    for e in graph.edges:
        if e.kind != TRAVERSABLE:
            continue
        w = _dist(graph.nodes[e.a], graph.nodes[e.b])
        adj.setdefault(e.a, []).append((e.b, w))
        adj.setdefault(e.b, []).append((e.a, w))

    # Heap keyed by (length, path); path tuples break ties lexicographically.
    heap = [(0.0, (src,))]
    done = set()
    while heap:
        dist, path = heapq.heappop(heap)
        head = path[-1]
        if head in done:
            continue
        done.add(head)
        if head == dst:
            return list(path)
        for nxt, w in adj.get(head, ()):
            if nxt not in done:
                heapq.heappush(heap, (dist + w, path + (nxt,)))
    return None


def path_length(graph: SemanticGraph, path) -> float:
    total = 0.0
    for a, b in zip(path, path[1:]):
        total += _dist(graph.nodes[a], graph.nodes[b])
    return total


def nearest_node(graph: SemanticGraph, position, kind=None):
    """Nearest node id by Euclidean distance, optionally filtered by kind.
    Ties break on lexicographic id.  None when no candidate exists."""
    px, py = float(position[0]), float(position[1])
    best = None
    for node in graph.nodes.values():
        if kind is not None and node.kind != kind:
            continue
        key = (math.hypot(node.x - px, node.y - py), node.id)
        if best is None or key < best:
            best = key
    return best[1] if best else None


def validate_graph(graph: SemanticGraph):
    """Raise if structural invariants are broken (test/debug helper)."""
    for e in graph.edges:
        if e.a not in graph.nodes or e.b not in graph.nodes:
            raise DanglingReference(f"edge {e.a}-{e.b} has missing endpoint")
        _check_edge_kind(e, graph.nodes[e.a], graph.nodes[e.b])


class NodeIdAllocator:
    """Generates "<label>_<n>" ids with a robot-unique namespace prefix.

    The aerial mapper gets the empty prefix (its names are the canonical
    ones mission text refers to); ground robots get e.g. "g1.".
    """

    def __init__(self, prefix: str = ""):
        self.prefix = prefix
        self._counters: dict[str, int] = {}

    def next(self, label: str) -> str:
        slug = label.replace(" ", "_")
        n = self._counters.get(slug, 0) + 1
        self._counters[slug] = n
        return f"{self.prefix}{slug}_{n}"
