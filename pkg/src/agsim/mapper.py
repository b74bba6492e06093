"""Aerial semantic mapping: pose fusion, mask distillation, graph growth.

Per frame the mapper reduces each requested class mask to one candidate
point per connected blob (the pixel furthest from the blob boundary, a
stable interior point), gates a road region on mask area, and folds the
candidates into the shared graph with running-mean deduplication.  The
output is a GraphDelta per frame, which is also exactly what goes out
over the radio.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from . import semgraph as sg
from .world import CameraFrame

EIGHT = np.ones((3, 3), dtype=int)

NEGATIVE_LABELS = ("building", "car")


class NoFixYet(Exception):
    """pose_at called before any accepted fix."""


class PoseFusion:
    """Dead-reckoning position filter with a 2-sigma innovation gate.

    State is the last accepted fix plus a smoothed velocity; predicted
    position extrapolates linearly.  A fix farther than k*sigma from the
    prediction is rejected and sigma inflates by 10%, so a burst of bad
    fixes cannot drag the estimate but a genuine jump is eventually
    re-accepted once the gate has widened.
    """

    def __init__(self, sigma: float = 1.0, k: float = 2.0, inflation: float = 1.1, velocity_alpha: float = 0.5):
        if sigma <= 0:
            raise ValueError("sigma must be positive")
        self.base_sigma = float(sigma)
        self.sigma = float(sigma)
        self.k = float(k)
        self.inflation = float(inflation)
        self.alpha = float(velocity_alpha)
        self.pos = None
        self.t = None
        self.vel = (0.0, 0.0)
        self.accepted = 0
        self.rejected = 0

    def predict(self, t: float):
        if self.pos is None:
            raise NoFixYet("no accepted fix")
        dt = t - self.t
        return (self.pos[0] + self.vel[0] * dt, self.pos[1] + self.vel[1] * dt)

    pose_at = predict

    def gate(self, t: float, fix) -> bool:
        """Feed one fix; returns True when accepted."""
        fx, fy = float(fix[0]), float(fix[1])
        if self.pos is None:
            self._accept(t, fx, fy, first=True)
            return True
        px, py = self.predict(t)
        if math.hypot(fx - px, fy - py) <= self.k * self.sigma:
            self._accept(t, fx, fy)
            return True
        self.rejected += 1
        self.sigma *= self.inflation
        return False

    def _accept(self, t, fx, fy, first=False):
        if not first and t > self.t:
            dt = t - self.t
            raw = ((fx - self.pos[0]) / dt, (fy - self.pos[1]) / dt)
            a = self.alpha
            self.vel = (a * raw[0] + (1 - a) * self.vel[0], a * raw[1] + (1 - a) * self.vel[1])
        self.pos = (fx, fy)
        self.t = t
        self.sigma = self.base_sigma
        self.accepted += 1


# --- mask distillation --------------------------------------------------------

def interior_point(component: np.ndarray):
    """Pixel of a boolean blob furthest from the blob boundary.

    The image edge counts as boundary (the blob may continue off-frame and
    we should not anchor there).  Ties break on smallest row, then column.
    Returns ((row, col), distance_px).
    """
    padded = np.pad(component, 1)
    dist = ndimage.distance_transform_edt(padded)
    # Squared distances on a pixel grid are integers; compare those so tie
    # detection is exact rather than float-fuzzy.
    d2 = np.rint(dist * dist).astype(np.int64)[1:-1, 1:-1]
    flat = int(np.argmax(d2))  # first max in C order == smallest row, then col
    r, c = divmod(flat, component.shape[1])
    return (r, c), math.sqrt(float(d2[r, c]))


def mask_components(mask: np.ndarray):
    """8-connected components as individual boolean arrays."""
    labeled, n = ndimage.label(mask, structure=EIGHT)
    return [(labeled == i) for i in range(1, n + 1)]


@dataclass
class Candidate:
    label: str
    x: float
    y: float
    kind: str  # semgraph node kind


def extract_objects(frame: CameraFrame, active_labels) -> list:
    """One world-frame candidate per blob per requested object class."""
    cam = frame.camera
    out = []
    for label in sorted(set(active_labels)):
        if label == "road":
            continue
        mask = frame.masks.get(label)
        if mask is None or not mask.any():
            continue
        for comp in mask_components(mask):
            (r, c), _ = interior_point(comp)
            x, y = cam.pixel_to_world(r, c)
            out.append(Candidate(label, x, y, sg.OBJECT))
    return out


def extract_region(frame: CameraFrame, gate_fraction: float = 0.20, negative_labels=NEGATIVE_LABELS):
    """Road-region candidate, or None when the gate fails.

    Takes the largest connected road component, subtracts pixels claimed by
    the negative classes, and requires the remainder to cover strictly more
    than gate_fraction of the image.  The candidate is the interior point
    of the remainder.
    """
    mask = frame.masks.get("road")
    if mask is None or not mask.any():
        return None
    comps = mask_components(mask)
    largest = max(comps, key=lambda m: int(m.sum()))
    remainder = largest.copy()
    for neg in negative_labels:
        nm = frame.masks.get(neg)
        if nm is not None:
            remainder &= ~nm
    total = mask.shape[0] * mask.shape[1]
    if int(remainder.sum()) <= gate_fraction * total:
        return None
    if not remainder.any():
        return None
    (r, c), _ = interior_point(remainder)
    x, y = frame.camera.pixel_to_world(r, c)
    return Candidate("road", x, y, sg.REGION)


# --- graph integration ----------------------------------------------------------

@dataclass
class _Track:
    node_id: str
    label: str
    sum_x: float
    sum_y: float
    n: int

    @property
    def mean(self):
        return (self.sum_x / self.n, self.sum_y / self.n)


@dataclass
class MapperConfig:
    r_merge_object: float = 3.0
    r_merge_region: float = 8.0
    r_chain_m: float = 22.0
    move_patch_m: float = 0.5
    region_gate: float = 0.20
    negative_labels: tuple = NEGATIVE_LABELS


class AerialMapper:
    """Owns the UAV-side graph and the per-label registries behind dedup."""

    def __init__(self, config: MapperConfig | None = None, origin=(0.0, 0.0), id_prefix: str = ""):
        self.config = config or MapperConfig()
        self.graph = sg.empty_graph(origin)
        self.alloc = sg.NodeIdAllocator(id_prefix)
        self.active_labels: set[str] = set()
        self._objects: dict[str, list[_Track]] = {}
        self._regions: list[_Track] = []
        self._sequence = 0

    def set_labels(self, labels):
        """Replace the active object classes; effective from the next frame."""
        self.active_labels = set(labels)

    def frame_labels(self):
        return sorted(self.active_labels | {"road"})

    def process_frame(self, frame: CameraFrame) -> sg.GraphDelta | None:
        candidates = []
        region = extract_region(frame, self.config.region_gate, self.config.negative_labels)
        if region is not None:
            candidates.append(region)
        candidates.extend(extract_objects(frame, self.active_labels))
        return self.integrate(candidates)

    def integrate(self, candidates) -> sg.GraphDelta | None:
        """Fold candidates into the graph; returns the delta or None.

        Region candidates dedup against existing regions within
        r_merge_region and otherwise chain to the nearest region.  Object
        candidates dedup per label within r_merge_object with a running
        mean; when the mean drifts past move_patch_m the node is replaced
        in place (same id) and keeps an observable edge.
        """
        added_nodes = []
        removed_nodes = []
        added_edges = []
        staged = {}  # id -> Node staged this delta

        def regions_now():
            out = [(n.id, n.x, n.y) for n in self.graph.regions()]
            out += [(n.id, n.x, n.y) for n in staged.values() if n.kind == sg.REGION]
            return out

        def nearest_region(x, y, exclude=None):
            best = None
            for rid, rx, ry in regions_now():
                if rid == exclude:
                    continue
                key = (math.hypot(rx - x, ry - y), rid)
                if best is None or key < best:
                    best = key
            return best[1] if best else None

        for cand in [c for c in candidates if c.kind == sg.REGION]:
            track = self._match(self._regions, cand, self.config.r_merge_region)
            if track is not None:
                track.sum_x += cand.x
                track.sum_y += cand.y
                track.n += 1
                continue  # regions never move once placed; edges stay stable
            node_id = self.alloc.next(cand.label)
            node = sg.Node(node_id, sg.REGION, cand.x, cand.y, cand.label)
            staged[node_id] = node
            added_nodes.append(node)
            # Chain to the nearest region no matter how far (keeps the graph
            # in one piece) and to every region close enough to be the same
            # stretch of road; sweep order rarely discovers a road in order.
            links = set()
            link = nearest_region(cand.x, cand.y, exclude=node_id)
            if link is not None:
                links.add(link)
            for rid, rx, ry in regions_now():
                if rid != node_id and math.hypot(rx - cand.x, ry - cand.y) <= self.config.r_chain_m:
                    links.add(rid)
            for rid in sorted(links):
                added_edges.append(sg.Edge(node_id, rid, sg.TRAVERSABLE))
            self._regions.append(_Track(node_id, cand.label, cand.x, cand.y, 1))

        for cand in [c for c in candidates if c.kind == sg.OBJECT]:
            tracks = self._objects.setdefault(cand.label, [])
            track = self._match(tracks, cand, self.config.r_merge_object)
            if track is not None:
                track.sum_x += cand.x
                track.sum_y += cand.y
                track.n += 1
                if track.node_id in staged:
                    continue  # already rewritten this frame
                node = self.graph.nodes.get(track.node_id)
                if node is None:
                    continue
                mx, my = track.mean
                if math.hypot(mx - node.x, my - node.y) > self.config.move_patch_m:
                    moved = sg.Node(node.id, sg.OBJECT, mx, my, node.label, node.attributes)
                    removed_nodes.append(node.id)
                    added_nodes.append(moved)
                    staged[node.id] = moved
                    link = nearest_region(mx, my)
                    if link is not None:
                        added_edges.append(sg.Edge(node.id, link, sg.OBSERVABLE))
                continue
            node_id = self.alloc.next(cand.label)
            node = sg.Node(node_id, sg.OBJECT, cand.x, cand.y, cand.label)
            staged[node_id] = node
            added_nodes.append(node)
            link = nearest_region(cand.x, cand.y)
            if link is not None:
                added_edges.append(sg.Edge(node_id, link, sg.OBSERVABLE))
            tracks.append(_Track(node_id, cand.label, cand.x, cand.y, 1))

        if not (added_nodes or removed_nodes or added_edges):
            return None
        self._sequence += 1
        delta = sg.GraphDelta(
            added_nodes=tuple(added_nodes),
            removed_nodes=tuple(removed_nodes),
            added_edges=tuple(added_edges),
            sequence=self._sequence,
        )
        self.graph = sg.apply_delta(self.graph, delta)
        return delta

    def ingest_remote(self, deltas):
        """Fold peer deltas (e.g. ground-robot map corrections) into the
        aerial graph so later planning sees them."""
        self.graph = sg.merge_remote(self.graph, deltas)

    @staticmethod
    def _match(tracks, cand, radius):
        best = None
        for tr in tracks:
            mx, my = tr.mean
            d = math.hypot(mx - cand.x, my - cand.y)
            if d <= radius and (best is None or (d, tr.node_id) < best[:2]):
                best = (d, tr.node_id, tr)
        return best[2] if best else None
