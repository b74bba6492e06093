"""Synthetic world: scenario config, ground truth, and sensor oracles.

The world is the single source of truth a run draws on.  Everything a
robot perceives comes out of four query functions (render_frame, rssi,
traversable, ugv_sense), all of which consume the one seeded generator
owned by the World, so a (scenario, seed) pair fixes every observation
bit-for-bit.  With all noise rates at zero no random draws happen at all
and the sensor functions are pure.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from shapely.geometry import LineString, Polygon
from shapely.prepared import prep


class ConfigError(Exception):
    pass


@dataclass
class DetectionNoise:
    """Detector imperfection knobs for both cameras.

    false_positive_rate is the expected fraction of emitted detections
    that are spurious (so 0.18 means roughly 82% precision), miss_rate is
    the per-object drop probability per frame.  small_model_mode mimics a
    lightweight onboard segmentation model: jitter triples and false
    positives double.
    """

    false_positive_rate: float = 0.0
    miss_rate: float = 0.0
    mask_dilate_px: int = 0
    mask_erode_px: int = 0
    position_jitter_m: float = 0.0
    small_model_mode: bool = False

    def effective_fp(self) -> float:
        fp = self.false_positive_rate * (2.0 if self.small_model_mode else 1.0)
        return min(fp, 0.95)

    def effective_jitter(self) -> float:
        return self.position_jitter_m * (3.0 if self.small_model_mode else 1.0)

    def to_doc(self) -> dict:
        return {
            "false_positive_rate": self.false_positive_rate,
            "miss_rate": self.miss_rate,
            "mask_dilate_px": self.mask_dilate_px,
            "mask_erode_px": self.mask_erode_px,
            "position_jitter_m": self.position_jitter_m,
            "small_model_mode": self.small_model_mode,
        }


def _square(side: float):
    h = side / 2.0
    return [(-h, -h), (h, -h), (h, h), (-h, h)]


def _circle(radius: float, n: int = 12):
    return [(radius * math.cos(2 * math.pi * k / n), radius * math.sin(2 * math.pi * k / n)) for k in range(n)]


@dataclass
class GroundObject:
    label: str
    x: float
    y: float
    footprint: list = field(default_factory=lambda: _square(1.0))  # vertices relative to (x, y)
    attributes: dict = field(default_factory=dict)
    obstacle: bool = False
    group: str | None = None
    motion: dict | None = None

    def position_at(self, t: float):
        if not self.motion:
            return (self.x, self.y)
        pts = [(self.x, self.y)] + [tuple(p) for p in self.motion.get("waypoints", [])]
        if self.motion.get("loop") and len(pts) > 1:
            pts.append(pts[0])  # a loop is a closed circuit back to the spawn point
        speed = float(self.motion.get("speed", 1.0))
        start = float(self.motion.get("start_t", 0.0))
        if t <= start or speed <= 0 or len(pts) < 2:
            return pts[0]
        legs = []
        total = 0.0
        for a, b in zip(pts, pts[1:]):
            d = math.hypot(b[0] - a[0], b[1] - a[1])
            legs.append((a, b, d))
            total += d
        s = (t - start) * speed
        if self.motion.get("loop") and total > 0:
            s = s % total
        for a, b, d in legs:
            if s <= d or d == 0:
                if d == 0:
                    return a
                f = s / d
                return (a[0] + f * (b[0] - a[0]), a[1] + f * (b[1] - a[1]))
            s -= d
        return pts[-1]

    def active_at(self, t: float) -> bool:
        if not self.motion:
            return True
        lo = self.motion.get("active_from")
        hi = self.motion.get("active_until")
        if lo is not None and t < float(lo):
            return False
        if hi is not None and t >= float(hi):
            return False
        return True


@dataclass
class RoadPath:
    points: list
    width: float = 6.0


@dataclass
class RobotSpec:
    id: str
    role: str  # "uav" | "ugv" | "base"
    x: float = 0.0
    y: float = 0.0
    heading: float = 0.0


@dataclass
class RssiParams:
    p0: float = -40.0
    exponent: float = 2.5
    sigma: float = 0.0
    d0: float = 1.0
    threshold: float = -85.0


@dataclass
class CameraSpec:
    focal_px: float = 128.0
    size_px: int = 128
    altitude: float = 50.0

    @property
    def footprint_m(self) -> float:
        return self.size_px / self.focal_px * self.altitude

    @property
    def ground_pixel_m(self) -> float:
        return self.altitude / self.focal_px


DEFAULT_TIMERS = {"t_init": 300.0, "t_search": 120.0, "t_comm": 60.0, "t_explore": 180.0}
DEFAULT_SPEEDS = {"uav": 10.0, "ugv": 1.5}


@dataclass
class ScenarioConfig:
    name: str = "unnamed"
    bounds: tuple = (-100.0, -100.0, 100.0, 100.0)
    seed: int = 0
    base: tuple = (0.0, 0.0)
    objects: list = field(default_factory=list)
    roads: list = field(default_factory=list)
    obstacles: list = field(default_factory=list)  # absolute polygons
    barriers: list = field(default_factory=list)  # thin segments
    robots: list = field(default_factory=list)
    noise: DetectionNoise = field(default_factory=DetectionNoise)
    rssi: RssiParams = field(default_factory=RssiParams)
    camera: CameraSpec = field(default_factory=CameraSpec)
    timers: dict = field(default_factory=lambda: dict(DEFAULT_TIMERS))
    speeds: dict = field(default_factory=lambda: dict(DEFAULT_SPEEDS))
    comms: dict = field(default_factory=lambda: {"byte_budget": 32768})
    prior_graph: dict | None = None
    extras: dict = field(default_factory=dict)

    def validate(self):
        xmin, ymin, xmax, ymax = self.bounds
        if not (xmin < xmax and ymin < ymax):
            raise ConfigError("bounds must satisfy xmin<xmax and ymin<ymax")
        roles = {"uav", "ugv", "base"}
        seen = set()
        for r in self.robots:
            if r.role not in roles:
                raise ConfigError(f"robot {r.id}: bad role {r.role!r}")
            if r.id in seen:
                raise ConfigError(f"duplicate robot id {r.id!r}")
            seen.add(r.id)
        for o in self.objects:
            if not o.label:
                raise ConfigError("object with empty label")
            if len(o.footprint) < 3:
                raise ConfigError(f"object {o.label}: footprint needs >= 3 vertices")
        for rd in self.roads:
            if len(rd.points) < 2:
                raise ConfigError("road needs >= 2 points")
            if rd.width <= 0:
                raise ConfigError("road width must be positive")
        for poly in self.obstacles:
            if len(poly) < 3:
                raise ConfigError("obstacle polygon needs >= 3 vertices")
        for seg in self.barriers:
            if len(seg) != 2:
                raise ConfigError("barrier must be a 2-point segment")
        return self

    def to_json(self) -> str:
        fl = lambda seq: [float(v) for v in seq]  # noqa: E731
        doc = {
            "name": self.name,
            "bounds": fl(self.bounds),
            "seed": self.seed,
            "base": fl(self.base),
            "objects": [
                {
                    "label": o.label,
                    "x": float(o.x),
                    "y": float(o.y),
                    "footprint": [fl(v) for v in o.footprint],
                    "attributes": o.attributes,
                    "obstacle": o.obstacle,
                    "group": o.group,
                    "motion": o.motion,
                }
                for o in self.objects
            ],
            "roads": [{"points": [fl(p) for p in rd.points], "width": float(rd.width)} for rd in self.roads],
            "obstacles": [[fl(v) for v in poly] for poly in self.obstacles],
            "barriers": [[fl(p) for p in seg] for seg in self.barriers],
            "robots": [
                {"id": r.id, "role": r.role, "x": float(r.x), "y": float(r.y), "heading": float(r.heading)}
                for r in self.robots
            ],
            "noise": self.noise.to_doc(),
            "rssi": {
                "p0": self.rssi.p0,
                "exponent": self.rssi.exponent,
                "sigma": self.rssi.sigma,
                "d0": self.rssi.d0,
                "threshold": self.rssi.threshold,
            },
            "camera": {
                "focal_px": self.camera.focal_px,
                "size_px": self.camera.size_px,
                "altitude": self.camera.altitude,
            },
            "timers": self.timers,
            "speeds": self.speeds,
            "comms": self.comms,
            "prior_graph": self.prior_graph,
            "extras": self.extras,
        }
        return json.dumps(doc, indent=2, sort_keys=True)

    @staticmethod
    def from_doc(doc: dict) -> "ScenarioConfig":
        try:
            objects = []
            for od in doc.get("objects", []):
                fp = od.get("footprint")
                if fp is None:
                    fp = _square(1.0)
                elif isinstance(fp, dict):
                    fp = _circle(float(fp["radius"])) if "radius" in fp else _square(float(fp["side"]))
                else:
                    fp = [tuple(map(float, v)) for v in fp]
                objects.append(
                    GroundObject(
                        label=str(od["label"]),
                        x=float(od["x"]),
                        y=float(od["y"]),
                        footprint=fp,
                        attributes=dict(od.get("attributes", {})),
                        obstacle=bool(od.get("obstacle", False)),
                        group=od.get("group"),
                        motion=od.get("motion"),
                    )
                )
            cfg = ScenarioConfig(
                name=str(doc.get("name", "unnamed")),
                bounds=tuple(map(float, doc.get("bounds", (-100, -100, 100, 100)))),
                seed=int(doc.get("seed", 0)),
                base=tuple(map(float, doc.get("base", (0, 0)))),
                objects=objects,
                roads=[RoadPath([tuple(map(float, p)) for p in rd["points"]], float(rd.get("width", 6.0))) for rd in doc.get("roads", [])],
                obstacles=[[tuple(map(float, v)) for v in poly] for poly in doc.get("obstacles", [])],
                barriers=[[tuple(map(float, p)) for p in seg] for seg in doc.get("barriers", [])],
                robots=[
                    RobotSpec(str(r["id"]), str(r["role"]), float(r.get("x", 0)), float(r.get("y", 0)), float(r.get("heading", 0)))
                    for r in doc.get("robots", [])
                ],
                noise=DetectionNoise(**doc.get("noise", {})),
                rssi=RssiParams(**doc.get("rssi", {})),
                camera=CameraSpec(**doc.get("camera", {})),
                timers={**DEFAULT_TIMERS, **doc.get("timers", {})},
                speeds={**DEFAULT_SPEEDS, **doc.get("speeds", {})},
                comms={"byte_budget": 32768, **doc.get("comms", {})},
                prior_graph=doc.get("prior_graph"),
                extras=dict(doc.get("extras", {})),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"bad scenario document: {exc}") from exc
        return cfg.validate()

    @staticmethod
    def from_json(text: str) -> "ScenarioConfig":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"scenario is not valid JSON: {exc}") from exc
        return ScenarioConfig.from_doc(doc)

    @staticmethod
    def load(path) -> "ScenarioConfig":
        with open(path) as fh:
            return ScenarioConfig.from_json(fh.read())


# --- camera geometry ---------------------------------------------------------

@dataclass
class CameraPose:
    x: float
    y: float
    heading: float
    altitude: float


class CameraModel:
    """Nadir pinhole camera.  Rows run against the flight direction, so the
    image top is whatever the robot is heading toward."""

    def __init__(self, pose: CameraPose, focal_px: float, size_px: int):
        self.pose = pose
        self.focal_px = float(focal_px)
        self.size_px = int(size_px)
        th = pose.heading
        self._fwd = (math.cos(th), math.sin(th))
        self._right = (math.sin(th), -math.cos(th))
        self.scale = self.focal_px / pose.altitude  # px per meter
        self.ground_pixel = pose.altitude / self.focal_px

    @property
    def footprint_m(self) -> float:
        return self.size_px / self.focal_px * self.pose.altitude

    def world_to_pixel(self, x, y):
        dx, dy = x - self.pose.x, y - self.pose.y
        u = dx * self._right[0] + dy * self._right[1]
        v = dx * self._fwd[0] + dy * self._fwd[1]
        c = (self.size_px - 1) / 2.0 + u * self.scale
        r = (self.size_px - 1) / 2.0 - v * self.scale
        return r, c

    def pixel_to_world(self, r, c):
        u = (c - (self.size_px - 1) / 2.0) / self.scale
        v = ((self.size_px - 1) / 2.0 - r) / self.scale
        x = self.pose.x + u * self._right[0] + v * self._fwd[0]
        y = self.pose.y + u * self._right[1] + v * self._fwd[1]
        return x, y

    def pixel_grid_world(self):
        rr, cc = np.meshgrid(np.arange(self.size_px), np.arange(self.size_px), indexing="ij")
        u = (cc - (self.size_px - 1) / 2.0) / self.scale
        v = ((self.size_px - 1) / 2.0 - rr) / self.scale
        x = self.pose.x + u * self._right[0] + v * self._fwd[0]
        y = self.pose.y + u * self._right[1] + v * self._fwd[1]
        return x, y


@dataclass
class BlobTruth:
    label: str
    spurious: bool
    x: float
    y: float


@dataclass
class CameraFrame:
    pose: CameraPose
    focal_px: float
    size_px: int
    masks: dict  # label -> bool ndarray (size_px, size_px)
    truth: list = field(default_factory=list)  # BlobTruth, test/calibration channel

    @property
    def camera(self) -> CameraModel:
        return CameraModel(self.pose, self.focal_px, self.size_px)


def _fill_polygon(mask, verts_rc):
    """Even-odd rasterization of a polygon given (row, col) vertices."""
    n = mask.shape[0]
    rows = [v[0] for v in verts_rc]
    cols = [v[1] for v in verts_rc]
    r0 = max(0, int(math.floor(min(rows))))
    r1 = min(n - 1, int(math.ceil(max(rows))))
    c0 = max(0, int(math.floor(min(cols))))
    c1 = min(n - 1, int(math.ceil(max(cols))))
    if r1 < r0 or c1 < c0:
        return
    rr, cc = np.meshgrid(np.arange(r0, r1 + 1), np.arange(c0, c1 + 1), indexing="ij")
    inside = np.zeros(rr.shape, dtype=bool)
    m = len(verts_rc)
    for i in range(m):
        ra, ca = verts_rc[i]
        rb, cb = verts_rc[(i + 1) % m]
        if ra == rb:
            continue
        cond = (rr >= min(ra, rb)) & (rr < max(ra, rb))
        cx = ca + (rr - ra) * (cb - ca) / (rb - ra)
        inside ^= cond & (cc <= cx)
    mask[r0 : r1 + 1, c0 : c1 + 1] |= inside


class World:
    def __init__(self, scenario: ScenarioConfig):
        scenario.validate()
        self.scenario = scenario
        self.rng = np.random.default_rng(scenario.seed)
        self.t = 0.0
        self._static_blockers = []
        for poly in scenario.obstacles:
            self._static_blockers.append(Polygon(poly))
        for seg in scenario.barriers:
            self._static_blockers.append(LineString(seg))
        self._static_objects = []
        self._dynamic_obstacles = []
        for o in scenario.objects:
            if o.obstacle and o.motion is None:
                self._static_blockers.append(Polygon([(o.x + vx, o.y + vy) for vx, vy in o.footprint]))
            elif o.obstacle:
                self._dynamic_obstacles.append(o)
        self._prepared = [prep(g) for g in self._static_blockers]
        self._dynamic_geoms = []
        self.step(0.0)

    # --- time ---------------------------------------------------------------

    def step(self, t: float):
        """Advance world time; repositions scripted movers."""
        self.t = float(t)
        self._dynamic_geoms = []
        for o in self._dynamic_obstacles:
            if not o.active_at(self.t):
                continue
            px, py = o.position_at(self.t)
            self._dynamic_geoms.append(Polygon([(px + vx, py + vy) for vx, vy in o.footprint]))

    def object_positions(self, label=None):
        out = []
        for o in self.scenario.objects:
            if label is None or o.label == label:
                out.append((o, o.position_at(self.t)))
        return out

    # --- radio --------------------------------------------------------------

    def rssi(self, a, b) -> float:
        p = self.scenario.rssi
        d = math.hypot(a[0] - b[0], a[1] - b[1])
        value = p.p0 - 10.0 * p.exponent * math.log10(max(d, 1.0) / p.d0)
        if p.sigma > 0:
            value += float(self.rng.normal(0.0, p.sigma))
        return value

    # --- ground traversability ----------------------------------------------

    def in_bounds(self, p) -> bool:
        xmin, ymin, xmax, ymax = self.scenario.bounds
        return xmin <= p[0] <= xmax and ymin <= p[1] <= ymax

    def traversable(self, a, b, vehicle: str = "ugv") -> bool:
        """True iff the straight segment a-b is drivable: inside bounds and
        crossing no obstacle polygon, barrier segment, or active mover."""
        if vehicle == "uav":
            return self.in_bounds(a) and self.in_bounds(b)
        if not (self.in_bounds(a) and self.in_bounds(b)):
            return False
        seg = LineString([a, b])
        for pg in self._prepared:
            if pg.intersects(seg):
                return False
        for g in self._dynamic_geoms:
            if g.intersects(seg):
                return False
        return True

    # --- aerial camera --------------------------------------------------------

    def render_frame(self, pose: CameraPose, labels, noise: DetectionNoise | None = None) -> CameraFrame:
        noise = noise if noise is not None else self.scenario.noise
        cam = CameraModel(pose, self.scenario.camera.focal_px, self.scenario.camera.size_px)
        n = cam.size_px
        half = cam.footprint_m / 2.0
        margin = half * math.sqrt(2) + 10.0  # cull objects that cannot touch the frame
        masks = {}
        truth = []
        fp_rate = noise.effective_fp()
        fp_odds = fp_rate / (1.0 - fp_rate) if fp_rate > 0 else 0.0
        jitter = noise.effective_jitter()

        for label in sorted(set(labels)):
            mask = np.zeros((n, n), dtype=bool)
            if label == "road":
                self._rasterize_roads(mask, cam)
            else:
                for o in self.scenario.objects:
                    if o.label != label:
                        continue
                    ox, oy = o.position_at(self.t)
                    if abs(ox - pose.x) > margin or abs(oy - pose.y) > margin:
                        continue
                    if noise.miss_rate > 0 and self.rng.random() < noise.miss_rate:
                        continue
                    dx = dy = 0.0
                    if jitter > 0:
                        dx, dy = self.rng.normal(0.0, jitter, 2)
                    verts = [cam.world_to_pixel(ox + dx + vx, oy + dy + vy) for vx, vy in o.footprint]
                    if self._bbox_in_frame(verts, n):
                        _fill_polygon(mask, verts)
                        truth.append(BlobTruth(label, False, ox + dx, oy + dy))
                        if fp_odds > 0 and self.rng.random() < fp_odds:
                            self._inject_spurious(mask, cam, label, truth)
            if noise.mask_dilate_px > 0:
                mask = ndimage.binary_dilation(mask, iterations=noise.mask_dilate_px)
            if noise.mask_erode_px > 0:
                mask = ndimage.binary_erosion(mask, iterations=noise.mask_erode_px)
            masks[label] = mask
        return CameraFrame(pose, cam.focal_px, n, masks, truth)

    @staticmethod
    def _bbox_in_frame(verts_rc, n) -> bool:
        rows = [v[0] for v in verts_rc]
        cols = [v[1] for v in verts_rc]
        return max(rows) >= 0 and min(rows) < n and max(cols) >= 0 and min(cols) < n

    def _rasterize_roads(self, mask, cam):
        gx, gy = cam.pixel_grid_world()
        for rd in self.scenario.roads:
            hw = rd.width / 2.0
            for a, b in zip(rd.points, rd.points[1:]):
                ax, ay = a
                bx, by = b
                ex, ey = bx - ax, by - ay
                L2 = ex * ex + ey * ey
                if L2 == 0:
                    continue
                lo_x, hi_x = min(ax, bx) - hw, max(ax, bx) + hw
                lo_y, hi_y = min(ay, by) - hw, max(ay, by) + hw
                if (
                    hi_x < gx.min() or lo_x > gx.max() or hi_y < gy.min() or lo_y > gy.max()
                ):
                    continue
                tt = ((gx - ax) * ex + (gy - ay) * ey) / L2
                tt = np.clip(tt, 0.0, 1.0)
                px = ax + tt * ex
                py = ay + tt * ey
                d2 = (gx - px) ** 2 + (gy - py) ** 2
                mask |= d2 <= hw * hw

    def _inject_spurious(self, mask, cam, label, truth):
        n = cam.size_px
        r = self.rng.uniform(0, n - 1)
        c = self.rng.uniform(0, n - 1)
        wx, wy = cam.pixel_to_world(r, c)
        donors = [o for o in self.scenario.objects if o.label == label] or self.scenario.objects
        if not donors:
            return
        donor = donors[int(self.rng.integers(0, len(donors)))]
        verts = [cam.world_to_pixel(wx + vx, wy + vy) for vx, vy in donor.footprint]
        _fill_polygon(mask, verts)
        truth.append(BlobTruth(label, True, wx, wy))

    # --- ground sensing --------------------------------------------------------

    def ugv_sense(self, pose, labels, noise: DetectionNoise | None = None, sense_range=15.0, fov_deg=110.0, occupancy=False):
        """Detections of labeled objects in the forward field of view, plus an
        optional local occupancy patch (0.5 m cells, 10 m radius)."""
        noise = noise if noise is not None else self.scenario.noise
        x, y, heading = pose
        jitter = noise.effective_jitter()
        half_fov = math.radians(fov_deg) / 2.0
        wanted = set(labels)
        detections = []
        for o in self.scenario.objects:
            if o.label not in wanted:
                continue
            ox, oy = o.position_at(self.t)
            d = math.hypot(ox - x, oy - y)
            if d > sense_range:
                continue
            bearing = math.atan2(oy - y, ox - x) - heading
            bearing = (bearing + math.pi) % (2 * math.pi) - math.pi
            if abs(bearing) > half_fov:
                continue
            if noise.miss_rate > 0 and self.rng.random() < noise.miss_rate:
                continue
            dx = dy = 0.0
            if jitter > 0:
                dx, dy = self.rng.normal(0.0, jitter, 2)
            detections.append(
                Detection(
                    label=o.label,
                    x=ox + dx,
                    y=oy + dy,
                    range=d,
                    bearing=bearing,
                    truth=o,
                )
            )
        patch = self._occupancy_patch((x, y)) if occupancy else None
        return detections, patch

    def _occupancy_patch(self, center, radius=10.0, cell=0.5):
        n = int(round(2 * radius / cell)) + 1
        grid = np.zeros((n, n), dtype=bool)
        geoms = self._static_blockers + self._dynamic_geoms
        near = []
        cx, cy = center
        for g in geoms:
            minx, miny, maxx, maxy = g.bounds
            if maxx < cx - radius or minx > cx + radius or maxy < cy - radius or miny > cy + radius:
                continue
            near.append(g)
        if not near:
            return grid
        from shapely.geometry import Point

        for i in range(n):
            for j in range(n):
                px = cx - radius + j * cell
                py = cy - radius + i * cell
                p = Point(px, py)
                if any(g.distance(p) <= cell / 2 for g in near):
                    grid[i, j] = True
        return grid

    def annotation_near(self, position, max_dist=5.0):
        """Ground-truth attributes of the closest object, used by the canned
        inspection caption (the stand-in for a vision-language query)."""
        best = None
        for o in self.scenario.objects:
            ox, oy = o.position_at(self.t)
            d = math.hypot(ox - position[0], oy - position[1])
            if d <= max_dist and (best is None or d < best[0]):
                best = (d, o)
        return best[1] if best else None


@dataclass
class Detection:
    label: str
    x: float
    y: float
    range: float
    bearing: float
    truth: GroundObject | None = None
