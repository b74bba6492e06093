from __future__ import annotations

import json
import math
import random

import numpy as np
import pytest

from agsim import world as w


def flat_scenario(**kw):
    defaults = dict(
        name="flat",
        bounds=(-200, -200, 200, 200),
        seed=3,
        objects=[
            w.GroundObject("barrel", 10.0, 5.0, footprint=w._square(1.2), attributes={"color": "blue"}),
            w.GroundObject("car", -20.0, 12.0, footprint=w._square(3.0)),
            w.GroundObject("person", 14.0, -9.0, footprint=w._circle(0.4)),
        ],
        roads=[w.RoadPath([(-150.0, 0.0), (150.0, 0.0)], width=8.0)],
    )
    defaults.update(kw)
    return w.ScenarioConfig(**defaults)


def nadir(x, y, heading=0.0, alt=50.0):
    return w.CameraPose(x, y, heading, alt)


# --- camera geometry ---------------------------------------------------------

def test_pixel_world_round_trip():
    cam = w.CameraModel(nadir(100.0, 200.0, heading=0.8), 128.0, 128)
    for r, c in [(0, 0), (63.5, 63.5), (12.25, 100.0), (127, 127)]:
        x, y = cam.pixel_to_world(r, c)
        r2, c2 = cam.world_to_pixel(x, y)
        assert abs(r2 - r) < 1e-9 and abs(c2 - c) < 1e-9


def test_center_pixel_is_camera_position():
    cam = w.CameraModel(nadir(100.0, 200.0, heading=1.3), 128.0, 128)
    x, y = cam.pixel_to_world((128 - 1) / 2, (128 - 1) / 2)
    assert math.hypot(x - 100.0, y - 200.0) < 1e-9


def test_footprint_formula():
    cam = w.CameraSpec(focal_px=128.0, size_px=128, altitude=50.0)
    assert cam.footprint_m == pytest.approx(128 / 128 * 50)
    assert cam.ground_pixel_m == pytest.approx(50 / 128)


# --- rendering ---------------------------------------------------------------

def test_zero_noise_render_is_pure_and_consumes_no_randomness():
    world = w.World(flat_scenario())
    state_before = json.dumps(world.rng.bit_generator.state, sort_keys=True, default=str)
    f1 = world.render_frame(nadir(10, 5), ["barrel", "road"])
    f2 = world.render_frame(nadir(10, 5), ["barrel", "road"])
    state_after = json.dumps(world.rng.bit_generator.state, sort_keys=True, default=str)
    assert state_before == state_after
    for label in ("barrel", "road"):
        assert np.array_equal(f1.masks[label], f2.masks[label])
    assert f1.masks["barrel"].any()


def test_mask_centroid_reprojects_to_object_position():
    # Projective oracle: with zero noise the blob centroid must land within
    # one ground-sample distance of the true object position.
    world = w.World(flat_scenario())
    pose = nadir(8.0, 2.0, heading=0.7)
    frame = world.render_frame(pose, ["barrel"])
    mask = frame.masks["barrel"]
    assert mask.any()
    rows, cols = np.nonzero(mask)
    cam = frame.camera
    x, y = cam.pixel_to_world(rows.mean(), cols.mean())
    assert math.hypot(x - 10.0, y - 5.0) <= cam.ground_pixel + 1e-6


def test_object_outside_frame_absent():
    world = w.World(flat_scenario())
    frame = world.render_frame(nadir(150.0, 150.0), ["barrel"])
    assert not frame.masks["barrel"].any()
    assert frame.truth == []


def test_same_seed_bit_identical_sequences():
    noisy = dict(noise=w.DetectionNoise(false_positive_rate=0.2, miss_rate=0.1, position_jitter_m=0.5))
    w1 = w.World(flat_scenario(**noisy))
    w2 = w.World(flat_scenario(**noisy))
    poses = [nadir(5.0 * i, 3.0) for i in range(10)]
    for pose in poses:
        f1 = w1.render_frame(pose, ["barrel", "car"])
        f2 = w2.render_frame(pose, ["barrel", "car"])
        for label in f1.masks:
            assert np.array_equal(f1.masks[label], f2.masks[label])
        assert [(b.label, b.spurious, b.x, b.y) for b in f1.truth] == [
            (b.label, b.spurious, b.x, b.y) for b in f2.truth
        ]
        assert w1.rssi((0, 0), (40, 0)) == w2.rssi((0, 0), (40, 0))


def test_road_mask_matches_corridor_distance():
    world = w.World(flat_scenario())
    frame = world.render_frame(nadir(0.0, 0.0, heading=0.3), ["road"])
    mask = frame.masks["road"]
    cam = frame.camera
    rng = random.Random(1)
    for _ in range(200):
        r = rng.randrange(0, 128)
        c = rng.randrange(0, 128)
        x, y = cam.pixel_to_world(r, c)
        dist_to_centerline = abs(y)  # road is the x axis
        if dist_to_centerline < 4.0 - cam.ground_pixel:
            assert mask[r, c]
        elif dist_to_centerline > 4.0 + cam.ground_pixel:
            assert not mask[r, c]


def test_miss_rate_drops_expected_fraction():
    scn = flat_scenario(noise=w.DetectionNoise(miss_rate=0.1))
    world = w.World(scn)
    hits = 0
    for _ in range(1000):
        frame = world.render_frame(nadir(10, 5), ["barrel"])
        hits += int(frame.masks["barrel"].any())
    assert 870 <= hits <= 930  # ~900 +- 3 sigma


def test_false_positive_truth_channel_and_rate():
    scn = flat_scenario(noise=w.DetectionNoise(false_positive_rate=0.18))
    world = w.World(scn)
    true_n = fp_n = 0
    for i in range(600):
        frame = world.render_frame(nadir(10, 5), ["barrel"])
        for b in frame.truth:
            fp_n += int(b.spurious)
            true_n += int(not b.spurious)
    frac = fp_n / (fp_n + true_n)
    assert 0.14 <= frac <= 0.22
    # zero rate -> no spurious blobs ever
    clean = w.World(flat_scenario())
    frame = clean.render_frame(nadir(10, 5), ["barrel"])
    assert not any(b.spurious for b in frame.truth)


def test_small_model_mode_scales_noise():
    n = w.DetectionNoise(false_positive_rate=0.1, position_jitter_m=0.2, small_model_mode=True)
    assert n.effective_fp() == pytest.approx(0.2)
    assert n.effective_jitter() == pytest.approx(0.6)
    plain = w.DetectionNoise(false_positive_rate=0.1, position_jitter_m=0.2)
    assert plain.effective_fp() == pytest.approx(0.1)
    assert plain.effective_jitter() == pytest.approx(0.2)


def test_dilation_and_erosion_change_blob_area():
    base = w.World(flat_scenario()).render_frame(nadir(10, 5), ["barrel"]).masks["barrel"].sum()
    fat = w.World(flat_scenario(noise=w.DetectionNoise(mask_dilate_px=2))).render_frame(
        nadir(10, 5), ["barrel"]
    ).masks["barrel"].sum()
    thin = w.World(flat_scenario(noise=w.DetectionNoise(mask_erode_px=1))).render_frame(
        nadir(10, 5), ["barrel"]
    ).masks["barrel"].sum()
    assert fat > base > thin


# --- rssi ---------------------------------------------------------------------

def test_rssi_log_distance_formula():
    world = w.World(flat_scenario())
    for d in (1.0, 10.0, 63.0957, 100.0):
        got = world.rssi((0.0, 0.0), (d, 0.0))
        want = -40.0 - 10 * 2.5 * math.log10(max(d, 1.0) / 1.0)
        assert got == pytest.approx(want, abs=1e-9)
    # sub-meter distances floor at 1 m
    assert world.rssi((0, 0), (0.2, 0)) == pytest.approx(-40.0)


def test_rssi_threshold_crossing_near_63m():
    world = w.World(flat_scenario())
    assert world.rssi((0, 0), (62.0, 0)) > -85.0
    assert world.rssi((0, 0), (65.0, 0)) < -85.0


def test_rssi_shadowing_is_seed_deterministic():
    scn = flat_scenario(rssi=w.RssiParams(sigma=4.0))
    w1, w2 = w.World(scn), w.World(scn)
    seq1 = [w1.rssi((0, 0), (d, 0)) for d in range(10, 60, 5)]
    seq2 = [w2.rssi((0, 0), (d, 0)) for d in range(10, 60, 5)]
    assert seq1 == seq2
    assert any(abs(a - (-40 - 25 * math.log10(d))) > 0.01 for a, d in zip(seq1, range(10, 60, 5)))


# --- traversability ------------------------------------------------------------

def _seg_intersects_seg(p1, p2, p3, p4):
    def orient(a, b, c):
        v = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
        return 0 if v == 0 else (1 if v > 0 else -1)

    o1, o2 = orient(p1, p2, p3), orient(p1, p2, p4)
    o3, o4 = orient(p3, p4, p1), orient(p3, p4, p2)
    return o1 != o2 and o3 != o4


def _point_in_polygon(p, poly):
    x, y = p
    inside = False
    m = len(poly)
    for i in range(m):
        x1, y1 = poly[i]
        x2, y2 = poly[(i + 1) % m]
        if (y1 > y) != (y2 > y):
            xc = x1 + (y - y1) * (x2 - x1) / (y2 - y1)
            if x <= xc:
                inside = not inside
    return inside


def _oracle_blocked(a, b, polygons, segments):
    for poly in polygons:
        if _point_in_polygon(a, poly) or _point_in_polygon(b, poly):
            return True
        m = len(poly)
        for i in range(m):
            if _seg_intersects_seg(a, b, poly[i], poly[(i + 1) % m]):
                return True
    for s in segments:
        if _seg_intersects_seg(a, b, s[0], s[1]):
            return True
    return False


def test_traversable_matches_naive_intersection_oracle():
    polys = [
        [(0.0, 0.0), (10.0, 0.0), (10.0, 10.0), (0.0, 10.0)],
        [(-30.0, -30.0), (-20.0, -35.0), (-15.0, -20.0), (-28.0, -18.0)],
    ]
    bars = [[(20.0, -10.0), (20.0, 25.0)]]
    scn = flat_scenario(objects=[], roads=[], obstacles=polys, barriers=bars)
    world = w.World(scn)
    rng = random.Random(11)
    checked_block = checked_free = 0
    for _ in range(400):
        a = (rng.uniform(-60, 60), rng.uniform(-60, 60))
        b = (rng.uniform(-60, 60), rng.uniform(-60, 60))
        want = not _oracle_blocked(a, b, polys, bars)
        got = world.traversable(a, b)
        assert got == want, f"{a}->{b}"
        checked_block += int(not want)
        checked_free += int(want)
    assert checked_block > 20 and checked_free > 20


def test_traversable_is_symmetric_and_bounded():
    world = w.World(flat_scenario(obstacles=[[(0, 0), (5, 0), (5, 5), (0, 5)]]))
    a, b = (-10.0, 2.0), (10.0, 2.0)
    assert world.traversable(a, b) == world.traversable(b, a) == False  # noqa: E712
    assert world.traversable((-10, -10), (10, -10))
    assert not world.traversable((-10, 0), (500, 0))  # leaves bounds
    assert world.traversable((-10, 2), (10, 2), vehicle="uav")  # flies over


def test_obstacle_flagged_object_blocks():
    crate = w.GroundObject("crate", 0.0, 0.0, footprint=w._square(4.0), obstacle=True)
    world = w.World(flat_scenario(objects=[crate], roads=[]))
    assert not world.traversable((-10, 0), (10, 0))
    assert world.traversable((-10, 10), (10, 10))


def test_dynamic_mover_blocks_then_clears():
    bus = w.GroundObject(
        "bus",
        0.0,
        0.0,
        footprint=w._square(6.0),
        obstacle=True,
        motion={"waypoints": [[0.0, 60.0]], "speed": 2.0},
    )
    world = w.World(flat_scenario(objects=[bus], roads=[]))
    world.step(0.0)
    assert not world.traversable((-10, 0), (10, 0))
    world.step(25.0)  # bus has moved 50 m north
    assert world.traversable((-10, 0), (10, 0))
    assert bus.position_at(25.0) == pytest.approx((0.0, 50.0))


def test_mover_interpolation_oracle():
    o = w.GroundObject(
        "cart", 0.0, 0.0, motion={"waypoints": [[10.0, 0.0], [10.0, 10.0]], "speed": 1.0, "loop": True}
    )
    assert o.position_at(5.0) == pytest.approx((5.0, 0.0))
    assert o.position_at(15.0) == pytest.approx((10.0, 5.0))
    # closed circuit of length 10 + 10 + sqrt(200); one lap plus 5 m
    lap = 20.0 + math.sqrt(200.0)
    assert o.position_at(lap + 5.0) == pytest.approx((5.0, 0.0), abs=1e-6)


# --- ugv sensing ---------------------------------------------------------------

def test_ugv_sense_range_and_fov():
    world = w.World(flat_scenario())
    dets, _ = world.ugv_sense((5.0, 5.0, 0.0), ["barrel", "car", "person"])
    labels = {d.label for d in dets}
    assert "barrel" in labels  # 5 m ahead
    assert "car" not in labels  # 26 m away, out of range
    behind, _ = world.ugv_sense((12.0, 5.0, 0.0), ["barrel"])  # barrel is behind heading=+x
    assert behind == []
    dets2, _ = world.ugv_sense((12.0, 5.0, math.pi), ["barrel"])
    assert [d.label for d in dets2] == ["barrel"]
    assert dets2[0].range == pytest.approx(2.0)


def test_ugv_sense_miss_rate():
    world = w.World(flat_scenario(noise=w.DetectionNoise(miss_rate=0.1)))
    hits = sum(bool(world.ugv_sense((5.0, 5.0, 0.0), ["barrel"])[0]) for _ in range(1000))
    assert 870 <= hits <= 930


def test_occupancy_patch_marks_nearby_obstacles():
    world = w.World(flat_scenario(obstacles=[[(3, -2), (8, -2), (8, 2), (3, 2)]], objects=[], roads=[]))
    _, patch = world.ugv_sense((0.0, 0.0, 0.0), [], occupancy=True)
    assert patch is not None and patch.any()
    empty_world = w.World(flat_scenario(objects=[], roads=[]))
    _, patch2 = empty_world.ugv_sense((0.0, 0.0, 0.0), [], occupancy=True)
    assert not patch2.any()


def test_annotation_near():
    world = w.World(flat_scenario())
    o = world.annotation_near((10.2, 5.1))
    assert o is not None and o.attributes.get("color") == "blue"
    assert world.annotation_near((90.0, 90.0)) is None


# --- scenario config ------------------------------------------------------------

def test_scenario_json_round_trip():
    scn = flat_scenario()
    doc = scn.to_json()
    back = w.ScenarioConfig.from_json(doc)
    assert back.name == scn.name
    assert back.bounds == scn.bounds
    assert len(back.objects) == len(scn.objects)
    assert back.objects[0].attributes == {"color": "blue"}
    assert back.roads[0].width == 8.0
    assert back.to_json() == doc


def test_scenario_validation_errors():
    with pytest.raises(w.ConfigError):
        w.ScenarioConfig(bounds=(10, 0, -10, 20)).validate()
    with pytest.raises(w.ConfigError):
        w.ScenarioConfig(robots=[w.RobotSpec("r1", "submarine")]).validate()
    with pytest.raises(w.ConfigError):
        w.ScenarioConfig(robots=[w.RobotSpec("r1", "ugv"), w.RobotSpec("r1", "uav")]).validate()
    with pytest.raises(w.ConfigError):
        w.ScenarioConfig(roads=[w.RoadPath([(0, 0)], 4.0)]).validate()
    with pytest.raises(w.ConfigError):
        w.ScenarioConfig.from_json("{bad json")
    with pytest.raises(w.ConfigError):
        w.ScenarioConfig.from_json(json.dumps({"objects": [{"label": "x"}]}))  # missing x/y
