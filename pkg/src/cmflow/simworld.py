"""Deterministic synthetic driving sequences with full ground truth.

The world is a constant-curvature road lined with walls, poles and roadside
clutter. Movers are rigid boxes (cars, cyclists, pedestrians) driving along,
against or across the road, plus parked cars. Each frame re-samples radar
returns from the visible scatterers, so consecutive frames share surfaces
but not exact points.

Measurement noise (coordinates, RRV, RCS, boxes, optical flow) never leaks
into ground truth: ``gt_flow`` is evaluated at the measured coordinates.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .errors import EmptyFrame, InvalidConfig, InvariantViolation
from .geometry import (Calibration, RigidTransform, compose, default_calibration,
                       ego_point_transform, in_image, planar_pose, project_points,
                       rigid_flow, yaw_of)
from .utils import rng_for

MOVING_THRESHOLD = 0.05  # m of non-rigid flow that makes a point "moving"
CONFIG_VERSION = 1

_CLASS_SIZE = {"car": (4.2, 1.8, 1.5), "cyclist": (1.8, 0.7, 1.7), "pedestrian": (0.7, 0.7, 1.75)}
_CLASS_RCS = {"car": 10.0, "cyclist": 2.0, "pedestrian": -5.0}
_STATIC_RCS = {"wall": 5.0, "pole": 8.0, "clutter": -2.0}


@dataclass
class SimConfig:
    n_frames: int = 21
    dt: float = 0.1
    n_static: int = 200
    n_movers: int = 5
    n_parked: int = 1
    points_per_mover: int = 10
    ego_speed: tuple = (6.0, 10.0)
    ego_yaw_rate: tuple = (-0.08, 0.08)
    ego_speed_jitter: float = 0.0
    mover_speed: tuple = (4.0, 9.0)
    crossing_fraction: float = 0.2
    coord_noise: float = 0.0
    rrv_noise: float = 0.0
    rrv_bias: float = 1.0
    rrv_bias_min: float = 0.0
    rcs_noise: float = 1.0
    box_dropout: float = 0.0
    box_center_noise: float = 0.0
    flow_noise: float = 0.0
    flow_corrupt_frac: float = 0.0
    z_range: tuple = (-3.0, 3.0)
    max_range: float = 50.0
    radar_height: float = 1.0
    image_width: int = 256
    image_height: int = 192
    focal: float = 192.0
    background_depth: float = 30.0
    static_density: float = 8.0

    def __post_init__(self):
        for name in ("ego_speed", "ego_yaw_rate", "mover_speed", "z_range"):
            setattr(self, name, tuple(float(v) for v in getattr(self, name)))
        self.validate()

    def validate(self) -> None:
        if self.n_frames < 2:
            raise InvalidConfig("n_frames must be >= 2 (empty trajectory)")
        if self.n_static < 1:
            raise InvalidConfig("need at least one static point per frame")
        if self.n_movers < 0 or self.n_parked < 0 or self.points_per_mover < 1:
            raise InvalidConfig("mover counts must be non-negative, points_per_mover >= 1")
        if self.dt <= 0:
            raise InvalidConfig("dt must be positive")
        for name in ("coord_noise", "rrv_noise", "rrv_bias", "rrv_bias_min", "rcs_noise",
                     "box_center_noise", "flow_noise", "ego_speed_jitter"):
            if getattr(self, name) < 0:
                raise InvalidConfig(f"{name} must be non-negative")
        if self.rrv_bias_min > self.rrv_bias:
            raise InvalidConfig("rrv_bias_min exceeds rrv_bias")
        if not 0 <= self.box_dropout < 1:
            raise InvalidConfig("box_dropout must be in [0, 1)")
        if not 0 <= self.flow_corrupt_frac <= 1 or not 0 <= self.crossing_fraction <= 1:
            raise InvalidConfig("fractions must be in [0, 1]")
        for name in ("ego_speed", "mover_speed", "ego_yaw_rate", "z_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise InvalidConfig(f"{name} range is inverted")
        if self.ego_speed[0] < 0 or self.mover_speed[0] < 0:
            raise InvalidConfig("speeds must be non-negative")

    def calibration(self) -> Calibration:
        return default_calibration(self.image_width, self.image_height, self.focal)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["version"] = CONFIG_VERSION
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SimConfig":
        d = dict(d)
        version = d.pop("version", CONFIG_VERSION)
        if version != CONFIG_VERSION:
            raise InvalidConfig(f"unsupported sim config version {version}")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise InvalidConfig(f"unknown sim config keys: {', '.join(unknown)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise InvalidConfig(str(exc)) from None

    @classmethod
    def load(cls, path) -> "SimConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


@dataclass(frozen=True, eq=False)
class RadarFrame:
    coords: np.ndarray
    rrv: np.ndarray
    rcs: np.ndarray
    timestamp: float = 0.0

    def __post_init__(self):
        coords = np.asarray(self.coords, dtype=np.float64).reshape(-1, 3)
        rrv = np.asarray(self.rrv, dtype=np.float64).reshape(-1)
        rcs = np.asarray(self.rcs, dtype=np.float64).reshape(-1)
        if coords.shape[0] < 1:
            raise EmptyFrame("radar frame has no points")
        if not (rrv.shape[0] == rcs.shape[0] == coords.shape[0]):
            raise ValueError("coords/rrv/rcs length mismatch")
        if not (np.all(np.isfinite(coords)) and np.all(np.isfinite(rrv)) and np.all(np.isfinite(rcs))):
            raise ValueError("radar frame contains non-finite values")
        object.__setattr__(self, "coords", coords)
        object.__setattr__(self, "rrv", rrv)
        object.__setattr__(self, "rcs", rcs)

    def __len__(self) -> int:
        return self.coords.shape[0]

    @property
    def features(self) -> np.ndarray:
        return np.stack([self.rrv, self.rcs], axis=1)

    def subset(self, idx) -> "RadarFrame":
        return RadarFrame(self.coords[idx], self.rrv[idx], self.rcs[idx], self.timestamp)


@dataclass(frozen=True)
class TrackedBox:
    id: int
    center: tuple
    size: tuple
    yaw: float
    frame_index: int

    def __post_init__(self):
        object.__setattr__(self, "center", tuple(float(v) for v in self.center))
        object.__setattr__(self, "size", tuple(float(v) for v in self.size))
        if min(self.size) <= 0:
            raise ValueError("box size components must be positive")

    def pose(self) -> RigidTransform:
        """Sensor-from-object transform of the box."""
        return planar_pose(self.center[0], self.center[1], self.yaw, self.center[2])

    def to_dict(self) -> dict:
        return {"id": self.id, "center": list(self.center), "size": list(self.size),
                "yaw": self.yaw, "frame_index": self.frame_index}

    @classmethod
    def from_dict(cls, d: dict) -> "TrackedBox":
        return cls(int(d["id"]), d["center"], d["size"], float(d["yaw"]), int(d["frame_index"]))


@dataclass(frozen=True, eq=False)
class Sequence:
    frames: list
    odom_poses: list
    boxes: list
    optflow: list
    calib: Calibration
    dt: float
    gt_flow: list
    gt_moving: list
    gt_ego: list
    gt_boxes: list = field(default=None)
    point_object: list = field(default=None)
    rrv_bias: np.ndarray = field(default=None)
    config: SimConfig = field(default=None)
    seed: int = field(default=None)

    def __post_init__(self):
        n = len(self.frames)
        if n < 2:
            raise InvariantViolation("a sequence needs at least two frames")
        if len(self.odom_poses) != n or len(self.boxes) != n:
            raise InvariantViolation("per-frame lists must match the frame count")
        for name in ("gt_flow", "gt_moving", "gt_ego", "optflow"):
            if len(getattr(self, name)) != n - 1:
                raise InvariantViolation(f"{name} must have one entry per frame pair")
        for k in range(n - 1):
            coords = self.frames[k].coords
            if self.gt_flow[k].shape != coords.shape or self.gt_moving[k].shape != (coords.shape[0],):
                raise InvariantViolation(f"pair {k}: ground-truth shapes do not match the frame")
            expected = moving_rule(self.gt_flow[k], self.point_transform(k), coords)
            if not np.array_equal(expected, self.gt_moving[k]):
                raise InvariantViolation(f"pair {k}: gt_moving violates the 5 cm rule")

    @property
    def n_pairs(self) -> int:
        return len(self.frames) - 1

    def point_transform(self, k: int) -> RigidTransform:
        """Transform moving static points of frame ``k`` into frame ``k+1``."""
        return self.gt_ego[k].inverse()


def moving_rule(flow, point_transform: RigidTransform, coords) -> np.ndarray:
    """Points whose non-rigid flow exceeds 5 cm."""
    residual = np.asarray(flow) - rigid_flow(point_transform, coords)
    return np.linalg.norm(residual, axis=1) > MOVING_THRESHOLD


# ---------------------------------------------------------------------------
# preprocessing

def fov_mask(frame: RadarFrame, calib: Calibration, z_range=(-3.0, 3.0)) -> np.ndarray:
    uv, depth = project_points(frame.coords, calib)
    z = frame.coords[:, 2]
    return (depth > 0) & in_image(uv, calib) & (z >= z_range[0]) & (z <= z_range[1])


def fov_filter(frame: RadarFrame, calib: Calibration, z_range=(-3.0, 3.0)) -> RadarFrame:
    """Keep points inside the camera image with positive depth and z in range."""
    keep = fov_mask(frame, calib, z_range)
    if not keep.any():
        raise EmptyFrame("no radar point survives the field-of-view filter")
    return frame.subset(np.flatnonzero(keep))


def sample_indices(n_points: int, n: int, rng: np.random.Generator) -> np.ndarray:
    if n_points < 1:
        raise EmptyFrame("cannot sample from an empty frame")
    if n_points >= n:
        return rng.choice(n_points, size=n, replace=False)
    return rng.choice(n_points, size=n, replace=True)


def sample_points(frame: RadarFrame, n: int = 256, seed: int = 0) -> RadarFrame:
    """Random ``n`` points; without replacement when the frame is big enough."""
    idx = sample_indices(len(frame), n, np.random.default_rng(seed))
    return frame.subset(idx)


# ---------------------------------------------------------------------------
# world construction

class _Road:
    """Constant-curvature centre line parameterised by arc length."""

    def __init__(self, curvature: float):
        self.k = curvature

    def heading(self, s):
        return self.k * np.asarray(s, dtype=np.float64)

    def point(self, s, lateral=0.0):
        s = np.asarray(s, dtype=np.float64)
        th = self.heading(s)
        if abs(self.k) < 1e-12:
            x, y = s, np.zeros_like(s)
        else:
            x = np.sin(th) / self.k
            y = (1.0 - np.cos(th)) / self.k
        return x - lateral * np.sin(th), y + lateral * np.cos(th)


@dataclass
class _Mover:
    kind: str
    cls: str
    size: tuple
    s0: float
    lateral: float
    speed: float

    def pose(self, road: _Road, t: float) -> RigidTransform:
        h = self.size[2] / 2.0 + 0.05
        if self.kind == "along":
            s = self.s0 + self.speed * t
            x, y = road.point(s, self.lateral)
            return planar_pose(float(x), float(y), float(road.heading(s)), h)
        if self.kind == "oncoming":
            s = self.s0 - self.speed * t
            x, y = road.point(s, self.lateral)
            return planar_pose(float(x), float(y), float(road.heading(s)) + np.pi, h)
        if self.kind == "crossing":
            direction = -np.sign(self.lateral)
            lat = self.lateral + direction * self.speed * t
            x, y = road.point(self.s0, lat)
            return planar_pose(float(x), float(y), float(road.heading(self.s0)) + direction * np.pi / 2, h)
        x, y = road.point(self.s0, self.lateral)
        return planar_pose(float(x), float(y), float(road.heading(self.s0)), h)


def _static_world(road: _Road, s_lo: float, s_hi: float, cfg: SimConfig, rng):
    """World-frame static scatterers with class labels and normals."""
    pts, kinds, normals = [], [], []
    length = s_hi - s_lo
    for side in (-1.0, 1.0):
        offset = side * rng.uniform(9.0, 12.0)
        n_wall = int(length * cfg.static_density * 0.5)
        s = rng.uniform(s_lo, s_hi, n_wall)
        lat = offset + rng.normal(0.0, 0.15, n_wall)
        x, y = road.point(s, lat)
        z = rng.uniform(0.3, 2.5, n_wall)
        pts.append(np.stack([x, y, z], axis=1))
        kinds += ["wall"] * n_wall
        th = road.heading(s)
        normals.append(np.stack([-np.sin(th), np.cos(th), np.zeros(n_wall)], axis=1))

        s_pole = s_lo + rng.uniform(0, 6.0)
        while s_pole < s_hi:
            x, y = road.point(s_pole, offset - side * 0.5)
            z = np.linspace(0.2, 3.5, 6)
            pts.append(np.stack([np.full(6, x), np.full(6, y), z], axis=1))
            kinds += ["pole"] * 6
            normals.append(np.zeros((6, 3)))
            s_pole += rng.uniform(6.0, 12.0)

        n_clutter = int(length * cfg.static_density * 0.25)
        s = rng.uniform(s_lo, s_hi, n_clutter)
        lat = side * rng.uniform(8.5, 20.0, n_clutter)
        x, y = road.point(s, lat)
        z = rng.uniform(0.1, 1.8, n_clutter)
        pts.append(np.stack([x, y, z], axis=1))
        kinds += ["clutter"] * n_clutter
        normals.append(np.zeros((n_clutter, 3)))
    return np.concatenate(pts), np.array(kinds), np.concatenate(normals)


def _make_movers(cfg: SimConfig, ego_speed: float, rng):
    movers = []
    for _ in range(cfg.n_movers):
        u = rng.random()
        if u < cfg.crossing_fraction:
            cls = "pedestrian" if rng.random() < 0.5 else "cyclist"
            speed = rng.uniform(1.0, 3.0) if cls == "pedestrian" else rng.uniform(2.5, 5.0)
            movers.append(_Mover("crossing", cls, _CLASS_SIZE[cls], rng.uniform(12.0, 30.0),
                                 rng.choice([-1.0, 1.0]) * rng.uniform(4.0, 7.5), speed))
        elif u < cfg.crossing_fraction + (1 - cfg.crossing_fraction) * 0.6:
            cls = "car" if rng.random() < 0.8 else "cyclist"
            rel = rng.uniform(-3.0, 3.0)
            speed = max(1.0, ego_speed + rel) if ego_speed > 0 else rng.uniform(*cfg.mover_speed)
            movers.append(_Mover("along", cls, _CLASS_SIZE[cls], rng.uniform(10.0, 35.0),
                                 rng.choice([-1.0, 1.0]) * rng.uniform(2.5, 5.0), speed))
        else:
            movers.append(_Mover("oncoming", "car", _CLASS_SIZE["car"], rng.uniform(20.0, 45.0),
                                 -rng.uniform(3.0, 6.0), rng.uniform(*cfg.mover_speed)))
    for _ in range(cfg.n_parked):
        movers.append(_Mover("parked", "car", _CLASS_SIZE["car"], rng.uniform(8.0, 35.0),
                             rng.choice([-1.0, 1.0]) * rng.uniform(6.0, 7.4), 0.0))
    return movers


def _visible(coords, calib, cfg: SimConfig):
    uv, depth = project_points(coords, calib)
    rng_ = np.linalg.norm(coords, axis=1)
    z = coords[:, 2]
    return ((depth > 0) & in_image(uv, calib) & (rng_ <= cfg.max_range) & (rng_ >= 1.0)
            & (z >= cfg.z_range[0]) & (z <= cfg.z_range[1]))


def _incidence_db(cos_inc):
    return 10.0 * np.log10(np.maximum(np.abs(cos_inc), 0.1))


def generate_sequence(config: SimConfig, seed: int) -> Sequence:
    """Simulate one multi-modal sequence; a pure function of ``(config, seed)``."""
    cfg = config
    cfg.validate()
    calib = cfg.calibration()
    n = cfg.n_frames
    dt = cfg.dt

    rng_ego = rng_for(seed, "ego")
    v_mean = rng_ego.uniform(*cfg.ego_speed)
    yaw_rate = rng_ego.uniform(*cfg.ego_yaw_rate)
    curvature = yaw_rate / v_mean if v_mean > 1e-9 else 0.0
    road = _Road(curvature)
    # one extra pose so the last frame's RRV has a motion interval
    s_ego = [0.0]
    for _ in range(n):
        v = max(0.0, v_mean + cfg.ego_speed_jitter * rng_ego.normal())
        s_ego.append(s_ego[-1] + v * dt)
    s_ego = np.array(s_ego)
    ego_poses = []
    for s in s_ego:
        x, y = road.point(s)
        ego_poses.append(planar_pose(float(x), float(y), float(road.heading(s)), cfg.radar_height))

    rng_world = rng_for(seed, "world")
    world_pts, world_kind, world_normal = _static_world(
        road, -20.0, s_ego[-1] + cfg.max_range + 20.0, cfg, rng_world)
    movers = _make_movers(cfg, v_mean, rng_for(seed, "movers"))
    mover_poses = [[m.pose(road, k * dt) for k in range(n + 1)] for m in movers]

    rng_pts = rng_for(seed, "points")
    rng_meas = rng_for(seed, "measure")
    rng_bias = rng_for(seed, "bias")

    frames, point_object, gt_boxes, flows_all, gt_ego, biases = [], [], [], [], [], []
    for k in range(n):
        ego_inv = ego_poses[k].inverse()
        # static returns
        local = ego_inv.apply(world_pts)
        vis = np.flatnonzero(_visible(local, calib, cfg))
        take = vis if vis.size <= cfg.n_static else np.sort(rng_pts.choice(vis, cfg.n_static, replace=False))
        coords = [local[take]]
        obj = [np.full(take.size, -1)]
        base = np.array([_STATIC_RCS[c] for c in world_kind[take]])
        normal_local = world_normal[take] @ ego_inv.rotation.T
        los = -local[take] / np.linalg.norm(local[take], axis=1, keepdims=True)
        has_normal = np.linalg.norm(normal_local, axis=1) > 0
        cos_inc = np.where(has_normal, np.sum(normal_local * los, axis=1), 1.0)
        rcs = [base + _incidence_db(cos_inc)]
        # mover returns
        for m_i, mover in enumerate(movers):
            pose = compose(ego_inv, mover_poses[m_i][k])
            half = 0.45 * np.asarray(mover.size)
            q = rng_pts.uniform(-1.0, 1.0, (cfg.points_per_mover, 3)) * half
            c = pose.apply(q)
            keep = _visible(c, calib, cfg)
            if not keep.any():
                continue
            c = c[keep]
            coords.append(c)
            obj.append(np.full(c.shape[0], m_i))
            los_obj = -(c - pose.translation) @ pose.rotation
            los_obj /= np.maximum(np.linalg.norm(los_obj, axis=1, keepdims=True), 1e-9)
            rcs.append(_CLASS_RCS[mover.cls] + _incidence_db(np.max(np.abs(los_obj[:, :2]), axis=1)))
        coords = np.concatenate(coords)
        obj = np.concatenate(obj)
        rcs = np.concatenate(rcs)
        if cfg.coord_noise > 0:
            coords = coords + rng_meas.normal(0.0, cfg.coord_noise, coords.shape)
        rcs = rcs + (rng_meas.normal(0.0, cfg.rcs_noise, rcs.shape) if cfg.rcs_noise > 0 else 0.0)
        keep = _visible(coords, calib, cfg)
        if not keep.any():
            raise EmptyFrame(f"frame {k} has no visible radar point")
        coords, obj, rcs = coords[keep], obj[keep], rcs[keep]

        # motion over [k, k+1]; the last interval uses the extra pose
        T_static = ego_point_transform(ego_poses[k], ego_poses[k + 1])
        flow = rigid_flow(T_static, coords)
        for m_i in np.unique(obj[obj >= 0]):
            sel = obj == m_i
            T_obj = compose(ego_poses[k + 1].inverse(),
                            compose(mover_poses[m_i][k + 1],
                                    compose(mover_poses[m_i][k].inverse(), ego_poses[k])))
            flow[sel] = rigid_flow(T_obj, coords[sel])
        flows_all.append(flow)
        gt_ego.append(compose(ego_poses[k].inverse(), ego_poses[k + 1]))

        if cfg.rrv_bias_min > 0:
            beta = rng_bias.choice([-1.0, 1.0]) * rng_bias.uniform(cfg.rrv_bias_min, cfg.rrv_bias)
        else:
            beta = rng_bias.uniform(-cfg.rrv_bias, cfg.rrv_bias) if cfg.rrv_bias > 0 else 0.0
        biases.append(beta)
        unit = coords / np.linalg.norm(coords, axis=1, keepdims=True)
        rrv = np.sum(unit * flow, axis=1) / dt + beta
        if cfg.rrv_noise > 0:
            rrv = rrv + rng_meas.normal(0.0, cfg.rrv_noise, rrv.shape)

        frames.append(RadarFrame(coords, rrv, rcs, k * dt))
        point_object.append(obj)
        boxes = []
        for m_i, mover in enumerate(movers):
            pose = compose(ego_inv, mover_poses[m_i][k])
            c = pose.translation
            if 0.0 < c[0] < 70.0 and abs(c[1]) < 40.0:
                boxes.append(TrackedBox(m_i + 1, c, mover.size, yaw_of(pose.rotation), k))
        gt_boxes.append(boxes)

    gt_flow = flows_all[:-1]
    gt_ego = gt_ego[:-1]
    gt_moving = [moving_rule(gt_flow[k], gt_ego[k].inverse(), frames[k].coords) for k in range(n - 1)]

    proto = Sequence(frames, ego_poses[:n], gt_boxes, [None] * (n - 1), calib, dt, gt_flow,
                     gt_moving, gt_ego, gt_boxes=gt_boxes, point_object=point_object,
                     rrv_bias=np.array(biases), config=cfg, seed=seed)
    boxes_obs = mot_observe(proto, cfg.box_dropout, cfg.box_center_noise, seed=seed)
    flow_obs = camera_observe(proto, cfg.flow_noise, cfg.flow_corrupt_frac, seed=seed)
    return Sequence(frames, ego_poses[:n], boxes_obs, flow_obs, calib, dt, gt_flow, gt_moving,
                    gt_ego, gt_boxes=gt_boxes, point_object=point_object,
                    rrv_bias=np.array(biases), config=cfg, seed=seed)


# ---------------------------------------------------------------------------
# sensor emulation

def mot_observe(seq: Sequence, p_dropout: float, center_noise: float, seed: int = 0):
    """Noisy tracker output: independent box dropout plus centre jitter."""
    if not 0 <= p_dropout < 1:
        raise InvalidConfig("p_dropout must be in [0, 1)")
    if center_noise < 0:
        raise InvalidConfig("center_noise must be non-negative")
    rng = rng_for(seed, "mot")
    out = []
    for frame_boxes in seq.gt_boxes:
        kept = []
        for box in frame_boxes:
            drop = rng.random() < p_dropout
            jitter = rng.normal(0.0, center_noise, 3) if center_noise > 0 else np.zeros(3)
            if drop:
                continue
            kept.append(TrackedBox(box.id, np.asarray(box.center) + jitter, box.size,
                                   box.yaw, box.frame_index))
        out.append(kept)
    return out


def pixel_index(uv: np.ndarray, calib: Calibration):
    """Nearest integer pixel ``(col, row)`` and an in-image mask."""
    with np.errstate(invalid="ignore"):
        col = np.floor(uv[:, 0] + 0.5)
        row = np.floor(uv[:, 1] + 0.5)
        ok = (col >= 0) & (col < calib.width) & (row >= 0) & (row < calib.height)
    col = np.where(ok, col, 0).astype(np.int64)
    row = np.where(ok, row, 0).astype(np.int64)
    return col, row, ok


def clean_flow_map(frame: RadarFrame, flow: np.ndarray, point_transform: RigidTransform,
                   calib: Calibration, background_depth: float = 30.0) -> np.ndarray:
    """Dense optical flow a perfect estimator would output for one pair.

    Background pixels carry the ego-induced flow of a surface at
    ``background_depth``; each radar point overwrites its nearest pixel with
    its exact projected motion (closest point wins).
    """
    h, w = calib.height, calib.width
    cols, rows = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    cam = np.stack([(cols - calib.cx) / calib.fx * background_depth,
                    (rows - calib.cy) / calib.fy * background_depth,
                    np.full_like(cols, background_depth)], axis=-1).reshape(-1, 3)
    radar_pts = calib.cam_from_radar.inverse().apply(cam)
    moved = point_transform.apply(radar_pts)
    uv1, d1 = project_points(moved, calib)
    bg = uv1 - np.stack([cols.ravel(), rows.ravel()], axis=1)
    bg[~(d1 > 0)] = 0.0
    out = bg.reshape(h, w, 2)

    uv0, d0 = project_points(frame.coords, calib)
    uvw, dw = project_points(frame.coords + flow, calib)
    col, row, ok = pixel_index(uv0, calib)
    ok &= (d0 > 0) & (dw > 0)
    idx = np.flatnonzero(ok)
    if idx.size:
        order = idx[np.argsort(d0[idx], kind="stable")]
        pix = row[order] * w + col[order]
        _, first = np.unique(pix, return_index=True)
        win = order[first]
        out[row[win], col[win]] = uvw[win] - uv0[win]
    return out


def camera_observe(seq: Sequence, flow_noise: float, corrupt_frac: float, seed: int = 0):
    """Per-pair optical-flow maps: clean projection + Gaussian noise + outliers."""
    if flow_noise < 0:
        raise InvalidConfig("flow_noise must be non-negative")
    if not 0 <= corrupt_frac <= 1:
        raise InvalidConfig("corrupt_frac must be in [0, 1]")
    depth = seq.config.background_depth if seq.config is not None else 30.0
    rng = rng_for(seed, "camera")
    maps = []
    for k in range(seq.n_pairs):
        m = clean_flow_map(seq.frames[k], seq.gt_flow[k], seq.point_transform(k), seq.calib, depth)
        if flow_noise > 0:
            m = m + rng.normal(0.0, flow_noise, m.shape)
        if corrupt_frac > 0:
            bad = rng.random(m.shape[:2]) < corrupt_frac
            m[bad] = rng.uniform(-40.0, 40.0, (int(bad.sum()), 2))
        maps.append(m)
    return maps
