"""Pseudo-labels from odometer poses, tracked boxes and optical flow.

Absent vectors (``f_fg`` for points without a matched track, ``w_opt`` for
points off the image) are stored as NaN rows; use the ``*_mask`` helpers.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvariantViolation, ZeroRangePoint
from .geometry import Calibration, RigidTransform, compose, ego_point_transform, project_points, rigid_flow
from .simworld import RadarFrame, TrackedBox, pixel_index

ETA_V = 0.3
ETA_L = 0.05


@dataclass(frozen=True, eq=False)
class LabelBundle:
    pseudo_T: RigidTransform | None
    rigid_flow_r: np.ndarray | None
    s_v: np.ndarray | None
    s_fg: np.ndarray | None
    f_fg: np.ndarray | None
    s_l: np.ndarray | None
    s_fused: np.ndarray | None
    w_opt: np.ndarray | None

    def __post_init__(self):
        self.validate()

    @property
    def n(self) -> int:
        for a in (self.s_fused, self.s_v, self.s_fg, self.w_opt, self.rigid_flow_r):
            if a is not None:
                return a.shape[0]
        return 0

    @property
    def f_fg_mask(self):
        return None if self.f_fg is None else ~np.isnan(self.f_fg[:, 0])

    @property
    def w_mask(self):
        return None if self.w_opt is None else ~np.isnan(self.w_opt[:, 0])

    def validate(self) -> None:
        n = self.n
        for name in ("rigid_flow_r", "s_v", "s_fg", "f_fg", "s_l", "s_fused", "w_opt"):
            a = getattr(self, name)
            if a is not None and a.shape[0] != n:
                raise InvariantViolation(f"label {name} has {a.shape[0]} rows, expected {n}")
        if self.s_l is not None:
            if self.s_fg is not None and np.any(self.s_l & ~self.s_fg):
                raise InvariantViolation("s_l marks a point outside every box")
            if self.s_fused is not None and np.any(self.s_l & ~self.s_fused):
                raise InvariantViolation("s_l point missing from fused label")
        if self.f_fg is not None and self.s_fg is not None and np.any(self.f_fg_mask & ~self.s_fg):
            raise InvariantViolation("f_fg present on a background point")

    def subset(self, idx) -> "LabelBundle":
        pick = lambda a: None if a is None else a[idx]  # noqa: E731
        return LabelBundle(self.pseudo_T, pick(self.rigid_flow_r), pick(self.s_v), pick(self.s_fg),
                           pick(self.f_fg), pick(self.s_l), pick(self.s_fused), pick(self.w_opt))

    def to_dict(self) -> dict:
        def vecs(a):
            if a is None:
                return None
            return [None if np.isnan(r[0]) else [float(x) for x in r] for r in a]

        def bools(a):
            return None if a is None else [bool(x) for x in a]

        return {
            "pseudo_T": None if self.pseudo_T is None else self.pseudo_T.to_dict(),
            "rigid_flow_r": None if self.rigid_flow_r is None else self.rigid_flow_r.tolist(),
            "s_v": bools(self.s_v), "s_fg": bools(self.s_fg), "f_fg": vecs(self.f_fg),
            "s_l": bools(self.s_l), "s_fused": bools(self.s_fused), "w_opt": vecs(self.w_opt),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LabelBundle":
        def vecs(rows, width):
            if rows is None:
                return None
            out = np.full((len(rows), width), np.nan)
            for i, r in enumerate(rows):
                if r is not None:
                    out[i] = r
            return out

        def bools(a):
            return None if a is None else np.asarray(a, dtype=bool)

        T = None if d.get("pseudo_T") is None else RigidTransform.from_dict(d["pseudo_T"])
        fr = None if d.get("rigid_flow_r") is None else np.asarray(d["rigid_flow_r"], dtype=np.float64).reshape(-1, 3)
        return cls(T, fr, bools(d.get("s_v")), bools(d.get("s_fg")), vecs(d.get("f_fg"), 3),
                   bools(d.get("s_l")), bools(d.get("s_fused")), vecs(d.get("w_opt"), 2))


def ego_pseudo_transform(odom_prev: RigidTransform, odom_next: RigidTransform) -> RigidTransform:
    """Point-motion transform ``T = O^-1`` from two world-from-radar poses."""
    return ego_point_transform(odom_prev, odom_next)


def radial_units(coords: np.ndarray) -> np.ndarray:
    r = np.linalg.norm(coords, axis=1, keepdims=True)
    if np.any(r == 0):
        raise ZeroRangePoint("radar point at the sensor origin has no radial direction")
    return coords / r


def rrv_motion_label(frame: RadarFrame, T: RigidTransform, dt: float, eta_v: float = ETA_V,
                     direct: bool = False):
    """Moving mask from ego-compensated RRV, plus the residual ``delta_v``.

    The default removes the frame-wide mean residual first, so a global
    timing bias in the velocities does not flag the whole frame.
    """
    if dt <= 0 or eta_v <= 0:
        raise ValueError("dt and eta_v must be positive")
    unit = radial_units(frame.coords)
    expected = np.sum(unit * rigid_flow(T, frame.coords), axis=1) / dt
    delta_v = np.abs(frame.rrv - expected)
    if direct:
        return delta_v > eta_v, delta_v
    return (delta_v - delta_v.mean()) > eta_v, delta_v


def in_box(coords: np.ndarray, box: TrackedBox, margin: float = 0.0) -> np.ndarray:
    local = box.pose().inverse().apply(coords)
    half = np.asarray(box.size) / 2.0 + margin
    return np.all(np.abs(local) <= half, axis=1)


def box_motion(box_prev: TrackedBox, box_next: TrackedBox) -> RigidTransform:
    """Rigid motion carrying points in the first box into the next frame."""
    return compose(box_next.pose(), box_prev.pose().inverse())


def mot_labels(frame: RadarFrame, boxes_prev, boxes_next, margin: float = 0.0):
    """Foreground mask and per-object rigid flow of in-box points."""
    n = len(frame)
    s_fg = np.zeros(n, dtype=bool)
    f_fg = np.full((n, 3), np.nan)
    ids = [b.id for b in boxes_prev]
    if len(set(ids)) != len(ids):
        raise InvariantViolation("duplicate track id in one frame")
    nxt = {b.id: b for b in boxes_next}
    if len(nxt) != len(boxes_next):
        raise InvariantViolation("duplicate track id in one frame")
    for box in boxes_prev:
        inside = in_box(frame.coords, box, margin) & ~s_fg
        if not inside.any():
            continue
        s_fg |= inside
        match = nxt.get(box.id)
        if match is not None:
            f_fg[inside] = rigid_flow(box_motion(box, match), frame.coords[inside])
    return s_fg, f_fg


def distill_moving(f_fg: np.ndarray, s_fg: np.ndarray, rigid_flow_r: np.ndarray,
                   eta_l: float = ETA_L) -> np.ndarray:
    """Foreground points whose box motion departs from the ego-induced flow."""
    if eta_l <= 0:
        raise ValueError("eta_l must be positive")
    present = ~np.isnan(f_fg[:, 0])
    resid = np.linalg.norm(np.where(present[:, None], f_fg - rigid_flow_r, 0.0), axis=1)
    return s_fg & present & (resid > eta_l)


def fuse_labels(s_l: np.ndarray, s_v: np.ndarray) -> np.ndarray:
    if s_l.shape != s_v.shape:
        raise ValueError("label length mismatch")
    return s_l | (~s_l & s_v)


def optical_labels(frame: RadarFrame, flow_map: np.ndarray, calib: Calibration,
                   sampling: str = "nearest") -> np.ndarray:
    """Optical flow at each point's pixel; NaN rows off the image.

    ``sampling`` is ``"nearest"`` (rounded pixel) or ``"bilinear"``.
    """
    if sampling not in ("nearest", "bilinear"):
        raise ValueError(f"unknown sampling {sampling!r}")
    flow_map = np.asarray(flow_map)
    if flow_map.shape != (calib.height, calib.width, 2):
        raise ValueError(f"flow map shape {flow_map.shape} does not match the calibration")
    if not np.all(np.isfinite(flow_map)):
        raise ValueError("flow map contains non-finite values")
    uv, depth = project_points(frame.coords, calib)
    col, row, ok = pixel_index(uv, calib)
    ok &= depth > 0
    out = np.full((len(frame), 2), np.nan)
    if sampling == "nearest":
        out[ok] = flow_map[row[ok], col[ok]]
        return out
    # pixel centres sit at integer coordinates, matching the nearest lookup
    u = np.clip(uv[ok, 0], 0, calib.width - 1)
    v = np.clip(uv[ok, 1], 0, calib.height - 1)
    u0 = np.minimum(np.floor(u).astype(np.int64), calib.width - 2)
    v0 = np.minimum(np.floor(v).astype(np.int64), calib.height - 2)
    a = (u - u0)[:, None]
    b = (v - v0)[:, None]
    out[ok] = ((1 - a) * (1 - b) * flow_map[v0, u0] + a * (1 - b) * flow_map[v0, u0 + 1]
               + (1 - a) * b * flow_map[v0 + 1, u0] + a * b * flow_map[v0 + 1, u0 + 1])
    return out


def make_bundle(frame: RadarFrame, odom_prev=None, odom_next=None, boxes_prev=None, boxes_next=None,
                flow_map=None, calib: Calibration | None = None, dt: float = 0.1,
                eta_v: float = ETA_V, eta_l: float = ETA_L, direct: bool = False,
                margin: float = 0.0, sampling: str = "nearest") -> LabelBundle:
    """Run every label op available for a pair and package the result.

    A modality is off when its inputs are ``None``. Without the odometer
    the box labels fall back to "foreground with a track"; without boxes
    the fused label is the RRV label alone.
    """
    T = F_r = s_v = s_fg = f_fg = s_l = w = None
    if odom_prev is not None and odom_next is not None:
        T = ego_pseudo_transform(odom_prev, odom_next)
        F_r = rigid_flow(T, frame.coords)
        s_v, _ = rrv_motion_label(frame, T, dt, eta_v, direct=direct)
    if boxes_prev is not None and boxes_next is not None:
        s_fg, f_fg = mot_labels(frame, boxes_prev, boxes_next, margin)
        if F_r is not None:
            s_l = distill_moving(f_fg, s_fg, F_r, eta_l)
        else:
            s_l = s_fg & ~np.isnan(f_fg[:, 0])
    if s_l is not None and s_v is not None:
        s_fused = fuse_labels(s_l, s_v)
    else:
        s_fused = s_l if s_l is not None else s_v
    if flow_map is not None:
        if calib is None:
            raise ValueError("optical labels need a calibration")
        w = optical_labels(frame, flow_map, calib, sampling)
    return LabelBundle(T, F_r, s_v, s_fg, f_fg, s_l, s_fused, w)


def bundle_for_pair(seq, k: int, odometer: bool = True, lidar: bool = True, camera: bool = True,
                    **kw) -> LabelBundle:
    """Labels for pair ``k`` of a sequence with optional modality switches."""
    return make_bundle(
        seq.frames[k],
        seq.odom_poses[k] if odometer else None, seq.odom_poses[k + 1] if odometer else None,
        seq.boxes[k] if lidar else None, seq.boxes[k + 1] if lidar else None,
        seq.optflow[k] if camera else None, seq.calib, seq.dt, **kw)


def apply_modalities(bundle: LabelBundle, odometer: bool = True, lidar: bool = True,
                     camera: bool = True) -> LabelBundle:
    """Drop the labels of disabled sensors and redo the fusion accordingly."""
    if odometer and lidar and camera:
        return bundle
    T = bundle.pseudo_T if odometer else None
    F_r = bundle.rigid_flow_r if odometer else None
    s_v = bundle.s_v if odometer else None
    s_fg = bundle.s_fg if lidar else None
    f_fg = bundle.f_fg if lidar else None
    s_l = None
    if lidar and f_fg is not None:
        s_l = bundle.s_l if (odometer and bundle.s_l is not None) else s_fg & ~np.isnan(f_fg[:, 0])
    if s_l is not None and s_v is not None:
        s_fused = fuse_labels(s_l, s_v)
    else:
        s_fused = s_l if s_l is not None else s_v
    return LabelBundle(T, F_r, s_v, s_fg, f_fg, s_l, s_fused, bundle.w_opt if camera else None)
