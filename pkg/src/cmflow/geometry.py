"""Rigid-body algebra, weighted Kabsch, pinhole camera and ray geometry.

Conventions: a :class:`RigidTransform` maps points ``p -> R @ p + t``.
``compose(a, b)`` applies ``b`` first. Radar frame is x forward, y left,
z up; camera frame is x right, y down, z along the optical axis.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _accel
from .errors import DegenerateGeometry

_ORTHO_TOL = 1e-9


@dataclass(frozen=True, eq=False)
class RigidTransform:
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        rot = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        trans = np.array(self.translation, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(rot)) and np.all(np.isfinite(trans))):
            raise ValueError("non-finite transform")
        if np.max(np.abs(rot.T @ rot - np.eye(3))) > _ORTHO_TOL:
            raise ValueError("rotation is not orthonormal")
        if abs(np.linalg.det(rot) - 1.0) > _ORTHO_TOL:
            raise ValueError("rotation has det != +1")
        rot.flags.writeable = False
        trans.flags.writeable = False
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", trans)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, mat) -> "RigidTransform":
        mat = np.asarray(mat, dtype=np.float64)
        return cls(mat[:3, :3], mat[:3, 3])

    def matrix(self) -> np.ndarray:
        out = np.eye(4)
        out[:3, :3] = self.rotation
        out[:3, 3] = self.translation
        return out

    def apply(self, points) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        return points @ self.rotation.T + self.translation

    def inverse(self) -> "RigidTransform":
        rt = self.rotation.T
        return RigidTransform(rt, -(rt @ self.translation))

    def __matmul__(self, other: "RigidTransform") -> "RigidTransform":
        return compose(self, other)

    def allclose(self, other: "RigidTransform", atol: float = 1e-9) -> bool:
        return bool(np.allclose(self.rotation, other.rotation, rtol=0, atol=atol)
                    and np.allclose(self.translation, other.translation, rtol=0, atol=atol))

    def to_dict(self) -> dict:
        return {"rotation": self.rotation.tolist(), "translation": self.translation.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "RigidTransform":
        return cls(d["rotation"], d["translation"])


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """Transform applying ``b`` then ``a``."""
    return RigidTransform(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def axis_angle(axis, angle: float) -> np.ndarray:
    """Rotation matrix for ``angle`` radians about ``axis`` (Rodrigues)."""
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    k = np.array([[0.0, -axis[2], axis[1]],
                  [axis[2], 0.0, -axis[0]],
                  [-axis[1], axis[0], 0.0]])
    return np.eye(3) + np.sin(angle) * k + (1.0 - np.cos(angle)) * (k @ k)


def rot_z(angle: float, degrees: bool = True) -> np.ndarray:
    a = np.deg2rad(angle) if degrees else angle
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def planar_pose(x: float, y: float, yaw: float, z: float = 0.0) -> RigidTransform:
    return RigidTransform(rot_z(yaw, degrees=False), [x, y, z])


def yaw_of(rotation: np.ndarray) -> float:
    return float(np.arctan2(rotation[1, 0], rotation[0, 0]))


def random_transform(rng: np.random.Generator, max_angle: float = np.pi,
                     max_translation: float = 10.0) -> RigidTransform:
    axis = rng.normal(size=3)
    angle = rng.uniform(0.0, max_angle)
    direction = rng.normal(size=3)
    direction /= np.linalg.norm(direction)
    trans = direction * rng.uniform(0.0, max_translation)
    return RigidTransform(axis_angle(axis, angle), trans)


def rigid_flow(T: RigidTransform, coords) -> np.ndarray:
    """Per-point motion ``R c + t - c`` induced by ``T``."""
    coords = np.asarray(coords, dtype=np.float64)
    return T.apply(coords) - coords


def ego_point_transform(pose_prev: RigidTransform, pose_next: RigidTransform) -> RigidTransform:
    """Point-motion transform between two world-from-sensor poses.

    The ego-motion ``O = pose_prev^-1 pose_next`` maps next-frame coordinates
    of a static point into the previous frame; the returned ``O^-1`` maps
    previous-frame coordinates forward, so its rigid flow is the static flow.
    """
    ego = compose(pose_prev.inverse(), pose_next)
    return ego.inverse()


# ---------------------------------------------------------------------------
# weighted Kabsch

def svd3(h: np.ndarray):
    """SVD of one or a stack of 3x3 matrices: ``h = U @ diag(S) @ Vt``."""
    return np.linalg.svd(h)


def _rotation_from_h(h: np.ndarray) -> np.ndarray:
    u, _, vt = svd3(h)
    v = np.swapaxes(vt, -1, -2)
    ut = np.swapaxes(u, -1, -2)
    d = np.sign(np.linalg.det(v @ ut))
    d = np.where(d == 0, 1.0, d)
    diag = np.ones(h.shape[:-2] + (3,))
    diag[..., 2] = d
    return (v * diag[..., None, :]) @ ut


def check_kabsch_geometry(src: np.ndarray, w: np.ndarray) -> None:
    """Raise :class:`DegenerateGeometry` if weighted ``src`` spans < 2 dims."""
    centroid = w @ src
    centered = src - centroid
    cov = (centered * w[:, None]).T @ centered
    ev = np.linalg.eigvalsh(cov)
    scale = float(np.max(np.abs(src))) ** 2 + 1.0
    if ev[2] <= 1e-20 * scale or ev[1] <= 1e-12 * ev[2]:
        raise DegenerateGeometry("weighted point set is collinear or coincident")


def kabsch_solve(src: np.ndarray, dst: np.ndarray, w: np.ndarray):
    """Raw ``(R, t)`` from normalized weights; no degeneracy checks."""
    cs = w @ src
    cd = w @ dst
    h = (src - cs).T @ ((dst - cd) * w[:, None])
    rot = _rotation_from_h(h)
    return rot, cd - rot @ cs


def weighted_kabsch(src, dst, weights=None) -> RigidTransform:
    """Rigid transform minimising ``sum w_i |R src_i + t - dst_i|^2``.

    Weights are normalized to sum 1. Raises :class:`DegenerateGeometry` when
    the points carrying weight are collinear or coincident.
    """
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 3:
        raise ValueError(f"src/dst must be matching Nx3, got {src.shape} and {dst.shape}")
    if src.shape[0] < 3:
        raise DegenerateGeometry("need at least 3 correspondences")
    w = np.ones(src.shape[0]) if weights is None else np.asarray(weights, dtype=np.float64)
    if w.shape != (src.shape[0],) or np.any(w < 0) or not np.all(np.isfinite(w)):
        raise ValueError("weights must be N finite non-negative values")
    total = w.sum()
    if total <= 0:
        raise DegenerateGeometry("weights sum to zero")
    w = w / total
    check_kabsch_geometry(src, w)
    rot, trans = kabsch_solve(src, dst, w)
    return RigidTransform(rot, trans)


# ---------------------------------------------------------------------------
# camera

@dataclass(frozen=True, eq=False)
class Calibration:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    cam_from_radar: RigidTransform = field(default_factory=RigidTransform.identity)

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside image")

    @property
    def camera_center(self) -> np.ndarray:
        """Camera centre expressed in the radar frame."""
        return self.cam_from_radar.inverse().translation

    def to_dict(self) -> dict:
        return {"focal": [self.fx, self.fy], "principal": [self.cx, self.cy],
                "image_size": [self.width, self.height],
                "cam_from_radar": self.cam_from_radar.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "Calibration":
        return cls(d["focal"][0], d["focal"][1], d["principal"][0], d["principal"][1],
                   int(d["image_size"][0]), int(d["image_size"][1]),
                   RigidTransform.from_dict(d["cam_from_radar"]))


# radar (x fwd, y left, z up) -> camera (x right, y down, z fwd)
RADAR_TO_CAMERA_AXES = np.array([[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]])


def default_calibration(width: int = 320, height: int = 240, focal: float = 240.0,
                        camera_offset=(0.1, 0.0, 0.3)) -> Calibration:
    """Forward-looking camera mounted ``camera_offset`` (radar frame) from the radar."""
    rot = RADAR_TO_CAMERA_AXES
    trans = -rot @ np.asarray(camera_offset, dtype=np.float64)
    return Calibration(focal, focal, width / 2.0, height / 2.0, width, height,
                       RigidTransform(rot, trans))


def project_points(coords, calib: Calibration):
    """Vectorized pinhole projection. Returns ``(uv, depth)``.

    ``uv`` rows are NaN where the camera depth is not positive.
    """
    coords = np.asarray(coords, dtype=np.float64).reshape(-1, 3)
    cam = calib.cam_from_radar.apply(coords)
    depth = cam[:, 2]
    uv = np.full((coords.shape[0], 2), np.nan)
    ok = depth > 0
    uv[ok, 0] = calib.fx * cam[ok, 0] / depth[ok] + calib.cx
    uv[ok, 1] = calib.fy * cam[ok, 1] / depth[ok] + calib.cy
    return uv, depth


def project(point, calib: Calibration):
    """Pixel ``(u, v)`` of a radar-frame point, or ``None`` if behind the camera."""
    uv, _ = project_points(point, calib)
    if np.isnan(uv[0, 0]):
        return None
    return float(uv[0, 0]), float(uv[0, 1])


def in_image(uv: np.ndarray, calib: Calibration) -> np.ndarray:
    with np.errstate(invalid="ignore"):
        return ((uv[:, 0] >= 0) & (uv[:, 0] < calib.width)
                & (uv[:, 1] >= 0) & (uv[:, 1] < calib.height))


@dataclass(frozen=True, eq=False)
class Ray:
    origin: np.ndarray
    direction: np.ndarray

    def __post_init__(self):
        o = np.array(self.origin, dtype=np.float64).reshape(3)
        d = np.array(self.direction, dtype=np.float64).reshape(3)
        if abs(np.linalg.norm(d) - 1.0) > 1e-12:
            raise ValueError("ray direction must be unit length")
        object.__setattr__(self, "origin", o)
        object.__setattr__(self, "direction", d)

    def at(self, s: float) -> np.ndarray:
        return self.origin + s * self.direction


def pixel_directions(uv, calib: Calibration) -> np.ndarray:
    """Unit radar-frame directions of the camera rays through pixels ``uv``."""
    uv = np.asarray(uv, dtype=np.float64).reshape(-1, 2)
    d = np.stack([(uv[:, 0] - calib.cx) / calib.fx,
                  (uv[:, 1] - calib.cy) / calib.fy,
                  np.ones(uv.shape[0])], axis=1)
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    return d @ calib.cam_from_radar.rotation


def pixel_ray(pixel, calib: Calibration) -> Ray:
    d = pixel_directions(pixel, calib)[0]
    return Ray(calib.camera_center, d / np.linalg.norm(d))


def points_to_rays_distance(points, origin, directions) -> np.ndarray:
    """Distance from each point to the half-line ``origin + s*dir, s >= 0``."""
    q = np.asarray(points, dtype=np.float64) - origin
    s = np.maximum(np.sum(q * directions, axis=-1), 0.0)
    return np.linalg.norm(q - s[..., None] * directions, axis=-1)


def point_to_ray_distance(point, ray: Ray) -> float:
    return float(points_to_rays_distance(np.asarray(point, dtype=np.float64)[None],
                                         ray.origin, ray.direction[None])[0])


# ---------------------------------------------------------------------------
# transform errors and ICP

def rotation_angle(rotation: np.ndarray) -> float:
    """Rotation angle in radians.

    Cosine from the trace, sine from the skew part, combined with atan2 so
    tiny angles are not lost to ``acos`` rounding near 1.
    """
    r = np.asarray(rotation)
    cos = (np.trace(r) - 1.0) / 2.0
    skew = np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])
    sin = np.linalg.norm(skew) / 2.0
    return float(np.arctan2(sin, cos))


def rte_rae(estimate: RigidTransform, truth: RigidTransform):
    """Relative translation error (m) and relative angular error (degrees)."""
    rte = float(np.linalg.norm(estimate.translation - truth.translation))
    rae = np.rad2deg(rotation_angle(estimate.rotation @ truth.rotation.T))
    return rte, float(rae)


def icp_ego(src, dst, max_iter: int = 50, tol: float = 1e-6) -> RigidTransform:
    """Point-to-point ICP estimating the transform that moves ``src`` onto ``dst``.

    Stops when the mean nearest-neighbour residual changes by less than
    ``tol`` or after ``max_iter`` association/fit rounds.
    """
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if src.shape[0] < 3 or dst.shape[0] < 3:
        raise DegenerateGeometry("ICP needs at least 3 points per cloud")
    T = RigidTransform.identity()
    prev = np.inf
    for _ in range(max_iter):
        idx, d2 = _accel.nearest(T.apply(src), dst)
        err = float(np.mean(np.sqrt(d2)))
        if abs(prev - err) < tol:
            break
        prev = err
        T = weighted_kabsch(src, dst[idx])
    return T
