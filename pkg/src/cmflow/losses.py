"""Training objectives built from diffcore primitives.

Every function takes Vars (or arrays) and returns a scalar Var. Empty masks
give an exact 0 that carries no gradient.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _accel
from . import diffcore as dc
from .geometry import Calibration, RigidTransform, pixel_directions, project_points

LAMBDA_OPT = 0.1
RAY_DEADZONE = 0.25
PROB_EPS = 1e-7


def _zero(*xs):
    return dc._tape(*xs).const(0.0)


def ego_loss(ego_rt, T: RigidTransform, coords) -> dc.Var:
    """Mean distance between points moved by the estimate and by ``T``."""
    coords = np.asarray(coords, dtype=np.float64)
    return dc.mean(dc.norm_rows(dc.sub(dc.apply_rt(ego_rt, coords), T.apply(coords))))


def seg_loss(prob, target) -> dc.Var:
    """Class-balanced binary cross-entropy; an empty class adds nothing."""
    target = np.asarray(target, dtype=bool)
    if dc._val(prob).shape != target.shape:
        raise ValueError("prob/target length mismatch")
    p = dc.clip(prob, PROB_EPS, 1.0 - PROB_EPS)
    terms = []
    moving = np.flatnonzero(target)
    static = np.flatnonzero(~target)
    if static.size:
        terms.append(dc.mean(dc.log(dc.sub(1.0, dc.gather_rows(p, static)))))
    if moving.size:
        terms.append(dc.mean(dc.log(dc.gather_rows(p, moving))))
    total = terms[0] if len(terms) == 1 else dc.add(terms[0], terms[1])
    return dc.mul(total, -0.5)


def mot_loss(flow, f_fg, s_l) -> dc.Var:
    idx = np.flatnonzero(np.asarray(s_l, dtype=bool))
    if idx.size == 0:
        return _zero(flow)
    target = np.asarray(f_fg)[idx]
    if np.any(np.isnan(target)):
        raise ValueError("s_l point without a foreground flow label")
    return dc.mean(dc.norm_rows(dc.sub(dc.gather_rows(flow, idx), target)))


def ray_distance(points, origin, directions) -> dc.Var:
    """Differentiable distance from points to half-lines with constant rays."""
    q = dc.sub(points, np.broadcast_to(origin, directions.shape))
    along = dc.dot_rows(q, directions)
    ahead = dc.decide(dc._val(along) > 0)
    perp = dc.sub(q, dc.mul_col(directions, along))
    return dc.norm_rows(dc.where(ahead, perp, q))


def opt_loss(flow, w_opt, mask, coords, calib: Calibration, deadzone: float = RAY_DEADZONE) -> dc.Var:
    """Distance of warped points to the rays through their flow-warped pixels.

    Distances below ``deadzone`` count as 0 but stay in the mean.
    """
    coords = np.asarray(coords, dtype=np.float64)
    w_opt = np.asarray(w_opt, dtype=np.float64)
    uv, depth = project_points(coords, calib)
    sel = np.asarray(mask, dtype=bool) & ~np.isnan(w_opt[:, 0]) & (depth > 0)
    idx = np.flatnonzero(sel)
    if idx.size == 0:
        return _zero(flow)
    dirs = pixel_directions(uv[idx] + w_opt[idx], calib)
    dirs = dirs / np.linalg.norm(dirs, axis=1, keepdims=True)
    warped = dc.add(dc.gather_rows(flow, idx), coords[idx])
    dist = ray_distance(warped, calib.camera_center, dirs)
    keep = dc.decide(dc._val(dist) >= deadzone)
    return dc.mean(dc.where(keep, dist, np.zeros(idx.size)))


def self_loss(flow, src, tgt, rrv, dt: float, weights=(1.0, 1.0, 1.0), k: int = 8) -> dc.Var:
    """Self-supervised surrogate: Chamfer to the target, flow smoothness and
    agreement of the radial flow component with the measured RRV."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    src = np.asarray(src, dtype=np.float64)
    tgt = np.asarray(tgt, dtype=np.float64)
    w_ch, w_sm, w_rad = weights
    n = src.shape[0]
    warped = dc.add(flow, src)
    terms = []
    if w_ch:
        idx = dc.decide(_accel.nearest(dc._val(warped), tgt)[0])
        terms.append(dc.mul(dc.mean(dc.norm_rows(dc.sub(warped, tgt[idx]))), w_ch))
    if w_sm and n > 1:
        kk = min(k + 1, n)
        nbr, _ = _accel.knn(src, src, kk)
        nbr = nbr[:, 1:].reshape(-1)
        centre = np.repeat(np.arange(n), kk - 1)
        diff = dc.sub(dc.gather_rows(flow, nbr), dc.gather_rows(flow, centre))
        terms.append(dc.mul(dc.mean(dc.norm_rows(diff)), w_sm))
    if w_rad:
        unit = src / np.linalg.norm(src, axis=1, keepdims=True)
        resid = dc.sub(dc.dot_rows(flow, unit), np.asarray(rrv, dtype=np.float64) * dt)
        terms.append(dc.mul(dc.mean(dc.abs_(resid)), w_rad))
    if not terms:
        return _zero(flow)
    out = terms[0]
    for t in terms[1:]:
        out = dc.add(out, t)
    return out


@dataclass
class LossReport:
    total: float
    ego: float
    seg: float
    mot: float
    opt: float
    self_: float
    lambda_opt: float = LAMBDA_OPT
    var: object = None  # the differentiable total

    def to_dict(self) -> dict:
        return {"total": self.total, "ego": self.ego, "seg": self.seg, "mot": self.mot,
                "opt": self.opt, "self": self.self_, "lambda_opt": self.lambda_opt}


def total_loss(out: dict, bundle, src, tgt, rrv, dt: float, calib: Calibration,
               lambda_opt: float = LAMBDA_OPT, self_weights=(1.0, 1.0, 1.0)) -> LossReport:
    """``ego + seg + (mot + lambda_opt * opt + self)``; missing labels drop their term."""
    final = out["final"]
    parts = {}
    if bundle.pseudo_T is not None:
        parts["ego"] = ego_loss(out["ego"], bundle.pseudo_T, src)
    if bundle.s_fused is not None:
        parts["seg"] = seg_loss(out["prob"], bundle.s_fused)
    if bundle.s_l is not None:
        parts["mot"] = mot_loss(final, bundle.f_fg, bundle.s_l)
    if bundle.w_opt is not None and lambda_opt != 0:
        mask = bundle.s_fused if bundle.s_fused is not None else np.ones(len(src), dtype=bool)
        parts["opt"] = opt_loss(final, bundle.w_opt, mask, src, calib)
    if any(self_weights):
        parts["self"] = self_loss(final, src, tgt, rrv, dt, self_weights)
    total = None
    for name, v in parts.items():
        term = dc.mul(v, lambda_opt) if name == "opt" else v
        total = term if total is None else dc.add(total, term)
    if total is None:
        total = _zero(final)
    val = {k: float(np.asarray(v.value)) for k, v in parts.items()}
    return LossReport(float(np.asarray(total.value)), val.get("ego", 0.0), val.get("seg", 0.0),
                      val.get("mot", 0.0), val.get("opt", 0.0), val.get("self", 0.0), lambda_opt, total)
