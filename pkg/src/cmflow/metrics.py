"""Scene-flow, segmentation and odometry evaluation."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass

import numpy as np

from .geometry import RigidTransform, compose, rte_rae
from .utils import atomic_open

CSV_COLUMNS = ["pair", "epe", "acc_s", "acc_r", "rne", "mrne", "srne", "miou", "rte", "rae"]


@dataclass
class FlowMetrics:
    epe: float
    acc_s: float
    acc_r: float
    rne: float
    mrne: float | None
    srne: float | None


def _accuracy(err, mag, abs_tol, rel_tol):
    rel_ok = np.zeros_like(err, dtype=bool)
    nz = mag > 0
    rel_ok[nz] = err[nz] / mag[nz] < rel_tol
    return float(np.mean((err < abs_tol) | rel_ok))


def flow_metrics(pred, gt, moving_gt, resolution_ratio: float = 1.0) -> FlowMetrics:
    """EPE, strict/relaxed accuracy and resolution-normalized errors."""
    if resolution_ratio <= 0:
        raise ValueError("resolution_ratio must be positive")
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    moving_gt = np.asarray(moving_gt, dtype=bool)
    if pred.shape != gt.shape or moving_gt.shape != (gt.shape[0],) or gt.shape[0] == 0:
        raise ValueError("pred/gt/moving shapes disagree")
    err = np.linalg.norm(pred - gt, axis=1)
    mag = np.linalg.norm(gt, axis=1)
    epe = float(np.mean(err))

    def part(mask):
        return float(np.mean(err[mask])) / resolution_ratio if mask.any() else None

    return FlowMetrics(epe, _accuracy(err, mag, 0.05, 0.05), _accuracy(err, mag, 0.1, 0.1),
                       epe / resolution_ratio, part(moving_gt), part(~moving_gt))


def seg_miou(pred_mask, gt_mask):
    """Mean of moving and static IoU; a class absent from both scores 1."""
    pred = np.asarray(pred_mask, dtype=bool)
    gt = np.asarray(gt_mask, dtype=bool)
    if pred.shape != gt.shape:
        raise ValueError("mask length mismatch")
    ious = []
    for cls in (True, False):
        p, g = pred == cls, gt == cls
        union = np.sum(p | g)
        ious.append(1.0 if union == 0 else float(np.sum(p & g)) / float(union))
    return (ious[0] + ious[1]) / 2.0, ious[0], ious[1]


def accumulate_odometry(transforms, gt_poses=None):
    """Chain per-pair point-motion transforms into ego poses.

    ``pose_k = pose_{k-1} o T_k^-1`` starting from identity. With
    ``gt_poses`` (expressed relative to the first GT pose) also returns the
    per-pose absolute translation error.
    """
    transforms = list(transforms)
    if not transforms:
        raise ValueError("need at least one transform")
    poses = [RigidTransform.identity()]
    for T in transforms:
        poses.append(compose(poses[-1], T.inverse()))
    if gt_poses is None:
        return poses
    base = gt_poses[0].inverse()
    rel = [compose(base, p) for p in gt_poses]
    ate = [float(np.linalg.norm(p.translation - g.translation)) for p, g in zip(poses, rel)]
    return poses, ate


def pair_row(k: int, pred_flow, gt_flow, gt_moving, pred_mask=None, pred_T=None, gt_T=None,
             resolution_ratio: float = 1.0) -> dict:
    fm = flow_metrics(pred_flow, gt_flow, gt_moving, resolution_ratio)
    row = {"pair": k, "epe": fm.epe, "acc_s": fm.acc_s, "acc_r": fm.acc_r, "rne": fm.rne,
           "mrne": fm.mrne, "srne": fm.srne, "miou": None, "rte": None, "rae": None}
    if pred_mask is not None:
        row["miou"] = seg_miou(pred_mask, gt_moving)[0]
    if pred_T is not None and gt_T is not None:
        row["rte"], row["rae"] = rte_rae(pred_T, gt_T)
    return row


def mean_row(rows) -> dict:
    out = {"pair": "MEAN"}
    for col in CSV_COLUMNS[1:]:
        vals = [r[col] for r in rows if r[col] is not None]
        out[col] = float(np.mean(vals)) if vals else None
    return out


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return "nan" if math.isnan(v) else repr(v)
    return str(v)


def metrics_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in list(rows) + [mean_row(rows)]:
        w.writerow([_fmt(r[c]) for c in CSV_COLUMNS])
    return buf.getvalue()


def write_metrics_csv(path, rows) -> None:
    with atomic_open(path) as fh:
        fh.write(metrics_csv(rows))
