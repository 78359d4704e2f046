"""On-disk formats: sequence directories, label files and prediction dumps."""
from __future__ import annotations

import json
import os

import numpy as np

from .errors import InvalidConfig
from .geometry import Calibration, RigidTransform
from .simworld import RadarFrame, Sequence, SimConfig, TrackedBox
from .supervision import LabelBundle
from .utils import atomic_open, read_jsonl, write_json, write_jsonl

FORMAT_VERSION = 1


def _flow_name(k: int) -> str:
    return f"{k:05d}.bin"


def write_flow_map(path, flow_map: np.ndarray) -> None:
    with atomic_open(path, "wb") as fh:
        fh.write(np.ascontiguousarray(flow_map, dtype="<f4").tobytes())


def read_flow_map(path, height: int, width: int) -> np.ndarray:
    raw = np.fromfile(path, dtype="<f4")
    if raw.size != height * width * 2:
        raise InvalidConfig(f"{path}: expected {height}x{width}x2 floats, found {raw.size}")
    return raw.reshape(height, width, 2).astype(np.float64)


def write_sequence(seq: Sequence, out_dir) -> list:
    """Write a sequence directory; returns the written file paths."""
    os.makedirs(os.path.join(out_dir, "optflow"), exist_ok=True)
    paths = []
    meta = {"version": FORMAT_VERSION, "dt": seq.dt, "calib": seq.calib.to_dict(),
            "n_frames": len(seq.frames), "seed": seq.seed,
            "config": None if seq.config is None else seq.config.to_dict(),
            "rrv_bias": None if seq.rrv_bias is None else [float(b) for b in seq.rrv_bias]}
    p = os.path.join(out_dir, "meta.json")
    write_json(p, meta)
    paths.append(p)
    rows = [{"index": i, "timestamp": f.timestamp, "coords": f.coords.tolist(), "rrv": f.rrv.tolist(),
             "rcs": f.rcs.tolist(), "odom_pose": seq.odom_poses[i].to_dict()} for i, f in enumerate(seq.frames)]
    p = os.path.join(out_dir, "frames.jsonl")
    write_jsonl(p, rows)
    paths.append(p)
    p = os.path.join(out_dir, "boxes.jsonl")
    write_jsonl(p, [{"frame_index": i, "boxes": [b.to_dict() for b in boxes],
                     "gt_boxes": None if seq.gt_boxes is None else [b.to_dict() for b in seq.gt_boxes[i]]}
                    for i, boxes in enumerate(seq.boxes)])
    paths.append(p)
    for k, m in enumerate(seq.optflow):
        p = os.path.join(out_dir, "optflow", _flow_name(k))
        write_flow_map(p, m)
        paths.append(p)
    p = os.path.join(out_dir, "gt.jsonl")
    write_jsonl(p, [{"pair": k, "gt_flow": seq.gt_flow[k].tolist(),
                     "gt_moving": [bool(x) for x in seq.gt_moving[k]], "gt_ego": seq.gt_ego[k].to_dict(),
                     "point_object": None if seq.point_object is None else seq.point_object[k].tolist()}
                    for k in range(seq.n_pairs)])
    paths.append(p)
    return paths


def read_sequence(seq_dir) -> Sequence:
    """Load a sequence directory; invariants are re-checked on construction."""
    with open(os.path.join(seq_dir, "meta.json")) as fh:
        meta = json.load(fh)
    if meta.get("version") != FORMAT_VERSION:
        raise InvalidConfig(f"{seq_dir}: unsupported sequence format {meta.get('version')}")
    calib = Calibration.from_dict(meta["calib"])
    frames, poses = [], []
    for row in read_jsonl(os.path.join(seq_dir, "frames.jsonl")):
        frames.append(RadarFrame(np.asarray(row["coords"], dtype=np.float64).reshape(-1, 3), row["rrv"],
                                 row["rcs"], row["timestamp"]))
        poses.append(RigidTransform.from_dict(row["odom_pose"]))
    box_rows = read_jsonl(os.path.join(seq_dir, "boxes.jsonl"))
    boxes = [[TrackedBox.from_dict(b) for b in r["boxes"]] for r in box_rows]
    gt_boxes = None
    if all(r.get("gt_boxes") is not None for r in box_rows):
        gt_boxes = [[TrackedBox.from_dict(b) for b in r["gt_boxes"]] for r in box_rows]
    gt_rows = read_jsonl(os.path.join(seq_dir, "gt.jsonl"))
    optflow = [read_flow_map(os.path.join(seq_dir, "optflow", _flow_name(k)), calib.height, calib.width)
               for k in range(len(frames) - 1)]
    point_object = None
    if gt_rows and all(r.get("point_object") is not None for r in gt_rows):
        point_object = [np.asarray(r["point_object"], dtype=np.int64) for r in gt_rows]
    cfg = None if meta.get("config") is None else SimConfig.from_dict(meta["config"])
    return Sequence(frames, poses, boxes, optflow, calib, meta["dt"],
                    [np.asarray(r["gt_flow"], dtype=np.float64).reshape(-1, 3) for r in gt_rows],
                    [np.asarray(r["gt_moving"], dtype=bool) for r in gt_rows],
                    [RigidTransform.from_dict(r["gt_ego"]) for r in gt_rows],
                    gt_boxes=gt_boxes, point_object=point_object,
                    rrv_bias=None if meta.get("rrv_bias") is None else np.asarray(meta["rrv_bias"]),
                    config=cfg, seed=meta.get("seed"))


def write_labels(path, bundles) -> None:
    write_jsonl(path, [dict(pair=k, **b.to_dict()) for k, b in enumerate(bundles)])


def read_labels(path) -> list:
    rows = read_jsonl(path)
    return [LabelBundle.from_dict(r) for r in sorted(rows, key=lambda r: r["pair"])]


def write_predictions(path, rows) -> None:
    write_jsonl(path, rows)


def prediction_row(k: int, src_index, out) -> dict:
    return {"pair": k, "src_index": [int(i) for i in src_index], "flow": out.final_flow.tolist(),
            "init_flow": out.init_flow.tolist(), "prob": out.moving_prob.tolist(),
            "moving_mask": [bool(x) for x in out.moving_mask], "ego": out.ego.to_dict()}


def read_predictions(pred_dir) -> list:
    path = os.path.join(pred_dir, "preds.jsonl") if os.path.isdir(pred_dir) else pred_dir
    rows = sorted(read_jsonl(path), key=lambda r: r["pair"])
    for r in rows:
        r["src_index"] = np.asarray(r["src_index"], dtype=np.int64)
        r["flow"] = np.asarray(r["flow"], dtype=np.float64).reshape(-1, 3)
        r["init_flow"] = np.asarray(r["init_flow"], dtype=np.float64).reshape(-1, 3)
        r["moving_mask"] = np.asarray(r["moving_mask"], dtype=bool)
        r["ego"] = RigidTransform.from_dict(r["ego"])
    return rows
