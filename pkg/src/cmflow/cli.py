"""Command-line entry point: ``cmflow <command> ...``.

Errors print one line ``error: <Kind>: <message>`` to stderr. Exit status
is 1 for bad configs/paths and 2 when input data breaks an invariant.
"""
from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time

import numpy as np

from . import __version__
from .errors import CMFlowError, InvariantViolation

COMMANDS = ("simulate", "labels", "train", "infer", "eval", "odometry", "gradcheck")


class InvalidArgs(CMFlowError):
    """Argument combination argparse cannot express."""


def _manifest(out, command, config, seed, inputs, started):
    """Run record: ``<dir>/manifest.json`` for directory outputs, a
    ``<file>.manifest.json`` sidecar for single-file outputs."""
    from .utils import file_digest, write_json

    path = out + ".manifest.json" if os.path.splitext(out)[1] else os.path.join(out, "manifest.json")
    write_json(path, {
        "command": command, "config": config, "seed": seed,
        "input_hash": file_digest(inputs), "version": __version__,
        "started": started, "finished": time.time(),
    })


def _prepare_file(path):
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)


# ---------------------------------------------------------------------------
# commands

def cmd_simulate(args):
    from .io import write_sequence
    from .simworld import SimConfig, generate_sequence

    started = time.time()
    cfg = SimConfig.load(args.config) if args.config else SimConfig()
    seq = generate_sequence(cfg, args.seed)
    os.makedirs(args.out, exist_ok=True)
    write_sequence(seq, args.out)
    _manifest(args.out, "simulate", cfg.to_dict(), args.seed, [args.config] if args.config else [], started)
    print(f"wrote {len(seq.frames)} frames to {args.out}")
    return 0


def cmd_labels(args):
    from .io import read_sequence, write_labels
    from .metrics import seg_miou
    from .supervision import bundle_for_pair, rrv_motion_label
    from .utils import write_json

    started = time.time()
    seq = read_sequence(args.seq)
    bundles, report = [], []
    for k in range(seq.n_pairs):
        b = bundle_for_pair(seq, k, eta_v=args.eta_v, eta_l=args.eta_l, direct=args.direct_threshold)
        bundles.append(b)
        gt = seq.gt_moving[k]
        aware, _ = rrv_motion_label(seq.frames[k], b.pseudo_T, seq.dt, args.eta_v)
        direct, _ = rrv_motion_label(seq.frames[k], b.pseudo_T, seq.dt, args.eta_v, direct=True)
        report.append({"pair": k, "miou_s_v": seg_miou(b.s_v, gt)[0], "miou_fused": seg_miou(b.s_fused, gt)[0],
                       "miou_bias_aware": seg_miou(aware, gt)[0], "miou_direct": seg_miou(direct, gt)[0]})
    os.makedirs(args.out, exist_ok=True)
    write_labels(os.path.join(args.out, "labels.jsonl"), bundles)
    summary = {k: float(np.mean([r[k] for r in report])) for k in report[0] if k != "pair"}
    write_json(os.path.join(args.out, "report.json"), {"pairs": report, "mean": summary,
                                                       "direct_threshold": args.direct_threshold})
    cfg = {"eta_v": args.eta_v, "eta_l": args.eta_l, "direct_threshold": args.direct_threshold}
    _manifest(args.out, "labels", cfg, None, [args.seq], started)
    print("pairs  miou_fused  bias_aware  direct")
    for r in report:
        print(f"{r['pair']:5d}  {r['miou_fused']:10.4f}  {r['miou_bias_aware']:10.4f}  {r['miou_direct']:6.4f}")
    print(f" mean  {summary['miou_fused']:10.4f}  {summary['miou_bias_aware']:10.4f}  {summary['miou_direct']:6.4f}")
    return 0


def cmd_train(args):
    from .io import read_labels, read_sequence
    from .network import load_checkpoint, save_checkpoint
    from .training import TrainConfig, build_eval_set, build_train_set, train
    from .utils import atomic_open

    started = time.time()
    cfg = TrainConfig.load(args.config) if args.config else TrainConfig()
    if args.threads is not None:
        cfg.threads = args.threads
    seqs = [read_sequence(d) for d in args.data]
    labels = None
    if args.labels:
        if len(args.labels) != len(args.data):
            raise InvalidArgs("--labels needs one directory per --data directory")
        labels = [read_labels(os.path.join(d, "labels.jsonl")) for d in args.labels]
    init = adam = None
    start_epoch = 0
    if args.resume:
        init, extra, state = load_checkpoint(args.resume)
        start_epoch = int(extra.get("epoch", 0))
        if "adam_t" in extra:
            adam = {"t": int(extra["adam_t"]),
                    "m": {k: state["m:" + k] for k in init.params},
                    "v": {k: state["v:" + k] for k in init.params}}
    ds = build_train_set(seqs, cfg, None if init is None else init.arch, labels)
    val = None
    if args.val:
        val = build_eval_set([read_sequence(d) for d in args.val], cfg.n_points, cfg.seed)
    os.makedirs(args.out, exist_ok=True)
    log_rows = []
    res = train(ds, cfg, val=val, init=init, adam_state=adam, start_epoch=start_epoch,
                log_fn=log_rows.append)
    arrays = {}
    for k in res.params.params:
        arrays["m:" + k] = res.adam["m"][k]
        arrays["v:" + k] = res.adam["v"][k]
    extra = {"epoch": res.epochs_done, "adam_t": res.adam["t"], "config": cfg.to_dict(),
             "best_epoch": res.best_epoch}
    save_checkpoint(os.path.join(args.out, "model.ckpt"), res.params, extra, arrays)
    with atomic_open(os.path.join(args.out, "train_log.jsonl")) as fh:
        for row in log_rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    _manifest(args.out, "train", cfg.to_dict(), cfg.seed, list(args.data) + list(args.labels or []), started)
    last = log_rows[-1] if log_rows else {}
    print(f"trained {res.epochs_done} epochs; final total loss {last.get('total', float('nan')):.4f}")
    return 0


def cmd_infer(args):
    from .io import prediction_row, read_sequence, write_predictions
    from .network import ModelOutput, load_checkpoint
    from .training import build_eval_set, infer_sequence

    started = time.time()
    seq = read_sequence(args.seq)
    pairs = build_eval_set([seq], args.n_points, args.seed)[0]
    rows = []
    if args.from_gt:
        for k, p in enumerate(pairs):
            out = ModelOutput(p.gt_flow, p.gt_moving.astype(float), p.gt_ego, p.gt_moving, p.gt_flow)
            rows.append(prediction_row(k, _src_index(seq, k, args), out))
    else:
        if not args.ckpt:
            raise InvalidArgs("infer needs --ckpt (or --from-gt)")
        params, extra, _ = load_checkpoint(args.ckpt)
        clip_len = int(extra.get("config", {}).get("clip_len", 5))
        for k, out in enumerate(infer_sequence(params, pairs, clip_len, args.eta_b)):
            rows.append(prediction_row(k, _src_index(seq, k, args), out))
    os.makedirs(args.out, exist_ok=True)
    write_predictions(os.path.join(args.out, "preds.jsonl"), rows)
    _manifest(args.out, "infer", {"n_points": args.n_points, "from_gt": args.from_gt, "eta_b": args.eta_b},
              args.seed, [args.seq] + ([args.ckpt] if args.ckpt else []), started)
    print(f"wrote {len(rows)} predictions to {args.out}")
    return 0


def _src_index(seq, k, args):
    from .training import _sampled

    return _sampled(seq, k, args.n_points, args.seed)[0]


def cmd_eval(args):
    from .io import read_predictions, read_sequence
    from .metrics import mean_row, pair_row, write_metrics_csv

    started = time.time()
    seq = read_sequence(args.seq)
    preds = read_predictions(args.pred)
    if len(preds) != seq.n_pairs:
        raise InvariantViolation(f"{len(preds)} predictions for {seq.n_pairs} pairs")
    rows = []
    for r in preds:
        k, idx = r["pair"], r["src_index"]
        rows.append(pair_row(k, r["flow"], seq.gt_flow[k][idx], seq.gt_moving[k][idx], r["moving_mask"],
                             r["ego"], seq.point_transform(k), args.resolution_ratio))
    _prepare_file(args.out)
    write_metrics_csv(args.out, rows)
    _manifest(args.out, "eval", {"resolution_ratio": args.resolution_ratio}, None,
              [args.pred, args.seq], started)
    m = mean_row(rows)
    print(" ".join(f"{k}={v:.4f}" for k, v in m.items() if isinstance(v, float)))
    return 0


def cmd_odometry(args):
    from .geometry import icp_ego
    from .io import read_predictions, read_sequence
    from .metrics import accumulate_odometry
    from .utils import atomic_open

    started = time.time()
    seq = read_sequence(args.seq)
    preds = read_predictions(args.pred)
    if len(preds) != seq.n_pairs:
        raise InvariantViolation(f"{len(preds)} predictions for {seq.n_pairs} pairs")
    est, est_ate = accumulate_odometry([r["ego"] for r in preds], seq.odom_poses)
    icp = icp_ate = None
    if args.baseline == "icp":
        icp_T = [icp_ego(seq.frames[k].coords, seq.frames[k + 1].coords) for k in range(seq.n_pairs)]
        icp, icp_ate = accumulate_odometry(icp_T, seq.odom_poses)
    base = seq.odom_poses[0].inverse()
    cols = ["frame", "est_x", "est_y", "est_z", "gt_x", "gt_y", "gt_z", "est_ate"]
    if icp is not None:
        cols += ["icp_x", "icp_y", "icp_z", "icp_ate"]
    _prepare_file(args.out)
    with atomic_open(args.out) as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for i, pose in enumerate(est):
            g = (base @ seq.odom_poses[i]).translation
            row = [i, *map(repr, map(float, pose.translation)), *map(repr, map(float, g)), repr(est_ate[i])]
            if icp is not None:
                row += [*map(repr, map(float, icp[i].translation)), repr(icp_ate[i])]
            w.writerow(row)
    _manifest(args.out, "odometry", {"baseline": args.baseline}, None, [args.pred, args.seq], started)
    msg = f"final ATE model={est_ate[-1]:.4f} m"
    if icp_ate is not None:
        msg += f" icp={icp_ate[-1]:.4f} m"
    print(msg)
    return 0


def cmd_gradcheck(args):
    from .gradcheck_suite import run_suite

    results = run_suite(scale=args.scale, n_points=args.points, max_coords=args.coords, seed=args.seed)
    worst = 0.0
    for name, err in results.items():
        print(f"{name:12s} max_rel_err={err:.3e}")
        worst = max(worst, err)
    ok = worst < args.tol
    print(f"overall      max_rel_err={worst:.3e} {'PASS' if ok else 'FAIL'} (tol {args.tol:g})")
    return 0 if ok else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cmflow", description="Cross-modal supervised radar scene flow.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("--threads", type=int, default=None,
                   help="BLAS/OpenMP thread cap (falls back to CMFLOW_THREADS); 1 is the bit-exact path")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="generate a synthetic sequence directory")
    s.add_argument("--config", help="JSON simulator config")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)

    s = sub.add_parser("labels", help="extract pseudo-labels and a quality report")
    s.add_argument("--seq", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--eta-v", type=float, default=0.3)
    s.add_argument("--eta-l", type=float, default=0.05)
    s.add_argument("--direct-threshold", action="store_true", help="threshold raw RRV residuals")

    s = sub.add_parser("train", help="train a model")
    s.add_argument("--data", nargs="+", required=True, help="sequence directories")
    s.add_argument("--labels", nargs="+", help="label directories matching --data (else computed)")
    s.add_argument("--val", nargs="+", help="validation sequence directories")
    s.add_argument("--config", help="JSON training config")
    s.add_argument("--out", required=True)
    s.add_argument("--resume", help="checkpoint to continue from")

    s = sub.add_parser("infer", help="run a model over a sequence")
    s.add_argument("--ckpt")
    s.add_argument("--seq", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--n-points", type=int, default=256)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--eta-b", type=float, default=0.5)
    s.add_argument("--from-gt", action="store_true", help="dump ground truth as predictions")

    s = sub.add_parser("eval", help="per-pair metrics table")
    s.add_argument("--pred", required=True)
    s.add_argument("--seq", required=True)
    s.add_argument("--resolution-ratio", type=float, default=1.0)
    s.add_argument("--out", required=True)

    s = sub.add_parser("odometry", help="accumulated trajectories")
    s.add_argument("--pred", required=True)
    s.add_argument("--seq", required=True)
    s.add_argument("--baseline", choices=["icp", "none"], default="icp")
    s.add_argument("--out", required=True)

    s = sub.add_parser("gradcheck", help="finite-difference check of losses and heads")
    s.add_argument("--scale", type=float, default=0.125)
    s.add_argument("--points", type=int, default=32)
    s.add_argument("--coords", type=int, default=4, help="coordinates probed per tensor")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--tol", type=float, default=1e-4)
    return p


def main(argv=None) -> int:
    from .utils import resolve_threads, thread_limit

    parser = build_parser()
    args = parser.parse_args(argv)
    handler = globals()[f"cmd_{args.command}"]
    try:
        with thread_limit(resolve_threads(args.threads)):
            return handler(args)
    except InvariantViolation as exc:
        print(f"error: {type(exc).__name__}: {_one_line(exc)}", file=sys.stderr)
        return 2
    except (CMFlowError, OSError, ValueError, KeyError, json.JSONDecodeError) as exc:
        print(f"error: {type(exc).__name__}: {_one_line(exc)}", file=sys.stderr)
        return 1


def _one_line(exc) -> str:
    return " ".join(str(exc).split()) or repr(exc)


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
