"""Adam training over mini-clips with pseudo-label supervision."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import diffcore as dc
from .errors import InvalidConfig, NonFiniteLoss, ShapeMismatch
from .geometry import RigidTransform
from .losses import LAMBDA_OPT, total_loss
from .network import (ETA_B, ParamStore, PairGeometry, default_arch, forward, forward_graph,
                      input_features, pair_geometry)
from .simworld import RadarFrame, sample_indices
from .supervision import ETA_L, ETA_V, LabelBundle, apply_modalities, bundle_for_pair
from .utils import derive_seed, rng_for, thread_limit

CONFIG_VERSION = 1
ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


@dataclass
class TrainConfig:
    lr: float = 1e-3
    decay: float = 0.9
    epochs: int = 10
    batch_size: int = 4
    clip_len: int = 5
    seed: int = 0
    eta_b: float = ETA_B
    eta_v: float = ETA_V
    eta_l: float = ETA_L
    lambda_opt: float = LAMBDA_OPT
    self_weights: tuple = (1.0, 1.0, 1.0)
    scale: float = 0.125
    temporal: bool = True
    odometer: bool = True
    lidar: bool = True
    camera: bool = True
    n_points: int = 256
    grad_clip: float = 10.0
    threads: int | None = None

    def __post_init__(self):
        self.self_weights = tuple(float(v) for v in self.self_weights)
        self.validate()

    def validate(self) -> None:
        if not self.lr > 0:
            raise InvalidConfig("lr must be positive")
        if not 0 < self.decay <= 1:
            raise InvalidConfig("decay must be in (0, 1]")
        if self.clip_len < 1 or self.epochs < 0 or self.batch_size < 1 or self.n_points < 1:
            raise InvalidConfig("clip_len, batch_size and n_points must be >= 1; epochs >= 0")
        if not 0 < self.eta_b < 1 or self.eta_v <= 0 or self.eta_l <= 0:
            raise InvalidConfig("thresholds out of range")
        if self.lambda_opt < 0 or any(w < 0 for w in self.self_weights) or len(self.self_weights) != 3:
            raise InvalidConfig("loss weights must be three non-negative values")
        if not self.scale > 0:
            raise InvalidConfig("scale must be positive")
        if self.grad_clip <= 0:
            raise InvalidConfig("grad_clip must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["self_weights"] = list(self.self_weights)
        d["version"] = CONFIG_VERSION
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        version = d.pop("version", CONFIG_VERSION)
        if version != CONFIG_VERSION:
            raise InvalidConfig(f"unsupported train config version {version}")
        unknown = sorted(set(d) - {f.name for f in fields(cls)})
        if unknown:
            raise InvalidConfig(f"unknown train config keys: {', '.join(unknown)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise InvalidConfig(str(exc)) from None

    @classmethod
    def load(cls, path) -> "TrainConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


# ---------------------------------------------------------------------------
# dataset views

@dataclass(eq=False)
class TrainPair:
    """Inputs and pseudo-labels of one sampled frame pair. Carries no ground truth."""
    src: RadarFrame
    tgt: RadarFrame
    labels: LabelBundle
    calib: object
    dt: float
    geometry: PairGeometry | None = None
    src_index: np.ndarray | None = None


@dataclass(eq=False)
class EvalPair:
    src: RadarFrame
    tgt: RadarFrame
    gt_flow: np.ndarray
    gt_moving: np.ndarray
    gt_ego: RigidTransform
    geometry: PairGeometry | None = None


def _sampled(seq, k, n_points, seed):
    key = seq.seed if seq.seed is not None else 0
    i_src = sample_indices(len(seq.frames[k]), n_points, rng_for(seed, "sample", key, k, "src"))
    i_tgt = sample_indices(len(seq.frames[k + 1]), n_points, rng_for(seed, "sample", key, k, "tgt"))
    return i_src, i_tgt


def build_train_set(sequences, config: TrainConfig, arch: dict | None = None, labels=None):
    """One list of :class:`TrainPair` per sequence.

    Labels are computed on full frames (or taken from ``labels``, one bundle
    list per sequence), filtered by the modality switches, then restricted to
    the sampled points.
    """
    arch = arch or default_arch(config.scale, config.temporal)
    out = []
    for s_i, seq in enumerate(sequences):
        pairs = []
        for k in range(seq.n_pairs):
            if labels is None:
                bundle = bundle_for_pair(seq, k, odometer=config.odometer, lidar=config.lidar,
                                         camera=config.camera, eta_v=config.eta_v, eta_l=config.eta_l)
            else:
                bundle = apply_modalities(labels[s_i][k], config.odometer, config.lidar, config.camera)
            i_src, i_tgt = _sampled(seq, k, config.n_points, config.seed)
            src, tgt = seq.frames[k].subset(i_src), seq.frames[k + 1].subset(i_tgt)
            pairs.append(TrainPair(src, tgt, bundle.subset(i_src), seq.calib, seq.dt,
                                   pair_geometry(src.coords, tgt.coords, arch), i_src))
        out.append(pairs)
    return out


def build_eval_set(sequences, n_points: int = 256, seed: int = 0, arch: dict | None = None):
    out = []
    for seq in sequences:
        pairs = []
        for k in range(seq.n_pairs):
            i_src, i_tgt = _sampled(seq, k, n_points, seed)
            src, tgt = seq.frames[k].subset(i_src), seq.frames[k + 1].subset(i_tgt)
            pairs.append(EvalPair(src, tgt, seq.gt_flow[k][i_src], seq.gt_moving[k][i_src],
                                  seq.point_transform(k),
                                  None if arch is None else pair_geometry(src.coords, tgt.coords, arch)))
        out.append(pairs)
    return out


def split_clips(pairs, clip_len: int):
    """Consecutive ``(start, stop)`` windows; the short remainder is kept.

    ``pairs`` is a pair count, a Sequence or a list of pairs.
    """
    if clip_len < 1:
        raise InvalidConfig("clip length must be >= 1")
    if isinstance(pairs, (int, np.integer)):
        n_pairs = int(pairs)
    else:
        n_pairs = pairs.n_pairs if hasattr(pairs, "n_pairs") else len(pairs)
    return [(s, min(s + clip_len, n_pairs)) for s in range(0, n_pairs, clip_len)]


# ---------------------------------------------------------------------------
# optimiser

def adam_init(params: dict) -> dict:
    return {"t": 0, "m": {k: np.zeros_like(v) for k, v in params.items()},
            "v": {k: np.zeros_like(v) for k, v in params.items()}}


def adam_step(params: dict, grads: dict, state: dict, lr: float):
    """One bias-corrected Adam update; returns new ``(params, state)``."""
    b1, b2 = ADAM_BETAS
    t = state["t"] + 1
    new_p, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeMismatch(f"gradient for {name} has shape {g.shape}, expected {p.shape}")
        m = b1 * state["m"][name] + (1 - b1) * g
        v = b2 * state["v"][name] + (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        new_p[name] = p - lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)
        new_m[name], new_v[name] = m, v
    return new_p, {"t": t, "m": new_m, "v": new_v}


def clip_global_norm(grads: dict, max_norm: float):
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if norm > max_norm:
        scale = max_norm / norm
        grads = {k: g * scale for k, g in grads.items()}
    return grads, norm


def lr_at(config: TrainConfig, epoch: int) -> float:
    return config.lr * config.decay ** epoch


# ---------------------------------------------------------------------------
# training loop

def pair_loss(P, pair: TrainPair, arch: dict, config: TrainConfig, hidden=None):
    """Graph for one pair: returns ``(LossReport, new_hidden)``."""
    feats_s = input_features(pair.src.rrv, pair.src.rcs)
    feats_t = input_features(pair.tgt.rrv, pair.tgt.rcs)
    geom = pair.geometry or pair_geometry(pair.src.coords, pair.tgt.coords, arch)
    s = pair.labels.s_fused
    out = forward_graph(P, pair.src.coords, feats_s, feats_t, geom, arch, hidden=hidden,
                        ego_seg=None if s is None else s.astype(np.float64), eta_b=config.eta_b)
    report = total_loss(out, pair.labels, pair.src.coords, pair.tgt.coords, pair.src.rrv, pair.dt,
                        pair.calib, config.lambda_opt, config.self_weights)
    return report, out["hidden"]


@dataclass
class TrainResult:
    params: ParamStore
    log: list = field(default_factory=list)
    adam: dict | None = None
    epochs_done: int = 0
    best_epoch: int | None = None
    val_epe: list = field(default_factory=list)


def train(dataset, config: TrainConfig, val=None, init: ParamStore | None = None,
          adam_state: dict | None = None, start_epoch: int = 0, hooks: dict | None = None,
          log_fn=None) -> TrainResult:
    """Train on ``dataset`` (a list of TrainPair lists, one per sequence).

    With ``val`` (EvalPair lists) the parameters with the lowest validation
    EPE are returned.
    """
    config.validate()
    hooks = hooks or {}
    arch = default_arch(config.scale, config.temporal) if init is None else init.arch
    params = init.copy() if init is not None else ParamStore.init(arch, derive_seed(config.seed, "init"))
    state = adam_state or adam_init(params.params)
    clips = [(i, a, b) for i, seq in enumerate(dataset) for a, b in split_clips(len(seq), config.clip_len)]
    if not clips:
        raise InvalidConfig("empty training set")
    result = TrainResult(params)
    best = (math.inf, None)
    step = 0
    with thread_limit(config.threads):
        for epoch in range(start_epoch, config.epochs):
            lr = lr_at(config, epoch)
            order = rng_for(config.seed, "shuffle", epoch).permutation(len(clips))
            for b0 in range(0, len(order), config.batch_size):
                batch = [clips[j] for j in order[b0:b0 + config.batch_size]]
                n_pairs = sum(b - a for _, a, b in batch)
                grads = {k: np.zeros_like(v) for k, v in params.params.items()}
                sums = {}
                for seq_i, a, b in batch:
                    tape = dc.Tape()
                    P = {k: tape.param(v, k) for k, v in params.params.items()}
                    hidden = np.zeros(params.hidden_size) if arch["temporal"] else None
                    if "clip_start" in hooks:
                        hooks["clip_start"](hidden)
                    clip_total = None
                    for k in range(a, b):
                        rep, hidden = pair_loss(P, dataset[seq_i][k], arch, config, hidden)
                        if not math.isfinite(rep.total):
                            raise NonFiniteLoss(f"non-finite loss at epoch {epoch}, sequence {seq_i}, pair {k}")
                        for key, val_ in rep.to_dict().items():
                            sums[key] = sums.get(key, 0.0) + val_
                        term = dc.mul(rep.var, 1.0 / n_pairs)
                        clip_total = term if clip_total is None else dc.add(clip_total, term)
                    g = tape.backward(clip_total)
                    for name in grads:
                        grads[name] += g[name]
                grads, gnorm = clip_global_norm(grads, config.grad_clip)
                new_p, state = adam_step(params.params, grads, state, lr)
                params = ParamStore(arch, new_p)
                entry = {"epoch": epoch, "step": step, "lr": lr, "grad_norm": gnorm}
                entry.update({k: v / n_pairs for k, v in sums.items()})
                entry["lambda_opt"] = config.lambda_opt
                result.log.append(entry)
                if log_fn is not None:
                    log_fn(entry)
                step += 1
            result.epochs_done = epoch + 1
            if val is not None:
                epe = validation_epe(params, val, config.clip_len, config.eta_b)
                result.val_epe.append(epe)
                if epe < best[0]:
                    best = (epe, params.copy())
                    result.best_epoch = epoch
    result.params = best[1] if best[1] is not None else params
    result.adam = state
    return result


# ---------------------------------------------------------------------------
# inference helpers

def infer_sequence(params: ParamStore, pairs, clip_len: int = 5, eta_b: float = ETA_B):
    """Model outputs for consecutive pairs; the hidden state resets every ``clip_len``."""
    outputs = []
    hidden = None
    for k, pair in enumerate(pairs):
        if k % clip_len == 0:
            hidden = None
        geom = pair.geometry or pair_geometry(pair.src.coords, pair.tgt.coords, params.arch)
        out = forward(params, pair.src.coords, input_features(pair.src.rrv, pair.src.rcs),
                      pair.tgt.coords, input_features(pair.tgt.rrv, pair.tgt.rcs), hidden=hidden,
                      eta_b=eta_b, geometry=geom)
        hidden = out.hidden
        outputs.append(out)
    return outputs


def validation_epe(params: ParamStore, val, clip_len: int = 5, eta_b: float = ETA_B) -> float:
    errs = []
    for pairs in val:
        for pair, out in zip(pairs, infer_sequence(params, pairs, clip_len, eta_b)):
            errs.append(float(np.mean(np.linalg.norm(out.final_flow - pair.gt_flow, axis=1))))
    return float(np.mean(errs))
