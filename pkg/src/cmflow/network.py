"""Two-stage radar scene-flow model.

Stage one: a siamese multi-scale set-conv encoder, a cost volume carrying
target features to source points, a second set-conv stack and an optional
GRU on the global feature; two MLP heads give initial flow and moving
probability. Stage two: a weighted Kabsch fit on points believed static
gives the ego transform, whose rigid flow replaces the initial flow of
those points.

All layer widths are multiplied by ``scale``; ``scale=1`` gives the full
512-wide backbone.
"""
from __future__ import annotations

import json
import struct
import warnings
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from . import _accel
from . import diffcore as dc
from .errors import InvalidConfig, ShapeMismatch
from .geometry import RigidTransform
from .utils import atomic_open

ETA_B = 0.5
LOGIT_CLAMP = 30.0
FEATURE_SCALE = (0.1, 0.05)  # rrv (m/s), rcs (dBsm) -> roughly unit range
CKPT_MAGIC = b"CMFLOWCK"
CKPT_VERSION = 1


def default_arch(scale: float = 1.0, temporal: bool = True) -> dict:
    def w(x):
        return max(1, int(round(x * scale)))

    return {
        "scale": scale,
        "radii": [2.0, 4.0, 8.0, 16.0],
        "nsamples": [4, 8, 16, 32],
        "in_features": 2,
        "sc1_widths": [w(32), w(32), w(64)],
        "sc1_out": w(256),
        "cv_widths": [w(512), w(512), w(512)],
        "sc2_widths": [w(512), w(256), w(64)],
        "sc2_out": w(256),
        "head_widths": [w(256), w(128), w(64)],
        "cv_neighbors": 8,
        "patch_neighbors": 8,
        "temporal": temporal,
        "slope": 0.1,
    }


def _glorot(rng, fan_in, fan_out, shape=None):
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, shape if shape is not None else (fan_in, fan_out))


class ParamStore:
    """Named weight arrays plus the architecture they instantiate."""

    def __init__(self, arch: dict, params=None):
        self.arch = dict(arch)
        self.params = OrderedDict(params or {})

    @classmethod
    def init(cls, arch: dict, seed: int = 0) -> "ParamStore":
        rng = np.random.default_rng(seed)
        store = cls(arch)
        p = store.params
        a = arch
        c_in = a["in_features"]

        def mlp(prefix, widths, first_parts):
            """First layer split into ``first_parts`` (name -> fan-in) blocks."""
            fan_in = sum(first_parts.values())
            for part, k in first_parts.items():
                p[f"{prefix}.l0.w{part}"] = _glorot(rng, fan_in, widths[0], (k, widths[0]))
            p[f"{prefix}.l0.b"] = np.zeros(widths[0])
            for i in range(1, len(widths)):
                p[f"{prefix}.l{i}.w"] = _glorot(rng, widths[i - 1], widths[i])
                p[f"{prefix}.l{i}.b"] = np.zeros(widths[i])

        for s in range(len(a["radii"])):
            mlp(f"sc1.s{s}", a["sc1_widths"], {"f": c_in, "o": 3})
        mlp("sc1.fuse", [a["sc1_out"]], {"": len(a["radii"]) * a["sc1_widths"][-1]})
        g = 2 * a["sc1_out"]
        mlp("cv", a["cv_widths"], {"s": g, "t": g, "o": 3})
        fe = a["cv_widths"][-1] + g + c_in
        for s in range(len(a["radii"])):
            mlp(f"sc2.s{s}", a["sc2_widths"], {"f": fe, "o": 3})
        mlp("sc2.fuse", [a["sc2_out"]], {"": 2 * len(a["radii"]) * a["sc2_widths"][-1]})
        hsz = a["sc2_out"]
        if a["temporal"]:
            for gate in ("z", "r", "n"):
                p[f"gru.w{gate}"] = _glorot(rng, hsz, hsz)
                p[f"gru.u{gate}"] = _glorot(rng, hsz, hsz)
                p[f"gru.b{gate}"] = np.zeros(hsz)
        e = 2 * hsz
        mlp("flow", a["head_widths"] + [3], {"": e})
        mlp("seg", a["head_widths"] + [1], {"": e})
        return store

    @property
    def hidden_size(self) -> int:
        return self.arch["sc2_out"]

    def copy(self) -> "ParamStore":
        return ParamStore(self.arch, {k: v.copy() for k, v in self.params.items()})

    def n_params(self) -> int:
        return int(sum(v.size for v in self.params.values()))


# ---------------------------------------------------------------------------
# neighbourhood structure (depends on coordinates only, so it is cached)

@dataclass
class CloudGeometry:
    groups: list  # per scale (N, K) neighbour indices
    offsets: list  # per scale (N*K, 3) offsets divided by the radius
    n: int


def cloud_geometry(coords: np.ndarray, arch: dict) -> CloudGeometry:
    groups = _accel.ball_group(coords, coords, arch["radii"], arch["nsamples"])
    offsets = [((coords[g] - coords[:, None, :]) / r).reshape(-1, 3) for g, r in zip(groups, arch["radii"])]
    return CloudGeometry(groups, offsets, coords.shape[0])


def _inverse_distance(d2):
    w = 1.0 / (np.sqrt(d2) + 0.1)
    return w / w.sum(axis=1, keepdims=True)


@dataclass
class PairGeometry:
    src: CloudGeometry
    tgt: CloudGeometry
    cv_idx: np.ndarray  # (N, k) target neighbours of each source point
    cv_off: np.ndarray  # (N*k, 3) target minus source offsets
    cv_w: np.ndarray  # (N, k)
    patch_idx: np.ndarray  # (N, k) source neighbours
    patch_w: np.ndarray


def pair_geometry(src_coords, tgt_coords, arch: dict) -> PairGeometry:
    src_coords = np.asarray(src_coords, dtype=np.float64)
    tgt_coords = np.asarray(tgt_coords, dtype=np.float64)
    k_cv = min(arch["cv_neighbors"], tgt_coords.shape[0])
    cv_idx, cv_d2 = _accel.knn(src_coords, tgt_coords, k_cv)
    k_p = min(arch["patch_neighbors"], src_coords.shape[0])
    patch_idx, patch_d2 = _accel.knn(src_coords, src_coords, k_p)
    return PairGeometry(
        cloud_geometry(src_coords, arch), cloud_geometry(tgt_coords, arch),
        cv_idx, (tgt_coords[cv_idx] - src_coords[:, None, :]).reshape(-1, 3), _inverse_distance(cv_d2),
        patch_idx, _inverse_distance(patch_d2))


# ---------------------------------------------------------------------------
# layers

def _act(x, slope):
    return dc.leaky_relu(x, slope)


def _mlp_tail(P, prefix, h, n_layers, slope, last_act=True):
    for i in range(1, n_layers):
        h = dc.linear(h, P[f"{prefix}.l{i}.w"], P[f"{prefix}.l{i}.b"])
        if last_act or i < n_layers - 1:
            h = _act(h, slope)
    return h


def _dense(P, prefix, x, n_layers, slope, last_act=True):
    h = dc.linear(x, P[f"{prefix}.l0.w"], P[f"{prefix}.l0.b"])
    if last_act or n_layers > 1:
        h = _act(h, slope)
    return _mlp_tail(P, prefix, h, n_layers, slope, last_act)


def _wsum(x, w):
    """``sum_k w[n, k] * x[n, k, :]`` with constant weights."""
    n, k = w.shape
    flat = dc.reshape(x, (n * k, -1))
    scaled = dc.mul_col(flat, w.reshape(-1))
    return dc.sum_(dc.reshape(scaled, (n, k, -1)), axis=1)


def set_conv(P, prefix: str, features, geom: CloudGeometry, arch: dict, widths):
    """Multi-scale grouping + shared MLP + neighbour max-pool, concatenated over scales."""
    slope = arch["slope"]
    fv = dc._val(features)
    if fv.ndim != 2 or fv.shape[0] != geom.n:
        raise ShapeMismatch(f"set_conv: features {fv.shape} for {geom.n} points")
    outs = []
    for s, g in enumerate(geom.groups):
        pre = f"{prefix}.s{s}"
        n, k = g.shape
        a = dc.linear(features, P[f"{pre}.l0.wf"])  # per point, then gathered
        h = dc.add(dc.reshape(dc.gather_rows(a, g), (n * k, widths[0])),
                   dc.linear(geom.offsets[s], P[f"{pre}.l0.wo"], P[f"{pre}.l0.b"]))
        h = _mlp_tail(P, pre, _act(h, slope), len(widths), slope)
        outs.append(dc.max_axis(dc.reshape(h, (n, k, widths[-1])), axis=1))
    return dc.concat(outs, axis=1)


def _with_global(x):
    n = dc._val(x).shape[0]
    return dc.concat([x, dc.repeat_rows(dc.max_axis(x, axis=0), n)], axis=1)


def encode(P, features, geom: CloudGeometry, arch: dict):
    """Local-global features of one cloud (N, 2 * sc1_out)."""
    local = set_conv(P, "sc1", features, geom, arch, arch["sc1_widths"])
    local = _dense(P, "sc1.fuse", local, 1, arch["slope"])
    return _with_global(local)


def cost_volume(P, g_src, g_tgt, pg: PairGeometry, arch: dict):
    """Point-to-patch costs over target neighbours, then patch-to-patch smoothing."""
    slope = arch["slope"]
    widths = arch["cv_widths"]
    n, k = pg.cv_idx.shape
    a = dc.linear(g_src, P["cv.l0.ws"])
    b = dc.linear(g_tgt, P["cv.l0.wt"])
    a_rep = dc.gather_rows(a, np.repeat(np.arange(n), k))
    b_rep = dc.reshape(dc.gather_rows(b, pg.cv_idx), (n * k, widths[0]))
    h = dc.add(dc.add(a_rep, b_rep), dc.linear(pg.cv_off, P["cv.l0.wo"], P["cv.l0.b"]))
    h = _mlp_tail(P, "cv", _act(h, slope), len(widths), slope)
    point_cost = _wsum(dc.reshape(h, (n, k, widths[-1])), pg.cv_w)
    return _wsum(dc.gather_rows(point_cost, pg.patch_idx), pg.patch_w)


def gru_cell(P, x, h):
    """Standard GRU update on (1, C) row vectors."""
    z = dc.sigmoid(dc.add(dc.linear(x, P["gru.wz"], P["gru.bz"]), dc.linear(h, P["gru.uz"])))
    r = dc.sigmoid(dc.add(dc.linear(x, P["gru.wr"], P["gru.br"]), dc.linear(h, P["gru.ur"])))
    cand = dc.tanh(dc.add(dc.linear(x, P["gru.wn"], P["gru.bn"]), dc.linear(dc.mul(r, h), P["gru.un"])))
    return dc.add(dc.mul(dc.sub(1.0, z), h), dc.mul(z, cand))


def backbone(P, src_feats, tgt_feats, pg: PairGeometry, arch: dict, hidden=None):
    """Per-source-point embedding E (N, 2 * sc2_out) and the new hidden state."""
    g_src = encode(P, src_feats, pg.src, arch)
    g_tgt = encode(P, tgt_feats, pg.tgt, arch)
    cv = cost_volume(P, g_src, g_tgt, pg, arch)
    fe = dc.concat([cv, g_src, src_feats], axis=1)
    local = set_conv(P, "sc2", fe, pg.src, arch, arch["sc2_widths"])
    local = _dense(P, "sc2.fuse", _with_global(local), 1, arch["slope"])
    glob = dc.max_axis(local, axis=0)
    n = pg.src.n
    new_hidden = None
    if arch["temporal"]:
        if hidden is None:
            hidden = np.zeros(arch["sc2_out"])
        h_prev = dc.reshape(hidden, (1, arch["sc2_out"])) if isinstance(hidden, dc.Var) else hidden.reshape(1, -1)
        new_hidden = dc.reshape(gru_cell(P, dc.reshape(glob, (1, -1)), h_prev), (arch["sc2_out"],))
        glob = new_hidden
    return dc.concat([local, dc.repeat_rows(glob, n)], axis=1), new_hidden


def flow_head(P, e, arch):
    return _dense(P, "flow", e, len(arch["head_widths"]) + 1, arch["slope"], last_act=False)


def seg_head(P, e, arch):
    """Moving probabilities; logits are clamped so they never round to 0 or 1."""
    logit = _dense(P, "seg", e, len(arch["head_widths"]) + 1, arch["slope"], last_act=False)
    logit = dc.clip(logit, -LOGIT_CLAMP, LOGIT_CLAMP)
    return dc.reshape(dc.sigmoid(logit), (dc._val(logit).shape[0],))


def ego_head(coords, init_flow, seg):
    """Weighted Kabsch with weights ``1 - seg``; ``[R|t]`` as a (3, 4) node.

    Falls back to uniform weights (with a warning) when every point looks
    moving.
    """
    coords = np.asarray(coords, dtype=np.float64)
    dst = dc.add(init_flow, coords)
    weights = dc.sub(1.0, seg)
    wv = dc._val(weights)
    if np.any(wv < 0):
        raise ValueError("seg values must lie in [0, 1]")
    if wv.sum() <= 1e-9 * max(1, wv.size):
        warnings.warn("all points classified moving; ego fit uses uniform weights", RuntimeWarning)
        weights = np.ones(coords.shape[0])
    return dc.kabsch(coords, dst, weights)


def refine(init_flow, prob, ego_rt, coords, eta_b: float = ETA_B):
    """Swap in the ego-induced flow wherever ``prob <= eta_b``."""
    if not 0 < eta_b < 1:
        raise InvalidConfig("eta_b must be in (0, 1)")
    mask = dc.decide(dc._val(prob) > eta_b)
    rigid = dc.sub(dc.apply_rt(ego_rt, coords), coords)
    return dc.where(mask, init_flow, rigid), mask


def input_features(rrv, rcs) -> np.ndarray:
    return np.stack([np.asarray(rrv) * FEATURE_SCALE[0], np.asarray(rcs) * FEATURE_SCALE[1]], axis=1)


@dataclass
class ModelOutput:
    init_flow: np.ndarray
    moving_prob: np.ndarray
    ego: RigidTransform
    moving_mask: np.ndarray
    final_flow: np.ndarray
    hidden: np.ndarray | None = None


def forward_graph(P, src_coords, src_feats, tgt_feats, pg: PairGeometry, arch: dict,
                  hidden=None, ego_seg=None, eta_b: float = ETA_B) -> dict:
    """Build the full graph; returns Vars/arrays keyed by output name.

    ``ego_seg`` overrides the moving probabilities fed to the ego head
    (the fused pseudo label during training).
    """
    e, new_hidden = backbone(P, src_feats, tgt_feats, pg, arch, hidden)
    init_flow = flow_head(P, e, arch)
    prob = seg_head(P, e, arch)
    ego_rt = ego_head(src_coords, init_flow, prob if ego_seg is None else np.asarray(ego_seg, dtype=np.float64))
    final, mask = refine(init_flow, prob, ego_rt, src_coords, eta_b)
    return {"init_flow": init_flow, "prob": prob, "ego": ego_rt, "final": final, "mask": mask,
            "hidden": new_hidden}


def forward(params: ParamStore, src_coords, src_feats, tgt_coords, tgt_feats, hidden=None,
            eta_b: float = ETA_B, geometry: PairGeometry | None = None) -> ModelOutput:
    """Gradient-free forward pass on raw arrays."""
    src_coords = np.asarray(src_coords, dtype=np.float64)
    pg = geometry or pair_geometry(src_coords, tgt_coords, params.arch)
    tape = dc.Tape()
    P = {k: tape.const(v) for k, v in params.params.items()}
    out = forward_graph(P, src_coords, tape.const(src_feats), tape.const(tgt_feats), pg, params.arch,
                        hidden=None if hidden is None else np.asarray(hidden, dtype=np.float64), eta_b=eta_b)
    rt = out["ego"].value
    h = out["hidden"]
    return ModelOutput(out["init_flow"].value, out["prob"].value, RigidTransform(rt[:, :3], rt[:, 3]),
                       out["mask"], out["final"].value, None if h is None else h.value)


def predict_frames(params: ParamStore, src, tgt, hidden=None, eta_b: float = ETA_B) -> ModelOutput:
    """Forward on two :class:`RadarFrame`-like objects."""
    return forward(params, src.coords, input_features(src.rrv, src.rcs), tgt.coords,
                   input_features(tgt.rrv, tgt.rcs), hidden=hidden, eta_b=eta_b)


# ---------------------------------------------------------------------------
# checkpoints

def save_checkpoint(path, params: ParamStore, extra: dict | None = None, arrays: dict | None = None) -> None:
    """Header (magic, LE u32 length, JSON manifest) then LE f32 arrays in manifest order."""
    entries, blobs = [], []
    for group, items in (("params", params.params), ("state", arrays or {})):
        for name, value in items.items():
            a = np.ascontiguousarray(value, dtype="<f4")
            entries.append({"group": group, "name": name, "shape": list(a.shape), "dtype": "<f4"})
            blobs.append(a.tobytes())
    header = {"format_version": CKPT_VERSION, "arch": params.arch, "tensors": entries, "extra": extra or {}}
    raw = json.dumps(header, sort_keys=True).encode()
    with atomic_open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", len(raw)))
        fh.write(raw)
        for b in blobs:
            fh.write(b)


def load_checkpoint(path):
    """Returns ``(ParamStore, extra, state_arrays)``; arrays come back as f64."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:len(CKPT_MAGIC)] != CKPT_MAGIC:
        raise InvalidConfig(f"{path}: not a checkpoint file")
    off = len(CKPT_MAGIC)
    try:
        (hlen,) = struct.unpack("<I", data[off:off + 4])
        off += 4
        header = json.loads(data[off:off + hlen].decode())
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise InvalidConfig(f"{path}: corrupt checkpoint header ({exc})") from None
    off += hlen
    if header.get("format_version") != CKPT_VERSION:
        raise InvalidConfig(f"{path}: unsupported checkpoint version {header.get('format_version')}")
    params, state = OrderedDict(), OrderedDict()
    for e in header["tensors"]:
        count = int(np.prod(e["shape"], dtype=np.int64))
        if off + 4 * count > len(data):
            raise InvalidConfig(f"{path}: truncated checkpoint")
        a = np.frombuffer(data, dtype=e["dtype"], count=count, offset=off).reshape(e["shape"])
        off += 4 * count
        (params if e["group"] == "params" else state)[e["name"]] = a.astype(np.float64)
    if off != len(data):
        raise InvalidConfig(f"{path}: trailing or missing bytes")
    return ParamStore(header["arch"], params), header.get("extra", {}), state
