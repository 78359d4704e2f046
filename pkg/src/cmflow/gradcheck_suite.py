"""Finite-difference checks of every loss and head on a small random pair."""
from __future__ import annotations

import numpy as np

from . import diffcore as dc
from . import losses
from .geometry import default_calibration, random_transform
from .network import (ParamStore, default_arch, ego_head, flow_head, forward_graph, input_features,
                      pair_geometry, seg_head)
from .supervision import LabelBundle
from .utils import rng_for

TOTAL_FLOOR = 1e-5


def random_case(n_points: int = 32, seed: int = 0):
    """Random source/target clouds in front of the sensor with full labels."""
    rng = rng_for(seed, "gradcheck")
    src = np.column_stack([rng.uniform(4, 20, n_points), rng.uniform(-6, 6, n_points),
                           rng.uniform(-1, 1.5, n_points)])
    T = random_transform(rng, max_angle=0.05, max_translation=1.0)
    tgt = T.apply(src) + rng.normal(0, 0.05, src.shape)
    rrv = rng.normal(0, 2, n_points)
    rcs = rng.normal(0, 5, n_points)
    s_fg = rng.random(n_points) < 0.4
    f_fg = np.where(s_fg[:, None], rng.normal(0, 0.5, (n_points, 3)), np.nan)
    s_l = s_fg & (rng.random(n_points) < 0.7)
    s_v = rng.random(n_points) < 0.3
    w = rng.normal(0, 3, (n_points, 2))
    w[rng.random(n_points) < 0.1] = np.nan
    bundle = LabelBundle(T, T.apply(src) - src, s_v, s_fg, f_fg, s_l, s_l | s_v, w)
    return {"src": src, "tgt": tgt, "rrv": rrv, "rcs": rcs, "T": T, "bundle": bundle,
            "calib": default_calibration(), "dt": 0.1, "rng": rng}


def run_suite(scale: float = 0.125, n_points: int = 32, max_coords: int | None = 4, seed: int = 0,
              eps: float = 1e-5) -> dict:
    """Max relative error per check, keyed by check name."""
    case = random_case(n_points, seed)
    rng = case["rng"]
    src, tgt, b, calib = case["src"], case["tgt"], case["bundle"], case["calib"]
    flow0 = rng.normal(0, 0.3, src.shape)
    prob0 = rng.uniform(0.05, 0.95, n_points)
    res = {}

    res["ego"] = dc.gradcheck(
        lambda t, v: losses.ego_loss(ego_head(src, v["flow"], v["seg"]), case["T"], src),
        {"flow": flow0, "seg": prob0}, eps=eps, freeze=True)
    res["seg"] = dc.gradcheck(lambda t, v: losses.seg_loss(v["p"], b.s_fused), {"p": prob0}, eps=eps, freeze=True)
    res["mot"] = dc.gradcheck(lambda t, v: losses.mot_loss(v["f"], b.f_fg, b.s_l), {"f": flow0}, eps=eps, freeze=True)
    res["opt"] = dc.gradcheck(lambda t, v: losses.opt_loss(v["f"], b.w_opt, b.s_fused, src, calib),
                              {"f": flow0}, eps=eps, freeze=True)
    res["self"] = dc.gradcheck(lambda t, v: losses.self_loss(v["f"], src, tgt, case["rrv"], case["dt"]),
                               {"f": flow0}, eps=eps, freeze=True)

    arch = default_arch(scale)
    params = ParamStore.init(arch, seed)
    width = params.params["flow.l0.w"].shape[0]
    e0 = rng.normal(0, 1, (n_points, width))
    res["flow_head"] = dc.gradcheck(
        lambda t, v: dc.sum_(dc.mul(flow_head(v, v["e"], arch), 0.1)),
        {**_head_params(params, "flow"), "e": e0}, eps=eps, max_coords=max_coords, seed=seed, freeze=True)
    res["seg_head"] = dc.gradcheck(
        lambda t, v: dc.sum_(seg_head(v, v["e"], arch)),
        {**_head_params(params, "seg"), "e": e0}, eps=eps, max_coords=max_coords, seed=seed, freeze=True)

    feats_s = input_features(case["rrv"], case["rcs"])
    feats_t = input_features(case["rrv"][::-1], case["rcs"][::-1])
    pg = pair_geometry(src, tgt, arch)
    hidden = rng.normal(0, 0.1, params.hidden_size) if arch["temporal"] else None

    def total(t, v):
        out = forward_graph(v, src, feats_s, feats_t, pg, arch, hidden=hidden,
                            ego_seg=b.s_fused.astype(np.float64))
        return losses.total_loss(out, b, src, tgt, case["rrv"], case["dt"], calib).var

    # thousands of leaky-ReLU inputs sit within a probe step of their kink, so
    # branch decisions are frozen. The whole network sums O(1) terms and central
    # differences carry ~1e-10 of roundoff; below the floor the check is
    # effectively absolute (1e-9 at tol 1e-4).
    res["total"] = dc.gradcheck(total, params.params, eps=eps, max_coords=max_coords, seed=seed,
                                floor=TOTAL_FLOOR, freeze=True)
    return res


def _head_params(params: ParamStore, prefix: str) -> dict:
    return {k: v for k, v in params.params.items() if k.startswith(prefix + ".")}
