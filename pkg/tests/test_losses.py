from dataclasses import replace

import numpy as np
import pytest

from cmflow import diffcore as dc
from cmflow import losses
from cmflow.geometry import (Ray, RigidTransform, default_calibration, pixel_ray, point_to_ray_distance,
                             project, random_transform, rigid_flow)
from cmflow.simworld import RadarFrame, clean_flow_map
from cmflow.supervision import make_bundle

CAL = default_calibration(64, 48, 48.0)


def _rt(T: RigidTransform):
    return np.hstack([T.rotation, T.translation[:, None]])


def _cloud(rng, n=30):
    return np.column_stack([rng.uniform(5, 25, n), rng.uniform(-5, 5, n), rng.uniform(-1, 1, n)])


def test_ego_loss_examples(rng):
    c = _cloud(rng)
    T = random_transform(rng, 0.2, 1.0)
    assert losses.ego_loss(_rt(T), T, c).value == 0
    off = RigidTransform(T.rotation, T.translation + [1.0, 0, 0])
    assert losses.ego_loss(_rt(off), T, c).value == pytest.approx(1.0, abs=1e-12)
    est = random_transform(rng, 0.2, 1.0)
    direct = np.mean(np.linalg.norm(rigid_flow(est, c) - rigid_flow(T, c), axis=1))
    assert losses.ego_loss(_rt(est), T, c).value == pytest.approx(direct, abs=1e-12)


def test_seg_loss_examples():
    s = np.array([True, False, False, True, False])
    p = np.where(s, 0.999, 0.001)
    assert losses.seg_loss(p, s).value == pytest.approx(-np.log(0.999), rel=1e-12)
    assert losses.seg_loss(np.full(5, 0.5), s).value == pytest.approx(np.log(2), abs=1e-15)
    assert losses.seg_loss(np.full(5, 1e-12), np.zeros(5, bool)).value < 1e-6


def test_seg_loss_complement_symmetry(rng):
    p = rng.uniform(0.01, 0.99, 20)
    s = rng.random(20) < 0.3
    assert losses.seg_loss(p, s).value == pytest.approx(losses.seg_loss(1 - p, ~s).value, abs=1e-12)


def test_seg_loss_class_balance():
    # one moving point weighs as much as all static points together
    s = np.array([True] + [False] * 9)
    p = np.array([0.5] + [0.001] * 9)
    assert losses.seg_loss(p, s).value == pytest.approx(0.5 * (np.log(2) - np.log(0.999)), abs=1e-12)


def test_mot_loss_examples(rng):
    f = rng.normal(size=(6, 3))
    s_l = np.array([True, True, False, False, True, False])
    f_fg = np.where(s_l[:, None], f, np.nan)
    assert losses.mot_loss(f, f_fg, s_l).value == 0
    one = np.zeros(6, bool)
    one[2] = True
    f_fg = np.full((6, 3), np.nan)
    f_fg[2] = f[2] + [0.3, 0.4, 0]
    assert losses.mot_loss(f, f_fg, one).value == pytest.approx(0.5, abs=1e-15)
    tape = dc.Tape()
    fv = tape.param(f, name="f")
    g = tape.backward(losses.mot_loss(fv, f_fg, np.zeros(6, bool)))
    assert np.all(g["f"] == 0)


def test_mot_loss_masked_gradient(rng):
    f = rng.normal(size=(6, 3))
    s_l = np.array([True, False, True, False, False, False])
    f_fg = np.where(s_l[:, None], rng.normal(size=(6, 3)), np.nan)
    tape = dc.Tape()
    fv = tape.param(f, name="f")
    g = tape.backward(losses.mot_loss(fv, f_fg, s_l))["f"]
    assert np.all(g[~s_l] == 0) and np.all(g[s_l] != 0)
    assert dc.gradcheck(lambda t, v: losses.mot_loss(v["f"], f_fg, s_l), {"f": f}) < 1e-8


def _on_ray_setup(rng, n=5):
    c = _cloud(rng, n)
    uv = np.array([project(p, CAL) for p in c])
    w = rng.normal(0, 2, (n, 2))
    depth = rng.uniform(5, 20, n)
    targets = np.array([pixel_ray(uv[i] + w[i], CAL).at(depth[i]) for i in range(n)])
    return c, w, targets - c


def test_opt_loss_on_ray_is_zero(rng):
    c, w, flow = _on_ray_setup(rng)
    assert losses.opt_loss(flow, w, np.ones(len(c), bool), c, CAL).value < 1e-12


def test_opt_loss_deadzone_and_value(rng):
    c, w, flow = _on_ray_setup(rng, 1)
    ray = pixel_ray(project(c[0], CAL) + w[0], CAL)
    normal = np.cross(ray.direction, [0, 0, 1.0])
    normal /= np.linalg.norm(normal)
    mask = np.ones(1, bool)
    near = flow + 0.2 * normal
    assert losses.opt_loss(near, w, mask, c, CAL).value == 0
    far = flow + 1.0 * normal
    expect = point_to_ray_distance(c[0] + far[0], ray)
    assert expect == pytest.approx(1.0, abs=1e-9)
    assert losses.opt_loss(far, w, mask, c, CAL).value == pytest.approx(expect, abs=1e-12)


def test_opt_loss_scale_along_ray(rng):
    c, w, flow = _on_ray_setup(rng, 4)
    mask = np.ones(4, bool)
    off = flow + rng.normal(0, 2.0, flow.shape)
    # slide each warped point along the ray from the camera centre through it
    centre = CAL.camera_center
    slid = centre + 1.7 * (c + off - centre) - c
    for f in (off, slid):
        dist = [point_to_ray_distance(c[i] + f[i], pixel_ray(project(c[i], CAL) + w[i], CAL)) for i in range(4)]
        assert losses.opt_loss(f, w, mask, c, CAL).value == pytest.approx(
            np.mean([d if d >= 0.25 else 0.0 for d in dist]), abs=1e-12)
    on = centre + 1.7 * (c + flow - centre) - c
    assert losses.opt_loss(on, w, mask, c, CAL).value < 1e-12


def test_opt_loss_masked_points_ignored(rng):
    c, w, flow = _on_ray_setup(rng, 4)
    mask = np.array([True, True, False, False])
    flow[2:] += 50.0
    assert losses.opt_loss(flow, w, mask, c, CAL).value < 1e-12
    w_absent = w.copy()
    w_absent[:2] = np.nan
    assert losses.opt_loss(flow, w_absent, mask, c, CAL).value == 0
    tape = dc.Tape()
    fv = tape.param(flow + rng.normal(0, 2, flow.shape), name="f")
    g = tape.backward(losses.opt_loss(fv, w, mask, c, CAL))["f"]
    assert np.all(g[2:] == 0)


def test_self_loss_terms(rng):
    src = _cloud(rng, 40)
    T = RigidTransform(np.eye(3), [-0.8, 0.1, 0.0])
    flow = rigid_flow(T, src)
    tgt = src + flow
    u = src / np.linalg.norm(src, axis=1, keepdims=True)
    rrv = np.sum(u * flow, axis=1) / 0.1
    assert losses.self_loss(flow, src, tgt, rrv, 0.1).value < 1e-12
    assert losses.self_loss(np.tile([0.3, -0.2, 0.1], (40, 1)), src, tgt, rrv, 0.1,
                            weights=(0, 1, 0)).value == 0
    assert losses.self_loss(np.zeros((40, 3)), src, src, np.zeros(40), 0.1, weights=(0, 0, 1)).value == 0
    with pytest.raises(ValueError):
        losses.self_loss(flow, src, tgt, rrv, 0.0)


def test_losses_non_negative(rng):
    for _ in range(20):
        c = _cloud(rng, 12)
        f = rng.normal(size=(12, 3))
        s = rng.random(12) < 0.4
        assert losses.seg_loss(rng.random(12), s).value >= 0
        assert losses.mot_loss(f, np.where(s[:, None], rng.normal(size=(12, 3)), np.nan), s).value >= 0
        assert losses.opt_loss(f, rng.normal(size=(12, 2)), s, c, CAL).value >= 0
        assert losses.self_loss(f, c, _cloud(rng, 9), rng.normal(size=12), 0.1).value >= 0


def _perfect_case(rng):
    src = _cloud(rng, 40)
    T = RigidTransform(np.eye(3), [-0.8, 0.05, 0.0])
    flow = rigid_flow(T, src)
    u = src / np.linalg.norm(src, axis=1, keepdims=True)
    frame = RadarFrame(src, np.sum(u * flow, axis=1) / 0.1, np.zeros(40))
    fmap = clean_flow_map(frame, flow, T, CAL)
    odom_next = T.inverse()
    bundle = make_bundle(frame, RigidTransform.identity(), odom_next, [], [], fmap, CAL, 0.1)
    return src, src + flow, frame.rrv, flow, T, bundle


def test_total_loss_perfect_prediction(rng):
    src, tgt, rrv, flow, T, bundle = _perfect_case(rng)
    assert not bundle.s_fused.any()
    out = {"final": flow, "ego": _rt(T), "prob": np.full(40, 1e-9)}
    rep = losses.total_loss(out, bundle, src, tgt, rrv, 0.1, CAL)
    for name in ("ego", "seg", "mot", "opt", "self_"):
        assert getattr(rep, name) < 1e-6
    assert rep.total == pytest.approx(rep.ego + rep.seg + rep.mot + 0.1 * rep.opt + rep.self_, abs=1e-15)


def test_total_loss_lambda_zero_drops_optical(rng):
    src, tgt, rrv, flow, T, bundle = _perfect_case(rng)
    labels = replace(bundle, s_fused=np.arange(40) < 10, s_v=np.arange(40) < 10,
                     w_opt=rng.normal(0, 5, (40, 2)))
    out = {"final": flow + rng.normal(0, 1, flow.shape), "ego": _rt(T), "prob": rng.random(40)}
    with_opt = losses.total_loss(out, labels, src, tgt, rrv, 0.1, CAL, lambda_opt=0.0)
    without = losses.total_loss(out, replace(labels, w_opt=None), src, tgt, rrv, 0.1, CAL, lambda_opt=0.0)
    assert with_opt.total == without.total
    assert losses.total_loss(out, labels, src, tgt, rrv, 0.1, CAL).opt > 0


@pytest.mark.parametrize("name", ["ego", "seg", "mot", "opt", "self", "flow_head", "seg_head"])
def test_every_loss_gradcheck(name):
    from cmflow.gradcheck_suite import run_suite
    res = test_every_loss_gradcheck.cache
    if not res:
        res.update(run_suite(max_coords=3, seed=1))
    assert res[name] < 1e-4


test_every_loss_gradcheck.cache = {}
