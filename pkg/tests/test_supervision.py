import itertools

import numpy as np
import pytest

from cmflow.errors import InvariantViolation, ZeroRangePoint
from cmflow.geometry import (RigidTransform, default_calibration, planar_pose, project, rigid_flow,
                             rot_z)
from cmflow.metrics import seg_miou
from cmflow.simworld import RadarFrame, SimConfig, TrackedBox, generate_sequence
from cmflow.supervision import (LabelBundle, bundle_for_pair, box_motion, distill_moving,
                                ego_pseudo_transform, fuse_labels, make_bundle, mot_labels,
                                optical_labels, rrv_motion_label)

I = RigidTransform.identity()


def _frame(coords, rrv=None):
    coords = np.asarray(coords, dtype=float)
    rrv = np.zeros(len(coords)) if rrv is None else rrv
    return RadarFrame(coords, rrv, np.zeros(len(coords)))


def _cloud(rng, n=60):
    return np.column_stack([rng.uniform(5, 30, n), rng.uniform(-8, 8, n), rng.uniform(-1, 1, n)])


def test_ego_pseudo_transform_examples(rng):
    P = planar_pose(3.0, -2.0, 0.4, 1.0)
    assert ego_pseudo_transform(P, P).allclose(I, 1e-12)
    nxt = RigidTransform(np.eye(3), [1.0, 0, 0])
    T = ego_pseudo_transform(I, nxt)
    np.testing.assert_allclose(rigid_flow(T, _cloud(rng)), [[-1.0, 0, 0]] * 60, atol=1e-12)


def test_ego_pseudo_matches_simulator(small_seq):
    for k in range(small_seq.n_pairs):
        T = ego_pseudo_transform(small_seq.odom_poses[k], small_seq.odom_poses[k + 1])
        c = small_seq.frames[k].coords
        static = small_seq.point_object[k] < 0
        assert np.abs(rigid_flow(T, c) - small_seq.gt_flow[k])[static].max() < 1e-12


def test_rrv_static_exact(rng):
    frame = _frame(_cloud(rng))
    s_v, dv = rrv_motion_label(frame, I, 0.1)
    assert not s_v.any() and np.all(dv == 0)


def test_rrv_global_bias(rng):
    c = _cloud(rng)
    frame = _frame(c, np.full(len(c), 0.8))
    assert not rrv_motion_label(frame, I, 0.1)[0].any()
    assert rrv_motion_label(frame, I, 0.1, direct=True)[0].all()


def test_rrv_receding_object(rng):
    c = _cloud(rng)
    rrv = np.zeros(len(c))
    rrv[:6] = 2.0
    s_v, _ = rrv_motion_label(_frame(c, rrv), I, 0.1)
    assert np.array_equal(np.flatnonzero(s_v), np.arange(6))


def test_rrv_shift_invariance(rng):
    c = _cloud(rng)
    T = RigidTransform(rot_z(1.0), [0.8, 0.05, 0])
    u = c / np.linalg.norm(c, axis=1, keepdims=True)
    base = np.sum(u * rigid_flow(T, c), axis=1) / 0.1 + rng.uniform(0.1, 0.3, len(c))
    base[:5] += 3.0
    ref = rrv_motion_label(_frame(c, base), T, 0.1)[0]
    for beta in (0.2, 1.0, 7.5):
        assert np.array_equal(rrv_motion_label(_frame(c, base + beta), T, 0.1)[0], ref)


def test_rrv_errors():
    with pytest.raises(ZeroRangePoint):
        rrv_motion_label(_frame([[0.0, 0, 0], [1, 0, 0]]), I, 0.1)
    with pytest.raises(ValueError):
        rrv_motion_label(_frame([[1.0, 0, 0]]), I, 0.0)


def _box(x, y, yaw=0.0, id=1, size=(4.0, 2.0, 1.5)):
    return TrackedBox(id, (x, y, 0.0), size, yaw, 0)


def test_mot_labels_examples(rng):
    c = _cloud(rng)
    s_fg, f_fg = mot_labels(_frame(c), [], [])
    assert not s_fg.any() and np.isnan(f_fg).all()

    c = np.vstack([c, rng.uniform([9, -0.9, -0.7], [11, 0.9, 0.7], (10, 3))])
    s_fg, f_fg = mot_labels(_frame(c), [_box(10, 0)], [_box(10.5, 0)])
    assert s_fg[-10:].all()
    np.testing.assert_allclose(f_fg[s_fg], [[0.5, 0, 0]] * int(s_fg.sum()), atol=1e-12)

    b0, b1 = _box(10, 0, 0.0), _box(10, 0, np.deg2rad(10))
    s_fg, f_fg = mot_labels(_frame(c), [b0], [b1])
    expect = rigid_flow(box_motion(b0, b1), c[s_fg])
    np.testing.assert_allclose(f_fg[s_fg], expect, atol=1e-9)
    # rotation about the box centre leaves the centre fixed
    assert np.allclose(box_motion(b0, b1).apply(np.array([[10.0, 0, 0]])), [[10, 0, 0]], atol=1e-12)


def test_mot_labels_oriented_box():
    pts = np.array([[10.0, 1.8, 0.0], [11.8, 0.0, 0.0]])
    s_fg, _ = mot_labels(_frame(pts), [_box(10, 0, np.pi / 2)], [])
    assert s_fg.tolist() == [True, False]


def test_mot_labels_unmatched_and_duplicates():
    pts = np.array([[10.0, 0, 0]])
    s_fg, f_fg = mot_labels(_frame(pts), [_box(10, 0)], [_box(10, 0, id=9)])
    assert s_fg[0] and np.isnan(f_fg[0]).all()
    with pytest.raises(InvariantViolation):
        mot_labels(_frame(pts), [_box(10, 0), _box(20, 0)], [])


def test_mot_labels_match_gt_flow(small_seq):
    checked = 0
    for k in range(small_seq.n_pairs):
        c = small_seq.frames[k].coords
        s_fg, f_fg = mot_labels(small_seq.frames[k], small_seq.gt_boxes[k], small_seq.gt_boxes[k + 1])
        obj = small_seq.point_object[k]
        nxt = {b.id for b in small_seq.gt_boxes[k + 1]}
        for b in small_seq.gt_boxes[k]:
            sel = (obj == b.id - 1) & s_fg
            if b.id in nxt and sel.any():
                assert np.abs(f_fg[sel] - small_seq.gt_flow[k][sel]).max() < 1e-9
                checked += sel.sum()
    assert checked > 0


def test_distill_examples():
    F_r = np.tile([-1.0, 0, 0], (4, 1))
    s_fg = np.array([True, True, True, False])
    parked = F_r.copy()
    parked[3] = np.nan
    assert not distill_moving(parked, s_fg, F_r).any()
    moving = F_r + [1.0, 0, 0]
    moving[3] = np.nan
    assert distill_moving(moving, s_fg, F_r).tolist() == [True, True, True, False]
    edge = F_r + [0.0, 0.05, 0]
    edge[3] = np.nan
    assert not distill_moving(edge, s_fg, F_r, eta_l=0.05).any()


def test_fuse_truth_table():
    for a, b in itertools.product([False, True], repeat=2):
        assert fuse_labels(np.array([a]), np.array([b]))[0] == (a or b)
    s_v = np.array([True, False, True])
    assert np.array_equal(fuse_labels(np.zeros(3, bool), s_v), s_v)
    assert fuse_labels(np.array([True, False, False]), np.zeros(3, bool))[0]


def test_fuse_monotone(rng):
    for _ in range(200):
        s_l, s_v = rng.random(8) < 0.5, rng.random(8) < 0.5
        base = fuse_labels(s_l, s_v)
        i = rng.integers(8)
        for a, b in ((s_l.copy(), s_v), (s_l, s_v.copy())):
            a[i] = True
            b[i] = True
            assert np.all(fuse_labels(a, b) >= base)


def test_optical_examples():
    cal = default_calibration(64, 48, 48.0)
    pts = np.array([[10.0, 1.0, 0.5], [8.0, -2.0, 1.0], [-5.0, 0, 0], [10.0, 50.0, 0]])
    w = optical_labels(_frame(pts), np.zeros((48, 64, 2)), cal)
    assert np.all(w[:2] == 0) and np.isnan(w[2:]).all()

    v, u = np.mgrid[0:48, 0:64].astype(float)
    ident = np.stack([u, v], axis=-1)
    w = optical_labels(_frame(pts[:2]), ident, cal)
    for i in range(2):
        uv = project(pts[i], cal)
        assert w[i].tolist() == [np.floor(uv[0] + 0.5), np.floor(uv[1] + 0.5)]


def test_optical_bilinear_is_exact_on_linear_map():
    cal = default_calibration(64, 48, 48.0)
    v, u = np.mgrid[0:48, 0:64].astype(float)
    ident = np.stack([u, v], axis=-1)
    pts = np.array([[10.0, 1.0, 0.5], [8.0, -2.0, 1.0]])
    w = optical_labels(_frame(pts), ident, cal, sampling="bilinear")
    for i in range(2):
        np.testing.assert_allclose(w[i], project(pts[i], cal), atol=1e-9)
    with pytest.raises(ValueError):
        optical_labels(_frame(pts), ident, cal, sampling="cubic")
    bad = ident.copy()
    bad[0, 0, 0] = np.nan
    with pytest.raises(ValueError):
        optical_labels(_frame(pts), bad, cal)


def test_bundle_noiseless_matches_gt():
    cfg = SimConfig(n_frames=5, rrv_bias=0.0, n_movers=4)
    seq = generate_sequence(cfg, 21)
    agree, tangential_only = [], True
    for k in range(seq.n_pairs):
        b = bundle_for_pair(seq, k)
        gt = seq.gt_moving[k]
        agree.append(np.mean(b.s_fused == gt))
        # any miss is a mover point; false alarms do not occur on noiseless data
        miss = b.s_fused != gt
        tangential_only &= bool(np.all(gt[miss]))
    assert np.mean(agree) > 0.97
    assert tangential_only


def test_bundle_empty_boxes_static_scene(rng):
    frame = _frame(_cloud(rng))
    b = make_bundle(frame, I, I, [], [])
    assert not b.s_fused.any() and not b.s_fg.any()


def test_bundle_invariants_random(rng):
    for _ in range(1000):
        c = _cloud(rng, 12)
        frame = _frame(c, rng.normal(0, 1, 12))
        boxes0 = [_box(rng.uniform(5, 30), rng.uniform(-8, 8), rng.uniform(-3, 3), id=i,
                       size=(6.0, 5.0, 3.0)) for i in range(3)]
        boxes1 = [TrackedBox(b.id, np.add(b.center, rng.normal(0, 0.5, 3)), b.size, b.yaw, 1)
                  for b in boxes0 if rng.random() < 0.7]
        nxt = planar_pose(rng.normal(0, 1), rng.normal(0, 0.2), rng.normal(0, 0.05))
        b = make_bundle(frame, I, nxt, boxes0, boxes1)
        assert not np.any(b.s_l & ~b.s_fused)
        assert not np.any(b.s_l & ~b.s_fg)
        assert not np.any(b.f_fg_mask & ~b.s_fg)


def test_bias_aware_beats_direct():
    cfg = SimConfig(n_frames=8, rrv_bias=1.5, rrv_bias_min=0.5, rrv_noise=0.1)
    aware, direct = [], []
    for seed in range(3):
        seq = generate_sequence(cfg, seed)
        for k in range(seq.n_pairs):
            gt = seq.gt_moving[k]
            T = ego_pseudo_transform(seq.odom_poses[k], seq.odom_poses[k + 1])
            aware.append(seg_miou(rrv_motion_label(seq.frames[k], T, seq.dt)[0], gt))
            direct.append(seg_miou(rrv_motion_label(seq.frames[k], T, seq.dt, direct=True)[0], gt))
    assert np.mean(aware) >= np.mean(direct)


def test_bundle_validation_and_roundtrip(small_seq):
    b = bundle_for_pair(small_seq, 0)
    again = LabelBundle.from_dict(b.to_dict())
    for name in ("s_v", "s_fg", "s_l", "s_fused"):
        assert np.array_equal(getattr(b, name), getattr(again, name))
    np.testing.assert_array_equal(b.f_fg, again.f_fg)
    np.testing.assert_array_equal(b.w_opt, again.w_opt)
    assert again.pseudo_T.allclose(b.pseudo_T, 0)
    with pytest.raises(InvariantViolation):
        LabelBundle(None, None, None, np.zeros(2, bool), None, np.array([True, False]), None, None)
