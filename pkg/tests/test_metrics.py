import csv
import io

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from cmflow.geometry import RigidTransform, compose, random_transform
from cmflow.metrics import (CSV_COLUMNS, accumulate_odometry, flow_metrics, metrics_csv, pair_row,
                            seg_miou)
from cmflow.simworld import SimConfig, generate_sequence


def test_flow_perfect(rng):
    gt = rng.normal(size=(20, 3))
    m = flow_metrics(gt, gt, rng.random(20) < 0.5)
    assert (m.epe, m.acc_s, m.acc_r, m.rne, m.mrne, m.srne) == (0, 1, 1, 0, 0, 0)


def test_flow_relative_branch():
    gt = np.array([[2.0, 0, 0], [1.0, 0, 0], [0.0, 0, 0]])
    pred = gt + [0, 0.07, 0]
    m = flow_metrics(pred, gt, np.zeros(3, bool))
    # 0.07/2 = 3.5% passes strict; 0.07/1 = 7% only relaxed; zero-GT only absolute (0.07 < 0.1)
    assert m.acc_s == pytest.approx(1 / 3) and m.acc_r == 1.0
    assert m.mrne is None and m.srne == pytest.approx(0.07)


def test_flow_resolution_ratio(rng):
    gt, pred = rng.normal(size=(10, 3)), rng.normal(size=(10, 3))
    m1 = flow_metrics(pred, gt, np.ones(10, bool))
    m2 = flow_metrics(pred, gt, np.ones(10, bool), resolution_ratio=2.0)
    assert m2.rne == m1.epe / 2 and m2.epe == m1.epe
    with pytest.raises(ValueError):
        flow_metrics(pred, gt, np.ones(10, bool), resolution_ratio=0)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, (12, 3), elements=st.floats(-5, 5)),
       arrays(np.float64, (12, 3), elements=st.floats(-5, 5)), st.integers(0, 2**31 - 1))
def test_flow_metric_properties(pred, gt, seed):
    moving = np.random.default_rng(seed).random(12) < 0.5
    m = flow_metrics(pred, gt, moving)
    assert 0 <= m.acc_s <= m.acc_r <= 1
    perm = np.random.default_rng(seed).permutation(12)
    p = flow_metrics(pred[perm], gt[perm], moving[perm])
    assert p.acc_s == m.acc_s and p.acc_r == m.acc_r
    assert p.epe == pytest.approx(m.epe, rel=1e-12, abs=1e-15)


def test_miou_examples():
    gt = np.array([True, True, False, False])
    assert seg_miou(gt, gt) == (1.0, 1.0, 1.0)
    assert seg_miou(np.zeros(4, bool), gt) == (0.25, 0.0, 0.5)
    assert seg_miou(~gt, gt) == (0.0, 0.0, 0.0)
    assert seg_miou(np.zeros(3, bool), np.zeros(3, bool)) == (1.0, 1.0, 1.0)


def test_odometry_examples():
    I = RigidTransform.identity()
    poses = accumulate_odometry([I] * 5)
    assert all(p.allclose(I, 0) for p in poses)
    step = RigidTransform(np.eye(3), [-1.0, 0, 0])  # static points move back as the ego moves 1 m forward
    poses = accumulate_odometry([step] * 10)
    np.testing.assert_allclose(poses[-1].translation, [10, 0, 0], atol=1e-12)
    with pytest.raises(ValueError):
        accumulate_odometry([])


def test_odometry_reproduces_simulator_poses():
    cfg = SimConfig(n_frames=101, n_static=20, n_movers=0, n_parked=0, ego_yaw_rate=(0.05, 0.08))
    seq = generate_sequence(cfg, 2)
    poses, ate = accumulate_odometry([seq.point_transform(k) for k in range(seq.n_pairs)], seq.odom_poses)
    assert max(ate) < 1e-9
    base = seq.odom_poses[0]
    for p, g in zip(poses, seq.odom_poses):
        assert compose(base, p).allclose(g, 1e-9)


def test_pair_row_and_csv(rng):
    gt = rng.normal(size=(8, 3))
    T = random_transform(rng)
    rows = [pair_row(k, gt + 0.01 * k, gt, np.arange(8) < 3, np.arange(8) < 3, T, T) for k in range(3)]
    text = metrics_csv(rows)
    parsed = list(csv.DictReader(io.StringIO(text)))
    assert list(parsed[0]) == CSV_COLUMNS
    assert [r["pair"] for r in parsed] == ["0", "1", "2", "MEAN"]
    assert float(parsed[-1]["epe"]) == pytest.approx(np.mean([r["epe"] for r in rows]))
    assert float(parsed[0]["miou"]) == 1.0 and float(parsed[0]["rte"]) == 0.0
    no_mask = metrics_csv([pair_row(0, gt, gt, np.zeros(8, bool))])
    assert no_mask.splitlines()[1].endswith(",,,")
