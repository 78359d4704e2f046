import numpy as np
import pytest

from cmflow import diffcore as dc
from cmflow.geometry import RigidTransform, random_transform, rigid_flow
from cmflow.network import (ParamStore, cloud_geometry, cost_volume, default_arch, ego_head, encode,
                            flow_head, forward, input_features, load_checkpoint, pair_geometry,
                            refine, save_checkpoint, seg_head, set_conv)
from cmflow.errors import InvalidConfig, ShapeMismatch

ARCH = default_arch(0.125)


@pytest.fixture(scope="module")
def params():
    return ParamStore.init(ARCH, 3)


def _pair(rng, n=40, m=35):
    src = np.column_stack([rng.uniform(4, 25, n), rng.uniform(-8, 8, n), rng.uniform(-1, 1, n)])
    tgt = np.column_stack([rng.uniform(4, 25, m), rng.uniform(-8, 8, m), rng.uniform(-1, 1, m)])
    fs = input_features(rng.normal(0, 3, n), rng.normal(0, 5, n))
    ft = input_features(rng.normal(0, 3, m), rng.normal(0, 5, m))
    return src, fs, tgt, ft


def _sc1(params, coords, feats):
    return set_conv(params.params, "sc1", feats, cloud_geometry(coords, ARCH), ARCH, ARCH["sc1_widths"]).value


def test_set_conv_single_point(params):
    out = _sc1(params, np.array([[5.0, 0, 0]]), np.array([[0.3, -0.2]]))
    assert out.shape == (1, 4 * ARCH["sc1_widths"][-1]) and np.all(np.isfinite(out))


def test_set_conv_duplicate_points(params):
    c = np.array([[5.0, 0, 0], [5.0, 0, 0], [9.0, 1, 0]])
    f = np.array([[0.1, 0.2], [0.1, 0.2], [0.5, 0.5]])
    out = _sc1(params, c, f)
    assert np.array_equal(out[0], out[1])


def test_set_conv_shape_mismatch(params):
    with pytest.raises(ShapeMismatch):
        _sc1(params, np.zeros((3, 3)) + [5, 0, 0], np.zeros((2, 2)))


def test_set_conv_permutation(params, rng):
    src, fs, _, _ = _pair(rng)
    perm = rng.permutation(len(src))
    np.testing.assert_allclose(_sc1(params, src[perm], fs[perm]), _sc1(params, src, fs)[perm], atol=1e-12)


def _cv(params, src, fs, tgt, ft):
    P = params.params
    pg = pair_geometry(src, tgt, ARCH)
    return cost_volume(P, encode(P, fs, pg.src, ARCH), encode(P, ft, pg.tgt, ARCH), pg, ARCH).value


def test_cost_volume_translation_and_tgt_permutation(params, rng):
    src, fs, tgt, ft = _pair(rng)
    base = _cv(params, src, fs, tgt, ft)
    shift = np.array([3.0, -1.0, 0.5])
    np.testing.assert_allclose(_cv(params, src + shift, fs, tgt + shift, ft), base, atol=1e-9)
    perm = rng.permutation(len(tgt))
    np.testing.assert_allclose(_cv(params, src, fs, tgt[perm], ft[perm]), base, atol=1e-9)


def test_cost_volume_single_points(params):
    out = _cv(params, np.array([[5.0, 0, 0]]), np.array([[0.1, 0.1]]),
              np.array([[5.5, 0, 0]]), np.array([[0.2, 0.0]]))
    assert out.shape == (1, ARCH["cv_widths"][-1]) and np.all(np.isfinite(out))


def test_forward_structure(params, rng):
    src, fs, tgt, ft = _pair(rng, 40, 25)
    out = forward(params, src, fs, tgt, ft, hidden=np.zeros(params.hidden_size))
    assert out.init_flow.shape == (40, 3) and out.final_flow.shape == (40, 3)
    assert np.all((out.moving_prob > 0) & (out.moving_prob < 1))
    assert np.array_equal(out.moving_mask, out.moving_prob > 0.5)
    static = ~out.moving_mask
    rigid = out.ego.apply(src) - src
    assert np.array_equal(out.final_flow[static], rigid[static])
    assert np.array_equal(out.final_flow[~static], out.init_flow[~static])
    again = forward(params, src, fs, tgt, ft, hidden=np.zeros(params.hidden_size))
    assert np.array_equal(again.final_flow, out.final_flow)


def test_hidden_none_equals_zero(params, rng):
    src, fs, tgt, ft = _pair(rng)
    a = forward(params, src, fs, tgt, ft)
    b = forward(params, src, fs, tgt, ft, hidden=np.zeros(params.hidden_size))
    assert np.array_equal(a.init_flow, b.init_flow) and np.array_equal(a.hidden, b.hidden)
    c = forward(params, src, fs, tgt, ft, hidden=a.hidden)
    assert not np.array_equal(c.init_flow, a.init_flow)


def test_non_temporal_forward(rng):
    arch = default_arch(0.125, temporal=False)
    p = ParamStore.init(arch, 0)
    assert not any(k.startswith("gru") for k in p.params)
    src, fs, tgt, ft = _pair(rng)
    assert forward(p, src, fs, tgt, ft).hidden is None


def test_forward_permutation_equivariance(params, rng):
    src, fs, tgt, ft = _pair(rng)
    perm = rng.permutation(len(src))
    a = forward(params, src, fs, tgt, ft)
    b = forward(params, src[perm], fs[perm], tgt, ft)
    np.testing.assert_allclose(b.init_flow, a.init_flow[perm], atol=1e-9)
    np.testing.assert_allclose(b.moving_prob, a.moving_prob[perm], atol=1e-9)
    assert b.ego.allclose(a.ego, 1e-9)
    np.testing.assert_allclose(b.final_flow, a.final_flow[perm], atol=1e-9)


def test_heads(params, rng):
    P = dict(params.params)
    e = rng.normal(0, 50, (7, 2 * ARCH["sc2_out"]))
    prob = seg_head(P, e, ARCH).value
    assert np.all((prob > 0) & (prob < 1))
    zeroed = {k: (np.zeros_like(v) if k.startswith("flow") and ".w" in k else v) for k, v in P.items()}
    last = len(ARCH["head_widths"])
    zeroed[f"flow.l{last}.b"] = np.array([0.3, -0.1, 0.2])
    np.testing.assert_allclose(flow_head(zeroed, e, ARCH).value, [[0.3, -0.1, 0.2]] * 7, atol=0)


def test_ego_head_examples(rng):
    src = rng.normal(size=(30, 3)) * 5
    T = random_transform(rng, 0.2, 2.0)
    rt = ego_head(src, rigid_flow(T, src), np.zeros(30)).value
    assert RigidTransform(rt[:, :3], rt[:, 3]).allclose(T, 1e-9)

    flow = rigid_flow(T, src)
    flow[15:] = rng.normal(0, 5, (15, 3))
    seg = np.r_[np.zeros(15), np.ones(15)]
    rt = ego_head(src, flow, seg).value
    assert RigidTransform(rt[:, :3], rt[:, 3]).allclose(T, 1e-9)

    with pytest.warns(RuntimeWarning):
        ego_head(src, rigid_flow(T, src), np.ones(30))


def test_refine_examples(rng):
    src = rng.normal(size=(10, 3))
    init = rng.normal(size=(10, 3))
    rt = np.hstack([np.eye(3), [[0.5], [0], [0]]])
    rigid = np.tile([0.5, 0, 0], (10, 1))
    f, m = refine(init, np.full(10, 0.9), rt, src)
    assert np.array_equal(f.value, init) and m.all()
    f, m = refine(init, np.full(10, 0.5), rt, src)
    np.testing.assert_allclose(f.value, rigid, atol=1e-15)
    prob = rng.random(10)
    f, m = refine(init, prob, rt, src, eta_b=0.3)
    for i in range(10):
        expect = init[i] if prob[i] > 0.3 else (src[i] + [0.5, 0, 0]) - src[i]
        assert np.array_equal(f.value[i], expect)
    with pytest.raises(InvalidConfig):
        refine(init, prob, rt, src, eta_b=1.0)


def test_checkpoint_roundtrip(params, tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, params, extra={"epoch": 3}, arrays={"m:a": np.arange(4.0)})
    loaded, extra, state = load_checkpoint(path)
    assert extra == {"epoch": 3} and loaded.arch == params.arch
    assert list(loaded.params) == list(params.params)
    for k, v in params.params.items():
        assert np.array_equal(loaded.params[k], v.astype(np.float32).astype(np.float64))
    assert np.array_equal(state["m:a"], np.arange(4.0))
    raw = path.read_bytes()
    (tmp_path / "bad.ckpt").write_bytes(raw[:-4])
    with pytest.raises(InvalidConfig):
        load_checkpoint(tmp_path / "bad.ckpt")
    (tmp_path / "junk.ckpt").write_bytes(b"hello world")
    with pytest.raises(InvalidConfig):
        load_checkpoint(tmp_path / "junk.ckpt")


def test_default_widths_match_manifest():
    a = default_arch()
    assert a["radii"] == [2.0, 4.0, 8.0, 16.0] and a["nsamples"] == [4, 8, 16, 32]
    assert a["head_widths"] == [256, 128, 64] and a["sc2_out"] == 256
    assert a["cv_neighbors"] == 8 and a["patch_neighbors"] == 8


def test_head_gradcheck(params, rng):
    e = rng.normal(0, 1, (6, 2 * ARCH["sc2_out"]))
    heads = {k: v for k, v in params.params.items() if k.startswith(("flow.", "seg."))}
    err = dc.gradcheck(lambda t, v: dc.add(dc.sum_(flow_head(v, v["e"], ARCH)),
                                           dc.sum_(seg_head(v, v["e"], ARCH))),
                       {**heads, "e": e}, max_coords=6, freeze=True)
    assert err < 1e-6
