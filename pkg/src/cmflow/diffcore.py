"""Small tape-based reverse-mode autodiff over numpy arrays.

Values are plain ``np.ndarray``s wrapped in :class:`Var`. Only operations
with at least one gradient-carrying input are recorded. Shapes must match
exactly; the only implicit broadcast is scalar-with-array.

The weighted-Kabsch primitive has a closed-form backward derived from the
symmetry of ``R^T H`` at the optimum; a finite-difference variant is kept
for cross-checking.

Every data-dependent branch (activation masks, argmax, nearest-neighbour
association, thresholds) goes through :func:`decide`. Inside
:class:`frozen_branches` the decisions of a first pass are replayed on later
passes, which makes finite-difference checks see one smooth piece of a
piecewise-smooth function.
"""
from __future__ import annotations

from contextlib import nullcontext

import numpy as np

from . import _accel
from .errors import DomainError, NonScalarOutput, ShapeMismatch
from .geometry import _rotation_from_h

KABSCH_STEP = 1e-6

_RECORDER = None


class frozen_branches:
    """Context manager recording branch decisions, then replaying them after :meth:`rewind`."""

    def __init__(self):
        self.log = []
        self.replay = False
        self.pos = 0

    def __enter__(self):
        global _RECORDER
        self._prev, _RECORDER = _RECORDER, self
        return self

    def __exit__(self, *exc):
        global _RECORDER
        _RECORDER = self._prev
        return False

    def rewind(self) -> None:
        self.replay = True
        self.pos = 0


def decide(value):
    """Pass a branch decision through the active recorder (identity when none)."""
    rec = _RECORDER
    if rec is None:
        return value
    if not rec.replay:
        rec.log.append(value)
        return value
    if rec.pos >= len(rec.log):
        raise RuntimeError("replayed graph takes more branches than the recorded one")
    old = rec.log[rec.pos]
    rec.pos += 1
    if np.shape(old) != np.shape(value):
        raise RuntimeError("replayed branch decision changed shape")
    return old


class Var:
    __slots__ = ("value", "tape", "id", "requires_grad", "name")

    def __init__(self, value, tape=None, requires_grad=False, name=None):
        self.value = value
        self.tape = tape
        self.requires_grad = requires_grad
        self.id = -1
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Var(shape={self.value.shape}, grad={self.requires_grad}, name={self.name})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return mul(self, -1.0)


class Tape:
    """Ordered record of differentiable operations."""

    def __init__(self, dtype=np.float64):
        self.dtype = dtype
        self.records = []  # (out_id, input_ids, vjp)
        self.n_nodes = 0
        self.leaves = {}  # id -> (name, value); never the Var itself, which points back here

    def _new_id(self) -> int:
        self.n_nodes += 1
        return self.n_nodes - 1

    def param(self, value, name=None) -> Var:
        v = Var(np.asarray(value, dtype=self.dtype), self, True, name)
        v.id = self._new_id()
        self.leaves[v.id] = (name, v.value)
        return v

    def const(self, value) -> Var:
        return Var(np.asarray(value, dtype=self.dtype), self, False)

    def record(self, value, inputs, vjp) -> Var:
        """Wrap ``value``; record ``vjp(g) -> tuple of input grads`` if needed."""
        live = [x for x in inputs if isinstance(x, Var) and x.requires_grad]
        out = Var(value, self, bool(live))
        if live:
            out.id = self._new_id()
            ids = [x.id if isinstance(x, Var) and x.requires_grad else -1 for x in inputs]
            self.records.append((out.id, ids, vjp))
        return out

    def backward(self, out: Var) -> dict:
        """Gradients of scalar ``out`` for every leaf, keyed by leaf name (or id)."""
        if np.size(out.value) != 1:
            raise NonScalarOutput(f"backward needs a scalar output, got shape {out.shape}")
        grads = {}
        if out.requires_grad:
            grads[out.id] = np.ones_like(out.value)
            for out_id, ids, vjp in reversed(self.records):
                g = grads.pop(out_id, None)
                if g is None:
                    continue
                for i, gi in zip(ids, vjp(g)):
                    if i < 0 or gi is None:
                        continue
                    if i in grads:
                        grads[i] = grads[i] + gi
                    else:
                        grads[i] = gi
        result = {}
        for i, (name, value) in self.leaves.items():
            g = grads.get(i)
            result[name if name is not None else i] = (
                np.zeros_like(value) if g is None else np.asarray(g, dtype=value.dtype))
        return result


def backward(tape: Tape, out: Var) -> dict:
    return tape.backward(out)


# ---------------------------------------------------------------------------
# helpers

def _val(x):
    return x.value if isinstance(x, Var) else np.asarray(x)


def _tape(*xs) -> Tape:
    for x in xs:
        if isinstance(x, Var) and x.tape is not None:
            return x.tape
    return Tape()


def _is_scalar(a) -> bool:
    return np.ndim(a) == 0


def _reduce_like(g, a):
    """Sum a gradient back down to a scalar operand's shape."""
    return np.sum(g) if _is_scalar(a) else g


def _check_pair(a, b, op):
    if not (_is_scalar(a) or _is_scalar(b)) and a.shape != b.shape:
        raise ShapeMismatch(f"{op}: shapes {a.shape} and {b.shape} differ")


# ---------------------------------------------------------------------------
# elementwise

def add(a, b) -> Var:
    av, bv = _val(a), _val(b)
    _check_pair(av, bv, "add")
    return _tape(a, b).record(av + bv, (a, b), lambda g: (_reduce_like(g, av), _reduce_like(g, bv)))


def sub(a, b) -> Var:
    av, bv = _val(a), _val(b)
    _check_pair(av, bv, "sub")
    return _tape(a, b).record(av - bv, (a, b), lambda g: (_reduce_like(g, av), -_reduce_like(g, bv)))


def mul(a, b) -> Var:
    av, bv = _val(a), _val(b)
    _check_pair(av, bv, "mul")
    return _tape(a, b).record(av * bv, (a, b),
                              lambda g: (_reduce_like(g * bv, av), _reduce_like(g * av, bv)))


def relu(x) -> Var:
    xv = _val(x)
    m = decide(xv > 0)
    return _tape(x).record(np.where(m, xv, 0.0), (x,), lambda g: (g * m,))


def leaky_relu(x, slope: float = 0.1) -> Var:
    xv = _val(x)
    k = np.where(decide(xv > 0), 1.0, slope)
    return _tape(x).record(xv * k, (x,), lambda g: (g * k,))


def sigmoid(x) -> Var:
    xv = _val(x)
    e = np.exp(-np.abs(xv))
    y = np.where(xv >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _tape(x).record(y, (x,), lambda g: (g * y * (1.0 - y),))


def tanh(x) -> Var:
    y = np.tanh(_val(x))
    return _tape(x).record(y, (x,), lambda g: (g * (1.0 - y * y),))


def log(x) -> Var:
    xv = _val(x)
    if np.any(xv <= 0):
        raise DomainError("log of a non-positive value")
    return _tape(x).record(np.log(xv), (x,), lambda g: (g / xv,))


def exp(x) -> Var:
    y = np.exp(_val(x))
    return _tape(x).record(y, (x,), lambda g: (g * y,))


def sqrt(x) -> Var:
    xv = _val(x)
    if np.any(xv < 0):
        raise DomainError("sqrt of a negative value")
    y = np.sqrt(xv)
    return _tape(x).record(y, (x,), lambda g: (np.where(y > 0, g / (2.0 * np.where(y > 0, y, 1.0)), 0.0),))


def abs_(x) -> Var:
    xv = _val(x)
    sign = decide(np.sign(xv))
    return _tape(x).record(xv * sign, (x,), lambda g: (g * sign,))


def clip(x, lo, hi) -> Var:
    xv = _val(x)
    side = decide(np.where(xv < lo, -1, np.where(xv > hi, 1, 0)))
    inside = side == 0
    y = np.where(inside, xv, np.where(side < 0, lo, hi))
    return _tape(x).record(y, (x,), lambda g: (g * inside,))


def where(mask, a, b) -> Var:
    """Elementwise select; ``mask`` is a constant boolean array."""
    mask = np.asarray(mask, dtype=bool)
    av, bv = _val(a), _val(b)
    if av.shape != bv.shape:
        raise ShapeMismatch(f"where: shapes {av.shape} and {bv.shape} differ")
    if mask.shape != av.shape:
        mask = np.broadcast_to(mask.reshape(mask.shape + (1,) * (av.ndim - mask.ndim)), av.shape)
    return _tape(a, b).record(np.where(mask, av, bv), (a, b),
                              lambda g: (np.where(mask, g, 0.0), np.where(mask, 0.0, g)))


# ---------------------------------------------------------------------------
# linear algebra and shape ops

def matmul(a, b) -> Var:
    av, bv = _val(a), _val(b)
    if av.ndim != 2 or bv.ndim != 2 or av.shape[1] != bv.shape[0]:
        raise ShapeMismatch(f"matmul: {av.shape} @ {bv.shape}")
    return _tape(a, b).record(av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))


def linear(x, w, b=None) -> Var:
    """``x @ w + b`` with the bias row repeated over ``x``'s rows."""
    xv, wv = _val(x), _val(w)
    if xv.ndim != 2 or wv.ndim != 2 or xv.shape[1] != wv.shape[0]:
        raise ShapeMismatch(f"linear: {xv.shape} @ {wv.shape}")
    y = xv @ wv
    if b is None:
        return _tape(x, w).record(y, (x, w), lambda g: (g @ wv.T, xv.T @ g))
    bv = _val(b)
    if bv.shape != (wv.shape[1],):
        raise ShapeMismatch(f"linear: bias {bv.shape} for width {wv.shape[1]}")
    return _tape(x, w, b).record(y + bv, (x, w, b), lambda g: (g @ wv.T, xv.T @ g, g.sum(axis=0)))


def reshape(x, shape) -> Var:
    xv = _val(x)
    return _tape(x).record(xv.reshape(shape), (x,), lambda g: (g.reshape(xv.shape),))


def concat(xs, axis: int = -1) -> Var:
    vals = [_val(x) for x in xs]
    ax = axis % vals[0].ndim
    for v in vals[1:]:
        if v.ndim != vals[0].ndim or any(v.shape[d] != vals[0].shape[d] for d in range(v.ndim) if d != ax):
            raise ShapeMismatch("concat: incompatible shapes " + ", ".join(str(v.shape) for v in vals))
    cuts = np.cumsum([v.shape[ax] for v in vals])[:-1]
    return _tape(*xs).record(np.concatenate(vals, axis=ax), tuple(xs),
                             lambda g: tuple(np.split(g, cuts, axis=ax)))


def cols(x, start: int, stop: int) -> Var:
    """Column slice ``x[..., start:stop]``."""
    xv = _val(x)

    def vjp(g):
        out = np.zeros_like(xv)
        out[..., start:stop] = g
        return (out,)

    return _tape(x).record(xv[..., start:stop], (x,), vjp)


def gather_rows(x, idx) -> Var:
    """``x[idx]`` for an integer index array of any shape."""
    xv = _val(x)
    idx = np.asarray(idx, dtype=np.int64)
    n = xv.shape[0]

    def vjp(g):
        flat = g.reshape(idx.size, -1)
        return (_accel.scatter_add_rows(flat, idx.reshape(-1), n).reshape(xv.shape),)

    return _tape(x).record(xv[idx], (x,), vjp)


def repeat_rows(v, n: int) -> Var:
    """Tile a vector of shape (C,) into (n, C)."""
    vv = _val(v)
    if vv.ndim != 1:
        raise ShapeMismatch("repeat_rows expects a vector")
    return _tape(v).record(np.broadcast_to(vv, (n, vv.shape[0])).copy(), (v,), lambda g: (g.sum(axis=0),))


def mul_col(x, c) -> Var:
    """Scale row ``i`` of ``x`` (N, C) by ``c[i]``."""
    xv, cv = _val(x), _val(c)
    if xv.ndim != 2 or cv.shape != (xv.shape[0],):
        raise ShapeMismatch(f"mul_col: {xv.shape} by {cv.shape}")
    return _tape(x, c).record(xv * cv[:, None], (x, c),
                              lambda g: (g * cv[:, None], np.sum(g * xv, axis=1)))


def sum_(x, axis=None) -> Var:
    xv = _val(x)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, xv.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), xv.shape).copy(),)

    return _tape(x).record(np.sum(xv, axis=axis), (x,), vjp)


def mean(x, axis=None) -> Var:
    xv = _val(x)
    count = xv.size if axis is None else xv.shape[axis]
    return mul(sum_(x, axis), 1.0 / count)


def max_axis(x, axis: int = 1) -> Var:
    """Max over one axis; the gradient goes to the first maximal element."""
    xv = _val(x)
    arg = decide(np.argmax(xv, axis=axis))
    am = np.expand_dims(arg, axis)
    y = np.take_along_axis(xv, am, axis=axis).squeeze(axis)

    def vjp(g):
        out = np.zeros_like(xv)
        np.put_along_axis(out, am, np.expand_dims(g, axis), axis=axis)
        return (out,)

    return _tape(x).record(y, (x,), vjp)


def norm_rows(x) -> Var:
    """Euclidean norm of each row; zero rows get a zero gradient."""
    xv = _val(x)
    n = np.sqrt(np.sum(xv * xv, axis=-1))
    safe = np.where(n > 0, n, 1.0)
    return _tape(x).record(n, (x,), lambda g: (np.where((n > 0)[..., None], xv / safe[..., None], 0.0) * g[..., None],))


def dot_rows(a, b) -> Var:
    return sum_(mul(a, b), axis=-1)


# ---------------------------------------------------------------------------
# weighted Kabsch

def _kabsch_rt(cs, cd, h):
    """Stack of [R|t] (B, 3, 4) from centroids and cross-covariances."""
    rot = _rotation_from_h(h)
    t = cd - np.einsum("bij,bj->bi", rot, cs)
    return np.concatenate([rot, t[..., None]], axis=-1)


def kabsch(src, dst, weights, method: str = "analytic") -> Var:
    """Weighted Kabsch fit as a (3, 4) ``[R | t]`` node.

    ``src`` is a constant cloud; ``dst`` and ``weights`` may carry gradients.
    Weights are normalized inside, so their overall scale is irrelevant.
    ``method="fd"`` swaps the closed-form backward for central differences
    (step ``KABSCH_STEP``) evaluated at record time.
    """
    sv = np.asarray(_val(src), dtype=np.float64)
    dv = np.asarray(_val(dst), dtype=np.float64)
    wr = np.asarray(_val(weights), dtype=np.float64)
    if sv.shape != dv.shape or sv.ndim != 2 or sv.shape[1] != 3 or wr.shape != (sv.shape[0],):
        raise ShapeMismatch(f"kabsch: src {sv.shape}, dst {dv.shape}, weights {wr.shape}")
    total = wr.sum()
    if not total > 0:
        raise DomainError("kabsch weights must have a positive sum")
    if method not in ("analytic", "fd"):
        raise ValueError(f"unknown kabsch backward {method!r}")
    w = wr / total
    cs, cd = w @ sv, w @ dv
    s_c = sv - cs
    h = s_c.T @ ((dv - cd) * w[:, None])
    out = _kabsch_rt(cs[None], cd[None], h[None])[0]
    want_d = isinstance(dst, Var) and dst.requires_grad
    want_w = isinstance(weights, Var) and weights.requires_grad
    if not (want_d or want_w):
        return _tape(src, dst, weights).record(out, (src, dst, weights), lambda g: (None, None, None))

    if method == "analytic":
        rot = out[:, :3]

        def vjp(g):
            g_h, g_cs, g_cd = _kabsch_vjp_h(h, rot, cs, g)
            # H = sum w s d^T - cs cd^T with cs, cd the weighted means
            g_cs = g_cs - g_h @ cd
            g_cd = g_cd - g_h.T @ cs
            gd = w[:, None] * (sv @ g_h + g_cd) if want_d else None
            gw = None
            if want_w:
                g_hat = np.einsum("ni,ij,nj->n", sv, g_h, dv) + sv @ g_cs + dv @ g_cd
                gw = (g_hat - g_hat @ w) / total
            return (None, gd, gw)

        return _tape(src, dst, weights).record(out, (src, dst, weights), vjp)

    step = KABSCH_STEP
    jac_dst = jac_w = None
    if want_d:
        n = sv.shape[0]
        # moving dst_i by h*e_a shifts the centroid by w_i*h*e_a and adds
        # w_i*h*outer(s_c_i, e_a) to the cross-covariance
        eye = np.eye(3)
        dh = (w[:, None, None, None] * s_c[:, None, :, None] * eye[None, :, None, :]) * step  # (n,3,3,3)
        dcd = (w[:, None, None] * eye[None]) * step  # (n,3,3)
        hp = (h[None, None] + dh).reshape(-1, 3, 3)
        hm = (h[None, None] - dh).reshape(-1, 3, 3)
        csb = np.broadcast_to(cs, (n * 3, 3))
        plus = _kabsch_rt(csb, (cd[None, None] + dcd).reshape(-1, 3), hp)
        minus = _kabsch_rt(csb, (cd[None, None] - dcd).reshape(-1, 3), hm)
        jac_dst = ((plus - minus) / (2 * step)).reshape(n, 3, 3, 4)
    if want_w:
        jac_w = _kabsch_weight_jacobian(sv, dv, wr, step)

    def vjp_fd(g):
        gd = None if jac_dst is None else np.einsum("naij,ij->na", jac_dst, g)
        gw = None if jac_w is None else np.einsum("nij,ij->n", jac_w, g)
        return (None, gd, gw)

    return _tape(src, dst, weights).record(out, (src, dst, weights), vjp_fd)


def _kabsch_vjp_h(h, rot, cs, g):
    """Pull a (3, 4) ``[R|t]`` gradient back to ``(H, cs, cd)``.

    The optimal ``R`` makes ``K = R H`` symmetric. Perturbing ``R`` by
    ``Omega R`` (Omega skew) and keeping ``K`` symmetric gives the Sylvester
    system ``Omega K + K Omega = -(R dH - dH^T R^T)``, diagonal in the
    eigenbasis of ``K``.
    """
    g_r = g[:, :3] - np.outer(g[:, 3], cs)
    g_cd = g[:, 3].copy()
    g_cs = -rot.T @ g[:, 3]
    k = rot @ h
    lam, v = np.linalg.eigh((k + k.T) / 2.0)
    denom = lam[:, None] + lam[None, :]
    denom = np.where(np.abs(denom) < 1e-12, 1e-12, denom)
    b = v.T @ (g_r @ rot.T) @ v
    e = v @ (b / denom) @ v.T
    g_h = -rot.T @ (e - e.T)
    return g_h, g_cs, g_cd


def _kabsch_weight_jacobian(sv, dv, wr, step):
    """d[R|t]/d(raw weight_i) by central differences, batched over i."""
    W = wr.sum()
    A = wr @ sv
    B = wr @ dv
    C = sv.T @ (dv * wr[:, None])

    def batch(sign):
        Wp = W + sign * step
        Ap = A[None] + sign * step * sv
        Bp = B[None] + sign * step * dv
        Cp = C[None] + sign * step * sv[:, :, None] * dv[:, None, :]
        cs = Ap / Wp
        cd = Bp / Wp
        h = Cp / Wp - cs[:, :, None] * cd[:, None, :]
        return _kabsch_rt(cs, cd, h)

    return (batch(1.0) - batch(-1.0)) / (2 * step)


def apply_rt(m, coords) -> Var:
    """Apply a (3, 4) ``[R | t]`` node to (N, 3) points."""
    mv, cv = _val(m), _val(coords)
    if mv.shape != (3, 4) or cv.ndim != 2 or cv.shape[1] != 3:
        raise ShapeMismatch(f"apply_rt: {mv.shape} on {cv.shape}")
    rot, t = mv[:, :3], mv[:, 3]

    def vjp(g):
        gm = np.concatenate([g.T @ cv, g.sum(axis=0)[:, None]], axis=1)
        return (gm, g @ rot)

    return _tape(m, coords).record(cv @ rot.T + t, (m, coords), vjp)


# ---------------------------------------------------------------------------
# finite-difference verification

def gradcheck(f, params: dict, eps: float = 1e-5, max_coords: int | None = None,
              seed: int = 0, grads: dict | None = None, floor: float = 1e-8,
              steps: tuple | None = None, freeze: bool = False) -> float:
    """Max relative error between tape gradients and central differences.

    ``f(tape, vars) -> scalar Var`` builds the function on a fresh tape from
    ``vars`` (a dict of leaf Vars named like ``params``). With ``max_coords``
    only that many randomly chosen coordinates per tensor are probed.
    ``grads`` overrides the analytic gradients (harness self-test).

    The error is ``|a - n| / max(|a|, |n|, floor)``. Several ``steps`` keep
    the best agreement per coordinate. ``freeze`` replays the branch
    decisions of the unperturbed pass, so probes never straddle a kink.
    """
    params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    steps = tuple(steps) if steps else (eps,)
    rec = frozen_branches() if freeze else None

    def run(values):
        if rec is not None and rec.log:
            rec.rewind()
        tape = Tape()
        vs = {k: tape.param(v, name=k) for k, v in values.items()}
        return tape, f(tape, vs)

    def value(values):
        return float(run(values)[1].value)

    with rec if rec is not None else nullcontext():
        tape, out = run(params)
        if grads is None:
            grads = tape.backward(out)
        rng = np.random.default_rng(seed)
        worst = 0.0
        for name, val in params.items():
            flat_idx = np.arange(val.size)
            if max_coords is not None and val.size > max_coords:
                flat_idx = np.sort(rng.choice(val.size, max_coords, replace=False))
            for j in flat_idx:
                pos = np.unravel_index(j, val.shape)
                ana = float(np.asarray(grads[name])[pos])
                best = np.inf
                for h in steps:
                    plus = {k: v.copy() for k, v in params.items()}
                    minus = {k: v.copy() for k, v in params.items()}
                    plus[name][pos] += h
                    minus[name][pos] -= h
                    num = (value(plus) - value(minus)) / (2 * h)
                    best = min(best, abs(ana - num) / max(abs(ana), abs(num), floor))
                worst = max(worst, best)
    return worst
