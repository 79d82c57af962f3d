"""Tape-based reverse-mode differentiation over the tensor kernels.

Every op accepts plain arrays or :class:`Var` objects.  When no input
requires a gradient the op simply evaluates the kernel and returns an array,
so the same block code serves inference (no tape) and training (tape).
"""
import itertools
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import EfaError, NumericError

_counter = itertools.count()


class Var:
    """A value on the tape.

    Leaves are created directly (parameters, inputs); interior nodes come out
    of the ops below and remember how to push a gradient to their parents.
    """

    __slots__ = ("data", "grad", "requires_grad", "parents", "backward_fn", "op", "order", "name")

    def __init__(self, data, requires_grad=False, name=None, parents=(), backward_fn=None, op="leaf"):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad
        self.parents = parents
        self.backward_fn = backward_fn
        self.op = op
        self.order = next(_counter)
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        tag = f" {self.name}" if self.name else ""
        return f"Var({self.op}{tag}, shape={self.shape}, requires_grad={self.requires_grad})"


def value(x):
    return x.data if isinstance(x, Var) else x


def _tracked(x):
    return isinstance(x, Var) and x.requires_grad


def _node(op, data, parents, backward_fn):
    """Wrap ``data`` in a tape node if any parent requires a gradient."""
    if not any(_tracked(p) for p in parents):
        return data
    return Var(data, requires_grad=True, parents=tuple(parents), backward_fn=backward_fn, op=op)


class UsageError(EfaError):
    pass


def backward(loss):
    """Back-propagate from a scalar ``loss``.

    Gradients accumulate into ``.grad`` of every leaf that requires one; the
    mapping leaf -> gradient is also returned.  Leaves are visited in
    creation order so results are deterministic.
    """
    if not isinstance(loss, Var) or not loss.requires_grad:
        raise UsageError("loss does not depend on any tracked value")
    if loss.data.size != 1:
        raise UsageError(f"loss must be a scalar, got shape {loss.shape}")

    topo, seen = [], set()
    stack = [(loss, False)]
    while stack:
        v, expanded = stack.pop()
        if expanded:
            topo.append(v)
            continue
        if id(v) in seen:
            continue
        seen.add(id(v))
        stack.append((v, True))
        for p in v.parents:
            if _tracked(p) and id(p) not in seen:
                stack.append((p, False))

    grads = {id(loss): np.ones_like(loss.data)}
    leaves = []
    for v in reversed(topo):
        g = grads.pop(id(v), None)
        if g is None:
            continue
        if not v.parents:
            v.grad = g if v.grad is None else v.grad + g
            leaves.append(v)
            continue
        for p, pg in zip(v.parents, v.backward_fn(g)):
            if pg is None or not _tracked(p):
                continue
            if pg.shape != p.data.shape:
                raise RuntimeError(f"{v.op}: gradient shape {pg.shape} != input shape {p.data.shape}")
            if id(p) in grads:
                grads[id(p)] = grads[id(p)] + pg
            else:
                grads[id(p)] = pg
    leaves.sort(key=lambda v: v.order)
    return {leaf: leaf.grad for leaf in leaves}


# -- elementwise and reductions ---------------------------------------------


def add(a, b):
    av, bv = value(a), value(b)
    out = av + bv

    def bw(g):
        return _unbroadcast(g, np.shape(av)), _unbroadcast(g, np.shape(bv))

    return _node("add", out, (a, b), bw)


def sub(a, b):
    av, bv = value(a), value(b)

    def bw(g):
        return _unbroadcast(g, np.shape(av)), -_unbroadcast(g, np.shape(bv))

    return _node("sub", av - bv, (a, b), bw)


def mul(a, b):
    av, bv = value(a), value(b)

    def bw(g):
        return _unbroadcast(g * bv, np.shape(av)), _unbroadcast(g * av, np.shape(bv))

    return _node("mul", av * bv, (a, b), bw)


def _unbroadcast(g, shape):
    if g.shape == tuple(shape):
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def total(x):
    xv = value(x)

    def bw(g):
        return (np.broadcast_to(g, xv.shape).astype(xv.dtype),)

    return _node("sum", np.asarray(xv.sum(), dtype=xv.dtype), (x,), bw)


def mean(x):
    xv = value(x)
    n = xv.size

    def bw(g):
        return (np.full(xv.shape, g / n, dtype=xv.dtype),)

    return _node("mean", np.asarray(xv.mean(), dtype=xv.dtype), (x,), bw)


def relu(x):
    xv = value(x)

    def bw(g):
        return (g * (xv > 0),)

    return _node("relu", np.maximum(xv, 0), (x,), bw)


def sigmoid(x):
    xv = value(x)
    s = T.sigmoid(xv)

    def bw(g):
        return (g * s * (1 - s),)

    return _node("sigmoid", s, (x,), bw)


def silu(x):
    xv = value(x)
    s = T.sigmoid(xv)

    def bw(g):
        return (g * (s + xv * s * (1 - s)),)

    return _node("silu", xv * s, (x,), bw)


def activation(x, kind):
    return silu(x) if kind == "silu" else sigmoid(x) if kind == "sigmoid" else T.activation(value(x), kind)


# -- tensor ops ---------------------------------------------------------------


def conv2d(x, weight, bias=None, spec=None):
    xv, wv = value(x), value(weight)
    bv = value(bias) if bias is not None else None
    if spec is None:
        spec = T.ConvSpec(wv.shape[-1])
    out = T.conv2d(xv, wv, bv, spec)

    def bw(g):
        gx, gw = _conv2d_backward(g, xv, wv, spec)
        gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
        return gx, gw, gb

    return _node("conv2d", out, (x, weight, bias), bw)


def _conv2d_backward(g, x, w, spec):
    n, c, h, wd = x.shape
    co, cig, k, _ = w.shape
    s, p, grp = spec.stride, spec.padding, spec.groups
    oh, ow = g.shape[2:]
    og = co // grp
    xp = T.pad_spatial(x, p)
    gxp = np.zeros_like(xp)
    gw = np.zeros_like(w)
    for i in range(k):
        for j in range(k):
            sl = (slice(None), slice(None), slice(i, i + s * (oh - 1) + 1, s), slice(j, j + s * (ow - 1) + 1, s))
            patch = xp[sl]
            wk = w[:, :, i, j]
            if grp == 1:
                gxp[sl] += np.einsum("nohw,oc->nchw", g, wk, optimize=True)
                gw[:, :, i, j] = np.einsum("nohw,nchw->oc", g, patch, optimize=True)
            else:
                gg = g.reshape(n, grp, og, oh, ow)
                pg = patch.reshape(n, grp, cig, oh, ow)
                wg = wk.reshape(grp, og, cig)
                gxp[sl] += np.einsum("ngohw,goc->ngchw", gg, wg).reshape(n, c, oh, ow)
                gw[:, :, i, j] = np.einsum("ngohw,ngchw->goc", gg, pg).reshape(co, cig)
    gx = gxp[:, :, p : p + h, p : p + wd] if p else gxp
    return gx, gw


def pool2d(x, mode, spec):
    xv = value(x)
    out = T.pool2d(xv, mode, spec)
    if not _tracked(x):
        return out
    n, c, h, w = xv.shape
    k, s, p = spec.kernel, spec.stride, spec.padding
    oh, ow = out.shape[2:]

    def offsets():
        for i in range(k):
            for j in range(k):
                yield i, j, (slice(None), slice(None), slice(i, i + s * (oh - 1) + 1, s), slice(j, j + s * (ow - 1) + 1, s))

    if mode == "max":
        xp = T.pad_spatial(xv, p, -np.inf)
        win = T._pool_windows(xp, k, s, oh, ow).reshape(n, c, oh, ow, k * k)
        # argmax returns the first maximum: lowest flat index wins ties
        arg = win.argmax(axis=-1)

        def bw(g):
            gxp = np.zeros(xp.shape, dtype=xv.dtype)
            for i, j, sl in offsets():
                gxp[sl] += g * (arg == i * k + j)
            return (gxp[:, :, p : p + h, p : p + w],)

    else:
        counts = T._window_counts(h, w, k, s, p, oh, ow).astype(xv.dtype)

        def bw(g):
            gxp = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=xv.dtype)
            share = g / counts
            for _, _, sl in offsets():
                gxp[sl] += share
            return (gxp[:, :, p : p + h, p : p + w],)

    return _node(f"{mode}pool", out, (x,), bw)


def global_avg_pool(x):
    xv = value(x)
    hw = xv.shape[2] * xv.shape[3]

    def bw(g):
        return (np.broadcast_to(g / hw, xv.shape).astype(xv.dtype),)

    return _node("gap", T.global_avg_pool(xv), (x,), bw)


def conv1d_channels(desc, weight):
    dv, wv = value(desc), value(weight)
    out = T.conv1d_channels(dv, wv)
    k = wv.shape[0]
    half = k // 2
    c = dv.shape[1]

    def bw(g):
        g2 = g[:, :, 0, 0]
        v = np.pad(dv[:, :, 0, 0], ((0, 0), (half, half)))
        gv = np.zeros_like(v)
        gw = np.zeros_like(wv)
        for t in range(k):
            gv[:, t : t + c] += wv[t] * g2
            gw[t] = (g2 * v[:, t : t + c]).sum()
        return gv[:, half : half + c, None, None], gw

    return _node("conv1d_channels", out, (desc, weight), bw)


def batchnorm(x, gamma, beta, mean=None, var=None, eps=1e-5, training=False):
    """Batch normalization.

    Training mode normalizes with the biased batch statistics over (n, h, w);
    inference mode uses the supplied ``mean``/``var``.
    """
    xv, gv, bv = value(x), value(gamma), value(beta)
    dt = xv.dtype
    if training:
        mu = xv.mean(axis=(0, 2, 3))
        sig2 = xv.var(axis=(0, 2, 3))
    else:
        mu, sig2 = np.asarray(mean, dtype=dt), np.asarray(var, dtype=dt)
    c = xv.shape[1]
    for name, vec in (("gamma", gv), ("beta", bv), ("mean", mu), ("var", sig2)):
        if np.shape(vec) != (c,):
            raise T.DimensionError("batchnorm", f"{name} must have length {c}", [np.shape(vec)])
    inv = (1.0 / np.sqrt(sig2 + eps)).astype(dt)
    xhat = (xv - mu[None, :, None, None]) * inv[None, :, None, None]
    out = (xhat * gv[None, :, None, None] + bv[None, :, None, None]).astype(dt)

    def bw(g):
        ggamma = (g * xhat).sum(axis=(0, 2, 3))
        gbeta = g.sum(axis=(0, 2, 3))
        dxhat = g * gv[None, :, None, None]
        if training:
            m = xv.shape[0] * xv.shape[2] * xv.shape[3]
            gx = (
                inv[None, :, None, None]
                / m
                * (
                    m * dxhat
                    - dxhat.sum(axis=(0, 2, 3), keepdims=True)
                    - xhat * (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
                )
            )
        else:
            gx = dxhat * inv[None, :, None, None]
        return gx.astype(dt), ggamma, gbeta

    return _node("batchnorm", out, (x, gamma, beta), bw)


def concat_channels(xs):
    xs = list(xs)
    vals = [value(x) for x in xs]
    out = T.concat_channels(vals)
    bounds = np.cumsum([0] + [v.shape[1] for v in vals])

    def bw(g):
        return tuple(g[:, bounds[i] : bounds[i + 1]] for i in range(len(xs)))

    return _node("concat", out, tuple(xs), bw)


def slice_channels(x, start, stop):
    xv = value(x)

    def bw(g):
        gx = np.zeros_like(xv)
        gx[:, start:stop] = g
        return (gx,)

    return _node("slice", xv[:, start:stop], (x,), bw)


def scale(x, gate):
    xv, gv = value(x), value(gate)
    out = T.scale(xv, gv)

    def bw(g):
        return g * gv, _unbroadcast(g * xv, gv.shape)

    return _node("scale", out, (x, gate), bw)


def upsample_nearest2x(x):
    xv = value(x)
    n, c, h, w = xv.shape

    def bw(g):
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return _node("upsample", T.upsample_nearest2x(xv), (x,), bw)


def channel_mean(x):
    xv = value(x)
    c = xv.shape[1]

    def bw(g):
        return (np.broadcast_to(g / c, xv.shape).astype(xv.dtype),)

    return _node("channel_mean", xv.mean(axis=1, keepdims=True, dtype=xv.dtype), (x,), bw)


def channel_max(x):
    xv = value(x)
    arg = xv.argmax(axis=1)[:, None]

    def bw(g):
        gx = np.zeros_like(xv)
        np.put_along_axis(gx, arg, g, axis=1)
        return (gx,)

    return _node("channel_max", xv.max(axis=1, keepdims=True), (x,), bw)


# -- losses -------------------------------------------------------------------


def bce_with_logits(logits, targets, weights):
    """Weighted sum of binary cross-entropy terms; targets/weights are constants."""
    z = value(logits)
    t = np.asarray(targets, dtype=z.dtype)
    w = np.asarray(weights, dtype=z.dtype)
    terms = np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z)))
    out = np.asarray((w * terms).sum(), dtype=z.dtype)

    def bw(g):
        return (g * w * (T.sigmoid(z) - t),)

    return _node("bce", out, (logits,), bw)


@dataclass(frozen=True)
class BoxTarget:
    """One assigned cell: batch index, row, column and the target box in pixels."""

    batch: int
    row: int
    col: int
    box: tuple


def iou_loss(dist, stride, targets, eps=1e-9):
    """Sum of (1 - IoU) between decoded ltrb boxes at assigned cells and their targets.

    ``dist`` is a (n, 4, h, w) map of non-negative distances in stride units.
    """
    dv = value(dist)
    if not targets:
        return _node("iou_loss", np.asarray(0.0, dtype=dv.dtype), (dist,), lambda g: (np.zeros_like(dv),))
    b = np.array([t.batch for t in targets])
    r = np.array([t.row for t in targets])
    c = np.array([t.col for t in targets])
    tb = np.array([t.box for t in targets], dtype=np.float64)
    d = dv[b, :, r, c].astype(np.float64)  # (m, 4) l, t, r, b
    cx, cy = (c + 0.5) * stride, (r + 0.5) * stride
    px1, py1 = cx - d[:, 0] * stride, cy - d[:, 1] * stride
    px2, py2 = cx + d[:, 2] * stride, cy + d[:, 3] * stride
    ix1, iy1 = np.maximum(px1, tb[:, 0]), np.maximum(py1, tb[:, 1])
    ix2, iy2 = np.minimum(px2, tb[:, 2]), np.minimum(py2, tb[:, 3])
    iw, ih = np.maximum(ix2 - ix1, 0), np.maximum(iy2 - iy1, 0)
    inter = iw * ih
    pw, ph = px2 - px1, py2 - py1
    area_p = pw * ph
    area_t = (tb[:, 2] - tb[:, 0]) * (tb[:, 3] - tb[:, 1])
    union = area_p + area_t - inter + eps
    iou = inter / union
    out = np.asarray((1 - iou).sum(), dtype=dv.dtype)

    def bw(g):
        d_inter = -(1 / union + inter / union**2)
        d_area = inter / union**2
        on_w, on_h = (iw > 0), (ih > 0)
        # partial derivatives of -IoU w.r.t. the predicted box corners
        sx1 = np.where((px1 >= tb[:, 0]) & on_w, -ih, 0.0)
        sy1 = np.where((py1 >= tb[:, 1]) & on_h, -iw, 0.0)
        sx2 = np.where((px2 <= tb[:, 2]) & on_w, ih, 0.0)
        sy2 = np.where((py2 <= tb[:, 3]) & on_h, iw, 0.0)
        gx1 = d_inter * sx1 - d_area * ph
        gy1 = d_inter * sy1 - d_area * pw
        gx2 = d_inter * sx2 + d_area * ph
        gy2 = d_inter * sy2 + d_area * pw
        gd = np.stack([-gx1, -gy1, gx2, gy2], axis=1) * stride * g
        out_g = np.zeros_like(dv)
        np.add.at(out_g, (b, slice(None), r, c), gd.astype(dv.dtype))
        return (out_g,)

    return _node("iou_loss", out, (dist,), bw)


# -- gradient checking ---------------------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst: tuple
    tolerance: float
    checked: int

    @property
    def passed(self):
        return self.max_rel_error < self.tolerance


def finite_diff_check(f, point, epsilon=1e-4, tolerance=1e-4):
    """Compare reverse-mode gradients of a scalar function with central differences.

    ``point`` maps names to arrays.  ``f`` receives a dict of the same names
    (as :class:`Var` leaves on the analytic pass, as arrays on the numeric
    passes) and must return a scalar.  Every coordinate of every entry is
    perturbed.
    """
    base = {k: np.array(v, dtype=np.float64) for k, v in point.items()}
    leaves = {k: Var(v.copy(), requires_grad=True, name=k) for k, v in base.items()}
    loss = f(leaves)
    backward(loss)
    worst, worst_at, count = 0.0, None, 0
    for name, arr in base.items():
        analytic = leaves[name].grad
        if analytic is None:
            analytic = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            probe = dict(base)
            bumped = arr.copy()
            bumped[idx] = arr[idx] + epsilon
            probe[name] = bumped
            fp = float(value(f(probe)))
            bumped = arr.copy()
            bumped[idx] = arr[idx] - epsilon
            probe[name] = bumped
            fm = float(value(f(probe)))
            if not (np.isfinite(fp) and np.isfinite(fm) and np.isfinite(analytic[idx])):
                raise NumericError(f"non-finite value while checking {name}{list(idx)}")
            numeric = (fp - fm) / (2 * epsilon)
            a = float(analytic[idx])
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            count += 1
            if rel > worst:
                worst, worst_at = rel, (name, idx, a, numeric)
    return GradCheckReport(worst, worst_at, tolerance, count)
