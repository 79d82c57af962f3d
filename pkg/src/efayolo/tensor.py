"""Dense NCHW kernels.

Tensors are plain ``numpy.ndarray`` objects of rank 4 in NCHW layout.  Every
function here is pure and dtype-preserving: float32 in gives float32 out,
float64 in gives float64 out (the gradient-check path relies on that).
"""
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError, GeometryError

__all__ = [
    "ConvSpec",
    "out_size",
    "as_tensor",
    "pad_spatial",
    "conv2d",
    "pool2d",
    "global_avg_pool",
    "conv1d_channels",
    "activation",
    "sigmoid",
    "silu",
    "batchnorm_inference",
    "fold_batchnorm",
    "concat_channels",
    "scale",
    "upsample_nearest2x",
]


@dataclass(frozen=True)
class ConvSpec:
    kernel: int
    stride: int = 1
    padding: int = 0
    groups: int = 1
    has_bias: bool = False

    def __post_init__(self):
        if self.kernel < 1 or self.stride < 1 or self.groups < 1 or self.padding < 0:
            raise ConfigError(f"invalid ConvSpec {self}")

    def out_hw(self, h, w):
        oh, ow = out_size(h, self.kernel, self.stride, self.padding), out_size(w, self.kernel, self.stride, self.padding)
        if oh < 1 or ow < 1:
            raise GeometryError(
                f"window k={self.kernel} s={self.stride} p={self.padding} gives empty output for {h}x{w} input"
            )
        return oh, ow


def out_size(size, k, s, p):
    return (size + 2 * p - k) // s + 1


def as_tensor(x, dtype=np.float32):
    """Coerce array-likes to a 4-D array; existing float arrays keep their dtype."""
    arr = np.asarray(x)
    if arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(dtype)
    if arr.ndim != 4:
        raise DimensionError("as_tensor", "expected a 4-D NCHW tensor", [arr.shape])
    return arr


def pad_spatial(x, p, value=0.0):
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)), mode="constant", constant_values=value)


def _check4(op, *xs):
    for x in xs:
        if x.ndim != 4:
            raise DimensionError(op, "expected a 4-D NCHW tensor", [x.shape])


def conv2d(x, weight, bias=None, spec=None):
    """Grouped 2-D cross-correlation with zero padding.

    ``weight`` has shape ``(c_out, c_in // groups, k, k)``.  When ``spec`` is
    omitted a stride-1, unpadded, ungrouped convolution is assumed with the
    kernel size taken from ``weight``.
    """
    _check4("conv2d", x, weight)
    if spec is None:
        spec = ConvSpec(weight.shape[-1])
    n, c, h, w = x.shape
    co, cig, kh, kw = weight.shape
    g = spec.groups
    if kh != spec.kernel or kw != spec.kernel:
        raise DimensionError("conv2d", f"weight kernel {kh}x{kw} does not match spec k={spec.kernel}", [weight.shape])
    if c % g or co % g or cig != c // g:
        raise DimensionError("conv2d", f"channels incompatible with groups={g}", [x.shape, weight.shape])
    if bias is not None and np.shape(bias) != (co,):
        raise DimensionError("conv2d", "bias length must equal c_out", [np.shape(bias)])
    oh, ow = spec.out_hw(h, w)
    s, k = spec.stride, spec.kernel
    xp = pad_spatial(x, spec.padding)
    dtype = np.result_type(x.dtype, weight.dtype)
    out = np.zeros((n, co, oh, ow), dtype=dtype)
    og = co // g
    for i in range(k):
        for j in range(k):
            patch = xp[:, :, i : i + s * (oh - 1) + 1 : s, j : j + s * (ow - 1) + 1 : s]
            wk = weight[:, :, i, j]
            if g == 1:
                out += np.einsum("nchw,oc->nohw", patch, wk, optimize=True)
            elif cig == 1 and og == 1:
                out += patch * wk[None, :, 0, None, None]
            else:
                pg = patch.reshape(n, g, cig, oh, ow)
                wg = wk.reshape(g, og, cig)
                out += np.einsum("ngchw,goc->ngohw", pg, wg).reshape(n, co, oh, ow)
    if bias is not None:
        out += np.asarray(bias, dtype=dtype)[None, :, None, None]
    return out


def _pool_windows(xp, k, s, oh, ow):
    v = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    return v[:, :, : s * (oh - 1) + 1 : s, : s * (ow - 1) + 1 : s]


def pool2d(x, mode, spec):
    """Max or average pooling.

    Max pooling pads with -inf; average pooling divides by the number of
    in-bounds cells in each window (padding excluded from the divisor).
    """
    _check4("pool2d", x)
    if mode not in ("max", "avg"):
        raise ConfigError(f"unknown pool mode {mode!r}")
    n, c, h, w = x.shape
    k, s, p = spec.kernel, spec.stride, spec.padding
    oh, ow = spec.out_hw(h, w)
    counts = _window_counts(h, w, k, s, p, oh, ow)
    if (counts == 0).any():
        raise GeometryError(f"pool window k={k} p={p} lies entirely in padding for {h}x{w} input")
    if mode == "max":
        xp = pad_spatial(x, p, -np.inf)
        return _pool_windows(xp, k, s, oh, ow).max(axis=(-2, -1))
    xp = pad_spatial(x, p, 0.0)
    sums = _pool_windows(xp, k, s, oh, ow).sum(axis=(-2, -1))
    return (sums / counts.astype(x.dtype)).astype(x.dtype)


def _window_counts(h, w, k, s, p, oh, ow):
    def axis_counts(size, o):
        starts = np.arange(o) * s - p
        lo = np.maximum(starts, 0)
        hi = np.minimum(starts + k, size)
        return np.maximum(hi - lo, 0)

    return np.outer(axis_counts(h, oh), axis_counts(w, ow))


def global_avg_pool(x):
    _check4("global_avg_pool", x)
    if x.shape[2] * x.shape[3] < 1:
        raise GeometryError("global_avg_pool needs at least one spatial cell")
    return x.mean(axis=(2, 3), keepdims=True, dtype=x.dtype)


def conv1d_channels(desc, weight):
    """Zero-padded 1-D convolution along the channel axis of a (n, c, 1, 1) descriptor."""
    _check4("conv1d_channels", desc)
    weight = np.asarray(weight)
    k = weight.shape[0]
    if weight.ndim != 1 or k % 2 == 0:
        raise ConfigError(f"channel mixing kernel must be 1-D with odd length, got shape {weight.shape}")
    if desc.shape[2:] != (1, 1):
        raise DimensionError("conv1d_channels", "descriptor must be (n, c, 1, 1)", [desc.shape])
    half = k // 2
    n, c = desc.shape[:2]
    v = np.pad(desc[:, :, 0, 0], ((0, 0), (half, half)))
    out = np.zeros((n, c), dtype=np.result_type(desc.dtype, weight.dtype))
    for t in range(k):
        out += weight[t] * v[:, t : t + c]
    return out[:, :, None, None]


def sigmoid(x):
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def silu(x):
    return x * sigmoid(x)


def activation(x, kind):
    if kind == "silu":
        return silu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ConfigError(f"unknown activation {kind!r}")


def _per_channel(name, v, c, dtype):
    v = np.asarray(v, dtype=dtype)
    if v.shape != (c,):
        raise DimensionError("batchnorm", f"{name} must have length {c}", [v.shape])
    return v[None, :, None, None]


def batchnorm_inference(x, gamma, beta, mean, var, eps=1e-5):
    _check4("batchnorm", x)
    c, dt = x.shape[1], x.dtype
    g = _per_channel("gamma", gamma, c, dt)
    b = _per_channel("beta", beta, c, dt)
    m = _per_channel("mean", mean, c, dt)
    v = _per_channel("var", var, c, dt)
    return ((x - m) / np.sqrt(v + dt.type(eps)) * g + b).astype(dt)


def fold_batchnorm(weight, gamma, beta, mean, var, eps=1e-5):
    """Fold inference-mode BN into the preceding (bias-free) conv; returns (weight, bias)."""
    inv = np.asarray(gamma) / np.sqrt(np.asarray(var) + eps)
    w = weight * inv[:, None, None, None]
    b = np.asarray(beta) - np.asarray(mean) * inv
    return w.astype(weight.dtype), b.astype(weight.dtype)


def concat_channels(xs):
    xs = list(xs)
    if not xs:
        raise DimensionError("concat_channels", "nothing to concatenate")
    _check4("concat_channels", *xs)
    ref = (xs[0].shape[0],) + xs[0].shape[2:]
    for x in xs[1:]:
        if (x.shape[0],) + x.shape[2:] != ref:
            raise DimensionError("concat_channels", "batch/spatial dims differ", [x.shape for x in xs])
    return np.concatenate(xs, axis=1)


def check_gate_shape(x_shape, w_shape):
    n, c, h, w = x_shape
    if tuple(w_shape) not in ((n, c, 1, 1), (n, 1, h, w)):
        raise DimensionError("scale", "gate must be (n,c,1,1) or (n,1,h,w)", [x_shape, w_shape])


def scale(x, weights):
    """Multiply by a channel gate (n,c,1,1) or a spatial gate (n,1,h,w)."""
    _check4("scale", x, weights)
    check_gate_shape(x.shape, weights.shape)
    return x * weights


def upsample_nearest2x(x):
    _check4("upsample_nearest2x", x)
    return x.repeat(2, axis=2).repeat(2, axis=3)
