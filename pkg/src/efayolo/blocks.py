"""Composite layers: CBS, SPPF, the two attention gates, EAConv and EADown.

Every block is a small :class:`Module` whose learnable tensors are
:class:`~efayolo.autodiff.Var` leaves.  ``forward`` is written once against
the ops in :mod:`efayolo.autodiff`, so it runs tape-free for inference and
records a tape when parameters have ``requires_grad`` switched on.

Each block also knows its own cost: ``profile(shape)`` returns the output
shape and the FLOP count for an input of the given NCHW shape, using

* convolution: ``2 * k^2 * (c_in/g) * c_out * H' * W'``
* batch norm: 2 per element, SiLU / sigmoid: 1 per element
* pooling (incl. global average and channel mean/max): window size per output
* gating multiply: 1 per gated element
"""
import copy
import math

import numpy as np

from . import autodiff as ad
from .autodiff import Var
from .errors import ConfigError, DimensionError, GeometryError
from .tensor import ConvSpec

BN_EPS = 1e-5


def eca_kernel_size(channels, gamma=2, b=1):
    """Odd 1-D kernel length for efficient channel attention on ``channels`` channels."""
    t = int(abs((math.log2(channels) + b) / gamma))
    return t if t % 2 else t + 1


def he_uniform(rng, shape, fan_in, dtype=np.float32):
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Module:
    """Minimal parameter container.

    Parameters are ``Var`` attributes, sub-modules are ``Module`` attributes or
    lists of them, and non-learnable state is listed in ``_buffers``.
    """

    _buffers = ()
    training = False

    def named_children(self):
        for name, v in vars(self).items():
            if isinstance(v, Module):
                yield name, v
            elif isinstance(v, (list, tuple)):
                for i, m in enumerate(v):
                    if isinstance(m, Module):
                        yield f"{name}.{i}", m

    def named_parameters(self, prefix=""):
        for name, v in vars(self).items():
            if isinstance(v, Var):
                yield prefix + name, v
        for name, child in self.named_children():
            yield from child.named_parameters(f"{prefix}{name}.")

    def named_buffers(self, prefix=""):
        for name in self._buffers:
            yield prefix + name, getattr(self, name)
        for name, child in self.named_children():
            yield from child.named_buffers(f"{prefix}{name}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def num_params(self):
        return sum(p.data.size for p in self.parameters())

    def state_dict(self, buffers=True):
        out = {name: p.data for name, p in self.named_parameters()}
        if buffers:
            out.update(dict(self.named_buffers()))
        return out

    def load_state_dict(self, tensors, strict=True):
        own = dict(self.named_parameters())
        bufs = {name for name, _ in self.named_buffers()}
        missing = [n for n in own if n not in tensors]
        unknown = [n for n in tensors if n not in own and n not in bufs]
        if strict and (missing or unknown):
            raise ConfigError(f"state mismatch: missing {missing[:5]}, unexpected {unknown[:5]}")
        for name, arr in tensors.items():
            if name in own:
                p = own[name]
                if p.data.shape != arr.shape:
                    raise DimensionError("load_state_dict", f"shape mismatch for {name}", [p.data.shape, arr.shape])
                p.data = np.asarray(arr, dtype=p.data.dtype).copy()
            elif name in bufs:
                self._set_buffer(name, arr)

    def _set_buffer(self, dotted, arr):
        *path, leaf = dotted.split(".")
        mod = self
        for part in path:
            mod = mod[int(part)] if isinstance(mod, list) else getattr(mod, part)
        old = getattr(mod, leaf)
        setattr(mod, leaf, np.asarray(arr, dtype=old.dtype).reshape(old.shape).copy())

    def train(self, mode=True):
        self.training = mode
        for _, child in self.named_children():
            child.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def requires_grad_(self, flag=True):
        for p in self.parameters():
            p.requires_grad = flag
        return self

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def astype(self, dtype):
        """Deep copy with every parameter and buffer cast to ``dtype``."""
        clone = copy.deepcopy(self)
        for p in clone.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        for name, buf in list(clone.named_buffers()):
            clone._set_buffer(name, buf.astype(dtype))
        return clone

    def __call__(self, x):
        return self.forward(x)


class Conv(Module):
    """Bare convolution, optionally with bias (used by heads and the spatial gate)."""

    def __init__(self, c_in, c_out, k=1, s=1, p=None, groups=1, bias=True, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        p = k // 2 if p is None else p
        self.spec = ConvSpec(k, s, p, groups, bias)
        fan_in = (c_in // groups) * k * k
        self.weight = Var(he_uniform(rng, (c_out, c_in // groups, k, k), fan_in))
        self.bias = Var(np.zeros(c_out, dtype=np.float32)) if bias else None
        self.c_in, self.c_out = c_in, c_out

    def forward(self, x):
        return ad.conv2d(x, self.weight, self.bias, self.spec)

    def profile(self, shape):
        n, c, h, w = shape
        oh, ow = self.spec.out_hw(h, w)
        k, g = self.spec.kernel, self.spec.groups
        return (n, self.c_out, oh, ow), 2 * k * k * (c // g) * self.c_out * oh * ow * n


class BatchNorm(Module):
    _buffers = ("running_mean", "running_var")

    def __init__(self, c):
        self.gamma = Var(np.ones(c, dtype=np.float32))
        self.beta = Var(np.zeros(c, dtype=np.float32))
        self.running_mean = np.zeros(c, dtype=np.float32)
        self.running_var = np.ones(c, dtype=np.float32)
        self.stats = None  # list collecting batch (mean, var) during BN calibration

    def forward(self, x):
        if self.training and self.stats is not None:
            xv = ad.value(x)
            self.stats.append((xv.mean(axis=(0, 2, 3)), xv.var(axis=(0, 2, 3))))
        return ad.batchnorm(
            x, self.gamma, self.beta, self.running_mean, self.running_var, BN_EPS, training=self.training
        )

    def profile(self, shape):
        return shape, 2 * math.prod(shape)


class CBS(Module):
    """Conv (no bias) -> BatchNorm -> SiLU.

    ``act=None`` skips the activation; used only to build exact linear
    fixtures in tests.
    """

    def __init__(self, c_in, c_out, k=1, s=1, groups=1, act="silu", rng=None):
        self.conv = Conv(c_in, c_out, k, s, k // 2, groups, bias=False, rng=rng)
        self.bn = BatchNorm(c_out)
        self.act = act

    @property
    def c_out(self):
        return self.conv.c_out

    def forward(self, x):
        y = self.bn(self.conv(x))
        return ad.activation(y, self.act) if self.act else y

    def fold(self):
        """Conv weight and bias with inference-mode BN folded in."""
        from .tensor import fold_batchnorm

        bn = self.bn
        return fold_batchnorm(
            self.conv.weight.data, bn.gamma.data, bn.beta.data, bn.running_mean, bn.running_var, BN_EPS
        )

    def forward_folded(self, x):
        from . import tensor as T

        w, b = self.fold()
        y = T.conv2d(ad.value(x), w, b, self.conv.spec)
        return T.activation(y, self.act) if self.act else y

    def profile(self, shape):
        out, flops = self.conv.profile(shape)
        flops += 2 * math.prod(out)
        if self.act:
            flops += math.prod(out)
        return out, flops


class SPPF(Module):
    """Sequential k=5 max pools; their outputs (optionally with the entry map) are concatenated and fused."""

    def __init__(self, c_in, c_out, c_hidden=None, include_identity_branch=False, rng=None):
        c_hidden = c_hidden or c_in // 2
        self.include_identity_branch = include_identity_branch
        self.pool_spec = ConvSpec(5, 1, 2)
        self.concat_width = (4 if include_identity_branch else 3) * c_hidden
        self.cv1 = CBS(c_in, c_hidden, 1, rng=rng)
        self.cv2 = CBS(self.concat_width, c_out, 1, rng=rng)
        if self.cv2.conv.c_in != self.concat_width:
            raise ConfigError("SPPF exit conv width does not match concat width")

    @property
    def c_out(self):
        return self.cv2.c_out

    def branches(self, x):
        y0 = self.cv1(x)
        y1 = ad.pool2d(y0, "max", self.pool_spec)
        y2 = ad.pool2d(y1, "max", self.pool_spec)
        y3 = ad.pool2d(y2, "max", self.pool_spec)
        return y0, y1, y2, y3

    def forward(self, x):
        y0, y1, y2, y3 = self.branches(x)
        parts = [y0, y1, y2, y3] if self.include_identity_branch else [y1, y2, y3]
        return self.cv2(ad.concat_channels(parts))

    def profile(self, shape):
        s0, f = self.cv1.profile(shape)
        f += 3 * 25 * math.prod(s0)
        n, c, h, w = s0
        out, f2 = self.cv2.profile((n, self.concat_width, h, w))
        return out, f + f2


class ChannelAttention(Module):
    """Global average descriptor, odd-length 1-D mixing across channels, sigmoid."""

    def __init__(self, channels, k=None, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        k = k or eca_kernel_size(channels)
        if k % 2 == 0:
            raise ConfigError(f"channel attention kernel must be odd, got {k}")
        self.weight = Var(he_uniform(rng, (k,), k))

    def forward(self, x):
        return ad.sigmoid(ad.conv1d_channels(ad.global_avg_pool(x), self.weight))

    def profile(self, shape):
        n, c, h, w = shape
        k = self.weight.data.shape[0]
        return (n, c, 1, 1), n * c * (h * w + 2 * k + 1)


class SpatialAttention(Module):
    """[channel mean; channel max] -> 7x7 conv -> sigmoid, giving an (n,1,h,w) gate."""

    def __init__(self, k=7, rng=None):
        self.conv = Conv(2, 1, k, 1, k // 2, bias=True, rng=rng)

    def forward(self, x):
        desc = ad.concat_channels([ad.channel_mean(x), ad.channel_max(x)])
        return ad.sigmoid(self.conv(desc))

    def profile(self, shape):
        n, c, h, w = shape
        out, f = self.conv.profile((n, 2, h, w))
        return out, f + 2 * c * n * h * w + math.prod(out)


def _gate(x, channel_attn, spatial_attn, order):
    if order == "channel-spatial":
        x = ad.scale(x, channel_attn(x))
        return ad.scale(x, spatial_attn(x))
    if order == "spatial-channel":
        x = ad.scale(x, spatial_attn(x))
        return ad.scale(x, channel_attn(x))
    raise ConfigError(f"unknown gate order {order!r}")


def _gate_profile(shape, channel_attn, spatial_attn):
    _, fc = channel_attn.profile(shape)
    _, fs = spatial_attn.profile(shape)
    return fc + fs + 2 * math.prod(shape)


class EAConv(Module):
    """Depthwise CBS -> pointwise CBS -> channel gate -> spatial gate."""

    def __init__(self, c_in, c_out, k=3, s=1, order="channel-spatial", rng=None):
        if s not in (1, 2):
            raise ConfigError(f"EAConv stride must be 1 or 2, got {s}")
        self.order = order
        self.dw = CBS(c_in, c_in, k, s, groups=c_in, rng=rng)
        self.pw = CBS(c_in, c_out, 1, rng=rng)
        self.ca = ChannelAttention(c_out, rng=rng)
        self.sa = SpatialAttention(rng=rng)

    @property
    def c_out(self):
        return self.pw.c_out

    def forward(self, x):
        return _gate(self.pw(self.dw(x)), self.ca, self.sa, self.order)

    def profile(self, shape):
        s1, f1 = self.dw.profile(shape)
        out, f2 = self.pw.profile(s1)
        return out, f1 + f2 + _gate_profile(out, self.ca, self.sa)


class EADown(Module):
    """Parallel 2x2/2 max and average pools, concatenated, fused by 1x1 CBS, then gated."""

    def __init__(self, c_in, c_out, order="channel-spatial", rng=None):
        self.order = order
        self.pool_spec = ConvSpec(2, 2, 0)
        self.fuse = CBS(2 * c_in, c_out, 1, rng=rng)
        self.ca = ChannelAttention(c_out, rng=rng)
        self.sa = SpatialAttention(rng=rng)

    @property
    def c_out(self):
        return self.fuse.c_out

    def pooled(self, x):
        h, w = ad.value(x).shape[2:]
        if h % 2 or w % 2:
            raise GeometryError(f"EADown needs even spatial dims, got {h}x{w}")
        return ad.pool2d(x, "max", self.pool_spec), ad.pool2d(x, "avg", self.pool_spec)

    def forward(self, x):
        mx, av = self.pooled(x)
        return _gate(self.fuse(ad.concat_channels([mx, av])), self.ca, self.sa, self.order)

    def profile(self, shape):
        n, c, h, w = shape
        if h % 2 or w % 2:
            raise GeometryError(f"EADown needs even spatial dims, got {h}x{w}")
        pooled = (n, c, h // 2, w // 2)
        f = 2 * 4 * math.prod(pooled)
        out, f2 = self.fuse.profile((n, 2 * c, h // 2, w // 2))
        return out, f + f2 + _gate_profile(out, self.ca, self.sa)


class Head(Module):
    """Two 3x3 CBS followed by a 1x1 conv producing 4 box distances + class logits per cell."""

    def __init__(self, c_in, hidden, num_classes, rng=None):
        self.cv1 = CBS(c_in, hidden, 3, rng=rng)
        self.cv2 = CBS(hidden, hidden, 3, rng=rng)
        self.pred = Conv(hidden, 4 + num_classes, 1, bias=True, rng=rng)

    def forward(self, x):
        return self.pred(self.cv2(self.cv1(x)))

    def profile(self, shape):
        s1, f1 = self.cv1.profile(shape)
        s2, f2 = self.cv2.profile(s1)
        out, f3 = self.pred.profile(s2)
        return out, f1 + f2 + f3
