"""Detector graph assembly, inference, box decoding and NMS.

The backbone/neck/head layout is a reconstruction: a strided CBS stem, four
EADown stages each followed by EAConv blocks, SPPF on the deepest map, a
two-way (top-down then bottom-up) neck fused by EAConv, and three
anchor-free heads at strides 8, 16 and 32 predicting ltrb distances plus
per-class logits.
"""
import math
from dataclasses import dataclass, fields, replace

import numpy as np

from . import autodiff as ad
from . import tensor as T
from .blocks import CBS, SPPF, EAConv, EADown, Head, Module
from .errors import ConfigError, DimensionError

STRIDES = (8, 16, 32)
PAD_VALUE = 114 / 255
CLASS_PRIOR = 0.01
BOX_PRIOR = 1.0


@dataclass(frozen=True)
class ModelConfig:
    """Everything that determines the graph.

    Defaults are the tuned budget configuration (about 1.4M parameters and
    4.6 GFLOPs at 640x640).  ``use_eaconv`` / ``use_eadown`` swap the
    attention blocks for plain 3x3 CBS layers to emulate ablation variants.
    """

    num_classes: int = 2
    input_size: int = 640
    width_mult: float = 1.0
    depth_mult: float = 1.0
    base_channels: tuple = (24, 48, 80, 160, 288)
    blocks_per_stage: tuple = (2, 2, 2, 2)
    sppf_identity_branch: bool = False
    use_eaconv: bool = True
    use_eadown: bool = True

    def __post_init__(self):
        object.__setattr__(self, "base_channels", tuple(int(c) for c in self.base_channels))
        object.__setattr__(self, "blocks_per_stage", tuple(int(b) for b in self.blocks_per_stage))
        self.validate()

    def validate(self):
        if self.num_classes < 1:
            raise ConfigError("num_classes must be a positive integer")
        if self.input_size % 32 or self.input_size < 64:
            raise ConfigError(f"input_size must be a multiple of 32 and at least 64, got {self.input_size}")
        if not (self.width_mult > 0 and self.depth_mult > 0):
            raise ConfigError("width_mult and depth_mult must be positive")
        if len(self.base_channels) != 5:
            raise ConfigError("base_channels needs 5 entries (stem + 4 stages)")
        if len(self.blocks_per_stage) != 4 or any(b < 0 for b in self.blocks_per_stage):
            raise ConfigError("blocks_per_stage needs 4 non-negative entries")
        self.channels()

    def channels(self):
        out = []
        for stage, base in enumerate(self.base_channels):
            c = max(8, int(round(base * self.width_mult)))
            if c % 2:
                raise ConfigError(f"stage {stage}: derived channel count {c} is odd")
            out.append(c)
        return out

    def depths(self):
        return [max(1, int(round(n * self.depth_mult))) if n else 0 for n in self.blocks_per_stage]

    def with_(self, **kw):
        return replace(self, **kw)

    @classmethod
    def field_names(cls):
        return [f.name for f in fields(cls)]


@dataclass(frozen=True)
class Detection:
    class_id: int
    score: float
    box: tuple  # x1, y1, x2, y2

    def format(self):
        x1, y1, x2, y2 = self.box
        return f"{self.class_id} {self.score:.4f} {x1:.1f} {y1:.1f} {x2:.1f} {y2:.1f}"


def format_detections(dets):
    return "".join(d.format() + "\n" for d in dets)


@dataclass
class RawPrediction:
    """Head outputs, one (n, 4 + num_classes, S/l, S/l) map per stride l."""

    maps: tuple
    strides: tuple = STRIDES

    def level(self, stride):
        return self.maps[self.strides.index(stride)]


class Model(Module):
    def __init__(self, cfg, seed=42):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        c0, c1, c2, c3, c4 = cfg.channels()
        n1, n2, n3, n4 = cfg.depths()
        nc = cfg.num_classes

        def down(ci, co):
            return EADown(ci, co, rng=rng) if cfg.use_eadown else CBS(ci, co, 3, 2, rng=rng)

        def conv(ci, co):
            return EAConv(ci, co, rng=rng) if cfg.use_eaconv else CBS(ci, co, 3, rng=rng)

        self.stem = CBS(3, c0, 3, 2, rng=rng)
        self.down1, self.stage1 = down(c0, c1), [conv(c1, c1) for _ in range(n1)]
        self.down2, self.stage2 = down(c1, c2), [conv(c2, c2) for _ in range(n2)]
        self.down3, self.stage3 = down(c2, c3), [conv(c3, c3) for _ in range(n3)]
        self.down4, self.stage4 = down(c3, c4), [conv(c4, c4) for _ in range(n4)]
        self.sppf = SPPF(c4, c4, include_identity_branch=cfg.sppf_identity_branch, rng=rng)
        self.td1 = conv(c4 + c3, c3)
        self.td2 = conv(c3 + c2, c2)
        self.bu1_down, self.bu1 = down(c2, c2), conv(c2 + c3, c3)
        self.bu2_down, self.bu2 = down(c3, c3), conv(c3 + c4, c4)
        self.heads = [Head(c, c2, nc, rng=rng) for c in (c2, c3, c4)]
        prior = -math.log((1 - CLASS_PRIOR) / CLASS_PRIOR)
        for h in self.heads:
            h.pred.bias.data[:4] = BOX_PRIOR
            h.pred.bias.data[4:] = prior

    # layer table: (name, callable-free description) in execution order
    def layers(self):
        out = [("stem", self.stem), ("down1", self.down1)]
        out += [(f"stage1.{i}", m) for i, m in enumerate(self.stage1)]
        out += [("down2", self.down2)] + [(f"stage2.{i}", m) for i, m in enumerate(self.stage2)]
        out += [("down3", self.down3)] + [(f"stage3.{i}", m) for i, m in enumerate(self.stage3)]
        out += [("down4", self.down4)] + [(f"stage4.{i}", m) for i, m in enumerate(self.stage4)]
        out += [("sppf", self.sppf), ("td1", self.td1), ("td2", self.td2)]
        out += [("bu1_down", self.bu1_down), ("bu1", self.bu1), ("bu2_down", self.bu2_down), ("bu2", self.bu2)]
        out += [(f"head.p{s}", h) for s, h in zip((3, 4, 5), self.heads)]
        return out

    def forward(self, x):
        xv = ad.value(x)
        s = self.cfg.input_size
        if xv.ndim != 4 or xv.shape[1:] != (3, s, s):
            raise DimensionError("forward", f"expected (n, 3, {s}, {s}) input", [xv.shape])
        y = self.down1(self.stem(x))
        for m in self.stage1:
            y = m(y)
        y = self.down2(y)
        for m in self.stage2:
            y = m(y)
        p3 = y
        y = self.down3(y)
        for m in self.stage3:
            y = m(y)
        p4 = y
        y = self.down4(y)
        for m in self.stage4:
            y = m(y)
        p5 = self.sppf(y)
        n4 = self.td1(ad.concat_channels([ad.upsample_nearest2x(p5), p4]))
        n3 = self.td2(ad.concat_channels([ad.upsample_nearest2x(n4), p3]))
        o4 = self.bu1(ad.concat_channels([self.bu1_down(n3), n4]))
        o5 = self.bu2(ad.concat_channels([self.bu2_down(o4), p5]))
        return RawPrediction(tuple(h(f) for h, f in zip(self.heads, (n3, o4, o5))))

    def profile(self, input_size=None, batch=1):
        """Per-layer (name, params, flops, out_shape) rows for an input of the given size."""
        s = input_size or self.cfg.input_size
        if s % 32:
            raise ConfigError(f"input size must be a multiple of 32, got {s}")
        shapes = {}
        rows = []

        def run(name, mod, shape):
            out, flops = mod.profile(shape)
            rows.append((name, mod.num_params(), flops, out))
            shapes[name] = out
            return out

        def cat(*ss):
            return (ss[0][0], sum(x[1] for x in ss)) + ss[0][2:]

        def up(sh):
            return sh[:2] + (sh[2] * 2, sh[3] * 2)

        y = run("stem", self.stem, (batch, 3, s, s))
        for name, mod in self.layers()[1:]:
            if name == "td1":
                y = run(name, mod, cat(up(shapes["sppf"]), shapes[_last(self.layers(), "stage3", "down3")]))
            elif name == "td2":
                y = run(name, mod, cat(up(shapes["td1"]), shapes[_last(self.layers(), "stage2", "down2")]))
            elif name == "bu1_down":
                y = run(name, mod, shapes["td2"])
            elif name == "bu1":
                y = run(name, mod, cat(shapes["bu1_down"], shapes["td1"]))
            elif name == "bu2_down":
                y = run(name, mod, shapes["bu1"])
            elif name == "bu2":
                y = run(name, mod, cat(shapes["bu2_down"], shapes["sppf"]))
            elif name.startswith("head."):
                src = {"head.p3": "td2", "head.p4": "bu1", "head.p5": "bu2"}[name]
                run(name, mod, shapes[src])
            else:
                y = run(name, mod, y)
        return rows


def _last(layers, stage, fallback):
    names = [n for n, _ in layers if n.startswith(stage + ".")]
    return names[-1] if names else fallback


def build_model(cfg=None, weights=None, seed=42):
    """Build the detector; ``weights`` is an optional name -> array mapping."""
    model = Model(cfg or ModelConfig(), seed=seed)
    if weights is not None:
        model.load_state_dict(weights)
    return model


# -- post-processing ----------------------------------------------------------


def iou(a, b):
    ix1, iy1 = max(a[0], b[0]), max(a[1], b[1])
    ix2, iy2 = min(a[2], b[2]), min(a[3], b[3])
    inter = max(ix2 - ix1, 0.0) * max(iy2 - iy1, 0.0)
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    if union <= 0:
        return 1.0 if tuple(a) == tuple(b) else 0.0
    return inter / union


def iou_matrix(boxes_a, boxes_b):
    a = np.asarray(boxes_a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(boxes_b, dtype=np.float64).reshape(-1, 4)
    ix1 = np.maximum(a[:, None, 0], b[None, :, 0])
    iy1 = np.maximum(a[:, None, 1], b[None, :, 1])
    ix2 = np.minimum(a[:, None, 2], b[None, :, 2])
    iy2 = np.minimum(a[:, None, 3], b[None, :, 3])
    inter = np.clip(ix2 - ix1, 0, None) * np.clip(iy2 - iy1, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(union > 0, inter / np.where(union > 0, union, 1), 0.0)
    return out


def decode(raw, conf_threshold, batch_index=0):
    """Turn raw head maps for one image into candidate detections (letterbox pixels).

    Each cell contributes at most one candidate, its best class, when that
    class's sigmoid score exceeds ``conf_threshold``.
    """
    cands = []
    size = None
    for stride, m in zip(raw.strides, raw.maps):
        m = np.asarray(ad.value(m)[batch_index], dtype=np.float64)
        h, w = m.shape[1:]
        size = h * stride
        dist = np.maximum(m[:4], 0) * stride
        scores = T.sigmoid(m[4:])
        cls = scores.argmax(axis=0)
        best = scores.max(axis=0)
        rows, cols = np.nonzero(best > conf_threshold)
        for i, j in zip(rows, cols):
            cx, cy = (j + 0.5) * stride, (i + 0.5) * stride
            l, t, r, b = dist[:, i, j]
            x1, y1 = max(cx - l, 0.0), max(cy - t, 0.0)
            x2, y2 = min(cx + r, size), min(cy + b, size)
            if x1 < x2 and y1 < y2:
                cands.append(Detection(int(cls[i, j]), float(best[i, j]), (x1, y1, x2, y2)))
    return cands


def _nms_key(d):
    return (-d.score, d.class_id) + tuple(d.box)


def nms(cands, iou_threshold):
    """Greedy per-class suppression; output sorted by descending score."""
    order = sorted(cands, key=_nms_key)
    kept = []
    by_class = {}
    for d in order:
        mine = by_class.setdefault(d.class_id, [])
        if mine:
            ious = iou_matrix([d.box], [k.box for k in mine])[0]
            if (ious > iou_threshold).any():
                continue
        mine.append(d)
        kept.append(d)
    return kept


# -- letterboxing ---------------------------------------------------------------


@dataclass(frozen=True)
class Letterbox:
    scale: float
    pad_x: int
    pad_y: int
    width: int
    height: int
    size: int

    def to_letterbox(self, box):
        x1, y1, x2, y2 = box
        r = self.scale
        return (x1 * r + self.pad_x, y1 * r + self.pad_y, x2 * r + self.pad_x, y2 * r + self.pad_y)

    def to_original(self, box):
        x1, y1, x2, y2 = box
        r = self.scale
        x1 = min(max((x1 - self.pad_x) / r, 0.0), self.width)
        x2 = min(max((x2 - self.pad_x) / r, 0.0), self.width)
        y1 = min(max((y1 - self.pad_y) / r, 0.0), self.height)
        y2 = min(max((y2 - self.pad_y) / r, 0.0), self.height)
        return (x1, y1, x2, y2)


def letterbox_geometry(height, width, size):
    r = min(size / height, size / width)
    nw, nh = int(round(width * r)), int(round(height * r))
    return Letterbox(r, (size - nw) // 2, (size - nh) // 2, width, height, size), (nh, nw)


def resize_bilinear(image, out_h, out_w):
    """Half-pixel-centre bilinear resize of an (h, w, ch) raster."""
    h, w = image.shape[:2]

    def axis(n_in, n_out):
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0, n_in - 1)
        lo = np.floor(src).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, (src - lo)

    y0, y1, fy = axis(h, out_h)
    x0, x1, fx = axis(w, out_w)
    img = np.asarray(image, dtype=np.float64)
    top = img[y0] * (1 - fy)[:, None, None] + img[y1] * fy[:, None, None]
    return top[:, x0] * (1 - fx)[None, :, None] + top[:, x1] * fx[None, :, None]


def letterbox(image, size):
    """Aspect-preserving resize onto a ``size`` x ``size`` canvas filled with 114/255.

    ``image`` is an (h, w, 3) raster in [0, 1].  Returns the (1, 3, size, size)
    float32 tensor and the mapping needed to send boxes back.
    """
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[0] < 1 or image.shape[1] < 1:
        raise DimensionError("letterbox", "expected a non-empty (h, w, 3) raster", [image.shape])
    h, w = image.shape[:2]
    geo, (nh, nw) = letterbox_geometry(h, w, size)
    canvas = np.full((size, size, 3), PAD_VALUE, dtype=np.float64)
    canvas[geo.pad_y : geo.pad_y + nh, geo.pad_x : geo.pad_x + nw] = resize_bilinear(image, nh, nw)
    return canvas.transpose(2, 0, 1)[None].astype(np.float32), geo


def infer_image(model, image, conf=0.25, iou_threshold=0.5):
    """Full pipeline for one RGB raster; boxes come back in original pixels."""
    was_training = model.training
    model.eval()
    try:
        x, geo = letterbox(image, model.cfg.input_size)
        raw = model(x)
    finally:
        model.train(was_training)
    dets = nms(decode(raw, conf), iou_threshold)
    out = []
    for d in dets:
        box = geo.to_original(d.box)
        if box[0] < box[2] and box[1] < box[3]:
            out.append(Detection(d.class_id, d.score, box))
    return out
