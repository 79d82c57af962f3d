"""Toy-scale training: synthetic bright-rectangle images, a simple loss, plain SGD.

This is a trainability check for the architecture, not a reproduction of
any accuracy figure.
"""
import csv
import logging
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import BoxTarget
from .detector import STRIDES, decode, iou_matrix, nms
from .errors import InputError, NumericError

log = logging.getLogger(__name__)

NEG_WEIGHT = 0.05
BG_MAX = 0.35
BLOB_MIN = 0.7


@dataclass
class ToySample:
    image: np.ndarray  # (3, S, S) float32 in [0, 1]
    boxes: list  # (x1, y1, x2, y2) pixel boxes, exclusive upper edge
    classes: list


def gen_dataset(seed, count, size=64, max_blobs=3):
    """``count`` images of uniform noise with 1-3 disjoint bright rectangles each."""
    if size % 32 or size < 64:
        raise InputError(f"size must be a multiple of 32 and at least 64, got {size}")
    rng = np.random.default_rng(seed)
    lo, hi = max(4, 3 * size // 16), max(5, int(size * 0.4))
    out = []
    for _ in range(count):
        img = rng.uniform(0, BG_MAX, size=(3, size, size)).astype(np.float32)
        boxes = []
        want = int(rng.integers(1, max_blobs + 1))
        tries = 0
        while len(boxes) < want and tries < 100:
            tries += 1
            w, h = (int(v) for v in rng.integers(lo, hi + 1, size=2))
            x1, y1 = int(rng.integers(0, size - w + 1)), int(rng.integers(0, size - h + 1))
            box = (x1, y1, x1 + w, y1 + h)
            if any(_overlaps(box, b, margin=2) for b in boxes):
                continue
            boxes.append(box)
        for x1, y1, x2, y2 in boxes:
            color = rng.uniform(BLOB_MIN, 1.0, size=3).astype(np.float32)
            img[:, y1:y2, x1:x2] = color[:, None, None]
        out.append(ToySample(img, [tuple(float(v) for v in b) for b in boxes], [0] * len(boxes)))
    return out


def _overlaps(a, b, margin=0):
    return not (a[2] + margin <= b[0] or b[2] + margin <= a[0] or a[3] + margin <= b[1] or b[3] + margin <= a[1])


def assign_stride(box, strides=STRIDES):
    """Smallest stride whose cell size fits inside the box's short side; stride 8 otherwise."""
    short = min(box[2] - box[0], box[3] - box[1])
    fitting = [s for s in sorted(strides) if s <= short]
    return fitting[0] if fitting else 8


def assign(truth_boxes, size):
    """Map each truth to (stride, row, col) of the cell containing its centre."""
    out = []
    for box in truth_boxes:
        x1, y1, x2, y2 = box
        if x1 < 0 or y1 < 0 or x2 > size or y2 > size or x1 >= x2 or y1 >= y2:
            raise InputError(f"truth box {box} lies outside the {size}x{size} image")
        s = assign_stride(box)
        cx, cy = (x1 + x2) / 2, (y1 + y2) / 2
        row = min(int(cy // s), size // s - 1)
        col = min(int(cx // s), size // s - 1)
        out.append((s, row, col))
    return out


def toy_loss(raw, truths, classes=None):
    """Mean over images of: weighted class BCE + sum of (1 - IoU) at assigned cells.

    ``truths`` holds one list of boxes per image in the batch.
    """
    n = ad.value(raw.maps[0]).shape[0]
    if len(truths) != n:
        raise InputError(f"{len(truths)} truth lists for a batch of {n}")
    classes = classes or [[0] * len(t) for t in truths]
    size = ad.value(raw.maps[0]).shape[2] * raw.strides[0]
    cls_targets = {s: np.zeros_like(ad.value(m)[:, 4:]) for s, m in zip(raw.strides, raw.maps)}
    box_targets = {s: [] for s in raw.strides}
    for b, (boxes, labels) in enumerate(zip(truths, classes)):
        for (s, r, c), box, k in zip(assign(boxes, size), boxes, labels):
            cls_targets[s][b, k, r, c] = 1.0
            box_targets[s].append(BoxTarget(b, r, c, tuple(box)))
    total = None
    for s, m in zip(raw.strides, raw.maps):
        t = cls_targets[s]
        w = np.where(t > 0, 1.0, NEG_WEIGHT)
        term = ad.bce_with_logits(ad.slice_channels(m, 4, None), t, w)
        if box_targets[s]:
            dist = ad.relu(ad.slice_channels(m, 0, 4))
            term = ad.add(term, ad.iou_loss(dist, s, box_targets[s]))
        total = term if total is None else ad.add(total, term)
    return ad.mul(total, 1.0 / n)


def _batch(dataset, idx):
    x = np.stack([dataset[i].image for i in idx])
    return x, [dataset[i].boxes for i in idx], [dataset[i].classes for i in idx]


def train(model, dataset, steps, lr=0.001, batch=8, momentum=0.0, weight_decay=0.0, seed=42, csv_path=None):
    """Plain SGD on ``toy_loss``; returns the per-step loss trace."""
    rng = np.random.default_rng(seed)
    model.train()
    model.requires_grad_(True)
    params = model.parameters()
    velocity = [np.zeros_like(p.data) for p in params]
    order, cursor = rng.permutation(len(dataset)), 0
    trace = []
    try:
        for step in range(steps):
            if cursor + batch > len(order):
                order, cursor = rng.permutation(len(dataset)), 0
            idx = order[cursor : cursor + batch]
            cursor += batch
            x, boxes, labels = _batch(dataset, idx)
            model.zero_grad()
            loss = toy_loss(model(x), boxes, labels)
            value = float(ad.value(loss))
            if not np.isfinite(value):
                raise NumericError(f"non-finite loss at step {step}")
            ad.backward(loss)
            for p, v in zip(params, velocity):
                g = p.grad if p.grad is not None else 0.0
                if weight_decay:
                    g = g + weight_decay * p.data
                if momentum:
                    v *= momentum
                    v += g
                    g = v
                p.data = (p.data - lr * g).astype(p.data.dtype)
            trace.append(value)
            if step % 20 == 0:
                log.info("step %d loss %.4f", step, value)
    finally:
        model.requires_grad_(False)
        model.zero_grad()
    if csv_path:
        write_trace(csv_path, trace)
    return trace


def write_trace(path, trace):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "loss"])
        for i, v in enumerate(trace):
            w.writerow([i, f"{v:.6f}"])


def calibrate_bn(model, dataset, batch=8):
    """Set BN running statistics to the average batch statistics over ``dataset``.

    Training uses batch statistics only; this one pass makes inference-mode
    BN match what the network saw during training.
    """
    from .blocks import BatchNorm

    bns = [m for m in _walk(model) if isinstance(m, BatchNorm)]
    for bn in bns:
        bn.stats = []
    model.train()
    for start in range(0, len(dataset) - batch + 1, batch):
        x, _, _ = _batch(dataset, range(start, start + batch))
        model(x)
    for bn in bns:
        means, variances = zip(*bn.stats)
        bn.running_mean = np.mean(means, axis=0).astype(np.float32)
        bn.running_var = np.mean(variances, axis=0).astype(np.float32)
        bn.stats = None
    model.eval()
    return model


def _walk(module):
    yield module
    for _, child in module.named_children():
        yield from _walk(child)


def blob_recall(model, dataset, conf=0.25, iou_threshold=0.5, nms_iou=0.5):
    """Fraction of ground-truth blobs hit by some detection at IoU >= ``iou_threshold``."""
    model.eval()
    hit = total = 0
    for start in range(0, len(dataset), 16):
        chunk = dataset[start : start + 16]
        raw = model(np.stack([s.image for s in chunk]))
        for b, sample in enumerate(chunk):
            dets = nms(decode(raw, conf, batch_index=b), nms_iou)
            total += len(sample.boxes)
            if dets and sample.boxes:
                ious = iou_matrix(sample.boxes, [d.box for d in dets])
                hit += int((ious.max(axis=1) >= iou_threshold).sum())
    return hit / total if total else 0.0
