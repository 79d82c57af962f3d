"""Efficiency accounting (parameters, FLOPs, checkpoint size, latency) and detection metrics."""
import os
import platform
import statistics
import time
from dataclasses import dataclass, field

import numpy as np
from threadpoolctl import threadpool_limits

from .detector import build_model, decode, iou_matrix, nms
from .errors import InputError
from .formats import serialize_weights

# published figures quoted in the report footer; never asserted
PUBLISHED = {
    "params_m": 1.4,
    "gflops": 4.6,
    "size_mb": 3.3,
    "latency_ms": 22.19,
    "baseline_latency_ms": 123.38,
    "speedup_claim": 88,
}


@dataclass(frozen=True)
class LayerRow:
    name: str
    params: int
    flops: int
    out_shape: tuple


@dataclass
class AnalysisReport:
    input_size: int
    precision: str
    total_params: int
    flops: int
    size_bytes: int
    rows: list = field(default_factory=list)

    @property
    def gflops(self):
        return self.flops / 1e9

    @property
    def params_m(self):
        return self.total_params / 1e6

    @property
    def size_mb(self):
        return self.size_bytes / 1e6

    def to_kv(self):
        measured_speedup = PUBLISHED["baseline_latency_ms"] / PUBLISHED["latency_ms"]
        pairs = [
            ("input_size", self.input_size),
            ("params", self.total_params),
            ("params_m", f"{self.params_m:.1f}"),
            ("flops", self.flops),
            ("gflops", f"{self.gflops:.2f}"),
            ("precision", self.precision),
            ("size_bytes", self.size_bytes),
            ("size_mb", f"{self.size_mb:.2f}"),
            ("layers", len(self.rows)),
            ("published_params_m", PUBLISHED["params_m"]),
            ("published_gflops", PUBLISHED["gflops"]),
            ("published_size_mb", PUBLISHED["size_mb"]),
            ("published_latency_ms", f"{PUBLISHED['latency_ms']} (hardware-bound, reported only)"),
            (
                "published_speedup_claim",
                f"{PUBLISHED['speedup_claim']}x unverifiable; latency table implies "
                f"{PUBLISHED['baseline_latency_ms']}/{PUBLISHED['latency_ms']} = {measured_speedup:.2f}x",
            ),
        ]
        return "".join(f"{k} = {v}\n" for k, v in pairs)

    def to_text(self):
        w = max([len(r.name) for r in self.rows] + [5])
        lines = [f"{'name':<{w}}  {'params':>10}  {'flops':>14}  out_shape"]
        for r in self.rows:
            lines.append(f"{r.name:<{w}}  {r.params:>10,}  {r.flops:>14,}  {r.out_shape}")
        lines.append(f"{'total':<{w}}  {self.total_params:>10,}  {self.flops:>14,}")
        lines.append("")
        lines.append(f"params     {self.params_m:.3f} M")
        lines.append(f"GFLOPs     {self.gflops:.3f} @ {self.input_size}x{self.input_size}")
        lines.append(f"size       {self.size_mb:.3f} MB ({self.precision})")
        lines.append(
            f"reference: {PUBLISHED['latency_ms']} ms CPU latency is hardware-bound and not checked; "
            f"the {PUBLISHED['speedup_claim']}x speed-up claim does not follow from "
            f"{PUBLISHED['baseline_latency_ms']} -> {PUBLISHED['latency_ms']} ms"
        )
        return "\n".join(lines) + "\n"


def count_params(module):
    """Learnable scalars: conv weights/biases, BN gamma/beta, attention weights. BN running stats excluded."""
    return sum(p.data.size for p in module.parameters())


def count_flops(module, size):
    """FLOPs of one forward pass; ``size`` is an input side length (models) or an NCHW shape (blocks)."""
    if isinstance(size, int):
        return sum(r.flops for r in layer_table(module, size))
    _, flops = module.profile(tuple(size))
    return flops


def layer_table(model, input_size=None):
    return [LayerRow(*row) for row in model.profile(input_size)]


def model_size_bytes(model, precision="fp16"):
    """Size of the checkpoint ``write_weights`` would produce at this precision."""
    return len(serialize_weights(model, precision))


def analyze(model, input_size=None, precision="fp16"):
    size = input_size or model.cfg.input_size
    rows = layer_table(model, size)
    return AnalysisReport(
        input_size=size,
        precision=precision,
        total_params=sum(r.params for r in rows),
        flops=sum(r.flops for r in rows),
        size_bytes=model_size_bytes(model, precision),
        rows=rows,
    )


# -- latency ----------------------------------------------------------------------


@dataclass
class LatencyStats:
    samples: list
    hardware: str

    @property
    def mean(self):
        return statistics.fmean(self.samples)

    @property
    def p50(self):
        return float(np.percentile(self.samples, 50))

    @property
    def p95(self):
        return float(np.percentile(self.samples, 95))

    def to_kv(self):
        return (
            f"iters = {len(self.samples)}\nmean_ms = {self.mean:.3f}\np50_ms = {self.p50:.3f}\n"
            f"p95_ms = {self.p95:.3f}\nmin_ms = {min(self.samples):.3f}\nmax_ms = {max(self.samples):.3f}\n"
            f"hardware = {self.hardware}\n"
            f"published_latency_ms = {PUBLISHED['latency_ms']} (different CPU, not comparable)\n"
        )


def hardware_string():
    return f"{platform.machine()} {platform.processor() or 'cpu'} x{os.cpu_count()} / {platform.python_implementation()} {platform.python_version()}"


def benchmark_latency(model, input_size=None, warmup=10, iters=100, threads=1, conf=0.25, iou=0.5, seed=0):
    """Wall-clock milliseconds per single-image forward + decode + NMS."""
    if iters < 1:
        raise InputError("iters must be at least 1")
    if input_size and input_size != model.cfg.input_size:
        model = build_model(model.cfg.with_(input_size=input_size), weights=model.state_dict())
    model.eval()
    s = model.cfg.input_size
    x = np.random.default_rng(seed).random((1, 3, s, s), dtype=np.float32)
    samples = []
    with threadpool_limits(limits=threads):
        for i in range(warmup + iters):
            t0 = time.perf_counter()
            nms(decode(model(x), conf), iou)
            dt = (time.perf_counter() - t0) * 1e3
            if i >= warmup:
                samples.append(dt)
    return LatencyStats(samples, hardware_string())


# -- detection metrics ---------------------------------------------------------------


@dataclass(frozen=True)
class GroundTruth:
    class_id: int
    box: tuple


@dataclass
class EvalResult:
    precision: float
    recall: float
    map50: float
    map50_95: float
    per_class: dict = field(default_factory=dict)


IOU_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))


def _index(pairs, what):
    out = {}
    for image_id, items in pairs:
        if image_id in out:
            raise InputError(f"duplicate image id {image_id!r} in {what}")
        out[image_id] = list(items)
    return out


def match_detections(dets, truths, threshold):
    """Greedy matching for one class.

    ``dets`` are (image_id, Detection) pairs already in ranking order,
    ``truths`` maps image_id -> list of boxes.  Each detection takes the
    unmatched truth with the highest IoU if that IoU reaches ``threshold``.
    Returns a boolean true-positive flag per detection.
    """
    used = {k: np.zeros(len(v), dtype=bool) for k, v in truths.items()}
    flags = np.zeros(len(dets), dtype=bool)
    for i, (img, d) in enumerate(dets):
        boxes = truths.get(img)
        if not boxes:
            continue
        ious = iou_matrix([d.box], boxes)[0]
        ious[used[img]] = -1.0
        j = int(ious.argmax())
        if ious[j] >= threshold:
            used[img][j] = True
            flags[i] = True
    return flags


def average_precision(tp_flags, n_truth):
    """All-points interpolated AP from ranked true-positive flags."""
    if n_truth == 0 or len(tp_flags) == 0:
        return 0.0
    tp = np.cumsum(tp_flags)
    fp = np.cumsum(~np.asarray(tp_flags))
    recall = tp / n_truth
    precision = tp / (tp + fp)
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    idx = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[idx + 1] - mrec[idx]) * mpre[idx + 1]))


def evaluate_detections(preds, truths, conf=0.25):
    """Precision/recall at ``conf`` and IoU 0.5, plus mAP50 and mAP50:95.

    ``preds`` and ``truths`` are sequences of ``(image_id, items)`` pairs;
    items carry ``class_id`` and ``box`` (detections also ``score``).  Metrics
    are averaged over classes that have at least one ground-truth box.
    """
    pred_by_img = _index(preds, "predictions")
    truth_by_img = _index(truths, "ground truth")
    order = list(truth_by_img) + [k for k in pred_by_img if k not in truth_by_img]
    classes = sorted({t.class_id for items in truth_by_img.values() for t in items})
    per_class = {}
    for c in classes:
        tboxes = {img: [t.box for t in truth_by_img.get(img, []) if t.class_id == c] for img in order}
        n_truth = sum(len(v) for v in tboxes.values())
        ranked = [
            (rank, img, d)
            for rank, img in enumerate(order)
            for d in pred_by_img.get(img, [])
            if d.class_id == c
        ]
        ranked.sort(key=lambda r: (-r[2].score, r[0]))
        dets = [(img, d) for _, img, d in ranked]
        aps = [average_precision(match_detections(dets, tboxes, t), n_truth) for t in IOU_THRESHOLDS]
        confident = [(img, d) for img, d in dets if d.score >= conf]
        tp = int(match_detections(confident, tboxes, 0.5).sum())
        per_class[c] = {
            "ap50": aps[0],
            "ap50_95": float(np.mean(aps)),
            "precision": tp / len(confident) if confident else 0.0,
            "recall": tp / n_truth,
            "n_truth": n_truth,
        }
    if not per_class:
        return EvalResult(0.0, 0.0, 0.0, 0.0, {})

    def avg(key):
        return float(np.mean([v[key] for v in per_class.values()]))

    return EvalResult(avg("precision"), avg("recall"), avg("ap50"), avg("ap50_95"), per_class)
