"""Train the small detector on synthetic blobs, save it, reload it, and detect.

Takes about a minute on one core.
Run: python3 demos/toy_train_and_infer.py
"""
import tempfile
from pathlib import Path

import numpy as np

from efayolo.detector import ModelConfig, build_model, format_detections, infer_image, iou
from efayolo.formats import load_weights_into, write_weights
from efayolo.toytrain import blob_recall, calibrate_bn, gen_dataset, train

cfg = ModelConfig(input_size=64, width_mult=0.25, num_classes=1)
train_set = gen_dataset(42, 512)
held_out = gen_dataset(1042, 200)

model = build_model(cfg, seed=42)
trace = train(model, train_set, steps=200, lr=0.1, batch=8, seed=42)
calibrate_bn(model, train_set)
print(f"loss {np.mean(trace[:20]):.3f} -> {np.mean(trace[-20:]):.3f}")
print(f"held-out recall @ IoU 0.5, conf 0.25: {blob_recall(model, held_out):.3f}")

with tempfile.TemporaryDirectory() as d:
    path = Path(d) / "toy.efaw"
    write_weights(model, path, "fp32")
    fresh = build_model(cfg, seed=0)
    load_weights_into(fresh, path)

sample = held_out[0]
dets = infer_image(fresh.eval(), sample.image.transpose(1, 2, 0), conf=0.25, iou_threshold=0.5)
print("truth:", [tuple(round(v, 1) for v in b) for b in sample.boxes])
print(format_detections(dets), end="")
for d in dets:
    print(f"  best IoU {max(iou(d.box, t) for t in sample.boxes):.3f}")
