"""Precision, recall and AP on a tiny hand-built example.

Run: python3 demos/metrics_walkthrough.py
"""
from efayolo.analysis import GroundTruth, evaluate_detections
from efayolo.detector import Detection

truths = [
    ("img0", [GroundTruth(0, (0, 0, 10, 10)), GroundTruth(0, (20, 20, 30, 30))]),
    ("img1", [GroundTruth(0, (0, 0, 10, 10))]),
]
preds = [
    ("img0", [Detection(0, 0.9, (0, 0, 10, 10)), Detection(0, 0.7, (20, 20, 30, 30))]),
    # overlaps the truth with IoU 0.4 only, so it counts as a false positive
    ("img1", [Detection(0, 0.8, (0, 0, 10, 4))]),
]

# ranked TP, FP, TP over 3 truths: AP = 1/3 * 1 + 1/3 * 2/3 = 5/9
r = evaluate_detections(preds, truths)
print(f"precision {r.precision:.4f}  recall {r.recall:.4f}")
print(f"mAP50 {r.map50:.4f}  mAP50:95 {r.map50_95:.4f}  (5/9 = {5 / 9:.4f})")

# a slightly loose box passes at 0.5 but not at the stricter thresholds
loose = [("img0", [Detection(0, 0.9, (0, 0, 10, 12))]), ("img1", [])]
r = evaluate_detections(loose, [("img0", truths[0][1][:1]), ("img1", [])])
print(f"loose box: mAP50 {r.map50:.3f}  mAP50:95 {r.map50_95:.3f}")
