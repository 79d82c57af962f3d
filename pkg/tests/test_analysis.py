import math

import numpy as np
import pytest

from efayolo.analysis import (
    IOU_THRESHOLDS,
    GroundTruth,
    analyze,
    average_precision,
    benchmark_latency,
    count_flops,
    count_params,
    evaluate_detections,
    layer_table,
    model_size_bytes,
)
from efayolo.blocks import CBS, Conv
from efayolo.detector import Detection, ModelConfig, build_model
from efayolo.errors import InputError
from efayolo.formats import parse_weights, serialize_weights

from oracles import oracle_evaluate

SMALL = ModelConfig(input_size=64, width_mult=0.25)


def test_param_closed_forms():
    assert count_params(CBS(16, 32, 3)) == 4672
    assert count_params(Conv(64, 64, 1, bias=True)) == 4160


def test_flop_closed_forms():
    assert count_flops(Conv(16, 32, 3, 1, 1), (1, 16, 64, 64)) == 37_748_736
    assert count_flops(Conv(16, 16, 3, 1, 1, groups=16), (1, 16, 64, 64)) == 1_179_648


def test_flops_scale_quadratically_on_stride1_cbs():
    cbs = CBS(8, 16, 3)
    assert count_flops(cbs, (1, 8, 40, 40)) == 4 * count_flops(cbs, (1, 8, 20, 20))


@pytest.mark.parametrize(
    "cfg",
    [SMALL, ModelConfig(), ModelConfig(width_mult=0.5, depth_mult=0.5), SMALL.with_(use_eaconv=False), SMALL.with_(sppf_identity_branch=True, num_classes=5)],
)
def test_param_count_equals_serialized_scalars(cfg):
    m = build_model(cfg)
    tensors = parse_weights(serialize_weights(m, buffers=False))
    assert count_params(m) == sum(t.size for t in tensors.values())


def test_report_totals_are_row_sums():
    m = build_model(SMALL)
    rep = analyze(m)
    assert rep.total_params == sum(r.params for r in rep.rows) == count_params(m)
    assert rep.flops == sum(r.flops for r in rep.rows) == count_flops(m, 64)
    kv = dict(line.split(" = ", 1) for line in rep.to_kv().splitlines())
    assert int(kv["params"]) == rep.total_params and kv["precision"] == "fp16"
    assert "88x unverifiable" in kv["published_speedup_claim"]
    assert rep.to_text().splitlines()[0].split() == ["name", "params", "flops", "out_shape"]


def test_flops_shrink_with_input_size():
    m = build_model()
    full, half = count_flops(m, 640), count_flops(m, 320)
    assert abs(half / full - 0.25) < 0.01
    assert [r.name for r in layer_table(m, 320)] == [r.name for r in layer_table(m, 640)]


def test_model_size_convention():
    tensors = {"": np.zeros(1000, np.float32)}
    assert len(serialize_weights(tensors, "fp32")) == 12 + 2 + 1 + 1 + 4 + 4000
    m = build_model(SMALL)
    f32, f16 = model_size_bytes(m, "fp32"), model_size_bytes(m, "fp16")
    n = sum(a.size for a in m.state_dict().values())
    assert f32 - f16 == 2 * n


def test_benchmark_stats():
    m = build_model(SMALL)
    one = benchmark_latency(m, warmup=0, iters=1)
    assert len(one.samples) == 1 and one.p50 == one.mean
    st = benchmark_latency(m, warmup=1, iters=5)
    assert min(st.samples) <= st.mean <= max(st.samples)
    assert "hardware = " in st.to_kv()
    with pytest.raises(InputError):
        benchmark_latency(m, iters=0)
    assert len(benchmark_latency(m, input_size=96, warmup=0, iters=2).samples) == 2


def hand_fixture():
    truths = [
        ("a", [GroundTruth(0, (0.0, 0.0, 10.0, 10.0)), GroundTruth(0, (20.0, 20.0, 30.0, 30.0))]),
        ("b", [GroundTruth(0, (0.0, 0.0, 10.0, 10.0))]),
    ]
    preds = [
        ("a", [Detection(0, 0.9, (0.0, 0.0, 10.0, 10.0)), Detection(0, 0.7, (20.0, 20.0, 30.0, 30.0))]),
        # IoU 40/100 = 0.4 with b's truth: a false positive at every threshold
        ("b", [Detection(0, 0.8, (0.0, 0.0, 10.0, 4.0))]),
    ]
    return preds, truths


def test_hand_worked_pr_fixture():
    # ranked: TP(0.9) FP(0.8) TP(0.7); 3 truths
    # precision 1, 1/2, 2/3 at recall 1/3, 1/3, 2/3 -> AP = 1/3*1 + 1/3*2/3 = 5/9
    preds, truths = hand_fixture()
    r = evaluate_detections(preds, truths)
    assert abs(r.map50 - 5 / 9) < 1e-6
    assert abs(r.map50_95 - 5 / 9) < 1e-6
    assert math.isclose(r.precision, 2 / 3) and math.isclose(r.recall, 2 / 3)


def test_perfect_and_empty_predictions():
    truths = [("x", [GroundTruth(0, (1.0, 1.0, 5.0, 5.0)), GroundTruth(1, (6.0, 6.0, 9.0, 9.0))])]
    perfect = [("x", [Detection(t.class_id, 1.0, t.box) for t in truths[0][1]])]
    r = evaluate_detections(perfect, truths)
    assert (r.precision, r.recall, r.map50, r.map50_95) == (1.0, 1.0, 1.0, 1.0)
    r = evaluate_detections([], truths)
    assert (r.precision, r.recall, r.map50, r.map50_95) == (0.0, 0.0, 0.0, 0.0)


def test_duplicate_image_ids_rejected():
    with pytest.raises(InputError):
        evaluate_detections([("a", []), ("a", [])], [])
    with pytest.raises(InputError):
        evaluate_detections([], [("a", []), ("a", [])])


def test_average_precision_edges():
    assert average_precision(np.array([], bool), 3) == 0.0
    assert average_precision(np.array([True]), 0) == 0.0
    assert average_precision(np.array([True, True]), 2) == 1.0
    assert IOU_THRESHOLDS[0] == 0.5 and IOU_THRESHOLDS[-1] == 0.95 and len(IOU_THRESHOLDS) == 10


def random_instance(rng, max_truth=3, max_pred=3):
    truths, preds = [], []
    for img in ("i0", "i1"):
        ts = []
        for _ in range(int(rng.integers(0, max_truth + 1))):
            x, y = rng.integers(0, 30, 2)
            w, h = rng.integers(4, 15, 2)
            ts.append(GroundTruth(int(rng.integers(0, 2)), (float(x), float(y), float(x + w), float(y + h))))
        ds = []
        for _ in range(int(rng.integers(0, max_pred + 1))):
            if ts and rng.random() < 0.7:
                t = ts[int(rng.integers(0, len(ts)))]
                j = rng.integers(-3, 4, 4)
                x1, y1, x2, y2 = (v + d for v, d in zip(t.box, j))
                box = (x1, y1, max(x2, x1 + 1), max(y2, y1 + 1))
                cls = t.class_id if rng.random() < 0.8 else 1 - t.class_id
            else:
                x, y = rng.integers(0, 30, 2)
                box = (float(x), float(y), float(x + rng.integers(3, 12)), float(y + rng.integers(3, 12)))
                cls = int(rng.integers(0, 2))
            # coarse scores so rank ties happen
            ds.append(Detection(cls, float(rng.integers(1, 5)) / 4, tuple(float(v) for v in box)))
        truths.append((img, ts))
        preds.append((img, ds))
    return preds, truths


def compare_with_oracle(preds, truths):
    got = evaluate_detections(preds, truths)
    want = oracle_evaluate(preds, truths)
    assert set(got.per_class) == set(want)
    for c, w in want.items():
        g = got.per_class[c]
        for key in ("ap50", "ap50_95", "precision", "recall"):
            assert abs(g[key] - w[key]) < 1e-9, (c, key, g[key], w[key])


def test_matches_exhaustive_oracle_on_small_instances():
    rng = np.random.default_rng(0)
    checked = 0
    for _ in range(60):
        preds, truths = random_instance(rng, 2, 2)
        if sum(len(v) for _, v in preds) + sum(len(v) for _, v in truths) <= 6:
            compare_with_oracle(preds, truths)
            checked += 1
    assert checked > 30


def test_top_scoring_false_positive_never_raises_ap():
    rng = np.random.default_rng(1)
    for _ in range(50):
        preds, truths = random_instance(rng)
        base = evaluate_detections(preds, truths)
        fp = Detection(0, 1.5, (100.0, 100.0, 110.0, 110.0))
        worse = evaluate_detections([(img, [fp] + ds) for img, ds in preds], truths)
        for c in base.per_class:
            assert worse.per_class[c]["ap50"] <= base.per_class[c]["ap50"] + 1e-12
            assert 0.0 <= base.per_class[c]["ap50_95"] <= 1.0
