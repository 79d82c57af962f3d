"""Quick self-checks: block gradient checks and a few properties per module.

Used by the ``gradcheck`` and ``selftest`` subcommands.  Everything here is
cheap (a few seconds total) and seeded.
"""
import io
import math

import numpy as np

from . import autodiff as ad
from . import tensor as T
from .analysis import count_params, evaluate_detections, GroundTruth
from .autodiff import Var, finite_diff_check
from .blocks import CBS, SPPF, EAConv, EADown, Head, eca_kernel_size
from .detector import Detection, ModelConfig, build_model, decode, iou, letterbox_geometry, nms, RawPrediction
from .formats import parse_config, parse_weights, print_config, serialize_weights
from .tensor import ConvSpec
from .toytrain import gen_dataset


def _set_attr(module, dotted, obj):
    *path, leaf = dotted.split(".")
    mod = module
    for part in path:
        mod = mod[int(part)] if isinstance(mod, list) else getattr(mod, part)
    setattr(mod, leaf, obj)


def block_loss_fn(block, weights):
    """Scalar function of {"x": input, <param name>: value} for finite_diff_check.

    The block's parameter slots are rebound on every call, so the same
    function serves the analytic pass (Var leaves) and the numeric passes
    (plain arrays).
    """
    names = [n for n, _ in block.named_parameters()]

    def f(d):
        for n in names:
            v = d[n]
            _set_attr(block, n, v if isinstance(v, Var) else Var(v))
        return ad.total(ad.mul(block(d["x"]), weights))

    return f


def gradcheck_block(block, shape=(1, 4, 6, 6), seed=42, tolerance=1e-4, training=False):
    """Finite-difference check of one block w.r.t. its input and every parameter.

    By default BN runs in inference mode with random running statistics.  In
    training mode a 6x6 map makes SPPF's k9/k13 branches spatially constant,
    BN removes them exactly and their exit-conv weights get a true gradient
    of 0, which central differences can only resolve to ~1e-11.
    """
    rng = np.random.default_rng(seed)
    block = block.astype(np.float64).train(training)
    for name, buf in list(block.named_buffers()):
        if name.endswith("running_mean"):
            block._set_buffer(name, 0.5 * rng.standard_normal(buf.shape))
        elif name.endswith("running_var"):
            block._set_buffer(name, rng.uniform(0.5, 2.0, buf.shape))
    x = rng.standard_normal(shape)
    out_shape = np.shape(ad.value(block(x)))
    point = {"x": x}
    for n, p in block.named_parameters():
        # perturb away from the tidy init so BN/gates are not at special points
        point[n] = p.data + 0.1 * rng.standard_normal(p.data.shape)
    weights = rng.standard_normal(out_shape)
    return finite_diff_check(block_loss_fn(block, weights), point, tolerance=tolerance)


def gradcheck_blocks(seed=42, tolerance=1e-4):
    """(name, GradCheckReport) for every block kind on a 1x4x6x6 input."""
    rng = np.random.default_rng(seed)
    blocks = [
        ("CBS", CBS(4, 4, 3, rng=rng)),
        ("SPPF", SPPF(4, 4, rng=rng)),
        ("EAConv", EAConv(4, 4, rng=rng)),
        ("EADown", EADown(4, 4, rng=rng)),
        ("Head", Head(4, 4, 2, rng=rng)),
    ]
    return [(name, gradcheck_block(b, seed=seed, tolerance=tolerance)) for name, b in blocks]


def format_gradcheck(results):
    lines = [f"{'block':<8}  {'checked':>7}  {'max_rel_error':>13}  result"]
    for name, rep in results:
        lines.append(f"{name:<8}  {rep.checked:>7}  {rep.max_rel_error:>13.3e}  {'pass' if rep.passed else 'FAIL'}")
    return "\n".join(lines) + "\n"


# -- property suite ----------------------------------------------------------------


def _tensor_props(rng):
    x = np.ones((1, 1, 3, 3), np.float32)
    got = T.conv2d(x, np.ones((1, 1, 3, 3), np.float32), spec=ConvSpec(3, 1, 1))[0, 0]
    yield "tensor.conv_box_filter", np.array_equal(got, [[4, 6, 4], [6, 9, 6], [4, 6, 4]])
    x = rng.standard_normal((2, 3, 11, 9)).astype(np.float32)
    p5 = ConvSpec(5, 1, 2)
    twice = T.pool2d(T.pool2d(x, "max", p5), "max", p5)
    yield "tensor.pool_composition", np.array_equal(twice, T.pool2d(x, "max", ConvSpec(9, 1, 4)))
    got = T.conv1d_channels(np.arange(1, 6, dtype=np.float32).reshape(1, 5, 1, 1), np.ones(3, np.float32))
    yield "tensor.conv1d_channels", np.array_equal(got.ravel(), [3, 6, 9, 12, 9])


def _autodiff_props(rng):
    x = Var(np.zeros((2, 3)), requires_grad=True)
    ad.backward(ad.total(ad.silu(x)))
    yield "autodiff.silu_grad_at_zero", np.allclose(x.grad, 0.5)
    rep = finite_diff_check(
        lambda d: ad.total(ad.conv2d(d["x"], d["w"], spec=ConvSpec(3, 1, 1))),
        {"x": rng.standard_normal((1, 2, 4, 4)), "w": rng.standard_normal((3, 2, 3, 3))},
    )
    yield "autodiff.conv2d_fd", rep.passed


def _blocks_props(rng):
    yield "blocks.eca_kernel_256", eca_kernel_size(256) == 5
    cbs = CBS(16, 32, 3, rng=rng)
    yield "blocks.cbs_param_count", count_params(cbs) == 4672
    cbs.bn.running_mean = rng.standard_normal(32).astype(np.float32)
    cbs.bn.running_var = rng.uniform(0.5, 2, 32).astype(np.float32)
    cbs.eval()
    x = rng.standard_normal((1, 16, 8, 8)).astype(np.float32)
    yield "blocks.cbs_fold", np.allclose(cbs(x), cbs.forward_folded(x), atol=1e-4)
    s = SPPF(64, 64, 32)
    yield "blocks.sppf_concat_width", s.concat_width == 96 and s.profile((1, 64, 20, 20))[0] == (1, 64, 20, 20)


def _detector_props(rng):
    a = Detection(0, 0.9, (0.0, 0.0, 10.0, 10.0))
    b = Detection(0, 0.8, (1.0, 1.0, 11.0, 11.0))
    yield "detector.iou_example", math.isclose(iou(a.box, b.box), 81 / 119)
    yield "detector.nms_example", nms([b, a], 0.5) == [a]
    m = np.full((1, 5, 8, 8), -50.0, np.float32)
    m[0, :4, 0, 0] = 1.0
    m[0, 4, 0, 0] = 5.0
    raw = RawPrediction([m, np.full((1, 5, 4, 4), -50.0, np.float32), np.full((1, 5, 2, 2), -50.0, np.float32)], (8, 16, 32))
    dets = decode(raw, 0.25)
    yield "detector.decode_example", len(dets) == 1 and dets[0].box == (0.0, 0.0, 12.0, 12.0)
    g, _ = letterbox_geometry(720, 1280, 640)
    yield "detector.letterbox_1280x720", g.scale == 0.5 and g.pad_y == 140 and g.pad_x == 0
    model = build_model(ModelConfig(input_size=64, width_mult=0.25), seed=1)
    maps = model(np.zeros((1, 3, 64, 64), np.float32)).maps
    yield "detector.small_forward", [mm.shape[2] for mm in maps] == [8, 4, 2] and all(np.isfinite(mm).all() for mm in maps)


def _analysis_props(rng):
    t = [GroundTruth(0, (0.0, 0.0, 10.0, 10.0)), GroundTruth(1, (20.0, 20.0, 30.0, 30.0))]
    p = [Detection(g.class_id, 1.0, g.box) for g in t]
    r = evaluate_detections([("a", p)], [("a", t)])
    yield "analysis.perfect_predictions", (r.precision, r.recall, r.map50, r.map50_95) == (1.0, 1.0, 1.0, 1.0)
    r = evaluate_detections([("a", [])], [("a", t)])
    yield "analysis.no_predictions", (r.precision, r.recall, r.map50) == (0.0, 0.0, 0.0)


def _formats_props(rng):
    yield "formats.empty_file", len(serialize_weights({})) == 12
    yield "formats.single_tensor", len(serialize_weights({"w": np.ones(1, np.float32)})) == 25
    tensors = {"a": rng.standard_normal((3, 4)).astype(np.float32), "b.c": rng.standard_normal(5).astype(np.float32)}
    back = parse_weights(serialize_weights(tensors))
    yield "formats.fp32_round_trip", all(back[k].tobytes() == v.tobytes() for k, v in tensors.items())
    cfg = parse_config("input_size = 320\nwidth_mult = 0.5\n")
    yield "formats.config_fixed_point", parse_config(print_config(cfg)) == cfg


def _toytrain_props(rng):
    a, b = gen_dataset(3, 4), gen_dataset(3, 4)
    same = all(np.array_equal(x.image, y.image) and x.boxes == y.boxes for x, y in zip(a, b))
    yield "toytrain.deterministic_dataset", same and gen_dataset(3, 0) == []


SUITES = [_tensor_props, _autodiff_props, _blocks_props, _detector_props, _analysis_props, _formats_props, _toytrain_props]


def run_selftest(seed=42, out=None):
    """Run every property; returns the list of failing property names."""
    out = out or io.StringIO()
    rng = np.random.default_rng(seed)
    failed = []
    for suite in SUITES:
        for name, ok in suite(rng):
            ok = bool(ok)
            out.write(f"{'ok  ' if ok else 'FAIL'} {name}\n")
            if not ok:
                failed.append(name)
    for name, rep in gradcheck_blocks(seed):
        label = f"autodiff.gradcheck_{name}"
        out.write(f"{'ok  ' if rep.passed else 'FAIL'} {label} ({rep.max_rel_error:.2e})\n")
        if not rep.passed:
            failed.append(label)
    return failed
