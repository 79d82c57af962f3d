import numpy as np
import pytest

from efayolo import tensor as T
from efayolo.analysis import count_params
from efayolo.blocks import (
    BN_EPS,
    CBS,
    SPPF,
    ChannelAttention,
    EAConv,
    EADown,
    Head,
    SpatialAttention,
    eca_kernel_size,
)
from efayolo.errors import ConfigError, GeometryError
from efayolo.selftest import gradcheck_block
from efayolo.tensor import ConvSpec

from oracles import eca_nearest_odd


def rng_(seed=0):
    return np.random.default_rng(seed)


def identity_bn(bn):
    # running_var = 1 - eps makes inference BN an exact identity
    bn.running_var = np.full_like(bn.running_var, 1 - BN_EPS)


def test_cbs_identity_is_silu():
    cbs = CBS(3, 3, 1, rng=rng_()).eval()
    cbs.conv.weight.data = np.eye(3, dtype=np.float32).reshape(3, 3, 1, 1)
    identity_bn(cbs.bn)
    x = rng_(1).standard_normal((2, 3, 4, 4)).astype(np.float32)
    np.testing.assert_allclose(cbs(x), T.silu(x), atol=1e-6)


def test_cbs_zero_weight_gives_zero():
    cbs = CBS(3, 4, 3, rng=rng_()).eval()
    cbs.conv.weight.data[:] = 0
    assert not np.any(cbs(rng_(1).standard_normal((1, 3, 5, 5)).astype(np.float32)))


def test_cbs_matches_composed_ops_and_fold():
    r = rng_(2)
    cbs = CBS(4, 6, 3, s=2, rng=r).eval()
    cbs.bn.gamma.data = r.uniform(0.5, 1.5, 6).astype(np.float32)
    cbs.bn.beta.data = r.standard_normal(6).astype(np.float32)
    cbs.bn.running_mean = r.standard_normal(6).astype(np.float32)
    cbs.bn.running_var = r.uniform(0.5, 2, 6).astype(np.float32)
    x = r.standard_normal((2, 4, 9, 9)).astype(np.float32)
    bn = cbs.bn
    composed = T.silu(
        T.batchnorm_inference(
            T.conv2d(x, cbs.conv.weight.data, spec=ConvSpec(3, 2, 1)),
            bn.gamma.data, bn.beta.data, bn.running_mean, bn.running_var, BN_EPS,
        )
    )
    np.testing.assert_allclose(cbs(x), composed, atol=1e-5)
    np.testing.assert_allclose(cbs.forward_folded(x), composed, atol=1e-4)


def test_cbs_param_count():
    assert count_params(CBS(16, 32, 3, rng=rng_())) == 4672


def test_sppf_shapes_and_width():
    s = SPPF(64, 64, 32, rng=rng_())
    assert s.concat_width == 96
    out = s.eval()(rng_(1).standard_normal((1, 64, 20, 20)).astype(np.float32))
    assert out.shape == (1, 64, 20, 20)
    assert SPPF(64, 64, 32, include_identity_branch=True).concat_width == 128


def test_sppf_branches_emulate_large_pools():
    s = SPPF(4, 4, rng=rng_()).eval()
    x = rng_(3).standard_normal((2, 4, 11, 13)).astype(np.float32)
    y0, y1, y2, y3 = s.branches(x)
    assert np.array_equal(y1, T.pool2d(y0, "max", ConvSpec(5, 1, 2)))
    assert np.array_equal(y2, T.pool2d(y0, "max", ConvSpec(9, 1, 4)))
    assert np.array_equal(y3, T.pool2d(y0, "max", ConvSpec(13, 1, 6)))


def test_sppf_constant_input():
    s = SPPF(6, 5, rng=rng_()).eval()
    x = np.full((1, 6, 7, 7), 0.3, np.float32)
    y0, y1, y2, y3 = s.branches(x)
    assert np.array_equal(y1, y0) and np.array_equal(y2, y0) and np.array_equal(y3, y0)
    out = s(x)
    assert np.ptp(out, axis=(2, 3)).max() < 1e-6


def test_sppf_averaging_fixture_reproduces_constant():
    # entry conv averages the input channels, exit conv averages the concat
    s = SPPF(8, 8, 4)
    s.cv1.act = s.cv2.act = None
    s.cv1.conv.weight.data = np.full((4, 8, 1, 1), 1 / 8, np.float32)
    s.cv2.conv.weight.data = np.full((8, 12, 1, 1), 1 / 12, np.float32)
    identity_bn(s.cv1.bn)
    identity_bn(s.cv2.bn)
    out = s.eval()(np.full((1, 8, 6, 6), 2.5, np.float32))
    np.testing.assert_allclose(out, 2.5, atol=1e-6)


def test_eca_kernel_rule():
    assert eca_kernel_size(256) == 5
    for c in range(8, 2049):
        assert eca_kernel_size(c) == eca_nearest_odd(c), c
    with pytest.raises(ConfigError):
        ChannelAttention(16, k=4)


def test_channel_attention_closed_forms():
    ca = ChannelAttention(6, k=3, rng=rng_())
    x = rng_(1).standard_normal((2, 6, 4, 4)).astype(np.float32)
    ca.weight.data[:] = 0
    assert np.all(ca(x) == 0.5) and ca(x).shape == (2, 6, 1, 1)
    ca.weight.data = np.array([0, 1, 0], np.float32)
    v = np.float32(0.7)
    np.testing.assert_allclose(ca(np.full((1, 6, 3, 3), v)), T.sigmoid(v), atol=1e-7)


def test_spatial_attention():
    sa = SpatialAttention(rng=rng_())
    x = rng_(4).standard_normal((1, 2, 3, 3)).astype(np.float32)
    got = sa(x)
    desc = T.concat_channels([x.mean(axis=1, keepdims=True), x.max(axis=1, keepdims=True)])
    expected = T.sigmoid(T.conv2d(desc, sa.conv.weight.data, sa.conv.bias.data, ConvSpec(7, 1, 3, has_bias=True)))
    np.testing.assert_allclose(got, expected, atol=1e-6)
    assert sa(rng_(5).standard_normal((3, 9, 5, 4)).astype(np.float32)).shape == (3, 1, 5, 4)
    sa.conv.weight.data[:] = 0
    sa.conv.bias.data[:] = 0
    assert np.all(sa(x) == 0.5)


def test_gates_in_open_interval_and_shrink():
    r = rng_(6)
    for _ in range(20):
        c = int(r.integers(2, 12))
        x = r.standard_normal((2, c, 5, 6)) * 3
        ca, sa = ChannelAttention(c, rng=r), SpatialAttention(rng=r)
        for g in (ca(x), sa(x)):
            assert np.all(g > 0) and np.all(g < 1)
            assert np.all(np.abs(T.scale(x, g)) <= np.abs(x))


def test_eaconv_shape_and_stride():
    b = EAConv(16, 32, rng=rng_()).eval()
    assert b(np.zeros((1, 16, 8, 8), np.float32)).shape == (1, 32, 8, 8)
    b2 = EAConv(8, 8, s=2, rng=rng_()).eval()
    assert b2(np.zeros((2, 8, 8, 6), np.float32)).shape == (2, 8, 4, 3)
    assert b.dw.conv.weight.data.shape == (16, 1, 3, 3)


def test_eaconv_gating_identity():
    b = EAConv(4, 6, rng=rng_()).eval()
    x = rng_(7).standard_normal((1, 4, 6, 6)).astype(np.float32)
    stack = b.pw(b.dw(x))
    b.ca.weight.data[:] = 0
    b.sa.conv.weight.data[:] = 0
    b.sa.conv.bias.data[:] = 50.0  # spatial gate saturates to exactly 1
    np.testing.assert_allclose(b(x), 0.5 * stack, atol=1e-7)
    b.sa.conv.bias.data[:] = 0.0
    np.testing.assert_allclose(b(x), 0.25 * stack, atol=1e-7)


def test_separable_equals_rank1_dense_kernel():
    r = rng_(8)
    b = EAConv(5, 7, rng=r).eval()
    b.dw.act = b.pw.act = None
    identity_bn(b.dw.bn)
    identity_bn(b.pw.bn)
    dw = b.dw.conv.weight.data[:, 0]  # (5, 3, 3)
    pw = b.pw.conv.weight.data[:, :, 0, 0]  # (7, 5)
    dense = pw[:, :, None, None] * dw[None]
    x = r.standard_normal((2, 5, 9, 9)).astype(np.float32)
    np.testing.assert_allclose(b.pw(b.dw(x)), T.conv2d(x, dense, spec=ConvSpec(3, 1, 1)), atol=1e-5)


def test_eaconv_param_formula():
    for c_in, c_out in [(16, 32), (8, 8), (48, 80)]:
        kc = eca_kernel_size(c_out)
        expected = c_in * 9 + c_in * c_out + 2 * c_in + 2 * c_out + kc + (2 * 49 + 1)
        assert count_params(EAConv(c_in, c_out)) == expected


def test_eadown():
    b = EADown(8, 16, rng=rng_()).eval()
    assert b(np.zeros((1, 8, 64, 64), np.float32)).shape == (1, 16, 32, 32)
    mx, av = b.pooled(np.full((1, 8, 4, 4), 1.25, np.float32))
    assert np.all(mx == 1.25) and np.all(av == 1.25)
    r = rng_(9)
    for _ in range(100):
        x = r.standard_normal((1, 3, 6, 8)).astype(np.float32)
        mx, av = b.pooled(x)
        assert np.all(mx >= av)
    with pytest.raises(GeometryError):
        b(np.zeros((1, 8, 5, 6), np.float32))
    with pytest.raises(GeometryError):
        b.profile((1, 8, 6, 7))


def test_profiles_match_forward_shapes():
    r = rng_(10)
    for _ in range(10):
        c_in, c_out = 2 * int(r.integers(1, 6)), 2 * int(r.integers(1, 6))
        h, w = 2 * int(r.integers(2, 6)), 2 * int(r.integers(2, 6))
        x = r.standard_normal((1, c_in, h, w)).astype(np.float32)
        for blk in (
            CBS(c_in, c_out, 3, s=int(r.integers(1, 3))),
            SPPF(c_in, c_out),
            EAConv(c_in, c_out, s=int(r.integers(1, 3))),
            EADown(c_in, c_out),
            Head(c_in, c_out, 3),
        ):
            shape, flops = blk.profile(x.shape)
            assert blk.eval()(x).shape == shape and flops > 0


def test_state_dict_round_trip_and_astype():
    a, b = EAConv(4, 6, rng=rng_(1)), EAConv(4, 6, rng=rng_(2))
    a.pw.bn.running_mean = np.arange(6, dtype=np.float32)
    b.load_state_dict(a.state_dict())
    x = rng_(3).standard_normal((1, 4, 6, 6)).astype(np.float32)
    assert np.array_equal(a.eval()(x), b.eval()(x))
    d = a.astype(np.float64)
    assert all(p.data.dtype == np.float64 for p in d.parameters())
    assert a.pw.conv.weight.data.dtype == np.float32
    with pytest.raises(ConfigError):
        b.load_state_dict({"nope": np.zeros(1)})


@pytest.mark.parametrize(
    "name,factory",
    [
        ("CBS", lambda r: CBS(4, 4, 3, rng=r)),
        ("EAConv", lambda r: EAConv(4, 4, rng=r)),
        ("EADown", lambda r: EADown(4, 4, rng=r)),
        ("Head", lambda r: Head(4, 4, 2, rng=r)),
    ],
)
def test_training_mode_gradients(name, factory):
    rep = gradcheck_block(factory(rng_(11)), seed=11, training=True)
    assert rep.passed, (name, rep.worst)


def test_sppf_training_mode_on_larger_map():
    # at 6x6 the k9/k13 branches are spatially constant (see gradcheck_block); 16x16 is not
    rep = gradcheck_block(SPPF(2, 2, rng=rng_(12)), shape=(1, 2, 16, 16), seed=12, training=True)
    assert rep.passed, rep.worst
