import math

import numpy as np
import pytest

from stsep.blocks import (
    ResidualBlock,
    STSepBlock,
    STSepStem,
    Stem,
    TemporalBranch,
    TemporalCache,
    residual_block_forward,
    stsep_block_forward,
    temporal_diff,
    temporal_diff_sequence,
)
from stsep.errors import UsageError
from stsep.spiking import NeuronParams
from stsep.tensorcore import Tensor

P = NeuronParams()


def rng_clip(shape, seed=0, scale=2.0):
    return Tensor((np.random.default_rng(seed).standard_normal(shape) * scale).astype(np.float32))


def constant_clip(T, frame):
    return Tensor(np.broadcast_to(frame, (T,) + frame.shape).copy())


def test_temporal_diff_examples():
    cache = TemporalCache()
    d1, cache = temporal_diff(Tensor([1.0, 2.0]), cache)
    d2, cache = temporal_diff(Tensor([4.0, 1.0]), cache)
    assert d1.data.tolist() == [1.0, 2.0]
    assert d2.data.tolist() == [3.0, -1.0]
    d3, _ = temporal_diff(Tensor([4.0, 1.0]), cache)
    assert d3.data.tolist() == [0.0, 0.0]


def test_temporal_diff_constant_clip():
    frame = np.random.default_rng(0).standard_normal((2, 3, 4, 4)).astype(np.float32)
    delta, _ = temporal_diff_sequence(constant_clip(5, frame), TemporalCache())
    assert np.array_equal(delta.data[0], frame)
    assert np.all(delta.data[1:] == 0)


def test_temporal_diff_errors():
    _, cache = temporal_diff(Tensor(np.zeros(3)), TemporalCache())
    with pytest.raises(UsageError):
        temporal_diff(Tensor(np.zeros(4)), cache)
    cache = TemporalCache(limit=2)
    for _ in range(2):
        _, cache = temporal_diff(Tensor(np.zeros(3)), cache)
    with pytest.raises(UsageError):
        temporal_diff(Tensor(np.zeros(3)), cache)


def test_temporal_diff_sequence_matches_steps():
    x = rng_clip((6, 2, 3, 4, 4), 1)
    whole, _ = temporal_diff_sequence(x, TemporalCache())
    cache = TemporalCache()
    for t in range(6):
        d, cache = temporal_diff(Tensor(x.data[t]), cache)
        assert np.array_equal(whole.data[t], d.data)
    a, c = temporal_diff_sequence(Tensor(x.data[:2]), TemporalCache())
    b, _ = temporal_diff_sequence(Tensor(x.data[2:]), c)
    assert np.array_equal(np.concatenate([a.data, b.data]), whole.data)


@pytest.mark.parametrize("cin,cout,stride,use_conv", [(8, 8, 1, True), (8, 16, 2, True), (8, 8, 1, False), (8, 16, 2, False)])
def test_temporal_branch_zero_in_zero_out(cin, cout, stride, use_conv):
    br = TemporalBranch(cin, cout, 4, 2, stride, P, np.random.default_rng(0), use_conv=use_conv)
    out = br(Tensor(np.zeros((2, 2, cin, 8, 8), np.float32)))
    assert out.shape == (2, 2, cout, 8 // stride, 8 // stride)
    assert np.all(out.data == 0)


def test_temporal_branch_small_maps():
    # a 2x2 map entering a stride-2 block pools straight to 1x1
    br = TemporalBranch(8, 16, 4, 2, 2, P, np.random.default_rng(0))
    assert br(rng_clip((2, 1, 8, 2, 2))).shape == (2, 1, 16, 1, 1)
    br = TemporalBranch(8, 8, 4, 2, 1, P, np.random.default_rng(0))
    assert br(rng_clip((2, 1, 8, 1, 1))).shape == (2, 1, 8, 1, 1)


@pytest.mark.parametrize("cin,cout,stride", [(8, 8, 1), (8, 16, 2)])
def test_stsep_block_is_drop_in(cin, cout, stride):
    x = rng_clip((3, 2, cin, 8, 8))
    res = ResidualBlock(cin, cout, stride, P, True, np.random.default_rng(0))
    sep = STSepBlock(cin, cout, stride, P, np.random.default_rng(0))
    assert res(x)[0].shape == sep(x, TemporalCache())[0].shape


def test_stem_variants_share_shape():
    x = rng_clip((2, 2, 3, 16, 16))
    a, _ = Stem(3, 8, P, True, np.random.default_rng(0))(x)
    b, _ = STSepStem(3, 8, P, np.random.default_rng(0))(x)
    assert a.shape == b.shape == (2, 2, 8, 8, 8)


def _copy_spatial(src: STSepBlock, dst: ResidualBlock):
    for (_, p), (_, q) in zip(src.body.named_parameters(), dst.body.named_parameters()):
        q.data = p.data.copy()
    for (_, p), (_, q) in zip(src.shortcut.named_parameters(), dst.shortcut.named_parameters()):
        q.data = p.data.copy()


def test_alpha_zero_with_zero_temporal_branch_is_plain_block():
    sep = STSepBlock(8, 16, 2, P, np.random.default_rng(0), alpha=0.0)
    for p in sep.temporal.parameters():
        p.data[...] = 0
    plain = ResidualBlock(8, 16, 2, P, False, np.random.default_rng(1))
    _copy_spatial(sep, plain)
    x = rng_clip((4, 2, 8, 8, 8))
    assert np.array_equal(sep(x, TemporalCache())[0].data, plain(x)[0].data)


def test_static_clip_temporal_term_vanishes():
    sep = STSepBlock(8, 8, 1, P, np.random.default_rng(0))
    frame = np.random.default_rng(2).standard_normal((2, 8, 8, 8)).astype(np.float32) * 2
    x = constant_clip(5, frame)
    base, fs, ft, _ = sep.branches(x, TemporalCache())
    assert np.all(ft.data[1:] == 0)
    out, _ = sep(x, TemporalCache())
    spatial_only = base.data + np.float32(0.75) * fs.data
    assert np.array_equal(out.data[1:], spatial_only[1:])


def test_alpha_one_ignores_spatial_branch():
    x = rng_clip((3, 2, 8, 8, 8), 3)
    sep = STSepBlock(8, 8, 1, P, np.random.default_rng(0), alpha=1.0)
    first, _ = sep(x, TemporalCache())
    for p in sep.body.parameters():
        p.data = np.random.default_rng(9).standard_normal(p.shape).astype(np.float32)
    second, _ = sep(x, TemporalCache())
    assert np.array_equal(first.data, second.data)
    base, _, ft, _ = sep.branches(x, TemporalCache())
    assert np.array_equal(first.data, (base.data + ft.data))


def test_fusion_is_affine_in_alpha():
    x = rng_clip((3, 2, 8, 8, 8), 4)
    sep = STSepBlock(8, 16, 2, P, np.random.default_rng(0))
    outs = {a: sep(x, TemporalCache(), alpha=a)[0].data.astype(np.float64) for a in (0.0, 0.5, 1.0)}
    np.testing.assert_allclose(outs[0.5], 0.5 * outs[0.0] + 0.5 * outs[1.0], rtol=1e-6, atol=1e-6)


def test_cache_discipline():
    sep = STSepBlock(8, 8, 1, P, np.random.default_rng(0))
    a, b = rng_clip((4, 1, 8, 8, 8), 5), rng_clip((4, 1, 8, 8, 8), 6)
    alone, _ = sep(b, sep.initial_state())
    sep(a, sep.initial_state())
    after, _ = sep(b, sep.initial_state())
    assert np.array_equal(alone.data, after.data)
    # step-wise with an explicit cache gives the same result
    cache = sep.initial_state(limit=4)
    steps = []
    for t in range(4):
        y, cache = stsep_block_forward(Tensor(b.data[t]), sep, cache)
        steps.append(y.data)
    assert np.array_equal(np.stack(steps), alone.data)
    with pytest.raises(UsageError):
        stsep_block_forward(Tensor(b.data[0]), sep, cache)


def test_residual_block_forward_state_contract():
    stateful = ResidualBlock(4, 4, 1, P, True, np.random.default_rng(0))
    stateless = ResidualBlock(4, 4, 1, P, False, np.random.default_rng(0))
    x = rng_clip((2, 4, 4, 4))
    with pytest.raises(UsageError):
        residual_block_forward(x, stateful, None)
    with pytest.raises(UsageError):
        residual_block_forward(x, stateless, stateful.initial_state())
    out, state = residual_block_forward(x, stateful, stateful.initial_state())
    assert out.shape == x.shape and state[0].v_prev is not None


def test_residual_block_multistep_matches_stepwise():
    blk = ResidualBlock(4, 8, 2, P, True, np.random.default_rng(0))
    x = rng_clip((5, 2, 4, 8, 8), 7)
    whole, _ = blk(x)
    state = blk.initial_state()
    for t in range(5):
        y, state = residual_block_forward(Tensor(x.data[t]), blk, state)
        assert np.array_equal(y.data, whole.data[t])


def test_residual_block_zero_weights_gives_shortcut():
    blk = ResidualBlock(4, 8, 2, P, True, np.random.default_rng(0))
    for cb in (blk.body.cb1, blk.body.cb2):
        cb.conv.weight.data[...] = 0
        cb.bn.weight.data[...] = 0
    x = rng_clip((3, 2, 4, 8, 8))
    out, _ = blk(x)
    assert np.array_equal(out.data, blk.shortcut(x).data)


def test_identity_block_zero_input():
    blk = ResidualBlock(1, 1, 1, P, True, np.random.default_rng(0))
    out, _ = blk(Tensor(np.zeros((3, 1, 1, 4, 4), np.float32)))
    assert np.all(out.data == 0)


def test_residual_block_scalar_oracle():
    """1-channel 1x1 block in eval mode, against a hand-written scalar recurrence."""
    blk = ResidualBlock(1, 1, 1, P, True, np.random.default_rng(0)).eval()
    w1, w2 = 2.5, 1.5
    blk.body.cb1.conv.weight.data[...] = 0
    blk.body.cb1.conv.weight.data[0, 0, 1, 1] = w1
    blk.body.cb2.conv.weight.data[...] = 0
    blk.body.cb2.conv.weight.data[0, 0, 1, 1] = w2
    bn_params = []
    for cb, (g, b, mu, var) in zip((blk.body.cb1, blk.body.cb2), ((1.2, 0.1, 0.3, 0.8), (0.9, 0.4, -0.2, 1.5))):
        cb.bn.weight.data[...] = g
        cb.bn.bias.data[...] = b
        cb.bn.running_mean[...] = mu
        cb.bn.running_var[...] = var
        bn_params.append((g, b, mu, var))
    xs = [1.1, 0.4, 2.0, -0.5]
    out, _ = blk(Tensor(np.array(xs, np.float32).reshape(4, 1, 1, 1, 1)))

    def bn(v, g, b, mu, var):
        return g * (v - mu) / math.sqrt(var + 1e-5) + b

    state = [(0.0, 0.0), (0.0, 0.0)]
    expected = []
    for x in xs:
        h = x
        for i, w in enumerate((w1, w2)):
            cur = bn(w * h, *bn_params[i])
            v_prev, s_prev = state[i]
            v = 0.5 * v_prev * (1 - s_prev) + cur / 2
            s = 1.0 if v >= 1.0 else 0.0
            state[i] = (v, s)
            h = s
        expected.append(x + h)
    np.testing.assert_allclose(out.data.ravel(), expected, rtol=1e-6)


def test_block_flops_small_cases():
    blk = ResidualBlock(2, 2, 1, P, True, np.random.default_rng(0))
    # two 3x3 convs (2*2*9 per pixel), two bn, one add, at 4x4
    shape, f = blk.flops((2, 4, 4))
    assert shape == (2, 4, 4)
    assert f == 2 * (2 * 16 * 2 * 9) + 2 * 32 + 32
