import numpy as np
import pytest
from oracles import distinct_values, gradcheck

from stsep.errors import ConfigError, NonFiniteError, UsageError
from stsep.tensorcore import BatchNorm2d, Conv2d, Tensor, backward, no_grad, ops

F64 = np.float64


def t64(a, grad=False):
    return Tensor(np.asarray(a, dtype=F64), requires_grad=grad, dtype=F64)


# forward examples ----------------------------------------------------------

def test_conv2d_scalar():
    out = ops.conv2d(Tensor([[[[1.0]]]]), Tensor([[[[2.0]]]]))
    assert out.data.tolist() == [[[[2.0]]]]


def test_conv2d_ones_overlap_counts():
    out = ops.conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))), padding=1)
    assert out.data[0, 0, 1, 1] == 9
    assert out.data[0, 0, 0, 0] == 4
    assert out.data[0, 0, 0, 1] == 6


def test_conv2d_identity_kernel():
    x = np.random.default_rng(0).standard_normal((2, 1, 5, 5)).astype(np.float32)
    k = np.zeros((1, 1, 3, 3), dtype=np.float32)
    k[0, 0, 1, 1] = 1
    assert np.array_equal(ops.conv2d(Tensor(x), Tensor(k), padding=1).data, x)


def test_conv2d_is_cross_correlation():
    x = np.arange(9, dtype=np.float32).reshape(1, 1, 3, 3)
    k = np.zeros((1, 1, 3, 3), dtype=np.float32)
    k[0, 0, 0, 0] = 1  # picks the top-left neighbour, no flip
    out = ops.conv2d(Tensor(x), Tensor(k), padding=1)
    assert out.data[0, 0, 1, 1] == 0
    assert out.data[0, 0, 2, 2] == 4


def test_conv2d_errors():
    with pytest.raises(ConfigError):
        ops.conv2d(Tensor(np.ones((1, 2, 4, 4))), Tensor(np.ones((1, 3, 3, 3))))
    with pytest.raises(ConfigError):
        ops.conv2d(Tensor(np.ones((1, 1, 4, 4))), Tensor(np.ones((1, 1, 2, 2))))
    with pytest.raises(ConfigError):
        ops.conv2d(Tensor(np.ones((1, 1, 2, 2))), Tensor(np.ones((1, 1, 5, 5))))


def test_conv2d_linearity():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((2, 3, 6, 6)).astype(np.float32)
    w = rng.standard_normal((4, 3, 3, 3)).astype(np.float32)
    a = np.float32(2.5)
    lhs = ops.conv2d(Tensor(a * x), Tensor(w), padding=1, stride=2).data
    rhs = a * ops.conv2d(Tensor(x), Tensor(w), padding=1, stride=2).data
    np.testing.assert_allclose(lhs, rhs, rtol=1e-6, atol=1e-6)


def test_conv2d_multistep_matches_per_step():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((3, 2, 2, 5, 5)).astype(np.float32)
    w = Tensor(rng.standard_normal((4, 2, 3, 3)).astype(np.float32))
    merged = ops.conv2d(Tensor(x), w, padding=1).data
    for t in range(3):
        assert np.array_equal(merged[t], ops.conv2d(Tensor(x[t]), w, padding=1).data)


def _bn(x, gamma=None, beta=None, training=True, eps=1e-5):
    c = x.shape[-3]
    g = Tensor(np.ones(c) if gamma is None else gamma)
    b = Tensor(np.zeros(c) if beta is None else beta)
    return ops.batch_norm(Tensor(x), g, b, np.zeros(c, np.float32), np.ones(c, np.float32), training, 0.1, eps)


def test_batchnorm_zero_variance_gives_zeros():
    x = np.full((4, 2, 3, 3), 7.0)
    assert np.all(_bn(x).data == 0)


def test_batchnorm_gamma_zero_gives_beta():
    x = np.random.default_rng(0).standard_normal((3, 2, 2, 2))
    out = _bn(x, gamma=np.zeros(2), beta=np.array([0.5, -2.0])).data
    assert np.all(out[:, 0] == np.float32(0.5)) and np.all(out[:, 1] == np.float32(-2.0))


def test_batchnorm_two_point_batch():
    out = _bn(np.array([-1.0, 1.0]).reshape(2, 1, 1, 1)).data.ravel()
    expected = 1 / np.sqrt(1 + 1e-5)
    np.testing.assert_allclose(out, [-expected, expected], rtol=1e-6)
    assert abs(out[1] - 0.99999) < 1e-5


def test_batchnorm_eps_must_be_positive():
    with pytest.raises(ConfigError):
        _bn(np.ones((2, 1, 1, 1)), eps=0.0)


def test_batchnorm_running_stats_and_eval():
    bn = BatchNorm2d(1)
    x = np.array([1.0, 3.0]).reshape(2, 1, 1, 1)
    bn(Tensor(x))
    # momentum 0.1, unbiased running variance (var of {1,3} with n-1 is 2)
    np.testing.assert_allclose(bn.running_mean, [0.2])
    np.testing.assert_allclose(bn.running_var, [0.9 + 0.1 * 2.0])
    bn.eval()
    out = bn(Tensor(x)).data.ravel()
    np.testing.assert_allclose(out, (x.ravel() - 0.2) / np.sqrt(1.1 + 1e-5), rtol=1e-6)


def test_batchnorm_time_steps_match_sequential_updates():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((3, 4, 2, 3, 3)).astype(np.float32)
    merged, stepwise = BatchNorm2d(2), BatchNorm2d(2)
    out = merged(Tensor(x)).data
    for t in range(3):
        np.testing.assert_array_equal(out[t], stepwise(Tensor(x[t:t + 1])).data[0])
    np.testing.assert_array_equal(merged.running_mean, stepwise.running_mean)
    np.testing.assert_array_equal(merged.running_var, stepwise.running_var)


def test_maxpool_ramp():
    x = np.arange(16, dtype=np.float32).reshape(1, 1, 4, 4)
    assert ops.max_pool2d(Tensor(x), 3, 2, 1).data[0, 0].tolist() == [[5, 7], [13, 15]]


def test_global_avg_pool():
    x = np.full((2, 3, 4, 4), 1.5, dtype=np.float32)
    assert np.all(ops.global_avg_pool(Tensor(x)).data == 1.5)
    y = np.random.default_rng(0).standard_normal((2, 3, 1, 1)).astype(np.float32)
    assert np.array_equal(ops.global_avg_pool(Tensor(y)).data, y[:, :, 0, 0])


def test_add_zero_is_identity():
    a = np.random.default_rng(0).standard_normal((2, 3)).astype(np.float32)
    assert np.array_equal(ops.add(Tensor(a), Tensor(np.zeros_like(a))).data, a)


def test_channel_mean_and_repeat():
    x = np.arange(8, dtype=np.float32).reshape(1, 4, 1, 2)
    m = ops.channel_mean(Tensor(x), 2).data
    assert m[0, :, 0].tolist() == [[1.0, 2.0], [5.0, 6.0]]
    r = ops.channel_repeat(Tensor(m), 2).data
    assert r[0, :, 0, 0].tolist() == [1.0, 1.0, 5.0, 5.0]


def test_rank_limit_and_nonfinite():
    with pytest.raises(UsageError):
        Tensor(np.zeros((1,) * 6))
    with pytest.raises(NonFiniteError), np.errstate(over="ignore"):
        ops.exp(Tensor([1000.0]))


# backward examples -----------------------------------------------------------

def test_backward_square():
    x = t64(3.0, grad=True)
    backward(ops.mul(x, x))
    assert x.grad == 6.0


def test_backward_conv_sum_gives_input_sum():
    x = t64(np.random.default_rng(0).standard_normal((2, 1, 3, 3)))
    w = t64(np.ones((1, 1, 1, 1)), grad=True)
    backward(ops.sum(ops.conv2d(x, w)))
    np.testing.assert_allclose(w.grad.ravel(), [x.data.sum()])


def test_backward_fan_out_accumulates():
    x = t64(1.0, grad=True)
    backward(ops.add(x, x))
    assert x.grad == 2.0


def test_second_backward_raises():
    x = t64(2.0, grad=True)
    y = ops.mul(x, x)
    backward(y)
    with pytest.raises(UsageError):
        backward(y)


def test_backward_requires_scalar():
    x = t64(np.ones(3), grad=True)
    with pytest.raises(UsageError):
        backward(ops.scale(x, 2.0))


def test_no_grad_records_nothing():
    x = t64(np.ones(3), grad=True)
    with no_grad():
        y = ops.scale(x, 2.0)
    assert not y.requires_grad


def test_diamond_graph_visits_each_node_once():
    x = t64(2.0, grad=True)
    y = ops.mul(x, x)          # 4
    z = ops.add(ops.mul(y, x), y)  # x^3 + x^2
    backward(z)
    assert x.grad == 3 * 4 + 2 * 2


def test_module_float64_cast():
    conv = Conv2d(2, 3, 3).to_dtype(F64)
    assert conv.weight.dtype == F64


# finite-difference checks on every primitive ---------------------------------

def _primitives(rng):
    """(name, build, arrays) for one random trial; shapes stay within 2x3x5x5."""
    n, c, h = int(rng.integers(1, 3)), int(rng.integers(1, 4)), int(rng.integers(3, 6))
    x = rng.standard_normal((n, c, h, h))
    y = rng.standard_normal((n, c, h, h))
    cout = int(rng.integers(1, 4))
    k = int(rng.choice([1, 3]))
    stride = int(rng.integers(1, 3))
    w = rng.standard_normal((cout, c, k, k))
    bias = rng.standard_normal(cout)
    g, b = rng.standard_normal(c), rng.standard_normal(c)
    xs = rng.standard_normal((2, n, c, h, h))
    even = rng.standard_normal((n, 2 * c, 4, 4))
    fin, fout = int(rng.integers(1, 6)), int(rng.integers(1, 5))
    lin_x = rng.standard_normal((n, fin))
    lin_w = rng.standard_normal((fout, fin))
    lin_b = rng.standard_normal(fout)
    labels = rng.integers(0, fout, size=n)
    zc = lambda: np.zeros(c)  # noqa: E731
    oc = lambda: np.ones(c)  # noqa: E731
    return [
        ("add", lambda a, bb: ops.add(a, bb), [x, y]),
        ("add_broadcast", lambda a, bb: ops.add(a, bb), [x, rng.standard_normal((1, c, 1, 1))]),
        ("sub", lambda a, bb: ops.sub(a, bb), [x, y]),
        ("mul", lambda a, bb: ops.mul(a, bb), [x, y]),
        ("scale", lambda a: ops.scale(a, 0.7), [x]),
        ("neg", lambda a: ops.neg(a), [x]),
        ("add_scalar", lambda a: ops.add_scalar(a, 0.3), [x]),
        ("exp", lambda a: ops.exp(a), [x]),
        ("sigmoid", lambda a: ops.sigmoid(a), [x]),
        ("sum_axis", lambda a: ops.sum(a, axis=(0, 2)), [x]),
        ("mean", lambda a: ops.mean(a, axis=1, keepdims=True), [x]),
        ("reshape", lambda a: ops.reshape(a, (-1,)), [x]),
        ("getitem", lambda a: ops.getitem(a, (slice(None), 0)), [x]),
        ("stack", lambda a, bb: ops.stack([a, bb], axis=1), [x, y]),
        ("concat", lambda a, bb: ops.concat([a, bb], axis=0), [x, y]),
        ("conv2d", lambda a, ww, bb: ops.conv2d(a, ww, bb, stride, k // 2), [x, w, bias]),
        ("conv2d_nobias_5d", lambda a, ww: ops.conv2d(a, ww, None, stride, k // 2), [xs, w]),
        ("batch_norm_train", lambda a, gg, bb: ops.batch_norm(a, gg, bb, zc(), oc(), True), [x, g, b]),
        ("batch_norm_train_5d", lambda a, gg, bb: ops.batch_norm(a, gg, bb, zc(), oc(), True), [xs, g, b]),
        ("batch_norm_eval", lambda a, gg, bb: ops.batch_norm(a, gg, bb, 0.1 + zc(), 2 + oc(), False), [x, g, b]),
        ("max_pool2d", lambda a: ops.max_pool2d(a, 3, 2, 1), [distinct_values(x.shape, rng)]),
        ("avg_pool2d", lambda a: ops.avg_pool2d(a, 2), [even]),
        ("upsample_nearest", lambda a: ops.upsample_nearest(a, 2), [x]),
        ("global_avg_pool", lambda a: ops.global_avg_pool(a), [x]),
        ("channel_mean", lambda a: ops.channel_mean(a, 2), [even]),
        ("channel_repeat", lambda a: ops.channel_repeat(a, 3), [x]),
        ("linear", lambda a, ww, bb: ops.linear(a, ww, bb), [lin_x, lin_w, lin_b]),
        ("cross_entropy", lambda a: ops.cross_entropy(a, labels), [rng.standard_normal((n, fout))]),
    ]


PRIMITIVE_NAMES = [name for name, _, _ in _primitives(np.random.default_rng(0))]


@pytest.mark.parametrize("name", PRIMITIVE_NAMES)
def test_primitive_gradcheck(name):
    worst = 0.0
    for trial in range(100):
        rng = np.random.default_rng([trial, 11])
        build, arrays = next((b, a) for n, b, a in _primitives(rng) if n == name)
        worst = max(worst, gradcheck(build, arrays, seed=trial))
    assert worst <= 1e-4, worst
