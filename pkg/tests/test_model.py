import numpy as np
import pytest
from oracles import MaxPoolWinners, gradcheck

from stsep.errors import ConfigError
from stsep.model import BackboneConfig, Model, count_flops, count_params
from stsep.spiking import NeuronParams, make_policy
from stsep.tensorcore import Conv2d, Linear, Tensor, backward, ops
from stsep.tensorcore.nn import Parameter


def small(policy=None, T=4, **kw):
    kw.setdefault("num_classes", 3)
    return Model(BackboneConfig(T=T, resolution=32, width_multiplier=0.125, policy=policy or make_policy("vanilla"), **kw))


def clip(T=4, N=2, res=32, seed=0):
    return Tensor(np.random.default_rng(seed).standard_normal((T, N, 3, res, res)).astype(np.float32))


POLICIES = [make_policy("ns", k) for k in range(6)] + [make_policy("rns", k) for k in range(1, 6)] + [
    make_policy("vanilla", 0, (1, 2, 5)), make_policy("ns", 5, (1, 2, 5)), make_policy("vanilla", 0, (1, 2, 3, 4, 5))]


@pytest.mark.parametrize("policy", POLICIES, ids=lambda p: p.name)
def test_logits_shape_for_every_policy(policy):
    logits, avg = small(policy).forward_clip(clip())
    assert logits.shape == (4, 2, 3) and avg.shape == (2, 3)


def test_stage_sizes_for_128_input():
    m = Model(BackboneConfig(T=1, resolution=128, width_multiplier=0.125, num_classes=2))
    cap = {}
    m.run(clip(1, 1, 128), capture=cap)
    assert [cap[s].shape[-1] for s in range(1, 6)] == [64, 32, 16, 8, 4]


def test_config_validation():
    with pytest.raises(ConfigError):
        BackboneConfig(resolution=100)
    with pytest.raises(ConfigError):
        BackboneConfig(r=3, policy=make_policy("vanilla", 0, (2,)))
    with pytest.raises(ConfigError):
        small().forward_clip(clip(T=3))
    assert BackboneConfig(width_multiplier=1 / 16).stage_widths() == (8, 8, 8, 16, 32)


def test_ns5_is_permutation_invariant():
    m = small(make_policy("ns", 5), T=6).eval()
    x = clip(6, seed=1)
    perm = np.random.default_rng(0).permutation(6)
    a_steps, a = m.forward_clip(x)
    b_steps, b = m.forward_clip(Tensor(x.data[perm]))
    np.testing.assert_allclose(b_steps.data, a_steps.data[perm], rtol=1e-6, atol=1e-6)
    np.testing.assert_allclose(a.data, b.data, rtol=1e-6, atol=1e-6)


@pytest.mark.parametrize("policy", [make_policy("vanilla"), make_policy("ns", 5, (1, 2, 5)), make_policy("rns", 4)],
                         ids=lambda p: p.name)
def test_temporal_models_see_order(policy):
    m = small(policy, T=6).eval()
    x = clip(6, seed=2)
    _, a = m.forward_clip(x)
    _, b = m.forward_clip(Tensor(x.data[::-1].copy()))
    assert not np.allclose(a.data, b.data, rtol=1e-6, atol=1e-6)


def test_single_step_average_is_the_step():
    m = small(T=1)
    logits, avg = m.forward_clip(clip(1))
    assert np.array_equal(logits.data[0], avg.data)


@pytest.mark.parametrize("policy", [make_policy("vanilla"), make_policy("vanilla", 0, (1, 2, 3, 4, 5))],
                         ids=lambda p: p.name)
def test_multistep_equals_stepwise(policy):
    m = small(policy).eval()
    x = clip(4, seed=3)
    a, _ = m.forward_clip(x)
    b, _ = m.forward_stepwise(x)
    assert np.array_equal(a.data, b.data)


def test_state_reset_between_clips():
    m = small().eval()
    x, y = clip(seed=4), clip(seed=5)
    first = m.forward_clip(y)[1].data
    m.forward_clip(x)
    assert np.array_equal(m.forward_clip(y)[1].data, first)


def test_tau_one_stateful_equals_ns5():
    cfg = dict(neuron=NeuronParams(tau=1.0))
    a, b = small(make_policy("vanilla"), **cfg), small(make_policy("ns", 5), **cfg)
    for seed in range(5):
        x = clip(seed=seed)
        assert np.array_equal(a.forward_clip(x)[0].data, b.forward_clip(x)[0].data)


def test_extract_features_order_swap():
    m = small(make_policy("vanilla", 0, (5,))).eval()
    x = clip(seed=6)
    feats = m.extract_features(x).data
    cap = {}
    m.run(x, capture=cap)
    swapped = cap[5].data.astype(np.float64).mean(axis=0).mean(axis=(-2, -1))
    np.testing.assert_allclose(feats, swapped, rtol=1e-6, atol=1e-6)
    assert feats.shape == (2, m.feature_dim)


def test_extract_features_single_step():
    m = small(T=1).eval()
    x = clip(1)
    _, pooled, _ = m.run(x)
    assert np.array_equal(m.extract_features(x).data, pooled.data[0])


def test_determinism():
    x = clip(seed=7)
    assert np.array_equal(small().forward_clip(x)[0].data, small().forward_clip(x)[0].data)


def test_gradient_reaches_every_frame():
    m = small()
    x = Tensor(clip(seed=8).data, requires_grad=True)
    _, avg = m.forward_clip(x)
    backward(ops.cross_entropy(avg, [0, 1]))
    per_frame = np.abs(x.grad).reshape(4, -1).sum(axis=1)
    assert np.all(per_frame > 0)


def test_count_params_fc():
    assert count_params(Linear(512, 174)) == 89262


def test_count_flops_one_by_one_conv():
    _, f = Conv2d(1, 1, 1).flops((1, 1, 1))
    assert f == 1


def test_full_scale_counts():
    vanilla = Model(BackboneConfig())
    assert abs(count_params(vanilla) / 11.3e6 - 1) <= 0.01
    assert abs(count_flops(vanilla, 16, 128) / 9.48e9 - 1) <= 0.02
    sep = Model(BackboneConfig(policy=make_policy("vanilla", 0, (1, 2, 5))))
    assert abs(count_params(sep) / 11.5e6 - 1) <= 0.01
    assert abs(count_flops(sep, 16, 128) / 9.60e9 - 1) <= 0.02


def test_ablation_counts_move_the_right_way():
    base = BackboneConfig(policy=make_policy("vanilla", 0, (1, 2, 5)))
    full = count_params(Model(base))
    no_conv = Model(BackboneConfig(policy=base.policy, temporal_conv=False))
    no_spatial = Model(BackboneConfig(policy=base.policy, spatial_branch=False))
    assert count_params(no_conv) == count_params(Model(BackboneConfig()))
    assert count_params(no_spatial) < full
    assert count_flops(no_conv, 16, 128) < count_flops(Model(base), 16, 128)


def model_gradcheck(policy, monkeypatch, seed=0):
    """Full-model finite-difference check in smooth mode, float64, eval-mode batch norm.

    Returns (relative error, number of probes skipped at max-pool kinks, probes).
    """
    smooth = NeuronParams(surrogate="sigmoid", detach_reset=False)
    cfg = BackboneConfig(num_classes=2, T=3, resolution=16, width_multiplier=1 / 8, neuron=smooth,
                         policy=policy, strict_resolution=False, seed=seed)
    m = Model(cfg).to_dtype(np.float64).eval()
    rng = np.random.default_rng(seed)
    for mod in m.modules():
        if hasattr(mod, "running_var"):
            mod.running_mean[...] = rng.normal(0, 0.2, mod.running_mean.shape)
            mod.running_var[...] = rng.uniform(0.5, 1.5, mod.running_var.shape)
    slots = [(mod, k) for mod in m.modules() for k, v in vars(mod).items() if isinstance(v, Parameter)]

    def build(x, *params):
        for (mod, k), p in zip(slots, params):
            object.__setattr__(mod, k, p)
        return m.forward_clip(x)[1]

    x = rng.standard_normal((3, 2, 3, 16, 16))
    arrays = [x] + [getattr(mod, k).data.copy() for mod, k in slots]
    entries = [(0, int(j)) for j in rng.choice(x.size, 48, replace=False)]
    for i in range(1, len(arrays)):
        entries += [(i, int(j)) for j in rng.choice(arrays[i].size, min(3, arrays[i].size), replace=False)]
    winners = MaxPoolWinners(monkeypatch)
    err, skipped = gradcheck(build, arrays, seed=seed, entries=entries, signature=winners, detail=True)
    return err, skipped, len(entries)


@pytest.mark.parametrize("policy", [make_policy("vanilla"), make_policy("ns", 5, (1, 2, 5)),
                                    make_policy("vanilla", 0, (1, 2, 3, 4, 5))], ids=lambda p: p.name)
def test_full_model_gradcheck(policy, monkeypatch):
    err, skipped, total = model_gradcheck(policy, monkeypatch)
    assert err <= 1e-4
    assert skipped <= total // 5
