"""Residual and spatial-temporal separable blocks.

Every block consumes a whole clip, ``x`` of shape [T, N, C, H, W], together
with the state carried in from earlier steps, and returns the output clip and
the state to carry forward. Calling a block on a length-1 clip is the
per-step form; the ``*_forward`` functions below wrap that.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from stsep.errors import ConfigError, UsageError
from stsep.spiking import NeuronParams, NeuronState, SpikingNeuron, nsn_sequence
from stsep.tensorcore import BatchNorm2d, Conv2d, Module, Tensor, ops


@dataclass
class TemporalCache:
    """Previous block input X_{t-1}; ``prev=None`` is the zero tensor of a fresh clip.

    ``limit`` bounds how many steps may be pushed before a reset; pushing past
    it means the cache leaked across clips.
    """

    prev: Tensor | None = None
    steps: int = 0
    limit: int | None = None

    @property
    def fresh(self) -> bool:
        return self.prev is None

    def advanced(self, last: Tensor, n: int) -> "TemporalCache":
        if self.limit is not None and self.steps + n > self.limit:
            raise UsageError(f"temporal cache saw {self.steps + n} steps with limit {self.limit}: not reset between clips")
        return TemporalCache(last, self.steps + n, self.limit)


def temporal_diff(x_t: Tensor, cache: TemporalCache) -> tuple[Tensor, TemporalCache]:
    """Delta_t = X_t - X_{t-1} for one step, with X_0 = 0."""
    if cache.prev is not None and cache.prev.shape != x_t.shape:
        raise UsageError(f"cached shape {cache.prev.shape} does not match {x_t.shape}")
    delta = x_t if cache.fresh else ops.sub(x_t, cache.prev)
    return delta, cache.advanced(x_t, 1)


def temporal_diff_sequence(x: Tensor, cache: TemporalCache) -> tuple[Tensor, TemporalCache]:
    """Frame-to-frame difference along the leading time axis of ``x``."""
    steps = x.shape[0]
    if cache.prev is not None and cache.prev.shape != x.shape[1:]:
        raise UsageError(f"cached shape {cache.prev.shape} does not match {x.shape[1:]}")
    if steps == 1:
        delta, new = temporal_diff(ops.getitem(x, 0), cache)
        return ops.reshape(delta, x.shape), new
    head = ops.getitem(x, slice(0, 1))
    if not cache.fresh:
        head = ops.sub(head, ops.reshape(cache.prev, (1,) + x.shape[1:]))
    rest = ops.sub(ops.getitem(x, slice(1, None)), ops.getitem(x, slice(0, steps - 1)))
    return ops.concat([head, rest], axis=0), cache.advanced(ops.getitem(x, steps - 1), steps)


def _fit_factor(size: int, factor: int) -> int:
    """Largest f <= factor dividing ``size`` (pooling cannot go below 1x1)."""
    f = max(1, min(factor, size))
    while size % f:
        f -= 1
    return f


class ConvBN(Module):
    def __init__(self, cin, cout, kernel, stride, rng, padding=None):
        self.conv = Conv2d(cin, cout, kernel, stride, padding, rng=rng)
        self.bn = BatchNorm2d(cout)

    def __call__(self, x):
        return self.bn(self.conv(x))

    def flops(self, shape):
        shape, f1 = self.conv.flops(shape)
        shape, f2 = self.bn.flops(shape)
        return shape, f1 + f2


class SpatialBody(Module):
    """conv3x3-bn-neuron-conv3x3-bn-neuron: the residual function of a SEW block."""

    def __init__(self, cin, cout, stride, params: NeuronParams, stateful: bool, rng):
        self.cb1 = ConvBN(cin, cout, 3, stride, rng)
        self.sn1 = SpikingNeuron(params, stateful)
        self.cb2 = ConvBN(cout, cout, 3, 1, rng)
        self.sn2 = SpikingNeuron(params, stateful)

    @property
    def stateful(self) -> bool:
        return self.sn1.stateful

    def __call__(self, x, state=None):
        st1, st2 = state if state is not None else (None, None)
        h, st1 = self.sn1(self.cb1(x), st1)
        h, st2 = self.sn2(self.cb2(h), st2)
        return h, ((st1, st2) if self.stateful else None)

    def flops(self, shape):
        shape, f1 = self.cb1.flops(shape)
        shape, f2 = self.cb2.flops(shape)
        return shape, f1 + f2


class Shortcut(Module):
    """Identity, or 1x1 strided conv + bn when the block changes shape."""

    def __init__(self, cin, cout, stride, rng):
        self.proj = ConvBN(cin, cout, 1, stride, rng, padding=0) if (stride != 1 or cin != cout) else None

    def __call__(self, x):
        return x if self.proj is None else self.proj(x)

    def flops(self, shape):
        return (shape, 0) if self.proj is None else self.proj.flops(shape)


class ResidualBlock(Module):
    """SEW residual block: out = shortcut(x) + body(x) (ADD connect function)."""

    def __init__(self, cin, cout, stride, params: NeuronParams, stateful: bool, rng):
        self.cin, self.cout, self.stride = cin, cout, stride
        self.body = SpatialBody(cin, cout, stride, params, stateful, rng)
        self.shortcut = Shortcut(cin, cout, stride, rng)

    @property
    def stateful(self) -> bool:
        return self.body.stateful

    def initial_state(self):
        return (NeuronState(), NeuronState()) if self.stateful else None

    def __call__(self, x: Tensor, state=None):
        if state is None and self.stateful:
            state = self.initial_state()
        f, state = self.body(x, state)
        return ops.add(self.shortcut(x), f), state

    def flops(self, shape):
        out, fb = self.body.flops(shape)
        _, fs = self.shortcut.flops(shape)
        return out, fb + fs + int(np.prod(out))


class TemporalBranch(Module):
    """Motion path fed by feature differences.

    reduce channels to C/r -> average-pool -> core conv -> non-stateful
    neuron -> repeat channels back to C -> nearest upsample. Channel
    reduction is a parameter-free group mean when the block keeps its
    width and a learned 1x1 projection when it widens; restoration is
    parameter-free. Nothing here has a bias or normalization, so a zero
    input maps to a zero output.

    With ``stem=True`` the branch mirrors the network stem: the core conv is
    a stride-2 7x7 conv straight from the input channels and there is no
    pooling.
    """

    def __init__(self, cin, cout, r, s, stride, params: NeuronParams, rng, use_conv=True, stem=False):
        if cout % r:
            raise ConfigError(f"width {cout} not divisible by r={r}")
        self.cin, self.cout, self.r, self.s, self.stride = cin, cout, r, s, stride
        self.core_channels = cout // r
        self.params = params
        self.stem = stem
        self.use_conv = use_conv
        cr = self.core_channels
        self.project = None
        self.core = None
        if stem:
            if use_conv:
                self.core = Conv2d(cin, cr, 7, 2, 3, rng=rng)
        else:
            if use_conv and cin != cout:
                self.project = Conv2d(cin, cr, 1, 1, 0, rng=rng)
            elif cin % cr:
                raise ConfigError(f"cannot group-average {cin} channels down to {cr}")
            if use_conv:
                self.core = Conv2d(cr, cr, 3, 1, 1, rng=rng)

    def _pool_factor(self, out_h: int) -> int:
        return 1 if self.stem else _fit_factor(out_h, self.s)

    @staticmethod
    def _input_pool(h: int, out_h: int, f: int) -> int:
        """Pool factor taking the block input (h) to the branch working size out_h / f."""
        target = out_h // f
        if h % target:
            raise ConfigError(f"temporal branch cannot pool {h} down to {target}")
        return h // target

    def _reduce_group(self) -> int:
        if self.stem:
            return self.cin
        return self.cin // self.core_channels

    def __call__(self, delta: Tensor) -> Tensor:
        h = delta.shape[-2]
        out_h = ops.conv_output_size(h, 3, self.stride, 1)
        f = self._pool_factor(out_h)
        if self.stem:
            z = self.core(delta) if self.core is not None else ops.avg_pool2d(ops.channel_mean(delta, self.cin), 2)
        else:
            z = self.project(delta) if self.project is not None else ops.channel_mean(delta, self._reduce_group())
            z = ops.avg_pool2d(z, self._input_pool(h, out_h, f))
            if self.core is not None:
                z = self.core(z)
        z = nsn_sequence(z, self.params)
        z = ops.channel_repeat(z, self.cout // z.shape[-3])
        return ops.upsample_nearest(z, f)

    def flops(self, shape):
        c, h, w = shape
        total = 0
        if self.stem:
            if self.core is not None:
                (c, h, w), fl = self.core.flops((c, h, w))
                total += fl
            else:
                total += c * h * w
                c, h, w = 1, h // 2, w // 2
            f = 1
        else:
            out_h, out_w = ops.conv_output_size(h, 3, self.stride, 1), ops.conv_output_size(w, 3, self.stride, 1)
            f = self._pool_factor(out_h)
            if self.project is not None:
                (c, h, w), fl = self.project.flops((c, h, w))
            else:
                fl = c * h * w
                c = self.core_channels
            total += fl
            total += c * h * w  # average pool reads each input once
            h, w = out_h // f, out_w // f
            if self.core is not None:
                (c, h, w), fl = self.core.flops((c, h, w))
                total += fl
        return (self.cout, h * f, w * f), total


class STSepBlock(Module):
    """Spatial-temporal separable block.

    out_t = shortcut(X_t) + (1 - alpha) * spatial(X_t) + alpha * temporal(X_t - X_{t-1})

    The spatial branch is the SEW residual function with non-stateful
    neurons. ``temporal_input="identity"`` feeds X_t instead of the
    difference; ``use_conv=False`` drops the core conv; ``spatial=False``
    drops the spatial branch.
    """

    def __init__(self, cin, cout, stride, params: NeuronParams, rng, r=4, s=2, alpha=0.25,
                 temporal_input="diff", use_conv=True, spatial=True):
        if not 0.0 <= alpha <= 1.0:
            raise ConfigError(f"alpha must lie in [0, 1], got {alpha}")
        if temporal_input not in ("diff", "identity"):
            raise ConfigError(f"temporal_input must be 'diff' or 'identity', got {temporal_input!r}")
        self.cin, self.cout, self.stride = cin, cout, stride
        self.alpha = alpha
        self.temporal_input = temporal_input
        self.body = SpatialBody(cin, cout, stride, params, False, rng) if spatial else None
        self.shortcut = Shortcut(cin, cout, stride, rng)
        self.temporal = TemporalBranch(cin, cout, r, s, stride, params, rng, use_conv=use_conv)

    stateful = False

    def initial_state(self, limit: int | None = None) -> TemporalCache:
        return TemporalCache(limit=limit)

    def branches(self, x: Tensor, cache: TemporalCache | None = None):
        """Return (shortcut, spatial, temporal, new cache); spatial is None without a spatial branch."""
        cache = cache if cache is not None else TemporalCache()
        if self.temporal_input == "diff":
            drive, cache = temporal_diff_sequence(x, cache)
        else:
            drive, cache = x, cache.advanced(ops.getitem(x, x.shape[0] - 1), x.shape[0])
        ft = self.temporal(drive)
        fs = self.body(x)[0] if self.body is not None else None
        return self.shortcut(x), fs, ft, cache

    def __call__(self, x: Tensor, state: TemporalCache | None = None, alpha: float | None = None):
        a = self.alpha if alpha is None else alpha
        base, fs, ft, cache = self.branches(x, state)
        return fuse(base, fs, ft, a), cache

    def flops(self, shape):
        out, fb = self.body.flops(shape) if self.body is not None else (None, 0)
        out_s, fs = self.shortcut.flops(shape)
        out = out or out_s
        _, ft = self.temporal.flops(shape)
        n = int(np.prod(out))
        diff = int(np.prod(shape)) if self.temporal_input == "diff" else 0
        fuse_cost = 4 * n if self.body is not None else 2 * n
        return out, fb + fs + ft + diff + fuse_cost


def fuse(base: Tensor | None, fs: Tensor | None, ft: Tensor, alpha: float) -> Tensor:
    """base + (1 - alpha) * fs + alpha * ft, skipping absent terms."""
    out = ops.scale(ft, alpha)
    if fs is not None:
        out = ops.add(ops.scale(fs, 1.0 - alpha), out)
    if base is not None:
        out = ops.add(base, out)
    return out


class Stem(Module):
    """7x7/2 conv + bn + neuron on raw frames."""

    def __init__(self, cin, cout, params: NeuronParams, stateful: bool, rng):
        self.cb = ConvBN(cin, cout, 7, 2, rng, padding=3)
        self.sn = SpikingNeuron(params, stateful)

    @property
    def stateful(self) -> bool:
        return self.sn.stateful

    def initial_state(self):
        return NeuronState() if self.stateful else None

    def __call__(self, x, state=None):
        return self.sn(self.cb(x), state)

    def flops(self, shape):
        return self.cb.flops(shape)


class STSepStem(Module):
    """Stem with a temporal companion: (1 - alpha) * stem(F_t) + alpha * temporal(F_t - F_{t-1}).

    There is no identity term because the stem changes shape.
    """

    stateful = False

    def __init__(self, cin, cout, params: NeuronParams, rng, r=4, alpha=0.25, temporal_input="diff",
                 use_conv=True, spatial=True):
        self.alpha = alpha
        self.temporal_input = temporal_input
        self.spatial = Stem(cin, cout, params, False, rng) if spatial else None
        self.temporal = TemporalBranch(cin, cout, r, 1, 2, params, rng, use_conv=use_conv, stem=True)

    def initial_state(self, limit: int | None = None) -> TemporalCache:
        return TemporalCache(limit=limit)

    def __call__(self, x, state: TemporalCache | None = None, alpha: float | None = None):
        a = self.alpha if alpha is None else alpha
        cache = state if state is not None else TemporalCache()
        if self.temporal_input == "diff":
            drive, cache = temporal_diff_sequence(x, cache)
        else:
            drive, cache = x, cache.advanced(ops.getitem(x, x.shape[0] - 1), x.shape[0])
        ft = self.temporal(drive)
        fs = self.spatial(x)[0] if self.spatial is not None else None
        return fuse(None, fs, ft, a), cache

    def flops(self, shape):
        out, fs = self.spatial.flops(shape) if self.spatial is not None else (None, 0)
        out_t, ft = self.temporal.flops(shape)
        out = out or out_t
        n = int(np.prod(out))
        diff = int(np.prod(shape)) if self.temporal_input == "diff" else 0
        return out, fs + ft + diff + (3 * n if self.spatial is not None else n)


# per-step functional forms ---------------------------------------------------

def residual_block_forward(x_t: Tensor, block: ResidualBlock, state=None):
    """One time step through a residual block; ``state`` is required iff the block is stateful."""
    if block.stateful and state is None:
        raise UsageError("stateful block needs a state (use block.initial_state() for a fresh clip)")
    if not block.stateful and state is not None:
        raise UsageError("non-stateful block takes no state")
    out, state = block(ops.reshape(x_t, (1,) + x_t.shape), state)
    return ops.reshape(out, out.shape[1:]), state


def stsep_block_forward(x_t: Tensor, block: STSepBlock, cache: TemporalCache, alpha: float | None = None):
    """One time step through a separable block, advancing its temporal cache."""
    if cache is None:
        raise UsageError("separable block needs a TemporalCache")
    out, cache = block(ops.reshape(x_t, (1,) + x_t.shape), cache, alpha=alpha)
    return ops.reshape(out, out.shape[1:]), cache
