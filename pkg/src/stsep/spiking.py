"""Spiking neuron dynamics and stage-wise stateful/stateless policies.

Stateful (LIF) update, with leak ``a = 1 - 1/tau``::

    V_t = a * V_{t-1} * (1 - S_{t-1}) + I_t / tau
    S_t = H(V_t - V_th)

The non-stateful neuron drops the history term: ``S_t = H(I_t / tau - V_th)``.
``H`` fires at equality. Its backward pass uses a rectangular surrogate;
a smooth sigmoid variant exists only so finite differences can check
whole networks.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from stsep.errors import ConfigError, UsageError
from stsep.tensorcore import Module, Tensor, ops

NUM_STAGES = 5


@dataclass(frozen=True)
class NeuronParams:
    tau: float = 2.0
    v_threshold: float = 1.0
    surrogate_width: float = 0.5
    # "rect": hard threshold forward, boxcar backward. "sigmoid": smooth test mode.
    surrogate: str = "rect"
    sigmoid_slope: float = 4.0
    # reset factor (1 - S_{t-1}) is a constant in backward unless this is False
    detach_reset: bool = True

    def __post_init__(self):
        if self.tau < 1:
            raise ConfigError(f"tau must be >= 1, got {self.tau}")
        if self.v_threshold <= 0:
            raise ConfigError(f"v_threshold must be > 0, got {self.v_threshold}")
        if self.surrogate_width <= 0:
            raise ConfigError(f"surrogate_width must be > 0, got {self.surrogate_width}")
        if self.surrogate not in ("rect", "sigmoid"):
            raise ConfigError(f"unknown surrogate {self.surrogate!r}")


def _spike_fn(u: np.ndarray, params: NeuronParams) -> tuple[np.ndarray, np.ndarray]:
    """Forward value and local derivative of the spike nonlinearity at ``u = V - V_th``."""
    if params.surrogate == "rect":
        w = params.surrogate_width
        s = (u >= 0).astype(u.dtype)
        d = (np.abs(u) <= w).astype(u.dtype) * u.dtype.type(1.0 / (2.0 * w))
        return s, d
    k = params.sigmoid_slope
    s = 1.0 / (1.0 + np.exp(-k * u))
    return s, k * s * (1 - s)


def heaviside_surrogate(v_minus_thresh: Tensor, width: float = 0.5) -> Tensor:
    """H(x) forward (H(0) = 1); gradient 1/(2*width) inside |x| <= width, else 0."""
    if width <= 0:
        raise ConfigError("surrogate width must be positive")
    u = v_minus_thresh.data
    s = (u >= 0).astype(u.dtype)
    d = (np.abs(u) <= width).astype(u.dtype) * u.dtype.type(1.0 / (2.0 * width))
    return Tensor.from_op(s, (v_minus_thresh,), lambda g: (g * d,), "heaviside")


def spike(v_minus_thresh: Tensor, params: NeuronParams) -> Tensor:
    s, d = _spike_fn(v_minus_thresh.data, params)
    return Tensor.from_op(s, (v_minus_thresh,), lambda g: (g * d,), "spike")


@dataclass
class NeuronState:
    """Membrane potential and last spikes carried between time steps.

    ``None`` fields stand for the all-zero initial state.
    """

    v_prev: Tensor | None = None
    s_prev: Tensor | None = None

    @property
    def fresh(self) -> bool:
        return self.v_prev is None

    def check_shape(self, shape: tuple[int, ...]) -> None:
        if self.v_prev is not None and self.v_prev.shape != shape:
            raise UsageError(f"neuron state shape {self.v_prev.shape} does not match input {shape}")


def lif_step(i_t: Tensor, state: NeuronState, params: NeuronParams) -> tuple[Tensor, NeuronState]:
    """One LIF update composed from elementary ops (the per-step reference path)."""
    state.check_shape(i_t.shape)
    inv = 1.0 / params.tau
    drive = ops.scale(i_t, inv)
    if state.fresh:
        v = drive
    else:
        s_prev = state.s_prev.detach() if params.detach_reset else state.s_prev
        keep = ops.add_scalar(ops.neg(s_prev), 1.0)
        v = ops.add(ops.scale(ops.mul(state.v_prev, keep), 1.0 - inv), drive)
    s = spike(ops.add_scalar(v, -params.v_threshold), params)
    return s, NeuronState(v, s)


def nsn_step(i_t: Tensor, params: NeuronParams) -> Tensor:
    """Non-stateful neuron: threshold the scaled input, no state read or written."""
    return spike(ops.add_scalar(ops.scale(i_t, 1.0 / params.tau), -params.v_threshold), params)


def lif_sequence(x: Tensor, state: NeuronState, params: NeuronParams) -> tuple[Tensor, NeuronState]:
    """Run the LIF update over the leading time axis of ``x`` in one fused op.

    Numerically identical to repeated :func:`lif_step`; the backward pass is
    exact BPTT over the sequence and into ``state`` when it carries a graph.
    """
    state.check_shape(x.shape[1:])
    xd = x.data
    dt = xd.dtype.type
    steps = xd.shape[0]
    inv = 1.0 / params.tau
    leak = dt(1.0 - inv)
    inv_c = dt(inv)
    vth = dt(params.v_threshold)
    v_prev = np.zeros(xd.shape[1:], dtype=xd.dtype) if state.fresh else state.v_prev.data
    s_prev = np.zeros(xd.shape[1:], dtype=xd.dtype) if state.fresh else state.s_prev.data
    v0, s0 = v_prev, s_prev
    vs = np.empty_like(xd)
    ss = np.empty_like(xd)
    ds = np.empty_like(xd)
    for t in range(steps):
        keep = 1 - s_prev
        v = leak * (v_prev * keep) + xd[t] * inv_c
        s, d = _spike_fn(v - vth, params)
        vs[t], ss[t], ds[t] = v, s, d
        v_prev, s_prev = v, s
    packed = np.concatenate([ss, vs[-1:]], axis=0)

    parents: list[Tensor] = [x]
    if not state.fresh:
        parents += [state.v_prev, state.s_prev]
    grad_reset = not params.detach_reset

    def bw(g):
        gs_ext, carry_v = g[:steps], g[steps]
        carry_s = np.zeros_like(carry_v)
        gx = np.empty_like(xd)
        for t in range(steps - 1, -1, -1):
            gv = carry_v + ds[t] * (gs_ext[t] + carry_s)
            gx[t] = gv * inv_c
            prev_v = vs[t - 1] if t > 0 else v0
            prev_s = ss[t - 1] if t > 0 else s0
            carry_v = leak * (1 - prev_s) * gv
            carry_s = -leak * prev_v * gv if grad_reset else np.zeros_like(gv)
        if state.fresh:
            return (gx,)
        return gx, carry_v, (carry_s if grad_reset else None)

    out = Tensor.from_op(packed, parents, bw, "lif_sequence")
    spikes = ops.getitem(out, slice(0, steps))
    new_state = NeuronState(ops.getitem(out, steps), ops.getitem(out, steps - 1))
    return spikes, new_state


def nsn_sequence(x: Tensor, params: NeuronParams) -> Tensor:
    """Non-stateful neuron applied to every step at once (shape-agnostic)."""
    return nsn_step(x, params)


class SpikingNeuron(Module):
    """Neuron layer over [T, N, ...] input; stateful (LIF) or non-stateful."""

    def __init__(self, params: NeuronParams, stateful: bool):
        self.params = params
        self.stateful = stateful

    def __call__(self, x: Tensor, state: NeuronState | None = None) -> tuple[Tensor, NeuronState | None]:
        if not self.stateful:
            return nsn_sequence(x, self.params), None
        return lif_sequence(x, state if state is not None else NeuronState(), self.params)


@dataclass(frozen=True)
class StagePolicy:
    """Per-stage flags for the five stages (stem + four residual stages)."""

    stateful: tuple[bool, ...] = (True,) * NUM_STAGES
    stsep: tuple[bool, ...] = (False,) * NUM_STAGES
    name: str = field(default="vanilla", compare=False)

    def __post_init__(self):
        if len(self.stateful) != NUM_STAGES or len(self.stsep) != NUM_STAGES:
            raise ConfigError("a stage policy needs exactly 5 entries")

    def stage_stateful(self, stage: int) -> bool:
        """Whether neurons in ``stage`` (1-based) propagate membrane potential.

        Separated stages always use non-stateful neurons in the spatial branch.
        """
        return self.stateful[stage - 1] and not self.stsep[stage - 1]

    def with_stsep(self, stages) -> "StagePolicy":
        stages = set(stages)
        bad = stages - set(range(1, NUM_STAGES + 1))
        if bad:
            raise ConfigError(f"STSep stages out of range: {sorted(bad)}")
        flags = tuple(i + 1 in stages for i in range(NUM_STAGES))
        suffix = "+stsep" + "".join(str(s) for s in sorted(stages)) if stages else ""
        return StagePolicy(self.stateful, flags, self.name.split("+")[0] + suffix)


def make_policy(mode: str, k: int = 0, stsep_stages=()) -> StagePolicy:
    """Build NSk / rNSk / vanilla policies, optionally with STSep stages.

    ``ns`` makes stages 1..k non-stateful, ``rns`` makes stages 6-k..5
    non-stateful; ``vanilla`` is ``ns`` with k = 0.
    """
    if not isinstance(k, (int, np.integer)) or not 0 <= k <= NUM_STAGES:
        raise ConfigError(f"k must be an integer in [0, 5], got {k!r}")
    if mode == "vanilla":
        if k:
            raise ConfigError("vanilla policy takes k = 0")
        stateful = (True,) * NUM_STAGES
        name = "vanilla"
    elif mode == "ns":
        stateful = tuple(stage > k for stage in range(1, NUM_STAGES + 1))
        name = f"ns{k}"
    elif mode == "rns":
        stateful = tuple(stage <= NUM_STAGES - k for stage in range(1, NUM_STAGES + 1))
        name = f"rns{k}"
    else:
        raise ConfigError(f"unknown policy mode {mode!r}")
    return StagePolicy(stateful, (False,) * NUM_STAGES, name).with_stsep(stsep_stages)
