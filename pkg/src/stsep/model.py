"""Five-stage spiking ResNet-18 backbone with optional separable stages.

Layout for a 128x128 input: stem 7x7/2 (64^2), max-pool 3x3/2 (32^2), then
four residual stages at 32^2, 16^2, 8^2 and 4^2, global pooling, a
per-step classifier and a temporal average of logits.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from stsep.blocks import ResidualBlock, STSepBlock, STSepStem, Stem
from stsep.errors import ConfigError
from stsep.spiking import NUM_STAGES, NeuronParams, StagePolicy, make_policy
from stsep.tensorcore import Linear, Module, Tensor, ops

FULL_WIDTHS = (64, 64, 128, 256, 512)


@dataclass
class BackboneConfig:
    num_classes: int = 174
    T: int = 16
    resolution: int = 128
    input_channels: int = 3
    widths: tuple = FULL_WIDTHS
    blocks_per_stage: tuple = (2, 2, 2, 2)
    neuron: NeuronParams = field(default_factory=NeuronParams)
    policy: StagePolicy = field(default_factory=lambda: make_policy("vanilla"))
    r: int = 4
    s: int = 2
    alpha: float = 0.25
    width_multiplier: float = 1.0
    # ablation switches for the separable blocks
    temporal_input: str = "diff"
    temporal_conv: bool = True
    spatial_branch: bool = True
    # tiny gradient-check models may use sizes that are not multiples of 32
    strict_resolution: bool = True
    seed: int = 0

    def __post_init__(self):
        if len(self.widths) != NUM_STAGES or len(self.blocks_per_stage) != NUM_STAGES - 1:
            raise ConfigError("widths needs 5 entries and blocks_per_stage 4")
        if self.num_classes < 1 or self.T < 1:
            raise ConfigError("num_classes and T must be positive")
        if self.strict_resolution and self.resolution % 32:
            raise ConfigError(f"resolution {self.resolution} is not divisible by 32")
        if not 0 < self.width_multiplier <= 1:
            raise ConfigError("width_multiplier must lie in (0, 1]")
        if self.r < 1 or self.s < 1:
            raise ConfigError("r and s must be >= 1")
        for stage, (w, on) in enumerate(zip(self.stage_widths(), self.policy.stsep), start=1):
            if on and w % self.r:
                raise ConfigError(f"stage {stage} width {w} not divisible by r={self.r}")

    def stage_widths(self) -> tuple[int, ...]:
        return tuple(max(8, int(round(w * self.width_multiplier))) for w in self.widths)

    def full_scale(self) -> "BackboneConfig":
        return dataclasses.replace(self, width_multiplier=1.0)


class Model(Module):
    def __init__(self, config: BackboneConfig):
        self.config = config
        rng = np.random.default_rng(config.seed)
        cfg = config
        widths = cfg.stage_widths()
        policy = cfg.policy
        variant = dict(temporal_input=cfg.temporal_input, use_conv=cfg.temporal_conv, spatial=cfg.spatial_branch)
        if policy.stsep[0]:
            self.stem = STSepStem(cfg.input_channels, widths[0], cfg.neuron, rng, r=cfg.r, alpha=cfg.alpha, **variant)
        else:
            self.stem = Stem(cfg.input_channels, widths[0], cfg.neuron, policy.stage_stateful(1), rng)
        blocks = []
        self.stage_of: list[int] = []
        cin = widths[0]
        for i, n_blocks in enumerate(cfg.blocks_per_stage):
            stage = i + 2
            cout = widths[i + 1]
            for b in range(n_blocks):
                stride = 2 if (b == 0 and stage > 2) else 1
                if policy.stsep[stage - 1]:
                    blk = STSepBlock(cin, cout, stride, cfg.neuron, rng, r=cfg.r, s=cfg.s, alpha=cfg.alpha, **variant)
                else:
                    blk = ResidualBlock(cin, cout, stride, cfg.neuron, policy.stage_stateful(stage), rng)
                blocks.append(blk)
                self.stage_of.append(stage)
                cin = cout
        self.blocks = blocks
        self.fc = Linear(cin, cfg.num_classes, rng=rng)

    @property
    def feature_dim(self) -> int:
        return self.fc.fin

    def initial_state(self, limit: int | None = None) -> list:
        """Fresh per-layer state: neuron states, temporal caches or None."""
        out = []
        for m in [self.stem, *self.blocks]:
            if isinstance(m, (STSepBlock, STSepStem)):
                out.append(m.initial_state(limit))
            else:
                out.append(m.initial_state())
        return out

    def run(self, x: Tensor, state: list | None = None, capture: dict | None = None):
        """Advance the network over ``x`` [T, N, 3, H, W].

        Returns per-step logits [T, N, K], pooled features [T, N, C] and the
        state to continue from. ``capture`` (if given) receives the output of
        every stage keyed by stage number.
        """
        if x.ndim != 5:
            raise ConfigError(f"clip must be [T, N, C, H, W], got shape {x.shape}")
        state = list(state) if state is not None else self.initial_state()
        h, state[0] = self.stem(x, state[0])
        if capture is not None:
            capture[1] = h
        h = ops.max_pool2d(h, 3, 2, 1)
        for i, blk in enumerate(self.blocks):
            h, state[i + 1] = blk(h, state[i + 1])
            if capture is not None:
                capture[self.stage_of[i]] = h
        feats = ops.global_avg_pool(h)
        return self.fc(feats), feats, state

    def forward_clip(self, clip: Tensor):
        """(per-step logits [T, N, K], time-averaged logits [N, K]) from a fresh state."""
        if clip.ndim != 5 or clip.shape[0] != self.config.T:
            raise ConfigError(f"expected a clip with T={self.config.T} steps, got shape {clip.shape}")
        logits, _, _ = self.run(clip)
        return logits, ops.mean(logits, axis=0)

    def forward_stepwise(self, clip: Tensor):
        """Same result as :meth:`forward_clip`, one time step at a time."""
        state = self.initial_state()
        steps = []
        for t in range(clip.shape[0]):
            logits, _, state = self.run(ops.getitem(clip, slice(t, t + 1)), state)
            steps.append(logits)
        logits = ops.concat(steps, axis=0)
        return logits, ops.mean(logits, axis=0)

    def extract_features(self, clip: Tensor) -> Tensor:
        """Temporal mean of the globally pooled last-stage features: [N, C]."""
        _, feats, _ = self.run(clip)
        return ops.mean(feats, axis=0)

    def flops_per_frame(self, resolution: int) -> int:
        shape = (self.config.input_channels, resolution, resolution)
        shape, total = self.stem.flops(shape)
        c, h, w = shape
        ho, wo = ops.conv_output_size(h, 3, 2, 1), ops.conv_output_size(w, 3, 2, 1)
        total += 9 * c * ho * wo
        shape = (c, ho, wo)
        for blk in self.blocks:
            shape, f = blk.flops(shape)
            total += f
        total += int(np.prod(shape))  # global pool
        _, f = self.fc.flops(shape)
        return total + f


def build_model(config: BackboneConfig) -> Model:
    return Model(config)


def count_params(model: Module) -> int:
    return int(sum(p.size for p in model.parameters()))


def count_flops(model: Model, T: int, resolution: int) -> int:
    """Multiply-accumulates (one MAC = one FLOP) for a T-step clip, elementwise ops at unit cost."""
    return T * model.flops_per_frame(resolution)
