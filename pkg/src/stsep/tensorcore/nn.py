"""Parameter containers and the layers the backbone is built from."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from stsep.tensorcore import ops
from stsep.tensorcore.tensor import DEFAULT_DTYPE, Tensor


class Parameter(Tensor):
    """A leaf tensor that an optimizer updates."""

    __slots__ = ()

    def __init__(self, data, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)


class Module:
    """Minimal module tree: parameters, buffers and children discovered by attribute."""

    training: bool = True

    def named_children(self) -> Iterator[tuple[str, "Module"]]:
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)) and value and all(isinstance(v, Module) for v in value):
                for i, v in enumerate(value):
                    yield f"{name}.{i}", v

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, value in vars(self).items():
            if isinstance(value, Parameter):
                yield prefix + name, value
        for name, child in self.named_children():
            yield from child.named_parameters(prefix + name + ".")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name in getattr(self, "_buffers", ()):
            yield prefix + name, getattr(self, name)
        for name, child in self.named_children():
            yield from child.named_buffers(prefix + name + ".")

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, child in self.named_children():
            yield from child.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def to_dtype(self, dtype) -> "Module":
        """Cast parameters and buffers in place (used for 64-bit gradient checks)."""
        for m in self.modules():
            for name, value in list(vars(m).items()):
                if isinstance(value, Parameter):
                    object.__setattr__(m, name, Parameter(value.data.astype(dtype), dtype=dtype))
            for name in getattr(m, "_buffers", ()):
                object.__setattr__(m, name, getattr(m, name).astype(dtype))
        return self

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {name: p.data for name, p in self.named_parameters()}
        out.update(dict(self.named_buffers()))
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        missing = (set(params) | set(buffers)) - set(state)
        unexpected = set(state) - set(params) - set(buffers)
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}")
        for name, p in params.items():
            if state[name].shape != p.shape:
                raise KeyError(f"{name}: shape {state[name].shape} != {p.shape}")
            p.data = state[name].astype(p.dtype, copy=True)
        for name, buf in buffers.items():
            buf[...] = state[name]


def kaiming_uniform(shape: tuple[int, ...], fan_in: int, rng: np.random.Generator) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(DEFAULT_DTYPE)


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, kernel: int, stride: int = 1, padding: int | None = None,
                 bias: bool = False, rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.cin, self.cout, self.kernel, self.stride = cin, cout, kernel, stride
        self.padding = kernel // 2 if padding is None else padding
        fan_in = cin * kernel * kernel
        self.weight = Parameter(kaiming_uniform((cout, cin, kernel, kernel), fan_in, rng))
        self.bias = Parameter(rng.uniform(-1, 1, cout) / math.sqrt(fan_in)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, self.stride, self.padding)

    def output_hw(self, h: int, w: int) -> tuple[int, int]:
        return (ops.conv_output_size(h, self.kernel, self.stride, self.padding),
                ops.conv_output_size(w, self.kernel, self.stride, self.padding))

    def flops(self, shape: tuple[int, int, int]) -> tuple[tuple[int, int, int], int]:
        _, h, w = shape
        ho, wo = self.output_hw(h, w)
        return (self.cout, ho, wo), self.cout * ho * wo * self.cin * self.kernel * self.kernel


class BatchNorm2d(Module):
    _buffers = ("running_mean", "running_var")

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        self.channels, self.momentum, self.eps = channels, momentum, eps
        self.weight = Parameter(np.ones(channels))
        self.bias = Parameter(np.zeros(channels))
        self.running_mean = np.zeros(channels, dtype=DEFAULT_DTYPE)
        self.running_var = np.ones(channels, dtype=DEFAULT_DTYPE)

    def __call__(self, x: Tensor) -> Tensor:
        return ops.batch_norm(x, self.weight, self.bias, self.running_mean, self.running_var,
                              self.training, self.momentum, self.eps)

    def flops(self, shape):
        return shape, int(np.prod(shape))


class Linear(Module):
    def __init__(self, fin: int, fout: int, bias: bool = True, rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.fin, self.fout = fin, fout
        self.weight = Parameter(kaiming_uniform((fout, fin), fin, rng))
        self.bias = Parameter(rng.uniform(-1, 1, fout) / math.sqrt(fin)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return ops.linear(x, self.weight, self.bias)

    def flops(self, shape):
        return (self.fout,), self.fin * self.fout
