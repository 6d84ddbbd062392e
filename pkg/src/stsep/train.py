"""AdamW, cosine annealing, the training loop and STCK checkpoints."""

from __future__ import annotations

import json
import logging
import math
import struct
import time
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from stsep.blocks import STSepBlock, STSepStem
from stsep.errors import ConfigError, DivergenceError, FormatError, NonFiniteError
from stsep.evaluation import MetricsRecord, evaluate
from stsep.tensorcore import backward, ops
from stsep.tensorcore import Tensor

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr: float = 6e-4
    weight_decay: float = 5e-6
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    epochs: int = 50
    batch_size: int = 32
    eta_min: float = 0.0
    reference_batch: int = 256
    seed: int = 0

    def __post_init__(self):
        if self.lr < 0:
            raise ConfigError(f"lr must be >= 0, got {self.lr}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        b1, b2 = self.betas
        if not (0 <= b1 < 1 and 0 <= b2 < 1):
            raise ConfigError("betas must lie in [0, 1)")

    @property
    def base_lr(self) -> float:
        return self.lr * self.batch_size / self.reference_batch


def cosine_lr(epoch: int, config: TrainConfig) -> float:
    """eta_min + (base - eta_min) * (1 + cos(pi * epoch / T_max)) / 2 with T_max = epochs."""
    t_max = config.epochs
    if not 0 <= epoch <= max(t_max, 0):
        raise ConfigError(f"epoch {epoch} outside [0, {t_max}]")
    if t_max == 0:
        return config.base_lr
    base, lo = config.base_lr, config.eta_min
    if epoch == t_max:
        return lo
    return lo + (base - lo) * (1 + math.cos(math.pi * epoch / t_max)) / 2


def adamw_step(theta: np.ndarray, grad: np.ndarray, m: np.ndarray, v: np.ndarray, step: int, lr: float,
               weight_decay: float = 0.0, betas=(0.9, 0.999), eps: float = 1e-8) -> None:
    """One in-place AdamW update: decoupled decay, then the bias-corrected Adam step."""
    if step < 1:
        raise ConfigError("step index starts at 1")
    if not np.isfinite(grad).all():
        bad = int((~np.isfinite(grad)).sum())
        raise DivergenceError(f"non-finite gradient ({bad} of {grad.size} entries) at step {step}")
    b1, b2 = betas
    dt = theta.dtype.type
    if weight_decay:
        theta -= dt(lr * weight_decay) * theta
    m *= dt(b1)
    m += dt(1 - b1) * grad
    v *= dt(b2)
    v += dt(1 - b2) * grad * grad
    m_hat = m / dt(1 - b1 ** step)
    v_hat = v / dt(1 - b2 ** step)
    theta -= dt(lr) * m_hat / (np.sqrt(v_hat) + dt(eps))


class AdamW:
    """Holds first/second moments for a fixed parameter list."""

    def __init__(self, params, config: TrainConfig):
        self.params = list(params)
        self.config = config
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.step_count = 0

    def step(self, lr: float) -> None:
        self.step_count += 1
        cfg = self.config
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            adamw_step(p.data, g.astype(p.dtype, copy=False), m, v, self.step_count, lr,
                       cfg.weight_decay, cfg.betas, cfg.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def state_dict(self, names) -> dict[str, np.ndarray]:
        out = {}
        for name, m, v in zip(names, self.m, self.v):
            out["m." + name] = m
            out["v." + name] = v
        return out

    def load_state_dict(self, names, state: dict[str, np.ndarray], step: int) -> None:
        for i, name in enumerate(names):
            self.m[i] = state["m." + name].astype(self.params[i].dtype, copy=True)
            self.v[i] = state["v." + name].astype(self.params[i].dtype, copy=True)
        self.step_count = step


def init_temporal_from_spatial(model) -> list[str]:
    """Copy the leading slice of each spatial first conv into the temporal core conv.

    core[o, i] = spatial_first[o, i] for o, i below the core's widths. Blocks
    whose shapes do not allow that keep their default init; the returned
    list names them (a warning is also emitted).
    """
    skipped = []
    for name, m in _named_modules(model):
        if not isinstance(m, (STSepBlock, STSepStem)):
            continue
        core = m.temporal.core
        if core is None:
            continue
        if isinstance(m, STSepStem):
            spatial = m.spatial.cb.conv if m.spatial is not None else None
        else:
            spatial = m.body.cb1.conv if m.body is not None else None
        cw = core.weight.data
        if spatial is None or spatial.weight.shape[2:] != cw.shape[2:] \
                or spatial.weight.shape[0] < cw.shape[0] or spatial.weight.shape[1] < cw.shape[1]:
            skipped.append(name)
            continue
        core.weight.data = spatial.weight.data[: cw.shape[0], : cw.shape[1]].copy()
    if skipped:
        warnings.warn(f"temporal init fell back to the default scheme for: {', '.join(skipped)}")
    return skipped


def _named_modules(module, prefix=""):
    yield prefix.rstrip("."), module
    for name, child in module.named_children():
        yield from _named_modules(child, prefix + name + ".")


# training loop --------------------------------------------------------------

def train_epoch(model, records, loader, optimizer: AdamW, config: TrainConfig, epoch: int):
    """One pass over ``records``; returns (mean loss, train accuracy)."""
    rng = np.random.default_rng([config.seed, epoch])
    order = rng.permutation(len(records))
    lr = cosine_lr(epoch, config)
    model.train()
    total, correct, seen = 0.0, 0, 0
    for start in range(0, len(order), config.batch_size):
        idx = order[start:start + config.batch_size]
        batch = [records[i] for i in idx]
        labels = np.array([r.label for r in batch])
        x = Tensor(loader.batch(batch, rng))
        try:
            _, avg = model.forward_clip(x)
            loss = ops.cross_entropy(avg, labels)
        except NonFiniteError as exc:
            raise DivergenceError(f"epoch {epoch}: {exc}") from exc
        if not np.isfinite(loss.data).all():
            raise DivergenceError(f"epoch {epoch}: loss is not finite")
        optimizer.zero_grad()
        backward(loss)
        optimizer.step(lr)
        total += float(loss.data) * len(idx)
        correct += int((avg.data.argmax(axis=1) == labels).sum())
        seen += len(idx)
    return total / max(seen, 1), correct / max(seen, 1)


def train_loop(model, train_records, eval_records, config: TrainConfig, train_loader, eval_loader,
               optimizer: AdamW | None = None, start_epoch: int = 0, on_epoch=None):
    """Train for epochs [start_epoch, config.epochs).

    Minibatch order and augmentation for epoch e come from a generator
    seeded with (seed, e), so resuming from a checkpoint reproduces an
    uninterrupted run. On divergence the model is rolled back to the last
    completed epoch and :class:`DivergenceError` is raised.
    """
    num_classes = model.config.num_classes
    labels = {r.label for r in train_records} | {r.label for r in eval_records}
    if labels and max(labels) >= num_classes:
        raise ConfigError(f"dataset labels reach {max(labels)} but the model has {num_classes} classes")
    optimizer = optimizer or AdamW(model.parameters(), config)
    history: list[MetricsRecord] = []
    for epoch in range(start_epoch, config.epochs):
        snapshot = {k: v.copy() for k, v in model.state_dict().items()}
        moments = ([m.copy() for m in optimizer.m], [v.copy() for v in optimizer.v], optimizer.step_count)
        t0 = time.perf_counter()
        try:
            loss, train_acc = train_epoch(model, train_records, train_loader, optimizer, config, epoch)
        except DivergenceError:
            model.load_state_dict(snapshot)
            optimizer.m, optimizer.v, optimizer.step_count = moments
            raise
        rec = evaluate(model, eval_records, eval_loader) if eval_records else MetricsRecord()
        rec.epoch = epoch + 1
        rec.train_loss, rec.train_top1 = loss, train_acc
        rec.wall_time = time.perf_counter() - t0
        history.append(rec)
        log.info("epoch %d loss %.4f train %.3f eval %.3f (%.1fs)", epoch + 1, loss, train_acc, rec.top1, rec.wall_time)
        if on_epoch is not None:
            on_epoch(epoch + 1, rec, optimizer)
    return history, optimizer


# checkpoints ----------------------------------------------------------------

CKPT_MAGIC = b"STCK"


def _pack_tensors(tensors: dict[str, np.ndarray]) -> bytes:
    parts = [struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def _unpack_tensors(buf: bytes, off: int) -> tuple[dict[str, np.ndarray], int]:
    def need(n, what):
        if off + n > len(buf):
            raise FormatError(f"truncated {what}", off)

    need(4, "tensor count")
    (count,) = struct.unpack_from("<I", buf, off)
    off += 4
    out = {}
    for _ in range(count):
        need(2, "name length")
        (n,) = struct.unpack_from("<H", buf, off)
        off += 2
        need(n + 1, "tensor header")
        name = buf[off:off + n].decode("utf-8")
        off += n
        rank = buf[off]
        off += 1
        need(4 * rank, "tensor dims")
        dims = struct.unpack_from(f"<{rank}I", buf, off)
        off += 4 * rank
        size = int(np.prod(dims)) if rank else 1
        need(4 * size, f"payload of {name}")
        out[name] = np.frombuffer(buf, dtype="<f4", count=size, offset=off).reshape(dims).astype(np.float32)
        off += 4 * size
    return out, off


def save_checkpoint(path, model, optimizer: AdamW | None = None, meta: dict | None = None) -> None:
    names = [n for n, _ in model.named_parameters()]
    opt = optimizer.state_dict(names) if optimizer is not None else {}
    meta = dict(meta or {})
    meta["optimizer_step"] = optimizer.step_count if optimizer is not None else 0
    trailer = json.dumps(meta, sort_keys=True).encode("utf-8")
    blob = CKPT_MAGIC + _pack_tensors(model.state_dict()) + _pack_tensors(opt) + struct.pack("<I", len(trailer)) + trailer
    Path(path).write_bytes(blob)


def read_checkpoint(path) -> tuple[dict, dict, dict]:
    """(model tensors, optimizer tensors, metadata) from an STCK file."""
    buf = Path(path).read_bytes()
    if buf[:4] != CKPT_MAGIC:
        raise FormatError("bad checkpoint magic", 0)
    tensors, off = _unpack_tensors(buf, 4)
    opt, off = _unpack_tensors(buf, off)
    if off + 4 > len(buf):
        raise FormatError("missing metadata trailer", off)
    (n,) = struct.unpack_from("<I", buf, off)
    off += 4
    if off + n != len(buf):
        raise FormatError("metadata trailer length mismatch", off)
    try:
        meta = json.loads(buf[off:off + n].decode("utf-8"))
    except ValueError as exc:
        raise FormatError(f"metadata is not valid JSON: {exc}", off) from exc
    return tensors, opt, meta


def load_checkpoint(path, model, optimizer: AdamW | None = None) -> dict:
    tensors, opt, meta = read_checkpoint(path)
    model.load_state_dict(tensors)
    if optimizer is not None and opt:
        optimizer.load_state_dict([n for n, _ in model.named_parameters()], opt, meta.get("optimizer_step", 0))
    return meta
