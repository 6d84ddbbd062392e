"""Accuracy, multi-clip inference, KNN retrieval and activation-map export."""

from __future__ import annotations

import csv
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from stsep.errors import ConfigError
from stsep.tensorcore import Tensor, no_grad, ops

RECALL_KS = (1, 3, 5, 10, 20, 50)


@dataclass
class MetricsRecord:
    top1: float = 0.0
    top5: float = 0.0
    loss: float = float("nan")
    per_class: dict = field(default_factory=dict)
    epoch: int = 0
    wall_time: float = 0.0
    train_loss: float = float("nan")
    train_top1: float = float("nan")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["per_class"] = {str(k): v for k, v in self.per_class.items()}
        return d


def topk_indices(scores: np.ndarray, k: int) -> np.ndarray:
    """Top-k class indices per row; equal scores rank the lower class index first."""
    return np.argsort(-scores, axis=1, kind="stable")[:, :k]


def topk_accuracy(logits, labels, k: int = 1) -> float:
    scores = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    labels = np.asarray(labels)
    if k > scores.shape[1]:
        raise ValueError(f"k={k} exceeds the number of classes {scores.shape[1]}")
    if len(labels) == 0:
        return 0.0
    top = topk_indices(scores, k)
    return float((top == labels[:, None]).any(axis=1).mean())


def clip_positions(m: int) -> list[float]:
    """M evenly spaced clip positions in [0, 1): (i + 0.5) / M."""
    if m < 1:
        raise ValueError("M must be >= 1")
    return [(i + 0.5) / m for i in range(m)]


def multiclip_predict(model, videos, loader, M: int = 3) -> np.ndarray:
    """Average over M uniformly placed clips of softmax(time-averaged logits): [N, K]."""
    acc = None
    with no_grad():
        for pos in clip_positions(M):
            x = Tensor(loader.batch(videos, position=pos), dtype=_model_dtype(model))
            _, avg = model.forward_clip(x)
            p = ops.softmax_np(avg.data.astype(np.float64))
            acc = p if acc is None else acc + p
    return acc / M


def _model_dtype(model):
    return model.fc.weight.dtype


def evaluate(model, records, loader, M: int = 1, batch_size: int = 64) -> MetricsRecord:
    """Top-1/top-5, loss (NLL of the clip-averaged probabilities) and per-class accuracy."""
    labels = np.array([r.label for r in records])
    if len(labels) and labels.max() >= model.config.num_classes:
        raise ConfigError(f"labels reach {labels.max()} but the model has {model.config.num_classes} classes")
    was_training = model.training
    model.eval()
    try:
        probs = []
        for start in range(0, len(records), batch_size):
            probs.append(multiclip_predict(model, records[start:start + batch_size], loader, M))
    finally:
        model.train(was_training)
    p = np.concatenate(probs, axis=0)
    k5 = min(5, p.shape[1])
    per_class = {}
    pred = topk_indices(p, 1)[:, 0]
    for c in np.unique(labels):
        per_class[int(c)] = float((pred[labels == c] == c).mean())
    nll = float(-np.log(np.maximum(p[np.arange(len(labels)), labels], 1e-12)).mean())
    return MetricsRecord(topk_accuracy(p, labels, 1), topk_accuracy(p, labels, k5), nll, per_class)


def extract_dataset_features(model, records, loader, batch_size: int = 64) -> np.ndarray:
    """Center-clip features for every record: [N, C]."""
    was_training = model.training
    model.eval()
    out = []
    try:
        with no_grad():
            for start in range(0, len(records), batch_size):
                x = Tensor(loader.batch(records[start:start + batch_size], position=None), dtype=_model_dtype(model))
                out.append(model.extract_features(x).data)
    finally:
        model.train(was_training)
    return np.concatenate(out, axis=0)


@dataclass
class RetrievalResult:
    recall_at: dict
    num_queries: int = 0
    excluded: int = 0


def knn_recall(query_feats, gallery_feats, query_labels, gallery_labels, ks=RECALL_KS,
               same_set: bool | None = None) -> RetrievalResult:
    """Recall@k under cosine similarity.

    When query and gallery are the same set, each query's own entry is
    excluded. Zero-norm features are dropped from both sides with a warning.
    Neighbors are ranked by decreasing similarity, then by gallery index.
    """
    q = np.asarray(query_feats, dtype=np.float64)
    g = np.asarray(gallery_feats, dtype=np.float64)
    ql = np.asarray(query_labels)
    gl = np.asarray(gallery_labels)
    if q.shape[1] != g.shape[1]:
        raise ValueError(f"feature dims differ: {q.shape[1]} vs {g.shape[1]}")
    if len(g) == 0:
        raise ValueError("gallery is empty")
    if same_set is None:
        same_set = q.shape == g.shape and np.array_equal(q, g) and np.array_equal(ql, gl)
    qn = np.linalg.norm(q, axis=1)
    gn = np.linalg.norm(g, axis=1)
    q_ok, g_ok = qn > 0, gn > 0
    excluded = int((~q_ok).sum() + (0 if same_set else (~g_ok).sum()))
    if excluded:
        warnings.warn(f"knn_recall: {excluded} zero-norm feature(s) excluded")
    # dot / (|q| |g|) rather than normalizing first: exact ties stay exact
    sims = (q @ g.T) / np.outer(np.where(q_ok, qn, 1), np.where(g_ok, gn, 1))
    sims[:, ~g_ok] = -np.inf
    if same_set:
        np.fill_diagonal(sims, -np.inf)
    order = np.argsort(-sims, axis=1, kind="stable")
    valid = np.take_along_axis(np.isfinite(sims), order, axis=1)
    hits = (gl[order] == ql[:, None]) & valid
    hits = hits[q_ok]
    recall = {}
    for k in ks:
        recall[k] = float(hits[:, :k].any(axis=1).mean()) if len(hits) else 0.0
    return RetrievalResult(recall, int(q_ok.sum()), excluded)


# activation maps -----------------------------------------------------------

def normalize_to_bytes(m: np.ndarray) -> np.ndarray:
    """Min-max scale to 0..255 (round half up); a constant map becomes all zeros."""
    m = np.asarray(m, dtype=np.float64)
    lo, hi = m.min(), m.max()
    if hi <= lo:
        return np.zeros(m.shape, dtype=np.uint8)
    return np.floor((m - lo) / (hi - lo) * 255.0 + 0.5).astype(np.uint8)


def write_pgm(path, img: np.ndarray) -> None:
    h, w = img.shape
    try:
        Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(img, dtype=np.uint8).tobytes())
    except OSError as exc:
        raise OSError(f"cannot write activation map {path}: {exc}") from exc


def read_pgm(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    parts = buf.split(b"\n", 3)
    w, h = map(int, parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w)


def export_activation_maps(model, clip, stage: int, path, sample: int = 0) -> list[Path]:
    """One P5 PGM per time step: channel mean of |activation| at ``stage`` for one clip sample."""
    if not 1 <= stage <= 5:
        raise ValueError(f"stage must be in 1..5, got {stage}")
    out_dir = Path(path)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create {out_dir}: {exc}") from exc
    capture: dict = {}
    x = clip if isinstance(clip, Tensor) else Tensor(clip)
    with no_grad():
        model.run(x, capture=capture)
    act = np.abs(capture[stage].data[:, sample]).mean(axis=1)
    files = []
    for t, m in enumerate(act):
        f = out_dir / f"stage{stage}_t{t:03d}.pgm"
        write_pgm(f, normalize_to_bytes(m))
        files.append(f)
    return files


def write_metrics_csv(path, records) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "top1", "top5", "loss"])
        for r in records:
            w.writerow([r.epoch, f"{r.top1:.6f}", f"{r.top5:.6f}", f"{r.loss:.6f}"])
