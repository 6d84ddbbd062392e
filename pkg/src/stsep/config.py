"""Experiment configuration: strict JSON, dotted overrides, hashing and run manifests."""

from __future__ import annotations

import copy
import hashlib
import json
import os
from pathlib import Path

from stsep import __version__
from stsep.data import TASK_CLASSES, TASK_FLIP_P, ClipLoader, SamplerSpec, SyntheticTask
from stsep.errors import ConfigError
from stsep.model import BackboneConfig
from stsep.spiking import NeuronParams, make_policy
from stsep.train import TrainConfig

# keys whose value may be null in addition to the default's type
_NULLABLE = {"model.num_classes", "data.flip_p", "data.train_path", "data.eval_path", "data.task.length"}

DEFAULTS = {
    "model": {
        "num_classes": None,
        "resolution": 32,
        "widths": [64, 64, 128, 256, 512],
        "blocks_per_stage": [2, 2, 2, 2],
        "width_multiplier": 0.25,
        "tau": 2.0,
        "v_threshold": 1.0,
        "surrogate_width": 0.5,
        "policy": {"mode": "vanilla", "k": 0, "stsep_stages": []},
        "r": 4,
        "s": 2,
        "alpha": 0.25,
        "temporal_input": "diff",
        "temporal_conv": True,
        "spatial_branch": True,
        "init_temporal": True,
    },
    "train": {
        "lr": 6e-4,
        "weight_decay": 5e-6,
        "betas": [0.9, 0.999],
        "eps": 1e-8,
        "epochs": 50,
        "batch_size": 32,
        "eta_min": 0.0,
        "reference_batch": 256,
    },
    "data": {
        "task": {"kind": "playback2", "resolution": 32, "T": 8, "noise": 0.05, "length": None},
        "train_count": 2000,
        "eval_count": 500,
        "train_path": None,
        "eval_path": None,
        "sampler": {"kind": "tsn", "T": 8, "stride": 2},
        "augment": True,
        "flip_p": None,
        "scale": 1.2,
    },
    "eval": {"M": 3, "ks": [1, 3, 5, 10, 20, 50]},
    "output_dir": "runs/default",
    "seed": 0,
}


def _check(value, default, path: str):
    if isinstance(default, dict):
        if not isinstance(value, dict):
            raise ConfigError(f"{path or 'config'}: expected an object")
        for k in value:
            if k not in default:
                raise ConfigError(f"unknown config key '{path + '.' if path else ''}{k}'")
        return {k: _check(value[k], d, f"{path}.{k}" if path else k) if k in value else copy.deepcopy(d)
                for k, d in default.items()}
    if value is None:
        if default is None or path in _NULLABLE:
            return None
        raise ConfigError(f"config key '{path}' may not be null")
    if default is None:
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"config key '{path}' must be true or false")
    elif isinstance(default, (int, float)):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"config key '{path}' must be a number")
        if isinstance(default, int) and not isinstance(value, int):
            raise ConfigError(f"config key '{path}' must be an integer")
    elif isinstance(default, str) and not isinstance(value, str):
        raise ConfigError(f"config key '{path}' must be a string")
    elif isinstance(default, list) and not isinstance(value, list):
        raise ConfigError(f"config key '{path}' must be a list")
    return value


def validate(raw: dict) -> dict:
    """Fill defaults and reject unknown keys or mistyped values."""
    return _check(raw, DEFAULTS, "")


def set_path(cfg: dict, dotted: str, value) -> None:
    node = cfg
    keys = dotted.split(".")
    for k in keys[:-1]:
        if not isinstance(node, dict) or k not in node:
            raise ConfigError(f"unknown config key '{dotted}'")
        node = node[k]
    if not isinstance(node, dict) or keys[-1] not in node:
        raise ConfigError(f"unknown config key '{dotted}'")
    node[keys[-1]] = value


def parse_override(text: str) -> tuple[str, object]:
    """'a.b=c' -> ('a.b', c) with c parsed as JSON when possible, else kept as a string."""
    if "=" not in text:
        raise ConfigError(f"override '{text}' is not of the form key=value")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except ValueError:
        value = raw
    return key.strip(), value


def load_config(path=None, overrides=()) -> dict:
    raw: dict = {}
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text())
        except OSError:
            raise
        except ValueError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    cfg = validate(raw)
    for item in overrides:
        key, value = parse_override(item) if isinstance(item, str) else item
        set_path(cfg, key, value)
    return validate(cfg)


def canonical_json(cfg: dict) -> str:
    return json.dumps(cfg, sort_keys=True, separators=(",", ":"))


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(canonical_json(cfg).encode("utf-8")).hexdigest()


def code_version() -> str:
    """Content hash over the package sources plus its version string."""
    h = hashlib.sha256(__version__.encode())
    root = Path(__file__).parent
    for f in sorted(root.rglob("*.py")):
        h.update(str(f.relative_to(root)).encode())
        h.update(f.read_bytes())
    return h.hexdigest()[:16]


# builders -------------------------------------------------------------------

def num_classes(cfg: dict) -> int:
    n = cfg["model"]["num_classes"]
    return n if n is not None else TASK_CLASSES[cfg["data"]["task"]["kind"]]


def backbone_config(cfg: dict) -> BackboneConfig:
    m = cfg["model"]
    p = m["policy"]
    try:
        policy = make_policy(p["mode"], p["k"], tuple(p["stsep_stages"]))
        return BackboneConfig(
            num_classes=num_classes(cfg),
            T=cfg["data"]["sampler"]["T"],
            resolution=m["resolution"],
            widths=tuple(m["widths"]),
            blocks_per_stage=tuple(m["blocks_per_stage"]),
            neuron=NeuronParams(m["tau"], m["v_threshold"], m["surrogate_width"]),
            policy=policy,
            r=m["r"], s=m["s"], alpha=m["alpha"],
            width_multiplier=m["width_multiplier"],
            temporal_input=m["temporal_input"],
            temporal_conv=m["temporal_conv"],
            spatial_branch=m["spatial_branch"],
            seed=cfg["seed"],
        )
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def train_config(cfg: dict) -> TrainConfig:
    t = cfg["train"]
    return TrainConfig(t["lr"], t["weight_decay"], tuple(t["betas"]), t["eps"], t["epochs"], t["batch_size"],
                       t["eta_min"], t["reference_batch"], cfg["seed"])


def task_config(cfg: dict, split: str = "train") -> SyntheticTask:
    t = cfg["data"]["task"]
    # train and eval sets come from disjoint generator seeds
    seed = 2 * cfg["seed"] + (0 if split == "train" else 1)
    return SyntheticTask(t["kind"], t["resolution"], t["T"], t["noise"], seed, t["length"])


def loaders(cfg: dict) -> tuple[ClipLoader, ClipLoader]:
    d = cfg["data"]
    s = d["sampler"]
    flip = d["flip_p"] if d["flip_p"] is not None else TASK_FLIP_P[d["task"]["kind"]]
    size = cfg["model"]["resolution"]
    train = ClipLoader(SamplerSpec(s["kind"], s["T"], s["stride"], "train"), size, flip, d["augment"], d["scale"])
    ev = ClipLoader(SamplerSpec(s["kind"], s["T"], s["stride"], "eval"), size, 0.0, d["augment"], d["scale"])
    return train, ev


class RunManifest:
    """Append-only JSON record of one run, rewritten after every change."""

    def __init__(self, path, cfg: dict):
        self.path = Path(path)
        self.data = {
            "config_hash": config_hash(cfg),
            "code_version": code_version(),
            "config": cfg,
            "epochs": [],
            "artifacts": [],
            "status": "running",
        }
        self.flush()

    def add_epoch(self, record: dict) -> None:
        self.data["epochs"].append(record)
        self.flush()

    def add_artifact(self, path) -> None:
        name = str(Path(path).name)
        if name not in self.data["artifacts"]:
            self.data["artifacts"].append(name)
        self.flush()

    def finish(self, status: str = "ok", **extra) -> None:
        self.data["status"] = status
        self.data.update(extra)
        self.flush()

    def flush(self) -> None:
        tmp = self.path.with_suffix(".tmp")
        tmp.write_text(json.dumps(self.data, indent=2, sort_keys=True, default=_json_default))
        os.replace(tmp, self.path)


def _json_default(o):
    if hasattr(o, "item"):
        return o.item()
    raise TypeError(f"not JSON serializable: {type(o)}")
