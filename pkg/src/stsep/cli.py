"""Command-line entry point: ``stsep {train,eval,ablate,count,retrieve,gendata}``.

Exit codes: 0 success, 2 configuration error, 3 training divergence, 4 I/O error.
"""

from __future__ import annotations

import argparse
import copy
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

from stsep import config as C
from stsep.data import SyntheticTask, generate, read_container, write_container
from stsep.errors import ConfigError, DivergenceError, FormatError
from stsep.evaluation import evaluate, extract_dataset_features, knn_recall, write_metrics_csv
from stsep.model import Model, count_flops, count_params
from stsep.train import AdamW, init_temporal_from_spatial, load_checkpoint, read_checkpoint, save_checkpoint, train_loop

log = logging.getLogger("stsep")

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_IO = 0, 2, 3, 4

STAGE_ROWS = ("1", "1-2", "1-3", "1-4", "1-5", "2-5", "3-5", "4-5", "5")


def _limit_threads():
    n = os.environ.get("STSEP_THREADS")
    if not n:
        return None
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover - declared dependency
        return None
    return threadpool_limits(int(n))


# dataset and model helpers --------------------------------------------------

def datasets(cfg: dict):
    d = cfg["data"]
    if d["train_path"]:
        train = read_container(d["train_path"])
    else:
        train = generate(C.task_config(cfg, "train"), d["train_count"]) if d["train_count"] else []
    if d["eval_path"]:
        ev = read_container(d["eval_path"])
    else:
        ev = generate(C.task_config(cfg, "eval"), d["eval_count"]) if d["eval_count"] else []
    return train, ev


def build(cfg: dict) -> Model:
    model = Model(C.backbone_config(cfg))
    if cfg["model"]["init_temporal"] and any(model.config.policy.stsep):
        init_temporal_from_spatial(model)
    return model


def run_training(cfg: dict, out_dir: Path) -> tuple[int, list]:
    """Train one configuration into ``out_dir``; returns (exit code, metrics history)."""
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = C.RunManifest(out_dir / "manifest.json", cfg)
    model = build(cfg)
    tcfg = C.train_config(cfg)
    train, ev = datasets(cfg)
    tl, el = C.loaders(cfg)
    ckpt = out_dir / "checkpoint.stck"
    meta = {"seed": cfg["seed"], "config_hash": C.config_hash(cfg), "config": cfg}
    history = []

    def on_epoch(epoch, rec, opt):
        history.append(rec)
        manifest.add_epoch(rec.to_dict())
        save_checkpoint(ckpt, model, opt, dict(meta, epoch=epoch))
        manifest.add_artifact(ckpt)

    opt = AdamW(model.parameters(), tcfg)
    save_checkpoint(ckpt, model, opt, dict(meta, epoch=0))
    manifest.add_artifact(ckpt)
    try:
        train_loop(model, train, ev, tcfg, tl, el, optimizer=opt, on_epoch=on_epoch)
    except DivergenceError as exc:
        manifest.finish("diverged", error=str(exc))
        write_metrics_csv(out_dir / "metrics.csv", history)
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED, history
    write_metrics_csv(out_dir / "metrics.csv", history)
    manifest.add_artifact(out_dir / "metrics.csv")
    final = {}
    if ev and cfg["eval"]["M"] > 1 and tcfg.epochs > 0:
        rec = evaluate(model, ev, el, M=cfg["eval"]["M"])
        final = {"multiclip_top1": rec.top1, "multiclip_top5": rec.top5}
    manifest.finish("ok", **final)
    return EXIT_OK, history


def _model_from_checkpoint(path, overrides=()):
    _, _, meta = read_checkpoint(path)
    if "config" not in meta:
        raise ConfigError(f"{path}: checkpoint carries no config")
    cfg = C.validate(meta["config"])
    for item in overrides:
        key, value = C.parse_override(item)
        C.set_path(cfg, key, value)
    cfg = C.validate(cfg)
    model = Model(C.backbone_config(cfg))
    load_checkpoint(path, model)
    return model, cfg


# subcommands ----------------------------------------------------------------

def cmd_train(args) -> int:
    cfg = C.load_config(args.config, args.set)
    if args.output_dir:
        cfg["output_dir"] = args.output_dir
    code, history = run_training(cfg, Path(cfg["output_dir"]))
    if history:
        print(f"final eval top1 {history[-1].top1:.4f}")
    print(f"wrote {cfg['output_dir']}")
    return code


def cmd_eval(args) -> int:
    model, cfg = _model_from_checkpoint(args.checkpoint, args.set)
    records = read_container(args.data) if args.data else datasets(cfg)[1]
    _, el = C.loaders(cfg)
    M = args.M if args.M is not None else cfg["eval"]["M"]
    rec = evaluate(model, records, el, M=M)
    print(f"clips {M}  videos {len(records)}  top1 {rec.top1:.4f}  top5 {rec.top5:.4f}  loss {rec.loss:.4f}")
    return EXIT_OK


def _sweep(mode: str, spec: str | None):
    if mode in ("ns", "rns"):
        lo, hi = (0, 5) if mode == "ns" else (1, 5)
        if spec:
            a, _, b = spec.replace("..", "-").partition("-")
            lo, hi = int(a), int(b or a)
        return [(f"{mode}{k}", {"mode": mode if k else "vanilla", "k": k, "stsep_stages": []}) for k in range(lo, hi + 1)]
    if mode == "stsep-stages":
        rows = spec.split(",") if spec else list(STAGE_ROWS)
        out = []
        for row in rows:
            a, _, b = row.strip().partition("-")
            stages = list(range(int(a), int(b or a) + 1))
            out.append((f"stage{row.strip()}", stages))
        return out
    raise ConfigError(f"unknown ablation mode {mode!r}")


def cmd_ablate(args) -> int:
    base = C.load_config(args.config, args.set)
    root = Path(args.output_dir or base["output_dir"])
    rows = []
    for name, value in _sweep(args.mode, args.range):
        cfg = copy.deepcopy(base)
        if args.mode == "stsep-stages":
            cfg["model"]["policy"]["stsep_stages"] = value
        else:
            cfg["model"]["policy"] = value
        cfg = C.validate(cfg)
        out = root / name
        cfg["output_dir"] = str(out)
        code, history = run_training(cfg, out)
        params, flops = full_scale_counts(cfg)
        rec = history[-1] if history else None
        rows.append({
            "run": name,
            "params": count_params(Model(C.backbone_config(cfg))),
            "full_params": params,
            "full_flops": flops,
            "top1": rec.top1 if rec else float("nan"),
            "top5": rec.top5 if rec else float("nan"),
            "status": "ok" if code == EXIT_OK else "diverged",
        })
    root.mkdir(parents=True, exist_ok=True)
    keys = list(rows[0])
    with open(root / "summary.csv", "w") as fh:
        fh.write(",".join(keys) + "\n")
        for r in rows:
            fh.write(",".join(str(r[k]) for k in keys) + "\n")
    lines = [f"{'run':<10}{'params':>10}{'full':>9}{'FLOPs':>9}{'top1':>8}{'top5':>8}  status"]
    for r in rows:
        lines.append(f"{r['run']:<10}{r['params']:>10}{r['full_params'] / 1e6:>8.2f}M{r['full_flops'] / 1e9:>8.2f}G"
                     f"{100 * r['top1']:>8.1f}{100 * r['top5']:>8.1f}  {r['status']}")
    text = "\n".join(lines)
    (root / "summary.txt").write_text(text + "\n")
    print(text)
    return EXIT_OK if all(r["status"] == "ok" for r in rows) else EXIT_DIVERGED


def full_scale_counts(cfg: dict) -> tuple[int, int]:
    bc = dataclasses.replace(C.backbone_config(cfg), width_multiplier=1.0, num_classes=174, T=16, resolution=128)
    full = Model(bc)
    return count_params(full), count_flops(full, 16, 128)


def cmd_count(args) -> int:
    cfg = C.load_config(args.config, args.set)
    params, flops = full_scale_counts(cfg)
    model = Model(C.backbone_config(cfg))
    T = cfg["data"]["sampler"]["T"]
    res = cfg["model"]["resolution"]
    print(f"policy  {model.config.policy.name}")
    print(f"full scale (174 classes, T=16, 128x128): params {params / 1e6:.2f}M ({params})  FLOPs {flops / 1e9:.2f}G ({flops})")
    print(f"configured ({model.config.num_classes} classes, T={T}, {res}x{res}, width x{model.config.width_multiplier}): "
          f"params {count_params(model)}  FLOPs {count_flops(model, T, res)}")
    return EXIT_OK


def cmd_retrieve(args) -> int:
    model, cfg = _model_from_checkpoint(args.checkpoint, args.set)
    records = read_container(args.data) if args.data else datasets(cfg)[1]
    _, el = C.loaders(cfg)
    feats = extract_dataset_features(model, records, el)
    labels = [r.label for r in records]
    ks = [int(k) for k in args.ks.split(",")] if args.ks else cfg["eval"]["ks"]
    res = knn_recall(feats, feats, labels, labels, ks, same_set=True)
    print("  ".join(f"R@{k} {100 * v:.1f}" for k, v in res.recall_at.items()))
    return EXIT_OK


def cmd_gendata(args) -> int:
    task = SyntheticTask(args.task, args.resolution, args.T, args.noise, args.seed, args.length)
    records = generate(task, args.count)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_container(out, records)
    manifest = {"task": task.__dict__, "count": len(records),
                "per_class": {str(c): sum(r.label == c for r in records) for c in range(task.num_classes)}}
    out.with_suffix(".json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    print(f"wrote {len(records)} records to {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="stsep", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("--config", help="JSON config file")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="dotted override, e.g. model.tau=2")

    sp = sub.add_parser("train", help="train one configuration")
    with_config(sp)
    sp.add_argument("--output-dir")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="multi-clip accuracy of a checkpoint")
    sp.add_argument("checkpoint")
    sp.add_argument("--data", help="STV1 container (default: regenerate the eval split)")
    sp.add_argument("--M", type=int)
    sp.add_argument("--set", action="append", default=[])
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("ablate", help="NS/rNS or separable-stage sweep")
    sp.add_argument("mode", choices=["ns", "rns", "stsep-stages"])
    sp.add_argument("--range", help="k range such as 0-2, or stage rows such as 1,1-2,5")
    with_config(sp)
    sp.add_argument("--output-dir")
    sp.set_defaults(func=cmd_ablate)

    sp = sub.add_parser("count", help="parameters and FLOPs")
    with_config(sp)
    sp.set_defaults(func=cmd_count)

    sp = sub.add_parser("retrieve", help="KNN Recall@k of a checkpoint's features")
    sp.add_argument("checkpoint")
    sp.add_argument("--data")
    sp.add_argument("--ks", help="comma-separated k values")
    sp.add_argument("--set", action="append", default=[])
    sp.set_defaults(func=cmd_retrieve)

    sp = sub.add_parser("gendata", help="write a synthetic STV1 container")
    sp.add_argument("--task", default="playback2")
    sp.add_argument("--count", type=int, default=100)
    sp.add_argument("--resolution", type=int, default=32)
    sp.add_argument("--T", type=int, default=8)
    sp.add_argument("--length", type=int)
    sp.add_argument("--noise", type=float, default=0.05)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_gendata)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    limits = _limit_threads()
    try:
        return args.func(args)
    except (ConfigError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (OSError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    finally:
        if limits is not None:
            limits.restore_original_limits()


if __name__ == "__main__":
    sys.exit(main())
