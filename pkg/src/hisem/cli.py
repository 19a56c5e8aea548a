"""Command line entry point: ``hisem {gen,train,eval,describe,heatmap}``.

Errors are reported as one JSON line on stderr and a nonzero exit status.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from . import checkpoint
from . import tensor as T
from .data import SynthConfig, Vocabulary, build_vocab, load_dataset, save_dataset, synth_generate
from .evaluation import evaluate_records
from .hasd import MoEConfig
from .metrics import MetricReport, format_reports, rho_table
from .model import HiSemModel, ModelConfig
from .training import CurriculumConfig, load_model_state, train_loop

log = logging.getLogger("hisem")

SEED_ENV = "HISEM_SEED"


class ConfigError(ValueError):
    pass


# ------------------------------------------------------------------ config
_MODEL_KEYS = {f.name for f in fields(ModelConfig)} - {"moe", "vocab_size"}
_MOE_KEYS = {f.name for f in fields(MoEConfig)}
_TRAIN_KEYS = {f.name for f in fields(CurriculumConfig)} - {"seed"}
_TOP_KEYS = {"seed", "train_data", "val_data", "out_dir", "model", "moe", "training", "vocab_min_freq", "resume",
             "stop_epoch"}
_REQUIRED = ("train_data", "out_dir")


def _check_keys(section: dict, allowed: set, where: str) -> None:
    if not isinstance(section, dict):
        raise ConfigError(f"config section {where!r} must be an object")
    for key in section:
        if key not in allowed:
            raise ConfigError(f"unknown config key: {where + '.' if where else ''}{key}")


def load_run_config(path) -> dict:
    """Read and validate the run config; returns the merged (effective) document."""
    try:
        raw = json.loads(Path(path).read_text())
    except OSError as exc:
        raise OSError(f"cannot read config {path}: {exc.strerror}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    _check_keys(raw, _TOP_KEYS, "")
    for key in _REQUIRED:
        if key not in raw:
            raise ConfigError(f"missing config key: {key}")
    _check_keys(raw.get("model", {}), _MODEL_KEYS, "model")
    _check_keys(raw.get("moe", {}), _MOE_KEYS, "moe")
    _check_keys(raw.get("training", {}), _TRAIN_KEYS, "training")

    seed = int(os.environ.get(SEED_ENV, raw.get("seed", 0)))
    model = ModelConfig(**raw.get("model", {}), moe=MoEConfig(**raw.get("moe", {})))
    training = CurriculumConfig(**raw.get("training", {}), seed=seed)
    return {
        "seed": seed,
        "train_data": raw["train_data"],
        "val_data": raw.get("val_data"),
        "out_dir": raw["out_dir"],
        "resume": raw.get("resume"),
        "stop_epoch": raw.get("stop_epoch"),
        "vocab_min_freq": raw.get("vocab_min_freq", 1),
        "model": {k: v for k, v in model.to_dict().items() if k not in ("moe", "vocab_size")},
        "moe": asdict(model.moe),
        "training": {k: v for k, v in asdict(training).items() if k != "seed"},
    }


def _model_config(run: dict, vocab_size: int) -> ModelConfig:
    return ModelConfig(**run["model"], moe=MoEConfig(**run["moe"]), vocab_size=vocab_size)


def _require_file(path, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"{what} not found: {p}")
    return p


def load_trained(ckpt_path) -> tuple[HiSemModel, Vocabulary, dict]:
    """Model, vocabulary and run config from a checkpoint and its sidecar files."""
    ckpt_path = _require_file(ckpt_path, "checkpoint")
    run = json.loads(_require_file(ckpt_path.parent / "config.json", "config sidecar").read_text())
    vocab = Vocabulary.from_json(json.loads(_require_file(ckpt_path.parent / "vocab.json", "vocab sidecar").read_text()))
    model = HiSemModel(_model_config(run, len(vocab)), seed=run["seed"])
    load_model_state(model, checkpoint.load(ckpt_path))
    return model, vocab, run


def _find_pair(records, pair_id: str):
    for r in records:
        if r.id == pair_id:
            return r
    raise KeyError(f"unknown pair id: {pair_id}")


# ------------------------------------------------------------------ commands
def cmd_gen(args) -> int:
    seed = int(os.environ.get(SEED_ENV, args.seed))
    cfg = SynthConfig(
        grid=(args.height, args.width),
        dim=args.dim,
        noise=args.noise,
        signal=args.signal,
        change_fraction=args.change_fraction,
        world_seed=args.world_seed,
    )
    records = synth_generate(args.n, cfg, seed=seed)
    save_dataset(records, args.out)
    changed = sum(r.label for r in records)
    print(json.dumps({"records": len(records), "changed": changed, "unchanged": len(records) - changed,
                      "out": str(args.out)}))
    return 0


def cmd_train(args) -> int:
    run = load_run_config(args.config)
    train_path = _require_file(run["train_data"], "training data")
    val_path = _require_file(run["val_data"], "validation data") if run["val_data"] else None
    records = load_dataset(train_path)
    if not records:
        raise ValueError(f"training data {train_path} is empty")
    val_records = load_dataset(val_path) if val_path else None
    resume = checkpoint.load(_require_file(run["resume"], "resume checkpoint")) if run["resume"] else None

    vocab = build_vocab([c for r in records for c in r.captions], run["vocab_min_freq"])
    model = HiSemModel(_model_config(run, len(vocab)), seed=run["seed"])
    cfg = CurriculumConfig(**run["training"], seed=run["seed"])
    out = Path(run["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(run, indent=2, sort_keys=True))
    (out / "vocab.json").write_text(json.dumps(vocab.to_json()))
    report = train_loop(model, records, vocab, cfg, out, val_records, resume=resume, stop_epoch=run["stop_epoch"])
    last = report.rows[-1] if report.rows else {}
    print(json.dumps({"checkpoint": str(out / "checkpoint.hsem"), "epochs": len(report.rows), "last": last}))
    return 0


def _content_hash(*paths) -> str:
    h = hashlib.sha256()
    for p in paths:
        h.update(Path(p).read_bytes())
    return h.hexdigest()[:16]


def cmd_eval(args) -> int:
    model, vocab, _ = load_trained(args.checkpoint)
    data = _require_file(args.data, "data")
    records = load_dataset(data)
    if not records:
        raise ValueError(f"evaluation data {data} is empty")
    reports, preds = evaluate_records(model, records, vocab, routing=args.routing)
    out = Path(args.out) if args.out else Path(args.checkpoint).parent
    out.mkdir(parents=True, exist_ok=True)
    key = _content_hash(args.checkpoint, data)
    doc = {
        "routing": args.routing,
        "hash": key,
        "reports": {k: v.to_dict() for k, v in reports.items()},
        "predictions": dict(zip((r.id for r in records), preds)),
    }
    (out / f"eval_{key}_{args.routing}.json").write_text(json.dumps(doc, indent=2))
    result = {"routing": args.routing, "hash": key, "reports": doc["reports"]}

    other = out / f"eval_{key}_{'gt' if args.routing == 'pre' else 'pre'}.json"
    if other.is_file():
        both = {args.routing: reports, json.loads(other.read_text())["routing"]: _reports_from(other)}
        rho = rho_table(both["pre"], both["gt"])
        (out / f"rho_{key}.json").write_text(json.dumps(rho, indent=2))
        (out / "rho.json").write_text(json.dumps({"hash": key, "rho": rho}, indent=2))
        result["rho"] = rho
    if args.table:
        print(format_reports(reports), file=sys.stderr)
    print(json.dumps(result))
    return 0


def _reports_from(path) -> dict[str, MetricReport]:
    doc = json.loads(Path(path).read_text())
    return {k: MetricReport(**v) for k, v in doc["reports"].items()}


def cmd_describe(args) -> int:
    model, vocab, _ = load_trained(args.checkpoint)
    rec = _find_pair(load_dataset(_require_file(args.data, "data")), args.pair_id)
    override = np.array([rec.label]) if args.routing == "gt" else None
    ids, decisions = model.generate(rec.f_t1[None], rec.f_t2[None], override)
    d = decisions[0]
    print(json.dumps({
        "pair_id": rec.id,
        "caption": vocab.decode(ids[0]),
        "path": d.path.name.lower(),
        "source": d.source,
        "path_probs": [float(v) for v in d.path_probs],
    }))
    return 0


def write_pgm(path, image: np.ndarray) -> None:
    """Binary P5 graymap of ``image`` min-max scaled to 0..255 (all zero when flat)."""
    image = np.asarray(image, dtype=np.float64)
    lo, hi = float(image.min()), float(image.max())
    if hi > lo:
        scaled = np.round((image - lo) / (hi - lo) * 255.0)
    else:
        scaled = np.zeros_like(image)
    h, w = image.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + scaled.astype(np.uint8).tobytes())


def diff_maps(model: HiSemModel, f_t1, f_t2) -> list[np.ndarray]:
    """Per-token mean |F_T1 - F_T2|: BDAM input first, then after each layer."""
    h, w = model.cfg.grid
    with T.no_grad():
        res = model.forward(f_t1[None], f_t2[None], trace=True)
    return [np.abs(x.f_t1.data[0] - x.f_t2.data[0]).mean(axis=-1).reshape(h, w) for x in res.bdam_trace]


def cmd_heatmap(args) -> int:
    model, _, _ = load_trained(args.checkpoint)
    rec = _find_pair(load_dataset(_require_file(args.data, "data")), args.pair_id)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for i, m in enumerate(diff_maps(model, rec.f_t1, rec.f_t2)):
        name = out / ("baseline.pgm" if i == 0 else f"layer{i}.pgm")
        write_pgm(name, m)
        written.append(str(name))
    print(json.dumps({"pair_id": rec.id, "files": written}))
    return 0


# ------------------------------------------------------------------ parser
def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hisem", description="Caption changes between bi-temporal feature grids.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic dataset")
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.add_argument("--height", type=int, default=7)
    g.add_argument("--width", type=int, default=7)
    g.add_argument("--dim", type=int, default=64)
    g.add_argument("--noise", type=float, default=0.1)
    g.add_argument("--signal", type=float, default=1.0)
    g.add_argument("--change-fraction", type=float, default=0.5)
    g.add_argument("--world-seed", type=int, default=0)
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train from a JSON run config")
    t.add_argument("--config", required=True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score a checkpoint on a dataset")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--routing", choices=("pre", "gt"), default="pre")
    e.add_argument("--out", help="directory for cached reports (default: next to the checkpoint)")
    e.add_argument("--table", action="store_true", help="also print a readable table to stderr")
    e.set_defaults(func=cmd_eval)

    d = sub.add_parser("describe", help="caption one pair")
    d.add_argument("--checkpoint", required=True)
    d.add_argument("--data", required=True)
    d.add_argument("--pair-id", required=True)
    d.add_argument("--routing", choices=("pre", "gt"), default="pre")
    d.set_defaults(func=cmd_describe)

    h = sub.add_parser("heatmap", help="dump difference maps before and after each BDAM layer")
    h.add_argument("--checkpoint", required=True)
    h.add_argument("--data", required=True)
    h.add_argument("--pair-id", required=True)
    h.add_argument("--out", required=True)
    h.set_defaults(func=cmd_heatmap)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ValueError, KeyError, OSError, TypeError, FloatingPointError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else str(exc)
        print(json.dumps({"error": type(exc).__name__, "message": msg, "command": args.command}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
