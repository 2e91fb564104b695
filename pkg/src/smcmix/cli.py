"""``smcmix`` command line: synth, train, eval, analyze, mix-preview, verify.

Every command accepts ``--config`` (a JSON object), and flags override
values from that file. Each run writes ``<out>.manifest.json`` next to its
main artifact. Exit codes: 0 ok, 1 runtime error, 2 config error, 3
verification failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import sys
import time
from pathlib import Path
from typing import Any

import jsonschema
import numpy as np

from . import analysis, dataset, verify
from .mixer import AugmentPolicy, make_training_view
from .trainer import ConfigError, TrainConfig, canonical_json, evaluate, load_checkpoint, save_checkpoint, train

EXIT_OK, EXIT_ERROR, EXIT_CONFIG, EXIT_VERIFY = 0, 1, 2, 3

SYNTH_DEFAULTS = {
    "classes": 10,
    "rho": 100.0,
    "n_max": 500,
    "image_size": 16,
    "channels": 3,
    "seed": 0,
    "balanced_per_class": None,
}
MIX_DEFAULTS = {
    "count": 16,
    "alpha": 1.0,
    "gamma": 1.0,
    "full_range": False,
    "mix_op": "resize",
    "placement": "before-mix",
    "pad": 4,
    "flip_prob": 0.5,
    "seed": 0,
}
VERIFY_DEFAULTS = {"quick": False, "seed": 0}

_int_min = lambda lo: {"type": "integer", "minimum": lo}  # noqa: E731
SYNTH_SCHEMA = {
    "type": "object",
    "properties": {
        "classes": _int_min(2),
        "rho": {"type": "number", "minimum": 1},
        "n_max": _int_min(1),
        "image_size": _int_min(8),
        "channels": _int_min(1),
        "seed": _int_min(0),
        "balanced_per_class": {"oneOf": [{"type": "null"}, _int_min(1)]},
    },
}
VERIFY_SCHEMA = {"type": "object", "properties": {"quick": {"type": "boolean"}, "seed": _int_min(0)}}


class CommandFailed(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


# ------------------------------------------------------------------- config


def _normalize_keys(data: dict) -> dict:
    return {str(k).replace("-", "_"): v for k, v in data.items()}


def _read_config_file(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError("<file>", f"{path} is not valid JSON: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError("<file>", f"{path} must hold a JSON object")
    return _normalize_keys(data)


def merge_config(defaults: dict, file_values: dict, flag_values: dict) -> dict:
    """defaults < config file < flags; unknown keys are hard errors."""
    for key in file_values:
        if key not in defaults:
            raise ConfigError(key, "unknown key")
    merged = {**defaults, **file_values}
    merged.update({k: v for k, v in flag_values.items() if v is not None})
    return merged


def validate(cfg: dict, schema: dict) -> dict:
    try:
        jsonschema.validate(cfg, schema)
    except jsonschema.ValidationError as exc:
        raise ConfigError(str(exc.path[0]) if exc.path else "?", exc.message) from None
    return cfg


def _flag_values(args: argparse.Namespace, keys) -> dict:
    return {k: getattr(args, k, None) for k in keys}


# ------------------------------------------------------------------ manifest


def manifest_path(out: str) -> Path:
    return Path(f"{out}.manifest.json")


def write_manifest(command: str, config: dict, artifacts: dict, wall: float, status: int, out: str) -> None:
    text = canonical_json(config)
    doc = {
        "command": command,
        "config": text,
        "config-hash": hashlib.sha256(text.encode()).hexdigest(),
        "artifacts": artifacts,
        "wall_time": round(wall, 3),
        "exit_status": status,
    }
    manifest_path(out).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# ----------------------------------------------------------------- commands


def cmd_synth(args) -> tuple[dict, dict]:
    cfg = merge_config(SYNTH_DEFAULTS, _read_config_file(args.config), _flag_values(args, SYNTH_DEFAULTS))
    validate(cfg, SYNTH_SCHEMA)
    out = Path(args.out)
    semantic_path = Path(args.semantic or f"{args.out}.semantic.txt")
    if cfg["balanced_per_class"]:
        data = dataset.synth_balanced(cfg["classes"], cfg["balanced_per_class"], cfg["image_size"], cfg["seed"], cfg["channels"])
        params = dataset.class_parameters(cfg["classes"], cfg["channels"], cfg["seed"])
        semantic = dataset.semantic_from_parameters(params)
    else:
        data, _, semantic = dataset.synth_longtail(
            cfg["classes"], cfg["rho"], cfg["n_max"], cfg["image_size"], cfg["seed"], cfg["channels"]
        )
    dataset.save_dataset(data, out)
    dataset.save_semantic_vectors(semantic, semantic_path)
    _say(args, f"wrote {out} with counts {data.counts.tolist()}")
    return cfg, {"dataset": str(out), "semantic": str(semantic_path)}


def _train_flag_values(args) -> dict:
    values = {}
    for f in dataclasses.fields(TrainConfig):
        v = getattr(args, f.name, None)
        if v is not None:
            values[f.name] = v
    return values


def cmd_train(args) -> tuple[dict, dict]:
    file_values = _read_config_file(args.config)
    data = TrainConfig().to_dict()
    cfg_dict = merge_config(data, file_values, _train_flag_values(args))
    config = TrainConfig.from_dict(cfg_dict)
    train_set = dataset.load_dataset(args.data)
    eval_set = dataset.load_dataset(args.eval_data) if args.eval_data else None
    resume = load_checkpoint(args.resume) if args.resume else None
    log_path = Path(f"{args.out}.log.jsonl")

    def report(entry):
        _say(args, json.dumps(entry, sort_keys=True))

    ck, log = train(config, train_set, eval_set, resume=resume, stop_after=args.stop_after, on_epoch=report)
    save_checkpoint(ck, args.out)
    log_path.write_text("".join(canonical_json(e) + "\n" for e in log), encoding="utf-8")
    return config.to_dict(), {"checkpoint": str(args.out), "log": str(log_path)}


def cmd_eval(args) -> tuple[dict, dict]:
    ck = load_checkpoint(args.checkpoint)
    data = dataset.load_dataset(args.data)
    result = evaluate(ck, data)
    doc = {"accuracy": result["splits"], "per_class": result["per_class"], "config-hash": ck.config.config_hash()}
    Path(args.out).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    _say(args, json.dumps(doc["accuracy"], sort_keys=True))
    return ck.config.to_dict(), {"report": str(args.out)}


def cmd_analyze(args) -> tuple[dict, dict]:
    ck = load_checkpoint(args.checkpoint)
    data = dataset.load_dataset(args.data)
    semantic = dataset.load_semantic_vectors(args.semantic, data.num_classes)
    report = analysis.accuracy_report(ck, data, semantic)
    Path(args.out).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    _say(args, analysis.render_report(report))
    return ck.config.to_dict(), {"report": str(args.out)}


def cmd_mix_preview(args) -> tuple[dict, dict]:
    cfg = merge_config(MIX_DEFAULTS, _read_config_file(args.config), _flag_values(args, MIX_DEFAULTS))
    # Reuse the training schema to validate the shared mixing keys.
    TrainConfig(**{k: v for k, v in cfg.items() if k != "count"})
    if not isinstance(cfg["count"], int) or cfg["count"] < 1:
        raise ConfigError("count", "must be a positive integer")
    data = dataset.load_dataset(args.data)
    rng = np.random.default_rng(np.random.SeedSequence([cfg["seed"], 11]))
    q = dataset.foreground_sampling_probs(data.counts, cfg["gamma"])
    fg, bg = dataset.sample_mix_indices(data, q, cfg["count"], rng)
    policy = AugmentPolicy(cfg["pad"], cfg["flip_prob"], cfg["placement"])
    views, records = [], []
    for f, b in zip(fg, bg):
        view, rec = make_training_view(
            data.pixels[f], data.pixels[b], int(data.labels[f]), int(data.labels[b]), data.num_classes,
            policy, cfg["alpha"], rng, mix_op=cfg["mix_op"], full_range=cfg["full_range"],
        )
        views.append(view)
        records.append({"fg_index": int(f), "bg_index": int(b), **rec.to_dict()})
    out = Path(args.out)
    # Stored in the dataset format, labelled by foreground class.
    fg_labels = [r["fg_class"] for r in records]
    dataset.save_dataset(dataset.Dataset(np.clip(np.stack(views), 0.0, 1.0), fg_labels, data.num_classes), out)
    sidecar = Path(f"{args.out}.records.jsonl")
    sidecar.write_text("".join(canonical_json(r) + "\n" for r in records), encoding="utf-8")
    _say(args, f"wrote {len(views)} blended views to {out}")
    return cfg, {"views": str(out), "records": str(sidecar)}


def cmd_verify(args) -> tuple[dict, dict]:
    cfg = merge_config(VERIFY_DEFAULTS, _read_config_file(args.config), _flag_values(args, VERIFY_DEFAULTS))
    validate(cfg, VERIFY_SCHEMA)
    results = verify.run_suite(quick=bool(cfg["quick"]), seed=int(cfg["seed"]))
    doc = {"passed": all(r.passed for r in results), "oracles": [r.to_dict() for r in results]}
    Path(args.out).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    for r in results:
        _say(args, f"{'PASS' if r.passed else 'FAIL'}  {r.name:<36} {r.value:.3g} (limit {r.threshold:.3g}, {r.seconds:.2f}s) {r.detail}")
    failed = [r.name for r in results if not r.passed]
    if failed:
        raise CommandFailed(EXIT_VERIFY, "failed oracles: " + ", ".join(failed))
    return cfg, {"report": str(args.out)}


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "analyze": cmd_analyze,
    "mix-preview": cmd_mix_preview,
    "verify": cmd_verify,
}


# ------------------------------------------------------------------- parser


def _say(args, text: str) -> None:
    if not args.quiet:
        print(text)


def _shared(p: argparse.ArgumentParser, out_required: bool = True, out_default: str | None = None) -> None:
    p.add_argument("--config", help="JSON config file; flags override its values")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", "-o", required=out_required, default=out_default, help="main output path")
    p.add_argument("--quiet", action="store_true")


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    for f in dataclasses.fields(TrainConfig):
        if f.name == "seed":
            continue
        flag = "--" + f.name.replace("_", "-")
        default = f.default if f.default is not dataclasses.MISSING else f.default_factory()
        if isinstance(default, bool):
            p.add_argument(flag, dest=f.name, action=argparse.BooleanOptionalAction, default=None)
        elif f.name in ("decay_epochs", "encoder_widths"):
            p.add_argument(flag, dest=f.name, type=int, nargs="+")
        elif f.name == "crop_scale":
            p.add_argument(flag, dest=f.name, type=float, nargs=2)
        elif isinstance(default, int):
            p.add_argument(flag, dest=f.name, type=int)
        elif isinstance(default, float):
            p.add_argument(flag, dest=f.name, type=float)
        else:
            p.add_argument(flag, dest=f.name)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="smcmix", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a long-tailed (or balanced) synthetic dataset")
    _shared(p)
    p.add_argument("--classes", type=int)
    p.add_argument("--rho", type=float)
    p.add_argument("--n-max", dest="n_max", type=int)
    p.add_argument("--image-size", dest="image_size", type=int)
    p.add_argument("--channels", type=int)
    p.add_argument("--balanced-per-class", dest="balanced_per_class", type=int, help="write a balanced set instead")
    p.add_argument("--semantic", help="semantic vector output (default <out>.semantic.txt)")

    p = sub.add_parser("train", help="train a model; writes a checkpoint and <out>.log.jsonl")
    _shared(p)
    p.add_argument("--data", required=True)
    p.add_argument("--eval-data", dest="eval_data", help="held-out set scored after every epoch")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--stop-after", dest="stop_after", type=int, help="stop once this many epochs are done")
    _add_train_flags(p)

    p = sub.add_parser("eval", help="per-split accuracy of a checkpoint")
    _shared(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)

    p = sub.add_parser("analyze", help="inter-class and semantic similarity scores with accuracy")
    _shared(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--semantic", required=True)

    p = sub.add_parser("mix-preview", help="write blended samples and their mix records")
    _shared(p)
    p.add_argument("--data", required=True)
    p.add_argument("--count", type=int)
    p.add_argument("--alpha", type=float)
    p.add_argument("--gamma", type=float)
    p.add_argument("--full-range", dest="full_range", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--mix-op", dest="mix_op")
    p.add_argument("--placement")
    p.add_argument("--pad", type=int)
    p.add_argument("--flip-prob", dest="flip_prob", type=float)

    p = sub.add_parser("verify", help="run the built-in oracle suite")
    _shared(p, out_required=False, out_default="verify.json")
    p.add_argument("--quick", action="store_true", default=None)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    start = time.perf_counter()
    config: dict[str, Any] = {}
    artifacts: dict[str, str] = {}
    try:
        config, artifacts = COMMANDS[args.command](args)
        status = EXIT_OK
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        status = EXIT_CONFIG
    except CommandFailed as exc:
        print(f"error: {exc}", file=sys.stderr)
        status = exc.code
    except Exception as exc:  # reported through the manifest and exit status
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        status = EXIT_ERROR
    write_manifest(args.command, config, artifacts, time.perf_counter() - start, status, args.out)
    return status


if __name__ == "__main__":
    sys.exit(main())
