"""One-stage training: blended views, joint classification + contrastive loss, SGD."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import jsonschema
import numpy as np

from . import pairloss
from .dataset import ClassStats, Dataset, SPLIT_NAMES, foreground_sampling_probs, sample_mix_indices, split_classes
from .mixer import MIX_OPS, PLACEMENTS, AugmentPolicy, make_training_view
from .model import ModelParams, classify, encode, init_model, predict_logits, project
from .tensor import ContractViolation, GradTape, NumericFault, SgdState, Tensor, eval_with_grad, sgd_step

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"SMCK"
CHECKPOINT_VERSION = 1


class ConfigError(ValueError):
    def __init__(self, key: str, message: str):
        super().__init__(f"config key '{key}': {message}")
        self.key = key


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, records: list[dict], cause: str):
        super().__init__(f"loss diverged at step {step} ({cause}); batch of {len(records)} mix records attached")
        self.step = step
        self.records = records


@dataclass
class TrainConfig:
    epochs: int = 60
    batch_size: int = 64
    lr: float = 0.1
    decay_epochs: list[int] = field(default_factory=lambda: [40, 50])
    decay_factor: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    eta: float = 0.1
    tau: float = 0.1
    tau_prime: float = 10.0
    alpha: float = 1.0
    gamma: float = 1.0
    full_range: bool = False
    mix_op: str = "resize"
    placement: str = "before-mix"
    weighting: str = "weighted"
    pad: int = 4
    flip_prob: float = 0.5
    crop_scale: list[float] | None = None
    two_views: bool = True
    shared_lambda: bool = False
    logit_adjust: bool = True
    prior: str = "blended"
    eval_with_prior: bool = False
    encoder_widths: list[int] = field(default_factory=lambda: [256, 128])
    head_dim: int = 128
    seed: int = 0
    t_many: float = 100
    t_few: float = 20
    is_metric: str = "l2"
    centers_from_embeddings: bool = False

    def __post_init__(self):
        self.decay_epochs = list(self.decay_epochs)
        self.encoder_widths = list(self.encoder_widths)
        if self.crop_scale is not None:
            self.crop_scale = list(self.crop_scale)
        try:
            jsonschema.validate(self.to_dict(), CONFIG_SCHEMA)
        except jsonschema.ValidationError as exc:
            key = str(exc.path[0]) if exc.path else "?"
            raise ConfigError(key, exc.message) from None
        if not self.t_many > self.t_few:
            raise ConfigError("t_many", "must exceed t_few")

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        for key in data:
            if key not in names:
                raise ConfigError(key, "unknown key")
        return cls(**data)

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def replace(self, **changes) -> "TrainConfig":
        return TrainConfig.from_dict({**self.to_dict(), **changes})

    def canonical_json(self) -> str:
        return canonical_json(self.to_dict())

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()

    def policy(self) -> AugmentPolicy:
        scale = tuple(self.crop_scale) if self.crop_scale is not None else None
        return AugmentPolicy(self.pad, self.flip_prob, self.placement, scale)


_num = {"type": "number"}
CONFIG_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "TrainConfig",
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "epochs": {"type": "integer", "minimum": 1},
        "batch_size": {"type": "integer", "minimum": 1},
        "lr": {"type": "number", "minimum": 0},
        "decay_epochs": {"type": "array", "items": {"type": "integer", "minimum": 0}},
        "decay_factor": {"type": "number", "exclusiveMinimum": 0},
        "momentum": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
        "weight_decay": {"type": "number", "minimum": 0},
        "eta": {"type": "number", "minimum": 0},
        "tau": {"type": "number", "exclusiveMinimum": 0},
        "tau_prime": {"type": "number", "exclusiveMinimum": 0},
        "alpha": {"type": "number", "exclusiveMinimum": 0},
        "gamma": {"type": "number", "minimum": 0},
        "full_range": {"type": "boolean"},
        "mix_op": {"enum": list(MIX_OPS)},
        "placement": {"enum": list(PLACEMENTS)},
        "weighting": {"enum": list(pairloss.SCHEMES)},
        "pad": {"type": "integer", "minimum": 0},
        "flip_prob": {"type": "number", "minimum": 0, "maximum": 1},
        "crop_scale": {
            "oneOf": [
                {"type": "null"},
                {"type": "array", "items": {**_num, "exclusiveMinimum": 0, "maximum": 1}, "minItems": 2, "maxItems": 2},
            ]
        },
        "two_views": {"type": "boolean"},
        "shared_lambda": {"type": "boolean"},
        "logit_adjust": {"type": "boolean"},
        "prior": {"enum": ["blended", "dataset"]},
        "eval_with_prior": {"type": "boolean"},
        "encoder_widths": {"type": "array", "items": {"type": "integer", "minimum": 1}, "minItems": 1},
        "head_dim": {"type": "integer", "minimum": 1},
        "seed": {"type": "integer", "minimum": 0},
        "t_many": _num,
        "t_few": {"type": "number", "minimum": 0},
        "is_metric": {"enum": ["l2", "raw-sum"]},
        "centers_from_embeddings": {"type": "boolean"},
    },
}


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


@dataclass
class Checkpoint:
    params: ModelParams
    config: TrainConfig
    stats: ClassStats
    epoch: int
    rng_state: dict
    log: list[dict]
    velocity: list[np.ndarray]


def lr_at(config: TrainConfig, epoch: int) -> float:
    drops = sum(1 for e in config.decay_epochs if epoch >= e)
    return config.lr * config.decay_factor**drops


def _build_views(dataset: Dataset, config: TrainConfig, q: np.ndarray, rng: np.random.Generator):
    policy = config.policy()
    C = dataset.num_classes
    if config.mix_op == "none":
        fg_idx = rng.integers(0, len(dataset), config.batch_size)
        bg_idx = fg_idx
    else:
        fg_idx, bg_idx = sample_mix_indices(dataset, q, config.batch_size, rng)
    n_views = 2 if config.two_views else 1
    views, records = [[] for _ in range(n_views)], [[] for _ in range(n_views)]
    for f, b in zip(fg_idx, bg_idx):
        lam = None
        for v in range(n_views):
            pixels, rec = make_training_view(
                dataset.pixels[f],
                dataset.pixels[b],
                int(dataset.labels[f]),
                int(dataset.labels[b]),
                C,
                policy,
                config.alpha,
                rng,
                mix_op=config.mix_op,
                full_range=config.full_range,
                lam=lam,
            )
            if config.shared_lambda:
                lam = rec.lambda_sampled
            views[v].append(pixels)
            records[v].append(rec)
    images = np.stack([p for group in views for p in group])
    flat_records = [r for group in records for r in group]
    return images, flat_records


def compensation_log_prior(stats: ClassStats, config: TrainConfig) -> np.ndarray | None:
    """Log prior added to the logits inside the classification loss.

    ``prior="dataset"`` uses the raw class frequencies. ``prior="blended"``
    uses the expected soft-label distribution of the blended training
    stream: foregrounds follow the tail-weighted sampler, backgrounds the
    class frequencies, and the mean combination ratio is 1/2 because the
    ratio distribution is symmetric about 1/2.
    """
    if not config.logit_adjust:
        return None
    if config.prior == "dataset" or config.mix_op == "none":
        return stats.log_prior
    q = foreground_sampling_probs(stats.counts, config.gamma)
    return np.log(0.5 * q + 0.5 * stats.prior)


def training_step(params: ModelParams, images: np.ndarray, records, config: TrainConfig, stats: ClassStats):
    """Forward and backward for one batch; returns (loss parts, grads)."""
    labels = np.stack([r.soft_label for r in records])
    with GradTape():
        feats = encode(params, images)
        logits = classify(params, feats)
        l_bce = pairloss.balanced_ce(logits, labels, compensation_log_prior(stats, config))
        if config.eta > 0:
            emb = project(params, feats)
            pairs = pairloss.classify_pairs(records)
            l_smc = pairloss.smc_loss(emb, pairs, records, config.tau, config.weighting)
            total = pairloss.total_loss(l_bce, l_smc, config.eta)
            smc_value = l_smc.item()
        else:
            total, smc_value = l_bce, 0.0
    value, grads = eval_with_grad(total, params.parameters())
    return {"bce": l_bce.item(), "smc": smc_value, "total": value}, grads


def train(
    config: TrainConfig,
    dataset: Dataset,
    eval_dataset: Dataset | None = None,
    *,
    resume: Checkpoint | None = None,
    stop_after: int | None = None,
    on_epoch: Callable[[dict], None] | None = None,
) -> tuple[Checkpoint, list[dict]]:
    """Run (or continue) training and return the final checkpoint and epoch log.

    ``stop_after`` ends the run early after that many total epochs; resuming
    from the resulting checkpoint reproduces the uninterrupted run exactly.
    """
    stats = ClassStats.from_counts(dataset.counts)
    if resume is not None:
        if resume.params.num_classes != dataset.num_classes:
            raise ContractViolation("checkpoint and dataset disagree on the number of classes")
        if resume.config.to_dict() != config.to_dict():
            raise ContractViolation("resume requires the checkpoint's own config")
        params, epoch, log = resume.params, resume.epoch, list(resume.log)
        rng = np.random.default_rng()
        rng.bit_generator.state = resume.rng_state
        opt = SgdState(lr_at(config, epoch), config.momentum, config.weight_decay, [v.copy() for v in resume.velocity])
    else:
        params = init_model(config.encoder_widths, dataset.num_classes, dataset.image_dims, config.seed, config.head_dim)
        epoch, log = 0, []
        rng = np.random.default_rng(np.random.SeedSequence([config.seed, 7]))
        opt = SgdState(config.lr, config.momentum, config.weight_decay)
        opt.velocity = [np.zeros_like(p.values) for p in params.parameters()]

    q = foreground_sampling_probs(stats.counts, config.gamma)
    splits = split_classes(stats.counts, config.t_many, config.t_few)
    steps = math.ceil(len(dataset) / config.batch_size)
    last = config.epochs if stop_after is None else min(stop_after, config.epochs)
    step_index = epoch * steps
    while epoch < last:
        opt.lr = lr_at(config, epoch)
        sums = {"bce": 0.0, "smc": 0.0, "total": 0.0}
        for _ in range(steps):
            images, records = _build_views(dataset, config, q, rng)
            try:
                parts, grads = training_step(params, images, records, config, stats)
            except NumericFault as exc:
                raise TrainingDiverged(step_index, [r.to_dict() for r in records], str(exc)) from exc
            if not math.isfinite(parts["total"]):
                raise TrainingDiverged(step_index, [r.to_dict() for r in records], "non-finite loss")
            sgd_step(params.parameters(), grads, opt)
            for k in sums:
                sums[k] += parts[k]
            step_index += 1
        entry = {"epoch": epoch, "lr": opt.lr, **{k: v / steps for k, v in sums.items()}}
        if eval_dataset is not None:
            entry["accuracy"] = evaluate_params(params, eval_dataset, splits, stats, config.eval_with_prior)["splits"]
        log.append(entry)
        if on_epoch is not None:
            on_epoch(entry)
        logger.info("epoch %d: %s", epoch, entry)
        epoch += 1

    ck = Checkpoint(params, config, stats, epoch, rng.bit_generator.state, log, [v.copy() for v in opt.velocity])
    return ck, log


# -------------------------------------------------------------- evaluation


def evaluate_params(params: ModelParams, dataset: Dataset, splits, stats: ClassStats | None = None, with_prior: bool = False) -> dict:
    logits = predict_logits(params, dataset.pixels)
    if with_prior:
        if stats is None:
            raise ContractViolation("eval-with-prior needs class statistics")
        logits = logits + stats.log_prior
    pred = logits.argmax(axis=1)
    per_class: list[float | None] = []
    for k in range(params.num_classes):
        members = dataset.labels == k
        per_class.append(float((pred[members] == k).mean()) if members.any() else None)
    agg = {}
    for split in (*SPLIT_NAMES, "all"):
        vals = [per_class[k] for k in splits.classes(split) if per_class[k] is not None]
        if vals:
            agg[split] = float(np.mean(vals))
    return {"per_class": per_class, "splits": agg}


def evaluate(checkpoint: Checkpoint, dataset: Dataset) -> dict:
    """Per-class accuracy plus many/medium/few/all means (absent splits omitted).

    Predictions use raw logits unless the config sets ``eval_with_prior``.
    """
    if dataset.num_classes != checkpoint.params.num_classes:
        raise ContractViolation("class vocabulary of dataset and checkpoint differ")
    cfg = checkpoint.config
    splits = split_classes(checkpoint.stats.counts, cfg.t_many, cfg.t_few)
    return evaluate_params(checkpoint.params, dataset, splits, checkpoint.stats, cfg.eval_with_prior)


# -------------------------------------------------------------- checkpoint io


def _pack_blob(fh, payload: bytes) -> None:
    fh.write(struct.pack("<I", len(payload)))
    fh.write(payload)


def save_checkpoint(ck: Checkpoint, path) -> None:
    arrays = [(name, p.values) for name, p in ck.params.named_parameters()]
    arrays += [(f"velocity.{name}", v) for (name, _), v in zip(ck.params.named_parameters(), ck.velocity)]
    layout, offset = [], 0
    for name, arr in arrays:
        layout.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size * 8
    meta = {
        "counts": ck.stats.counts.tolist(),
        "epoch": ck.epoch,
        "image_dims": list(ck.params.image_dims),
        "layout": layout,
        "log": ck.log,
    }
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<H", CHECKPOINT_VERSION))
        _pack_blob(fh, ck.config.canonical_json().encode())
        _pack_blob(fh, canonical_json(meta).encode())
        fh.write(struct.pack("<Q", offset))
        for _, arr in arrays:
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        _pack_blob(fh, canonical_json(ck.rng_state).encode())


def load_checkpoint(path) -> Checkpoint:
    data = Path(path).read_bytes()
    if data[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    (version,) = struct.unpack_from("<H", data, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = 6

    def blob():
        nonlocal off
        (n,) = struct.unpack_from("<I", data, off)
        chunk = data[off + 4 : off + 4 + n]
        off += 4 + n
        return chunk

    config = TrainConfig.from_dict(json.loads(blob()))
    meta = json.loads(blob())
    (nbytes,) = struct.unpack_from("<Q", data, off)
    off += 8
    payload = data[off : off + nbytes]
    off += nbytes
    rng_state = json.loads(blob())
    tensors = {}
    for entry in meta["layout"]:
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        arr = np.frombuffer(payload, dtype="<f8", count=count, offset=entry["offset"]).reshape(entry["shape"])
        tensors[entry["name"]] = arr.astype(np.float64)
    counts = meta["counts"]
    params = init_model(config.encoder_widths, len(counts), meta["image_dims"], 0, config.head_dim)
    for name, p in params.named_parameters():
        p.values = tensors[name].copy()
    velocity = [tensors[f"velocity.{name}"].copy() for name, _ in params.named_parameters()]
    return Checkpoint(params, config, ClassStats.from_counts(counts), meta["epoch"], rng_state, meta["log"], velocity)
