"""Feature-space diagnostics: class centers, inter-class score, semantic similarity."""

from __future__ import annotations

from dataclasses import dataclass

import jsonschema
import numpy as np

from .dataset import SPLIT_NAMES, Dataset, SemanticVectors, SplitAssignment, split_classes
from .model import ModelParams, encode, project
from .tensor import ContractViolation

REPORT_SPLITS = (*SPLIT_NAMES, "all")

_split_map = {
    "type": "object",
    "properties": {s: {"type": "number"} for s in REPORT_SPLITS},
    "additionalProperties": False,
}
REPORT_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "FeatureSpaceReport",
    "type": "object",
    "required": ["inter_class", "semantic_similarity", "accuracy", "config-hash"],
    "properties": {
        "inter_class": _split_map,
        "semantic_similarity": _split_map,
        "accuracy": _split_map,
        "config-hash": {"type": "string"},
    },
}


@dataclass(frozen=True)
class ClassCenters:
    centers: np.ndarray  # (C, d)
    counts: np.ndarray


@dataclass(frozen=True)
class SimilarityMatrices:
    semantic: np.ndarray
    centers: np.ndarray


def features_of(params: ModelParams, images: np.ndarray, from_embeddings: bool = False, batch_size: int = 512) -> np.ndarray:
    out = []
    for i in range(0, len(images), batch_size):
        feats = encode(params, images[i : i + batch_size])
        out.append(project(params, feats).values if from_embeddings else feats.values)
    return np.concatenate(out)


def centers_from_features(features: np.ndarray, labels: np.ndarray, num_classes: int) -> ClassCenters:
    counts = np.bincount(labels, minlength=num_classes)
    missing = np.flatnonzero(counts == 0)
    if missing.size:
        raise ContractViolation(f"class {int(missing[0])} has no samples")
    centers = np.stack([features[labels == k].mean(axis=0) for k in range(num_classes)])
    return ClassCenters(centers, counts)


def class_centers(params: ModelParams, dataset: Dataset, from_embeddings: bool = False) -> ClassCenters:
    """Mean encoder feature (or head embedding) of each class over un-mixed samples."""
    feats = features_of(params, dataset.pixels, from_embeddings)
    return centers_from_features(feats, dataset.labels, dataset.num_classes)


def inter_class_score(centers, tau_prime: float = 10.0, metric: str = "l2") -> np.ndarray:
    """IS_k = exp(-(1/C) * sum_j d(c_k, c_j) / tau').

    ``metric="l2"`` uses the Euclidean distance; ``"raw-sum"`` sums the
    components of c_k - c_j instead.
    """
    if tau_prime <= 0:
        raise ContractViolation("tau' must be positive")
    c = centers.centers if isinstance(centers, ClassCenters) else np.asarray(centers, dtype=np.float64)
    diff = c[:, None, :] - c[None, :, :]
    if metric == "l2":
        dist = np.sqrt((diff**2).sum(axis=-1))
    elif metric == "raw-sum":
        dist = diff.sum(axis=-1)
    else:
        raise ContractViolation(f"unknown metric {metric!r}")
    return np.exp(-dist.mean(axis=1) / tau_prime)


def cosine_matrix(vectors: np.ndarray, what: str = "vector") -> np.ndarray:
    vectors = np.asarray(vectors, dtype=np.float64)
    norms = np.linalg.norm(vectors, axis=1)
    zero = np.flatnonzero(norms == 0)
    if zero.size:
        raise ContractViolation(f"{what} of class {int(zero[0])} has zero norm")
    unit = vectors / norms[:, None]
    sim = np.clip(unit @ unit.T, -1.0, 1.0)
    np.fill_diagonal(sim, 1.0)
    return sim


def semantic_similarity_score(centers, semantic) -> tuple[float, SimilarityMatrices]:
    """Mean absolute gap between semantic and center cosine-similarity matrices."""
    c = centers.centers if isinstance(centers, ClassCenters) else np.asarray(centers, dtype=np.float64)
    s = semantic.vectors if isinstance(semantic, SemanticVectors) else np.asarray(semantic, dtype=np.float64)
    if len(c) != len(s):
        raise ContractViolation(f"{len(c)} centers but {len(s)} semantic vectors")
    mats = SimilarityMatrices(cosine_matrix(s, "semantic vector"), cosine_matrix(c, "center"))
    return float(np.abs(mats.semantic - mats.centers).mean()), mats


def split_means(per_class: np.ndarray, splits: SplitAssignment) -> dict[str, float]:
    out = {}
    for split in REPORT_SPLITS:
        idx = splits.classes(split)
        if idx:
            out[split] = float(np.mean(per_class[idx]))
    return out


def semantic_similarity_by_split(mats: SimilarityMatrices, splits: SplitAssignment) -> dict[str, float]:
    # Row i restricted to the split's classes, column j over all classes.
    gap = np.abs(mats.semantic - mats.centers).mean(axis=1)
    return split_means(gap, splits)


def accuracy_report(checkpoint, dataset: Dataset, semantic: SemanticVectors, splits: SplitAssignment | None = None) -> dict:
    """Inter-class score, semantic similarity and accuracy per split, as a JSON-ready dict."""
    from .trainer import evaluate_params

    cfg = checkpoint.config
    if splits is None:
        splits = split_classes(checkpoint.stats.counts, cfg.t_many, cfg.t_few)
    centers = class_centers(checkpoint.params, dataset, cfg.centers_from_embeddings)
    is_k = inter_class_score(centers, cfg.tau_prime, cfg.is_metric)
    _, mats = semantic_similarity_score(centers, semantic)
    acc = evaluate_params(checkpoint.params, dataset, splits, checkpoint.stats, cfg.eval_with_prior)
    report = {
        "inter_class": split_means(is_k, splits),
        "semantic_similarity": semantic_similarity_by_split(mats, splits),
        "accuracy": acc["splits"],
        "config-hash": cfg.config_hash(),
    }
    jsonschema.validate(report, REPORT_SCHEMA)
    return report


def render_report(report: dict) -> str:
    header = f"{'':<22}" + "".join(f"{s:>9}" for s in REPORT_SPLITS)
    lines = [header]
    for key, label in (("inter_class", "Inter-class score"), ("semantic_similarity", "Semantic similarity"), ("accuracy", "Accuracy")):
        row = report[key]
        lines.append(f"{label:<22}" + "".join(f"{row[s]:>9.3f}" if s in row else f"{'-':>9}" for s in REPORT_SPLITS))
    return "\n".join(lines)
