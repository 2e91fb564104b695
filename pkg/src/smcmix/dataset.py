"""Long-tailed synthetic image data, class statistics and samplers."""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .tensor import ContractViolation

logger = logging.getLogger(__name__)

DATASET_MAGIC = b"SMCD"
DATASET_VERSION = 1

SPLIT_NAMES = ("many", "medium", "few")

# Instance-level variation of the generator. Orientation jitter is a
# fraction of the spacing between neighbouring class orientations, so
# classes overlap and the Bayes classifier depends on the class prior.
PIXEL_NOISE = 0.3
ORIENTATION_JITTER = 0.5
FREQUENCY_JITTER = 0.1
PHASE_JITTER = 0.5
COLOR_SPREAD = 0.2
COLOR_JITTER = 0.1


class DatasetFormatError(ValueError):
    """A dataset or semantic-vector file could not be parsed."""


@dataclass(frozen=True)
class ImageSample:
    pixels: np.ndarray  # (channels, height, width) in [0, 1]
    class_id: int
    instance_id: int


@dataclass
class Dataset:
    """Labeled images stored densely; sample ``i`` has instance id ``i``.

    Pixels are kept as float32 so the on-disk format round-trips exactly.
    """

    pixels: np.ndarray  # (N, c, h, w) float32
    labels: np.ndarray  # (N,) int64
    num_classes: int

    def __post_init__(self):
        self.pixels = np.ascontiguousarray(self.pixels, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.pixels.ndim != 4 or len(self.pixels) != len(self.labels):
            raise ContractViolation("pixels must be (N, c, h, w) with one label per sample")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ContractViolation("labels out of range")
        self._by_class = [np.flatnonzero(self.labels == k) for k in range(self.num_classes)]

    def __len__(self) -> int:
        return len(self.labels)

    def __getitem__(self, i: int) -> ImageSample:
        return ImageSample(self.pixels[i], int(self.labels[i]), int(i))

    @property
    def image_dims(self) -> tuple[int, int, int]:
        return tuple(self.pixels.shape[1:])

    @property
    def counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)

    def class_indices(self, k: int) -> np.ndarray:
        return self._by_class[k]


@dataclass(frozen=True)
class ClassStats:
    counts: np.ndarray
    prior: np.ndarray
    log_prior: np.ndarray
    imbalance_ratio: float

    @classmethod
    def from_counts(cls, counts: Sequence[int]) -> "ClassStats":
        counts = np.asarray(counts, dtype=np.int64)
        if counts.min() < 1:
            raise ContractViolation("every class needs at least one sample")
        prior = counts / counts.sum()
        return cls(counts, prior, np.log(prior), float(counts.max() / counts.min()))

    def to_dict(self) -> dict:
        return {"counts": self.counts.tolist()}


@dataclass(frozen=True)
class SplitAssignment:
    tags: tuple[str, ...]
    t_many: float
    t_few: float

    def classes(self, split: str) -> list[int]:
        if split == "all":
            return list(range(len(self.tags)))
        return [k for k, t in enumerate(self.tags) if t == split]


@dataclass(frozen=True)
class SemanticVectors:
    vectors: np.ndarray  # (C, d_s)

    def __post_init__(self):
        norms = np.linalg.norm(self.vectors, axis=1)
        zero = np.flatnonzero(norms == 0)
        if zero.size:
            raise ContractViolation(f"semantic vector of class {int(zero[0])} is zero")

    @property
    def num_classes(self) -> int:
        return len(self.vectors)


# ----------------------------------------------------------------- synthesis


def longtail_counts(num_classes: int, rho: float, n_max: int) -> np.ndarray:
    """Exponential profile n_k = round(n_max * rho^(-k/(C-1))), at least 1."""
    if num_classes < 2 or rho < 1 or n_max < 1:
        raise ContractViolation("need C >= 2, rho >= 1, n_max >= 1")
    k = np.arange(num_classes)
    raw = n_max * rho ** (-k / (num_classes - 1))
    return np.maximum(np.floor(raw + 0.5), 1).astype(np.int64)


def class_parameters(num_classes: int, channels: int, seed: int) -> np.ndarray:
    """Per-class generator parameters: orientation, frequency, phase, channel offsets.

    Orientation enters as (cos 2θ, sin 2θ) so that nearby orientations
    are nearby rows.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0]))
    theta = (np.arange(num_classes) + rng.uniform(0.0, 0.6, num_classes)) * np.pi / num_classes
    rng.shuffle(theta)
    freq = rng.uniform(1.5, 3.5, num_classes)
    phase = rng.uniform(0.0, 2 * np.pi, num_classes)
    offsets = rng.uniform(-COLOR_SPREAD, COLOR_SPREAD, (num_classes, channels))
    return np.column_stack([np.cos(2 * theta), np.sin(2 * theta), freq, phase, offsets])


def semantic_from_parameters(params: np.ndarray) -> SemanticVectors:
    # (cos 2θ, sin 2θ, centered frequency, channel offsets); phase is instance-level noise.
    freq = (params[:, 2:3] - 2.5) / 2.0
    return SemanticVectors(np.column_stack([params[:, :2], freq, 2.0 * params[:, 4:]]))


def render_images(params: np.ndarray, labels: np.ndarray, size: tuple[int, int], rng: np.random.Generator) -> np.ndarray:
    channels = params.shape[1] - 4
    h, w = size
    n = len(labels)
    p = params[labels]
    spacing = np.pi / len(params)
    theta = 0.5 * np.arctan2(p[:, 1], p[:, 0]) + rng.normal(0.0, ORIENTATION_JITTER * spacing, n)
    v, u = np.meshgrid(np.arange(h) / h, np.arange(w) / w, indexing="ij")
    phase = p[:, 3] + rng.normal(0.0, PHASE_JITTER, n)
    freq = p[:, 2] * np.exp(rng.normal(0.0, FREQUENCY_JITTER, n))
    proj = np.cos(theta)[:, None, None] * u + np.sin(theta)[:, None, None] * v
    wave = np.sin(2 * np.pi * freq[:, None, None] * proj + phase[:, None, None])
    amp = rng.uniform(0.2, 0.35, n)
    base = 0.5 + amp[:, None, None] * wave
    offsets = p[:, 4:] + rng.normal(0.0, COLOR_JITTER, (n, channels))
    img = base[:, None] + offsets[:, :, None, None]
    img = img + rng.normal(0.0, PIXEL_NOISE, (n, channels, h, w))
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def _image_size(image_size) -> tuple[int, int]:
    h, w = (image_size, image_size) if np.isscalar(image_size) else tuple(image_size)
    if h < 8 or w < 8:
        raise ContractViolation(f"image size {h}x{w} is below 8 per side")
    return int(h), int(w)


def synth_longtail(
    num_classes: int,
    rho: float,
    n_max: int,
    image_size=16,
    seed: int = 0,
    channels: int = 3,
) -> tuple[Dataset, ClassStats, SemanticVectors]:
    """Long-tailed training set with a learnable per-class texture signature."""
    size = _image_size(image_size)
    counts = longtail_counts(num_classes, rho, n_max)
    params = class_parameters(num_classes, channels, seed)
    labels = np.repeat(np.arange(num_classes), counts)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
    pixels = render_images(params, labels, size, rng)
    return Dataset(pixels, labels, num_classes), ClassStats.from_counts(counts), semantic_from_parameters(params)


def synth_balanced(num_classes: int, per_class: int, image_size=16, seed: int = 0, channels: int = 3) -> Dataset:
    """Balanced held-out set drawn from the same class generators as ``synth_longtail``."""
    size = _image_size(image_size)
    params = class_parameters(num_classes, channels, seed)
    labels = np.repeat(np.arange(num_classes), per_class)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 2]))
    return Dataset(render_images(params, labels, size, rng), labels, num_classes)


# ------------------------------------------------------------------ sampling


def foreground_sampling_probs(counts: Sequence[int], gamma: float = 1.0) -> np.ndarray:
    counts = np.asarray(counts, dtype=np.float64)
    if counts.min() < 1 or gamma < 0:
        raise ContractViolation("counts must be >= 1 and gamma >= 0")
    w = counts ** (-gamma)
    return w / w.sum()


def sample_mix_indices(
    dataset: Dataset, q: np.ndarray, batch_size: int, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """Draw (foreground, background) instance indices for one batch.

    Backgrounds are uniform over instances. Foregrounds pick a class from
    ``q`` and then an instance uniformly within it. Self-pairs are kept.
    """
    bg = rng.integers(0, len(dataset), batch_size)
    classes = rng.choice(dataset.num_classes, size=batch_size, p=q)
    fg = np.empty(batch_size, dtype=np.int64)
    for i, k in enumerate(classes):
        members = dataset.class_indices(int(k))
        if members.size == 0:
            raise ContractViolation(f"class {int(k)} has no instances")
        fg[i] = members[rng.integers(0, members.size)]
    n_self = int((fg == bg).sum())
    if n_self:
        logger.debug("sample_mix_indices: %d self-pair(s) in batch", n_self)
    return fg, bg


def split_classes(counts: Sequence[int], t_many: float = 100, t_few: float = 20) -> SplitAssignment:
    if not t_many > t_few >= 0:
        raise ContractViolation("need t_many > t_few >= 0")
    tags = tuple("many" if n > t_many else "few" if n < t_few else "medium" for n in counts)
    return SplitAssignment(tags, t_many, t_few)


# ------------------------------------------------------------------------ io


def save_dataset(dataset: Dataset, path) -> None:
    c, h, w = dataset.image_dims
    counts = dataset.counts
    with open(path, "wb") as fh:
        fh.write(DATASET_MAGIC)
        fh.write(struct.pack("<HI", DATASET_VERSION, dataset.num_classes))
        fh.write(struct.pack(f"<{dataset.num_classes}I", *counts.tolist()))
        fh.write(struct.pack("<3H", c, h, w))
        fh.write(dataset.pixels.astype("<f4").tobytes())
        fh.write(dataset.labels.astype("<u4").tobytes())


def load_dataset(path) -> Dataset:
    data = Path(path).read_bytes()
    if data[:4] != DATASET_MAGIC:
        raise DatasetFormatError(f"{path}: bad magic at offset 0")
    try:
        version, num_classes = struct.unpack_from("<HI", data, 4)
    except struct.error as exc:
        raise DatasetFormatError(f"{path}: truncated header at offset 4") from exc
    if version != DATASET_VERSION:
        raise DatasetFormatError(f"{path}: unsupported version {version} at offset 4")
    off = 10
    try:
        counts = np.array(struct.unpack_from(f"<{num_classes}I", data, off), dtype=np.int64)
        off += 4 * num_classes
        c, h, w = struct.unpack_from("<3H", data, off)
    except struct.error as exc:
        raise DatasetFormatError(f"{path}: truncated header at offset {off}") from exc
    off += 6
    n = int(counts.sum())
    n_pix = n * c * h * w
    expected = off + 4 * n_pix + 4 * n
    if len(data) != expected:
        raise DatasetFormatError(f"{path}: payload size {len(data)} != expected {expected} (header ends at offset {off})")
    pixels = np.frombuffer(data, dtype="<f4", count=n_pix, offset=off).reshape(n, c, h, w)
    labels = np.frombuffer(data, dtype="<u4", count=n, offset=off + 4 * n_pix).astype(np.int64)
    if labels.size and labels.max() >= num_classes:
        bad = int(np.argmax(labels >= num_classes))
        raise DatasetFormatError(f"{path}: label {int(labels[bad])} of sample {bad} out of range (offset {off + 4 * n_pix + 4 * bad})")
    if not np.array_equal(np.bincount(labels, minlength=num_classes), counts):
        raise DatasetFormatError(f"{path}: per-class counts in header disagree with labels")
    return Dataset(pixels.astype(np.float32), labels, num_classes)


def save_semantic_vectors(vectors: SemanticVectors, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for k, row in enumerate(vectors.vectors):
            fh.write(" ".join([str(k)] + [repr(float(x)) for x in row]) + "\n")


def load_semantic_vectors(path, num_classes: int | None = None) -> SemanticVectors:
    rows: dict[int, list[float]] = {}
    dim = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            fields = line.split()
            if not fields:
                continue
            try:
                k = int(fields[0])
                values = [float(x) for x in fields[1:]]
            except ValueError as exc:
                raise DatasetFormatError(f"{path}:{lineno}: malformed record ({exc})") from exc
            if not values:
                raise DatasetFormatError(f"{path}:{lineno}: class {k} has no vector")
            if dim is None:
                dim = len(values)
            elif len(values) != dim:
                raise DatasetFormatError(f"{path}:{lineno}: dimension {len(values)} != {dim}")
            if k in rows:
                raise DatasetFormatError(f"{path}:{lineno}: duplicate class {k}")
            if k < 0 or (num_classes is not None and k >= num_classes):
                raise DatasetFormatError(f"{path}:{lineno}: class id {k} out of range")
            rows[k] = values
    total = num_classes if num_classes is not None else (max(rows) + 1 if rows else 0)
    for k in range(total):
        if k not in rows:
            raise DatasetFormatError(f"{path}: missing class {k}")
    vectors = np.array([rows[k] for k in range(total)], dtype=np.float64)
    zero = [k for k in range(total) if not np.any(vectors[k])]
    if zero:
        raise DatasetFormatError(f"{path}: class {zero[0]} has a zero vector")
    return SemanticVectors(vectors)


def chi_square_pvalue(observed: np.ndarray, expected_probs: np.ndarray) -> float:
    from scipy.stats import chisquare

    observed = np.asarray(observed, dtype=np.float64)
    expected = expected_probs * observed.sum()
    return float(chisquare(observed, expected).pvalue)

