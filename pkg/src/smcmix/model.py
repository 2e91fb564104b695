"""Two-branch MLP: shared encoder, contrastive projection head, linear classifier."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .tensor import ContractViolation, Tensor

HEAD_DIM = 128

# Fixed input standardization; pixels live in [0, 1].
PIXEL_MEAN = 0.5
PIXEL_STD = 0.5

Layer = tuple[Tensor, Tensor]


@dataclass
class ModelParams:
    encoder: list[Layer]
    head: list[Layer]
    classifier: Layer
    image_dims: tuple[int, int, int]

    @property
    def feature_dim(self) -> int:
        return self.encoder[-1][0].shape[1]

    @property
    def num_classes(self) -> int:
        return self.classifier[0].shape[1]

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = []
        for i, (w, b) in enumerate(self.encoder):
            out += [(f"encoder.{i}.weight", w), (f"encoder.{i}.bias", b)]
        for i, (w, b) in enumerate(self.head):
            out += [(f"head.{i}.weight", w), (f"head.{i}.bias", b)]
        w, b = self.classifier
        out += [("classifier.weight", w), ("classifier.bias", b)]
        return out

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> Layer:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    w = Tensor(rng.uniform(-bound, bound, (fan_in, fan_out)), requires_grad=True)
    return w, Tensor(np.zeros(fan_out), requires_grad=True)


def init_model(
    encoder_widths: Sequence[int],
    num_classes: int,
    image_dims: Sequence[int],
    seed: int = 0,
    head_dim: int = HEAD_DIM,
) -> ModelParams:
    """Glorot-uniform weights and zero biases, deterministic in ``seed``.

    The head's hidden width equals the encoder feature width.
    """
    if not encoder_widths or min(encoder_widths) < 1 or num_classes < 1 or head_dim < 1:
        raise ContractViolation("layer widths must be positive")
    rng = np.random.default_rng(seed)
    image_dims = tuple(int(d) for d in image_dims)
    sizes = [int(np.prod(image_dims)), *encoder_widths]
    encoder = [_glorot(rng, a, b) for a, b in zip(sizes[:-1], sizes[1:])]
    feat = sizes[-1]
    head = [_glorot(rng, feat, feat), _glorot(rng, feat, head_dim)]
    classifier = _glorot(rng, feat, num_classes)
    return ModelParams(encoder, head, classifier, image_dims)


def _linear(x: Tensor, layer: Layer) -> Tensor:
    w, b = layer
    return T.add(T.matmul(x, w), b)


def encode(params: ModelParams, images) -> Tensor:
    images = np.asarray(images.values if isinstance(images, Tensor) else images, dtype=np.float64)
    if images.shape[1:] != params.image_dims:
        raise ContractViolation(f"images {images.shape[1:]} do not match model input {params.image_dims}")
    x = Tensor((images.reshape(len(images), -1) - PIXEL_MEAN) / PIXEL_STD)
    for layer in params.encoder:
        x = T.relu(_linear(x, layer))
    return x


def project(params: ModelParams, features: Tensor) -> Tensor:
    if features.shape[1] != params.feature_dim:
        raise ContractViolation(f"features have width {features.shape[1]}, expected {params.feature_dim}")
    h = T.relu(_linear(features, params.head[0]))
    return T.l2_normalize(_linear(h, params.head[1]), axis=1)


def classify(params: ModelParams, features: Tensor) -> Tensor:
    if features.shape[1] != params.feature_dim:
        raise ContractViolation(f"features have width {features.shape[1]}, expected {params.feature_dim}")
    return _linear(features, params.classifier)


def predict_logits(params: ModelParams, images, batch_size: int = 512) -> np.ndarray:
    out = [classify(params, encode(params, images[i : i + batch_size])).values for i in range(0, len(images), batch_size)]
    return np.concatenate(out) if out else np.zeros((0, params.num_classes))
