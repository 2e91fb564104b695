"""ResizeMix-style blending with augment-before-mix and its ablation variants."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import NamedTuple

import numpy as np

from .tensor import ContractViolation

PLACEMENTS = ("before-mix", "after-mix", "none")
MIX_OPS = ("resize", "crop", "none")

LAMBDA_LOW, LAMBDA_HIGH = 0.2, 0.8


class MaskRect(NamedTuple):
    top: int
    left: int
    height: int
    width: int


@dataclass(frozen=True)
class MixRecord:
    fg_class: int
    bg_class: int
    lambda_sampled: float
    lambda_effective: float
    rect: MaskRect
    soft_label: np.ndarray

    def to_dict(self) -> dict:
        return {
            "fg_class": self.fg_class,
            "bg_class": self.bg_class,
            "lambda_sampled": self.lambda_sampled,
            "lambda_effective": self.lambda_effective,
            "rect": list(self.rect),
            "soft_label": self.soft_label.tolist(),
        }


@dataclass(frozen=True)
class AugmentPolicy:
    """Per-image augmentation and where it happens relative to blending.

    ``crop_scale`` switches the crop from pad-then-crop to a random
    resized crop with area fraction drawn from that range.
    """

    pad: int = 4
    flip_prob: float = 0.5
    placement: str = "before-mix"
    crop_scale: tuple[float, float] | None = None

    def __post_init__(self):
        if self.placement not in PLACEMENTS:
            raise ContractViolation(f"placement must be one of {PLACEMENTS}, got {self.placement!r}")
        if self.pad < 0 or not 0.0 <= self.flip_prob <= 1.0:
            raise ContractViolation("pad must be >= 0 and flip_prob in [0, 1]")
        if self.crop_scale is not None and not 0.0 < self.crop_scale[0] <= self.crop_scale[1] <= 1.0:
            raise ContractViolation("crop_scale must satisfy 0 < lo <= hi <= 1")


def _round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


def sample_lambda(alpha: float, rng: np.random.Generator, full_range: bool = False) -> float:
    """Beta(alpha, alpha) draw, affinely mapped onto [0.2, 0.8] unless ``full_range``."""
    if alpha <= 0:
        raise ContractViolation("alpha must be positive")
    raw = float(rng.beta(alpha, alpha))
    return raw if full_range else normalize_lambda(raw)


def normalize_lambda(raw: float) -> float:
    return LAMBDA_LOW + (LAMBDA_HIGH - LAMBDA_LOW) * raw


def make_mask(height: int, width: int, lam: float, rng: np.random.Generator) -> tuple[MaskRect, float]:
    """Place a rectangle of area close to ``lam`` with the frame's aspect ratio.

    Returns the rectangle and the realized area fraction, which is what
    labels and loss weights use downstream.
    """
    if height < 8 or width < 8:
        raise ContractViolation("mask needs at least 8 pixels per side")
    if not 0.0 <= lam <= 1.0:
        raise ContractViolation(f"lambda {lam} outside [0, 1]")
    s = np.sqrt(lam)
    h = min(max(_round_half_up(height * s), 1), height)
    w = min(max(_round_half_up(width * s), 1), width)
    top = int(rng.integers(0, height - h + 1))
    left = int(rng.integers(0, width - w + 1))
    return MaskRect(top, left, h, w), (h * w) / (height * width)


@lru_cache(maxsize=4096)
def _bilinear_coords(n_in: int, n_out: int):
    x = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    x = np.clip(x, 0.0, n_in - 1)
    lo = np.floor(x).astype(np.intp)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, x - lo


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Half-pixel-centered bilinear resampling of a (c, h, w) image.

    Interpolation uses the ``a + t*(b - a)`` form so constant regions stay
    bit-exact.
    """
    c, h, w = img.shape
    img = np.asarray(img, dtype=np.float64)
    if (out_h, out_w) == (h, w):
        return img.copy()
    y0, y1, ty = _bilinear_coords(h, out_h)
    x0, x1, tx = _bilinear_coords(w, out_w)
    r0, r1 = img[:, y0], img[:, y1]
    top = r0[:, :, x0] + tx * (r0[:, :, x1] - r0[:, :, x0])
    bot = r1[:, :, x0] + tx * (r1[:, :, x1] - r1[:, :, x0])
    return top + ty[:, None] * (bot - top)


def mask_array(shape: tuple[int, int], rect: MaskRect) -> np.ndarray:
    m = np.zeros(shape)
    m[rect.top : rect.top + rect.height, rect.left : rect.left + rect.width] = 1.0
    return m


def padded_foreground(fg: np.ndarray, rect: MaskRect) -> np.ndarray:
    """R(x_f): foreground resized to the rectangle and zero-padded to the full frame."""
    out = np.zeros(fg.shape)
    out[:, rect.top : rect.top + rect.height, rect.left : rect.left + rect.width] = resize_bilinear(
        fg, rect.height, rect.width
    )
    return out


def _check_pair(fg: np.ndarray, bg: np.ndarray, rect: MaskRect) -> None:
    if fg.shape != bg.shape:
        raise ContractViolation(f"image dims differ: {fg.shape} vs {bg.shape}")
    _, h, w = bg.shape
    if rect.top < 0 or rect.left < 0 or rect.top + rect.height > h or rect.left + rect.width > w:
        raise ContractViolation(f"mask {rect} exceeds {h}x{w} frame")


def resize_mix(fg: np.ndarray, bg: np.ndarray, rect: MaskRect) -> np.ndarray:
    _check_pair(fg, bg, rect)
    out = np.array(bg, dtype=np.float64)
    out[:, rect.top : rect.top + rect.height, rect.left : rect.left + rect.width] = resize_bilinear(
        fg, rect.height, rect.width
    )
    return out


def crop_mix(fg: np.ndarray, bg: np.ndarray, rect: MaskRect, rng: np.random.Generator) -> np.ndarray:
    """CutMix-style paste: a same-size patch from a random position of ``fg``."""
    _check_pair(fg, bg, rect)
    _, h, w = fg.shape
    top = int(rng.integers(0, h - rect.height + 1))
    left = int(rng.integers(0, w - rect.width + 1))
    out = np.array(bg, dtype=np.float64)
    out[:, rect.top : rect.top + rect.height, rect.left : rect.left + rect.width] = fg[
        :, top : top + rect.height, left : left + rect.width
    ]
    return out


def augment(img: np.ndarray, policy: AugmentPolicy, rng: np.random.Generator) -> np.ndarray:
    """Random crop (reflect-padded or resized) followed by a horizontal flip."""
    img = np.asarray(img, dtype=np.float64)
    _, h, w = img.shape
    if policy.crop_scale is not None:
        area = rng.uniform(*policy.crop_scale) * h * w
        aspect = np.exp(rng.uniform(np.log(3 / 4), np.log(4 / 3)))
        ch = min(max(_round_half_up(np.sqrt(area / aspect)), 1), h)
        cw = min(max(_round_half_up(np.sqrt(area * aspect)), 1), w)
        top = int(rng.integers(0, h - ch + 1))
        left = int(rng.integers(0, w - cw + 1))
        img = resize_bilinear(img[:, top : top + ch, left : left + cw], h, w)
    elif policy.pad:
        p = policy.pad
        rows = _reflect_index(h, int(rng.integers(0, 2 * p + 1)) - p)
        cols = _reflect_index(w, int(rng.integers(0, 2 * p + 1)) - p)
        img = img[:, rows[:, None], cols[None, :]]
    if rng.random() < policy.flip_prob:
        img = img[:, :, ::-1]
    return np.ascontiguousarray(img)


@lru_cache(maxsize=1024)
def _reflect_index(n: int, shift: int) -> np.ndarray:
    # Source indices of a window shifted by `shift` over a reflect-padded axis.
    idx = np.arange(n) + shift
    idx = np.where(idx < 0, -idx, idx)
    return np.where(idx >= n, 2 * (n - 1) - idx, idx)


def soft_label(num_classes: int, fg_class: int, bg_class: int, lam_eff: float) -> np.ndarray:
    y = np.zeros(num_classes)
    y[fg_class] += lam_eff
    y[bg_class] += 1.0 - lam_eff
    return y


def make_training_view(
    fg: np.ndarray,
    bg: np.ndarray,
    fg_class: int,
    bg_class: int,
    num_classes: int,
    policy: AugmentPolicy,
    alpha: float,
    rng: np.random.Generator,
    *,
    mix_op: str = "resize",
    full_range: bool = False,
    lam: float | None = None,
) -> tuple[np.ndarray, MixRecord]:
    """One blended, augmented view of a (foreground, background) pair.

    Passing ``lam`` reuses a previously drawn combination ratio, which is how
    the two views of a pair can share it.
    """
    if mix_op not in MIX_OPS:
        raise ContractViolation(f"mix_op must be one of {MIX_OPS}, got {mix_op!r}")
    _, h, w = bg.shape
    if mix_op == "none":
        view = augment(fg, policy, rng) if policy.placement != "none" else np.array(fg, dtype=np.float64)
        rect = MaskRect(0, 0, h, w)
        record = MixRecord(fg_class, fg_class, 1.0, 1.0, rect, soft_label(num_classes, fg_class, fg_class, 1.0))
        return view, record

    if policy.placement == "before-mix":
        fg = augment(fg, policy, rng)
        bg = augment(bg, policy, rng)
    if lam is None:
        lam = sample_lambda(alpha, rng, full_range)
    rect, lam_eff = make_mask(h, w, lam, rng)
    if mix_op == "resize":
        view = resize_mix(fg, bg, rect)
    else:
        view = crop_mix(fg, bg, rect, rng)
    if policy.placement == "after-mix":
        view = augment(view, policy, rng)
    record = MixRecord(fg_class, bg_class, lam, lam_eff, rect, soft_label(num_classes, fg_class, bg_class, lam_eff))
    return view, record
