"""Depth-aware NearFarMix augmentation and mild photometric/geometric transforms.

Samples are plain numpy arrays: the augmentation never needs gradients.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np


@dataclass(frozen=True)
class Sample:
    image: np.ndarray  # [H, W, 3] in [0, 1]
    depth: np.ndarray  # [H, W, 1] meters, 0 = invalid
    semantics: np.ndarray  # [H, W, 1] integer class indices

    def __post_init__(self):
        h, w = self.image.shape[:2]
        shapes = (self.image.shape, self.depth.shape, self.semantics.shape)
        if (
            self.image.ndim != 3
            or self.image.shape[2] != 3
            or self.depth.shape != (h, w, 1)
            or self.semantics.shape != (h, w, 1)
        ):
            raise ValueError(f"inconsistent sample planes: image/depth/semantics shapes {shapes}")
        if not np.all(np.isfinite(self.depth)):
            raise ValueError("depth contains non-finite values")

    @property
    def hw(self) -> tuple[int, int]:
        return self.image.shape[0], self.image.shape[1]


@dataclass(frozen=True)
class NearFarMasks:
    thr: float
    m1: np.ndarray  # near region of sample 1
    m2: np.ndarray  # pre-far region of sample 2
    mo: np.ndarray  # overlap, stored positive and subtracted
    me: np.ndarray  # mutually exclusive region


@dataclass(frozen=True)
class ThresholdRange:
    dataset_min: float
    dataset_max: float
    batch_min: float
    batch_max: float

    @property
    def interval(self) -> tuple[float, float]:
        return max(self.dataset_min, self.batch_min), min(self.dataset_max, self.batch_max)


NYUV2_BOUNDS = (1.5, 6.5)
KITTI_BOUNDS = (20.0, 60.0)


def roll_batch(batch: Sequence[Sample]) -> list[Sample]:
    """Shift by one along the batch axis: output i is input (i - 1) mod B."""
    if not batch:
        raise ValueError("cannot roll an empty batch")
    return [batch[(i - 1) % len(batch)] for i in range(len(batch))]


def threshold_range(batch: Sequence[Sample], dataset_min: float, dataset_max: float) -> ThresholdRange:
    """Batch bounds are the largest per-image minimum and smallest per-image maximum valid depth."""
    mins, maxs = [], []
    for s in batch:
        valid = s.depth[s.depth > 0]
        if valid.size == 0:
            mins.append(np.inf)
            maxs.append(-np.inf)
        else:
            mins.append(float(valid.min()))
            maxs.append(float(valid.max()))
    return ThresholdRange(dataset_min, dataset_max, max(mins), min(maxs))


def sample_threshold(rng_range: ThresholdRange, rng: np.random.Generator, size: int | None = None):
    """Uniform draw(s) from the clipped interval, or ``None`` when it is empty."""
    lo, hi = rng_range.interval
    if not lo < hi:
        return None
    if size is None:
        return float(rng.uniform(lo, hi))
    return [float(v) for v in rng.uniform(lo, hi, size=size)]


def nearfar_masks(depth1: np.ndarray, depth2: np.ndarray, thr: float) -> NearFarMasks:
    m1 = (depth1 <= thr).astype(np.float64)
    m2 = (depth2 > thr).astype(np.float64)
    return NearFarMasks(thr, m1, m2, m1 * m2, (1.0 - m1) * (1.0 - m2))


def _blend(a: np.ndarray, b: np.ndarray, m: NearFarMasks) -> np.ndarray:
    # far terms summed first: the overlap cancels exactly before the near term is added
    far = (b * m.m2 + b * m.me) - b * m.mo
    out = a * m.m1 + far
    return out.astype(a.dtype) if np.issubdtype(a.dtype, np.integer) else out


def nearfarmix(s1: Sample, s2: Sample, thr: float) -> tuple[Sample, NearFarMasks]:
    """Near pixels (depth1 <= thr) from ``s1``; every other pixel from ``s2``."""
    if s1.image.shape != s2.image.shape:
        raise ValueError(f"cannot mix samples of shapes {s1.image.shape} and {s2.image.shape}")
    if not np.isfinite(thr):
        raise ValueError("threshold must be finite")
    m = nearfar_masks(s1.depth, s2.depth, thr)
    mixed = Sample(
        image=_blend(s1.image, s2.image, m),
        depth=_blend(s1.depth, s2.depth, m),
        semantics=_blend(s1.semantics, s2.semantics, m),
    )
    return mixed, m


def mix_batch(
    batch: Sequence[Sample],
    dataset_bounds: tuple[float, float],
    p_apply: float,
    rng: np.random.Generator,
) -> tuple[list[Sample], list[float | None]]:
    """Batchwise NearFarMix returning the augmented batch and per-image thresholds.

    A threshold of ``None`` marks an image that passed through unchanged.
    """
    batch = list(batch)
    skipped = [None] * len(batch)
    if len(batch) < 2 or rng.random() >= p_apply:
        return batch, skipped
    partners = roll_batch(batch)
    thrs = sample_threshold(threshold_range(batch, *dataset_bounds), rng, size=len(batch))
    if thrs is None:
        return batch, skipped
    out = [nearfarmix(s1, s2, t)[0] for s1, s2, t in zip(batch, partners, thrs)]
    return out, thrs


def nearfarmix_batch(
    batch: Sequence[Sample],
    dataset_bounds: tuple[float, float],
    p_apply: float,
    rng: np.random.Generator,
) -> list[Sample]:
    return mix_batch(batch, dataset_bounds, p_apply, rng)[0]


# ------------------------------------------------------------- other transforms
def horizontal_flip(s: Sample) -> Sample:
    return Sample(s.image[:, ::-1].copy(), s.depth[:, ::-1].copy(), s.semantics[:, ::-1].copy())


def grayscale(s: Sample, weight: float = 1.0) -> Sample:
    gray = s.image.mean(axis=2, keepdims=True)
    return replace(s, image=(1.0 - weight) * s.image + weight * gray)


def brightness(s: Sample, factor: float) -> Sample:
    return replace(s, image=np.clip(s.image * factor, 0.0, 1.0))


@dataclass(frozen=True)
class PhotoAugment:
    p_flip: float = 0.5
    p_gray: float = 0.1
    jitter: float = 0.1

    def __call__(self, s: Sample, rng: np.random.Generator) -> Sample:
        if rng.random() < self.p_flip:
            s = horizontal_flip(s)
        if rng.random() < self.p_gray:
            s = grayscale(s)
        if self.jitter > 0:
            s = brightness(s, rng.uniform(1.0 - self.jitter, 1.0 + self.jitter))
        return s
