"""Procedural scenes with consistent image, depth and class planes."""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np

from . import data_io
from .augment import Sample


def _palette(class_count: int) -> np.ndarray:
    # walk the hue wheel with a stride coprime to C so consecutive class ids get distant colours
    stride = next(k for k in range(class_count // 2 - 1, 0, -1) if math.gcd(k, class_count) == 1) if class_count > 3 else 1
    hues = (np.arange(class_count) * stride % class_count) / class_count
    # cosine colour wheel, kept away from black and white
    return 0.5 + 0.35 * np.cos(2 * np.pi * (hues[:, None] + np.array([0.0, 1 / 3, 2 / 3])))


def make_scene(
    rng: np.random.Generator,
    hw: tuple[int, int],
    class_count: int,
    max_depth: float = 10.0,
    shading: float = 0.6,
) -> Sample:
    """Floor/wall split plus one large box, over a smooth depth field.

    Depth is a tilted plane with a soft bump where the box stands, so it has
    no discontinuities for the x4 upsampling heads to blur; label edges sit
    on a 4-pixel grid.
    Brightness falls with depth and hue encodes the class. Pixel values are
    quantized to 8 bits so PPM storage is lossless.
    """
    h, w = hw
    labels = np.zeros((h, w), dtype=np.int64)
    horizon = 4 * int(rng.integers(h // 12, h // 8 + 1))
    wall, box = rng.choice(np.arange(1, class_count), size=2, replace=class_count < 3)
    labels[:horizon] = wall
    bh, bw = 4 * int(rng.integers(h // 12, h // 8 + 1)), 4 * int(rng.integers(w // 12, w // 8 + 1))
    top = 4 * int(rng.integers(0, (h - bh) // 4 + 1))
    left = 4 * int(rng.integers(0, (w - bw) // 4 + 1))
    labels[top : top + bh, left : left + bw] = box

    # tilted background plane; the box protrudes as a smooth bump centred on it
    ii, jj = np.meshgrid((np.arange(h) + 0.5) / h, (np.arange(w) + 0.5) / w, indexing="ij")
    depth = 0.2 + 0.55 * (1.0 - ii) * rng.uniform(0.7, 1.0) + 0.1 * jj * rng.uniform(-1.0, 1.0)
    ci, cj = (top + bh / 2) / h, (left + bw / 2) / w
    si, sj = bh / (2 * h), bw / (2 * w)
    depth -= 0.15 * np.exp(-0.5 * (((ii - ci) / si) ** 2 + ((jj - cj) / sj) ** 2))
    depth = np.clip(depth, 0.1, 0.95) * max_depth

    shade = 1.0 - shading * depth / max_depth
    image = _palette(class_count)[labels] * shade[..., None]
    image = np.round(np.clip(image, 0.0, 1.0) * 255) / 255
    return Sample(image, depth[..., None], labels[..., None])


def make_scenes(
    n: int, hw: tuple[int, int], class_count: int, seed: int, max_depth: float = 10.0, shading: float = 0.6
) -> list[Sample]:
    rng = np.random.default_rng(seed)
    return [make_scene(rng, hw, class_count, max_depth, shading) for _ in range(n)]


def write_dataset(
    out_dir,
    samples: list[Sample],
    bounds: tuple[float, float] | None = None,
    max_depth: float | None = None,
    teacher_every: int = 0,
) -> Path:
    """Write PPM images, f64 depth and u8 masks plus ``manifest.tsv``; return the manifest path.

    With ``teacher_every = k > 0`` every k-th record stores its mask as a
    teacher pseudo-label instead of ground truth.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records = []
    for i, s in enumerate(samples):
        image, depth, mask = out / f"s{i:03d}.ppm", out / f"s{i:03d}_depth.sdt", out / f"s{i:03d}_mask.sdt"
        data_io.write_pnm(image, s.image)
        data_io.write_tensor(depth, s.depth.astype(np.float64))
        data_io.write_tensor(mask, s.semantics.astype(np.uint8))
        teacher = teacher_every > 0 and i % teacher_every == teacher_every - 1
        records.append(data_io.Record(image, depth, mask if teacher else None, None if teacher else mask))
    lo, hi = bounds if bounds is not None else (None, None)
    manifest = out / "manifest.tsv"
    data_io.write_manifest(manifest, data_io.Manifest(tuple(records), lo, hi, max_depth))
    return manifest
