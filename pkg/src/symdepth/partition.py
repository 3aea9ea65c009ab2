"""Window and grid partitions of NHWC feature maps and their inverses.

Both are pure reshape/transpose permutations, so they are differentiable
through the tensor ops and exactly invertible.
"""

from __future__ import annotations

from dataclasses import dataclass

from .tensor import ShapeError, Tensor, as_tensor


@dataclass(frozen=True)
class PartitionSpec:
    kind: str  # "window" or "grid"
    h: int
    w: int

    def __post_init__(self):
        if self.kind not in ("window", "grid"):
            raise ValueError(f"partition kind must be 'window' or 'grid', got {self.kind!r}")
        if self.h < 1 or self.w < 1:
            raise ValueError(f"partition size must be positive, got {self.h}x{self.w}")

    @property
    def area(self) -> int:
        return self.h * self.w


def check_divisible(height: int, width: int, spec: PartitionSpec) -> None:
    if height % spec.h:
        raise ShapeError(f"height H={height} is not divisible by {spec.kind} height {spec.h}")
    if width % spec.w:
        raise ShapeError(f"width W={width} is not divisible by {spec.kind} width {spec.w}")


def _dims(x: Tensor) -> tuple[int, int, int, int]:
    if x.ndim != 4:
        raise ShapeError(f"expected [B,H,W,C] features, got shape {x.shape}")
    return x.shape


def window_partition(x, spec: PartitionSpec) -> Tensor:
    x = as_tensor(x)
    b, h, w, c = _dims(x)
    check_divisible(h, w, spec)
    hw, ww = spec.h, spec.w
    x = x.reshape(b, h // hw, hw, w // ww, ww, c)
    x = x.transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b * (h * w) // (hw * ww), hw, ww, c)


def window_reverse(x, spec: PartitionSpec, orig: tuple[int, int, int, int]) -> Tensor:
    x = as_tensor(x)
    b, h, w, c = orig
    check_divisible(h, w, spec)
    if x.size != b * h * w * c or x.shape[1:] != (spec.h, spec.w, c):
        raise ShapeError(f"windows of shape {x.shape} cannot be reversed into {tuple(orig)}")
    hw, ww = spec.h, spec.w
    x = x.reshape(b, h // hw, w // ww, hw, ww, c)
    x = x.transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b, h, w, c)


def grid_partition(x, spec: PartitionSpec) -> Tensor:
    """Each output window gathers positions strided by (H/h, W/w)."""
    x = as_tensor(x)
    b, h, w, c = _dims(x)
    check_divisible(h, w, spec)
    hg, wg = spec.h, spec.w
    x = x.reshape(b, hg, h // hg, wg, w // wg, c)
    x = x.transpose(0, 1, 3, 2, 4, 5)
    x = x.reshape(b, hg * wg, (h * w) // (hg * wg), c)
    x = x.transpose(0, 2, 1, 3)
    return x.reshape(b * (h * w) // (hg * wg), hg, wg, c)


def grid_reverse(x, spec: PartitionSpec, orig: tuple[int, int, int, int]) -> Tensor:
    x = as_tensor(x)
    b, h, w, c = orig
    check_divisible(h, w, spec)
    if x.size != b * h * w * c or x.shape[1:] != (spec.h, spec.w, c):
        raise ShapeError(f"grid windows of shape {x.shape} cannot be reversed into {tuple(orig)}")
    hg, wg = spec.h, spec.w
    x = x.reshape(b, (h * w) // (hg * wg), hg * wg, c)
    x = x.transpose(0, 2, 1, 3)
    x = x.reshape(b, hg, wg, h // hg, w // wg, c)
    x = x.transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b, h, w, c)


def partition(x, spec: PartitionSpec) -> Tensor:
    return window_partition(x, spec) if spec.kind == "window" else grid_partition(x, spec)


def reverse(x, spec: PartitionSpec, orig: tuple[int, int, int, int]) -> Tensor:
    if spec.kind == "window":
        return window_reverse(x, spec, orig)
    return grid_reverse(x, spec, orig)
