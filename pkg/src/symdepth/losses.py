"""Training objectives (scale-invariant log depth, soft Jaccard) and evaluation metrics."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor, as_tensor


@dataclass(frozen=True)
class LossConfig:
    lam: float = 0.85
    alpha: float = 10.0
    log_eps: float = 1e-6
    sqrt_eps: float = 1e-12
    iou_eps: float = 1e-7

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lambda must lie in [0, 1], got {self.lam}")
        if self.alpha <= 0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")


@dataclass(frozen=True)
class LossReport:
    depth_loss: float
    semantic_loss: float
    total_loss: float


def si_loss(pred, gt: np.ndarray, valid_mask: np.ndarray, cfg: LossConfig = LossConfig()) -> Tensor:
    """alpha * sqrt(mean(g^2) - lam * mean(g)^2), g = ln(pred) - ln(gt) over valid pixels.

    The square root is shifted by sqrt(eps) so a perfect prediction scores
    exactly zero while the gradient stays finite.
    """
    pred = as_tensor(pred)
    gt = np.asarray(gt, dtype=np.float64)
    valid = np.asarray(valid_mask).astype(bool)
    if pred.shape != gt.shape or valid.shape != gt.shape:
        raise ShapeError(f"si_loss shapes differ: pred {pred.shape}, gt {gt.shape}, mask {valid.shape}")
    idx = np.flatnonzero(valid)
    if idx.size == 0:
        raise ValueError("si_loss needs at least one valid pixel")
    p = T.take_rows(pred.reshape(-1), idx)
    g = T.log(T.clamp_min(p, cfg.log_eps)) - np.log(gt.reshape(-1)[idx])
    spread = (g * g).mean() - cfg.lam * g.mean() ** 2
    root = T.sqrt(T.clamp_min(spread, 0.0) + cfg.sqrt_eps) - np.sqrt(cfg.sqrt_eps)
    return root * cfg.alpha


def one_hot(labels: np.ndarray, classes: int) -> np.ndarray:
    """[..., 1] integer labels to [..., classes]; out-of-range labels (ignore) become zero rows."""
    lab = np.asarray(labels).reshape(np.shape(labels)[:-1]).astype(np.int64)
    return (lab[..., None] == np.arange(classes)).astype(np.float64)


def jaccard_loss(pred_probs, gt_onehot: np.ndarray, eps: float = 1e-7, valid: np.ndarray | None = None) -> Tensor:
    """Mean over classes of 1 - soft IoU, with intersection/union summed over all pixels.

    Classes missing from the target score IoU 1: their smoothed IoU would be
    eps / (sum p + eps), a plateau near 0 with almost no gradient.
    ``valid`` ([..., 1], optional) removes pixels from both prediction and target.
    """
    pred = as_tensor(pred_probs)
    gt = np.asarray(gt_onehot, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ShapeError(f"jaccard shapes differ: pred {pred.shape}, gt {gt.shape}")
    if valid is not None:
        pred = pred * np.asarray(valid, dtype=np.float64)
        gt = gt * np.asarray(valid, dtype=np.float64)
    axes = tuple(range(pred.ndim - 1))
    inter = (pred * gt).sum(axis=axes)
    union = pred.sum(axis=axes) + gt.sum(axis=axes) - inter
    iou = (inter + eps) / (union + eps)
    present = (gt.sum(axis=axes) > 0).astype(np.float64)
    return 1.0 - (iou * present + (1.0 - present)).mean()


def total_loss(depth_l, semantic_l) -> Tensor:
    return as_tensor(depth_l) + as_tensor(semantic_l)


# ------------------------------------------------------------------- metrics
@dataclass
class MetricsReport:
    abs_rel: float
    rms: float
    log10: float
    rms_log: float
    delta1: float
    delta2: float
    delta3: float
    miou: float = float("nan")

    def to_dict(self) -> dict[str, float]:
        return asdict(self)

    def to_text(self) -> str:
        return "".join(f"{k}={v:.6f}\n" for k, v in self.to_dict().items())


def depth_metrics(pred, gt, valid_mask, eps: float = 1e-6) -> MetricsReport:
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    valid = np.asarray(valid_mask).astype(bool)
    if not valid.any():
        raise ValueError("depth_metrics needs at least one valid pixel")
    p = np.maximum(pred[valid], eps)
    g = gt[valid]
    ratio = np.maximum(p / g, g / p)
    return MetricsReport(
        abs_rel=float(np.mean(np.abs(p - g) / g)),
        rms=float(np.sqrt(np.mean((p - g) ** 2))),
        log10=float(np.mean(np.abs(np.log10(p) - np.log10(g)))),
        rms_log=float(np.sqrt(np.mean((np.log(p) - np.log(g)) ** 2))),
        delta1=float(np.mean(ratio < 1.25)),
        delta2=float(np.mean(ratio < 1.25**2)),
        delta3=float(np.mean(ratio < 1.25**3)),
    )


def confusion_matrix(pred: np.ndarray, gt: np.ndarray, classes: int) -> np.ndarray:
    """Rows index ground truth, columns prediction; labels outside [0, classes) are skipped."""
    pred = np.asarray(pred).reshape(-1).astype(np.int64)
    gt = np.asarray(gt).reshape(-1).astype(np.int64)
    keep = (gt >= 0) & (gt < classes) & (pred >= 0) & (pred < classes)
    return np.bincount(gt[keep] * classes + pred[keep], minlength=classes * classes).reshape(classes, classes)


def miou(pred_classes, gt_classes, classes: int) -> float:
    """Hard IoU averaged over classes present in prediction or ground truth."""
    cm = confusion_matrix(pred_classes, gt_classes, classes)
    inter = np.diag(cm).astype(np.float64)
    union = cm.sum(0) + cm.sum(1) - np.diag(cm)
    present = union > 0
    if not present.any():
        return float("nan")
    return float(np.mean(inter[present] / union[present]))
