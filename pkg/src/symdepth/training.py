"""Toy semi-supervised training loop and dataset evaluation."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import losses as L
from .augment import Sample, mix_batch
from .config import RunConfig
from .model import init_params, model_forward
from .optim import AdamW, zero_grad
from .tensor import NonFiniteError, Tensor, no_grad


class DivergenceError(FloatingPointError):
    def __init__(self, step: int, detail: str):
        self.step = step
        super().__init__(f"training diverged at step {step}: {detail}")


@dataclass
class TrainResult:
    params: dict[str, Tensor]
    trace: list[L.LossReport] = field(default_factory=list)
    initial: L.LossReport | None = None  # un-augmented training set, before the first step
    final: L.LossReport | None = None  # same set after the last step


def stack(samples: Sequence[Sample]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    return (
        np.stack([s.image for s in samples]),
        np.stack([s.depth for s in samples]),
        np.stack([s.semantics for s in samples]),
    )


def batch_losses(
    params, cfg: RunConfig, images: np.ndarray, depth: np.ndarray, labels: np.ndarray
) -> tuple[Tensor, Tensor]:
    """(depth loss, semantic loss) for one batch; ignore-labelled and invalid-depth pixels are skipped."""
    mc = cfg.model
    pred_d, pred_s = model_forward(images, mc, params)
    valid_d = (depth > 0) & (depth <= mc.max_depth)
    d_loss = L.si_loss(pred_d, depth, valid_d, cfg.loss) if valid_d.any() else Tensor(0.0)
    valid_s = (labels >= 0) & (labels < mc.class_count)
    s_loss = L.jaccard_loss(pred_s, L.one_hot(labels, mc.class_count), cfg.loss.iou_eps, valid=valid_s)
    return d_loss, s_loss


def _report(d: Tensor, s: Tensor) -> L.LossReport:
    dv, sv = d.item(), s.item()
    return L.LossReport(dv, sv, dv + sv)


def dataset_loss(params, cfg: RunConfig, samples: Sequence[Sample]) -> L.LossReport:
    """Loss on the whole set as one batch, without augmentation or gradients."""
    with no_grad():
        return _report(*batch_losses(params, cfg, *stack(samples)))


def _batches(n: int, size: int, rng: np.random.Generator):
    """Endless stream of index batches walking through reshuffled epochs."""
    order: list[int] = []
    while True:
        batch = []
        while len(batch) < min(size, n):
            if not order:
                order = list(rng.permutation(n))
            batch.append(int(order.pop(0)))
        yield batch


def _streams(seed: int) -> list[np.random.SeedSequence]:
    # initialization, batching, augmentation
    return np.random.SeedSequence(seed).spawn(3)


def initial_params(cfg: RunConfig) -> dict[str, Tensor]:
    """The parameters :func:`train` starts from for ``cfg.seed``."""
    return init_params(cfg.model, np.random.default_rng(_streams(cfg.seed)[0]))


def train(
    samples: Sequence[Sample],
    cfg: RunConfig,
    bounds: tuple[float, float] | None,
    params: dict[str, Tensor] | None = None,
    log: Callable[[str], None] | None = None,
) -> TrainResult:
    """AdamW on total loss with NearFarMix per batch; deterministic given ``cfg.seed``.

    Independent random streams drive initialization, batching and
    augmentation so changing one knob does not reshuffle the others.
    """
    if len(samples) < 2:
        raise ValueError("training needs at least two samples")
    if bounds is None and cfg.augmentation.p_apply > 0:
        raise ValueError("NearFarMix needs dataset depth bounds (config or manifest)")
    _, batch_seq, aug_seq = _streams(cfg.seed)
    if params is None:
        params = initial_params(cfg)
    batch_rng, aug_rng = np.random.default_rng(batch_seq), np.random.default_rng(aug_seq)
    opt = AdamW(**asdict(cfg.optimizer))
    result = TrainResult(params)
    try:
        result.initial = dataset_loss(params, cfg, samples)
    except NonFiniteError as exc:
        raise DivergenceError(0, str(exc)) from None
    batches = _batches(len(samples), cfg.batch_size, batch_rng)
    for step in range(1, cfg.steps + 1):
        batch = [samples[i] for i in next(batches)]
        if cfg.augmentation.p_apply > 0:
            batch, _ = mix_batch(batch, bounds, cfg.augmentation.p_apply, aug_rng)
        zero_grad(params)
        try:
            d_loss, s_loss = batch_losses(params, cfg, *stack(batch))
            (d_loss + s_loss).backward()
        except NonFiniteError as exc:
            raise DivergenceError(step, str(exc)) from None
        rep = _report(d_loss, s_loss)
        if not np.isfinite(rep.total_loss) or not all(
            p.grad is None or np.all(np.isfinite(p.grad)) for p in params.values()
        ):
            raise DivergenceError(step, "non-finite loss or gradient")
        opt.step(params)
        result.trace.append(rep)
        if log is not None:
            log(
                f"step={step} depth_loss={rep.depth_loss:.6f} "
                f"semantic_loss={rep.semantic_loss:.6f} total_loss={rep.total_loss:.6f}"
            )
    try:
        result.final = dataset_loss(params, cfg, samples)
    except NonFiniteError as exc:
        raise DivergenceError(cfg.steps, str(exc)) from None
    return result


def evaluate(
    samples: Sequence[Sample],
    cfg: RunConfig,
    params=None,
    gt_as_prediction: bool = False,
    batch_size: int = 4,
) -> L.MetricsReport:
    """Depth metrics and mIoU pooled over every valid pixel of ``samples``.

    ``gt_as_prediction`` substitutes the labels for the model output (identity check).
    """
    mc = cfg.model
    pd, pc, gd, gc = [], [], [], []
    for i in range(0, len(samples), batch_size):
        images, depth, labels = stack(samples[i : i + batch_size])
        if gt_as_prediction:
            pred_d, pred_c = depth, labels[..., 0]
        else:
            with no_grad():
                d, s = model_forward(images, mc, params)
            pred_d, pred_c = d.data, np.argmax(s.data, axis=-1)
        pd.append(pred_d.reshape(-1))
        gd.append(depth.reshape(-1))
        pc.append(pred_c.reshape(-1))
        gc.append(labels.reshape(-1))
    pred_d, gt_d = np.concatenate(pd), np.concatenate(gd)
    pred_c, gt_c = np.concatenate(pc), np.concatenate(gc)
    report = L.depth_metrics(pred_d, gt_d, (gt_d > 0) & (gt_d <= mc.max_depth))
    keep = (gt_c >= 0) & (gt_c < mc.class_count)
    report.miou = L.miou(pred_c[keep], gt_c[keep], mc.class_count) if keep.any() else float("nan")
    return report
