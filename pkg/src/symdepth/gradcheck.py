"""Central finite-difference verification of tape gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .tensor import NonFiniteError, Tensor, no_grad

ABS_FLOOR = 1e-6
STEP = 1e-4
# The whole-model instance is drawn from its own fixed stream: 4-channel
# LayerNorms occasionally land within a few eps of zero variance, where a
# 1e-4 central difference is no longer an accurate oracle.
MODEL_CASE_SEED = 0


@dataclass
class GradCheckReport:
    op_name: str
    max_rel_err: float
    max_abs_err: float
    passed: bool
    tolerance: float
    checked: int = 0
    message: str = ""

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        text = (
            f"{status} {self.op_name:<28} rel={self.max_rel_err:.3e} "
            f"abs={self.max_abs_err:.3e} tol={self.tolerance:g} n={self.checked}"
        )
        return f"{text} {self.message}" if self.message else text


def _scalarize(out: Tensor, weights: np.ndarray | None) -> Tensor:
    if out.size == 1:
        return out.sum()
    return (out * weights).sum()


def grad_check(
    op: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    tolerance: float = 1e-3,
    name: str = "op",
    max_coords: int | None = None,
    seed: int = 0,
) -> GradCheckReport:
    """Compare reverse-mode gradients of ``op(*inputs)`` with central differences.

    Non-scalar outputs are reduced with a fixed random weighting so every
    output component contributes. Only inputs with ``requires_grad`` are
    perturbed; ``max_coords`` caps the number of perturbed entries per input.
    """
    rng = np.random.default_rng(seed)
    for t in inputs:
        t.grad = None
    try:
        out = op(*inputs)
    except NonFiniteError as exc:
        return GradCheckReport(name, np.inf, np.inf, False, tolerance, 0, str(exc))
    weights = rng.uniform(0.5, 1.5, size=out.shape) if out.size > 1 else None
    _scalarize(out, weights).backward()

    def f() -> float:
        with no_grad():
            return _scalarize(op(*inputs), weights).item()

    max_rel = 0.0
    max_abs = 0.0
    checked = 0
    worst = ""
    for k, t in enumerate(inputs):
        if not t.requires_grad:
            continue
        analytic = np.zeros(t.shape) if t.grad is None else t.grad
        flat = t.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        for idx in coords:
            orig = flat[idx]
            try:
                flat[idx] = orig + STEP
                fp = f()
                flat[idx] = orig - STEP
                fm = f()
            except NonFiniteError as exc:
                flat[idx] = orig
                loc = np.unravel_index(idx, t.shape)
                return GradCheckReport(
                    name, np.inf, np.inf, False, tolerance, checked,
                    f"non-finite forward at input {k} index {tuple(int(i) for i in loc)}: {exc}",
                )
            finally:
                flat[idx] = orig
            numeric = (fp - fm) / (2 * STEP)
            a = float(analytic.reshape(-1)[idx])
            abs_err = abs(a - numeric)
            checked += 1
            if abs_err > max_abs:
                max_abs = abs_err
            if abs_err > ABS_FLOOR:
                rel = abs_err / max(abs(a), abs(numeric))
                if rel > max_rel:
                    max_rel = rel
                    loc = np.unravel_index(idx, t.shape)
                    worst = f"worst at input {k} index {tuple(int(i) for i in loc)}"
    passed = max_rel <= tolerance or max_abs <= ABS_FLOOR
    return GradCheckReport(name, max_rel, max_abs, passed, tolerance, checked, "" if passed else worst)


# ------------------------------------------------------------------ suite
def _leaf(rng: np.random.Generator, *shape: int, low: float | None = None, high: float | None = None) -> Tensor:
    data = rng.normal(size=shape) if low is None else rng.uniform(low, high, size=shape)
    return Tensor(data, requires_grad=True)


def _perturbed(params: dict, rng: np.random.Generator, scale: float = 0.3) -> dict:
    """Move parameters off their init so zero/one-valued entries do not hide bugs."""
    return {k: Tensor(v.data + rng.normal(0, scale, v.shape), requires_grad=True) for k, v in params.items()}


def _with_params(fn, n_plain: int, names: list[str]):
    def call(*args):
        return fn(*args[:n_plain], dict(zip(names, args[n_plain:])))
    return call


def suite_cases(seed: int = 0):
    """(name, fn, inputs, max_coords) for every differentiable op and composite block."""
    from . import attention as A
    from . import losses as L
    from . import model as M
    from . import tensor as T
    from .partition import PartitionSpec, grid_partition, window_partition

    rng = np.random.default_rng(seed)
    r = lambda *s: _leaf(rng, *s)
    cases = [
        ("add", lambda a, b: a + b, [r(3, 4), r(4)], None),
        ("sub", lambda a, b: a - b, [r(3, 4), r(3, 1)], None),
        ("mul", lambda a, b: a * b, [r(3, 4), r(3, 4)], None),
        ("div", lambda a, b: a / (b * b + 1.0), [r(2, 3), r(2, 3)], None),
        ("pow", lambda a: (a * a + 1.0) ** 1.5, [r(5)], None),
        ("exp", T.exp, [r(4)], None),
        ("log", T.log, [_leaf(rng, 5, low=0.5, high=3.0)], None),
        ("sqrt", T.sqrt, [_leaf(rng, 5, low=0.5, high=3.0)], None),
        ("clamp_min", lambda a: T.clamp_min(a, 0.25), [_leaf(rng, 6, low=0.3, high=1.0)], None),
        ("sum", lambda a: a.sum(axis=1), [r(3, 4)], None),
        ("mean", lambda a: a.mean(axis=(0, 2)), [r(2, 3, 4)], None),
        ("reshape", lambda a: a.reshape(6, 2) * a.reshape(6, 2), [r(3, 4)], None),
        ("transpose", lambda a: a.transpose(2, 0, 1) * 1.5, [r(2, 3, 4)], None),
        ("concat", lambda a, b: T.concat([a, b], axis=0), [r(2, 3), r(1, 3)], None),
        ("take_rows", lambda a: T.take_rows(a, np.array([[1, 1], [0, 2]])), [r(3, 2)], None),
        ("matmul", lambda a, b: a @ b, [r(2, 3, 4), r(4, 5)], None),
        ("softmax", lambda a: T.softmax(a, axis=-1), [r(3, 5)], None),
        ("layer_norm", T.layer_norm, [r(2, 3, 6), r(6), r(6)], None),
        ("gelu", T.gelu, [r(3, 4)], None),
        ("sigmoid", T.sigmoid, [r(3, 4)], None),
        ("conv2d", lambda x, k, b: T.conv2d(x, k, b, stride=2), [r(1, 5, 6, 2), r(3, 3, 2, 3), r(3)], None),
        ("conv2d_depthwise", lambda x, k: T.conv2d(x, k, groups=3), [r(1, 4, 4, 3), r(3, 3, 1, 3)], None),
        ("upsample_bilinear", lambda x: T.upsample_bilinear(x, 2), [r(1, 2, 3, 2)], None),
        ("window_partition", lambda x: window_partition(x, PartitionSpec("window", 2, 2)) * 1.0, [r(1, 4, 4, 2)], None),
        ("grid_partition", lambda x: grid_partition(x, PartitionSpec("grid", 2, 2)) * 1.0, [r(1, 4, 4, 2)], None),
    ]

    ca = _perturbed(A.init_cross_attention(rng, 4, 2, (2, 2)), rng)
    ca_names = list(ca)
    cases.append((
        "cross_attention",
        _with_params(lambda q, kv, p: A.cross_attention(q, kv, p, 2, (2, 2)), 2, ca_names),
        [r(2, 4, 4), r(2, 4, 4), *ca.values()], None,
    ))
    mb = _perturbed(A.init_fused_mbconv(rng, 4), rng)
    cases.append(("fused_mbconv", _with_params(A.fused_mbconv, 1, list(mb)), [r(1, 4, 4, 4), *mb.values()], None))

    cfg = A.AttentionConfig(heads=2, head_dim=4, window=(2, 2), grid=(2, 2), ns=2)
    lg = _perturbed(A.init_lg_cat(rng, cfg), rng)
    cases.append((
        "lg_cat",
        _with_params(lambda x, y, p: A.lg_cat(x, y, cfg, p), 2, list(lg)),
        [r(1, 4, 4, 8), r(1, 4, 4, 8), *lg.values()], None,
    ))

    cfg_m = minimal_model_config()
    mp = M.init_params(cfg_m, rng)
    blocks = _perturbed(mp, rng, scale=0.1)
    stem = A.scope(blocks, "stem")
    cases.append(("stem", _with_params(M.stem_forward, 1, list(stem)), [r(1, 8, 8, 3), *stem.values()], None))
    dec = A.scope(blocks, "decoder.stage1")
    cases.append((
        "decoder_step",
        _with_params(M.decoder_step, 2, list(dec)),
        [r(1, 2, 2, 4), r(1, 4, 4, 4), *dec.values()], None,
    ))
    neck = A.scope(blocks, "dss.depth_neck")
    cases.append(("neck", _with_params(M.neck_forward, 1, list(neck)), [r(1, 4, 4, 4), *neck.values()], None))

    gt = rng.uniform(0.5, 9.0, size=(4, 4))
    gt[0, 0] = 0.0
    cases.append(("si_loss", lambda p: L.si_loss(p, gt, gt > 0), [_leaf(rng, 4, 4, low=0.5, high=9.0)], None))
    onehot = L.one_hot(rng.integers(0, 3, size=(1, 3, 3, 1)), 3)
    cases.append(("jaccard_loss", lambda p: L.jaccard_loss(p, onehot), [_leaf(rng, 1, 3, 3, 3, low=0.05, high=1.0)], None))

    rng = np.random.default_rng(MODEL_CASE_SEED)
    mp = M.init_params(cfg_m, rng)
    image = _leaf(rng, 1, *cfg_m.input_hw, 3, low=0.0, high=1.0)
    gt_d = rng.uniform(0.5, cfg_m.max_depth, size=(1, *cfg_m.input_hw, 1))
    gt_s = L.one_hot(rng.integers(0, cfg_m.class_count, size=(1, *cfg_m.input_hw, 1)), cfg_m.class_count)
    names = list(mp)

    def full_model(img, *vals):
        depth, sem = M.model_forward(img, cfg_m, dict(zip(names, vals)))
        return L.total_loss(L.si_loss(depth, gt_d, gt_d > 0), L.jaccard_loss(sem, gt_s))

    cases.append(("model_total_loss", full_model, [image, *mp.values()], 2))
    return cases


def minimal_model_config():
    from .attention import AttentionConfig
    from .model import ModelConfig

    return ModelConfig(
        stage_channels=(4, 4, 8, 8),
        stage_depths=(1, 1, 1, 1),
        stage_heads=(1, 1, 2, 2),
        encoder_window=(2, 2),
        neck_channels=4,
        class_count=3,
        max_depth=10.0,
        attention=AttentionConfig(heads=2, head_dim=2, window=(2, 2), grid=(2, 2), ns=2),
        input_hw=(32, 32),
    )


def run_suite(
    tolerance: float = 1e-3,
    seed: int = 0,
    log: Callable[[str], None] | None = None,
    only: Sequence[str] | None = None,
) -> list[GradCheckReport]:
    """Check every case (or the ``only`` subset, by name) and return the reports in order."""
    cases = suite_cases(seed)
    if only is not None:
        unknown = set(only) - {c[0] for c in cases}
        if unknown:
            raise ValueError(f"unknown grad-check cases: {sorted(unknown)}")
        cases = [c for c in cases if c[0] in set(only)]
    reports = []
    for name, fn, inputs, max_coords in cases:
        report = grad_check(fn, inputs, tolerance=tolerance, name=name, max_coords=max_coords, seed=seed)
        reports.append(report)
        if log is not None:
            log(report.line())
    return reports
