"""Local-global cross-attention building blocks.

Parameters are flat ``dict[str, Tensor]`` mappings with dotted keys so a
whole model serializes as one named manifest. A cross-attention parameter
set holds::

    ln_q.gamma, ln_q.beta     query-side layer norm (absent when the caller
                              supplies an already-normalized query)
    ln_kv.gamma, ln_kv.beta   key/value-side layer norm
    wq, wk, wv, wo            [C, C] projections
    bo                        [C] output bias
    rel_table                 [(2h-1)(2w-1), heads] relative position bias
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from . import tensor as T
from .partition import PartitionSpec, check_divisible, partition, reverse
from .tensor import ShapeError, Tensor, as_tensor

Params = dict[str, Tensor]


def scope(params: Mapping[str, Tensor], prefix: str) -> Params:
    """View of the entries under ``prefix.`` with the prefix stripped."""
    head = prefix + "."
    return {k[len(head):]: v for k, v in params.items() if k.startswith(head)}


def prefixed(params: Mapping[str, Tensor], prefix: str) -> Params:
    return {f"{prefix}.{k}": v for k, v in params.items()}


@dataclass(frozen=True)
class AttentionConfig:
    heads: int = 4
    head_dim: int = 8
    window: tuple[int, int] = (7, 7)
    grid: tuple[int, int] = (7, 7)
    ns: int = 2

    def __post_init__(self):
        if self.heads < 1 or self.head_dim < 1 or self.ns < 1:
            raise ValueError("heads, head_dim and ns must all be >= 1")
        object.__setattr__(self, "window", tuple(self.window))
        object.__setattr__(self, "grid", tuple(self.grid))

    @property
    def channels(self) -> int:
        return self.heads * self.head_dim

    @property
    def window_spec(self) -> PartitionSpec:
        return PartitionSpec("window", *self.window)

    @property
    def grid_spec(self) -> PartitionSpec:
        return PartitionSpec("grid", *self.grid)


# ------------------------------------------------------------- relative bias
@dataclass
class RelPosBias:
    table: Tensor
    window: tuple[int, int]
    index: np.ndarray = field(init=False)

    def __post_init__(self):
        h, w = self.window
        rows = (2 * h - 1) * (2 * w - 1)
        if self.table.ndim != 2 or self.table.shape[0] != rows:
            raise ShapeError(
                f"bias table {self.table.shape} does not fit a {h}x{w} window ({rows} rows)"
            )
        self.index = relative_position_index(h, w)


def relative_position_index(h: int, w: int) -> np.ndarray:
    """[h*w, h*w] map from (query, key) positions to bias-table rows."""
    ii, jj = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    coords = np.stack([ii.reshape(-1), jj.reshape(-1)])  # [2, L]
    rel = coords[:, :, None] - coords[:, None, :]
    return (rel[0] + h - 1) * (2 * w - 1) + (rel[1] + w - 1)


def relative_bias_matrix(rb: RelPosBias, window: tuple[int, int]) -> Tensor:
    if tuple(window) != tuple(rb.window):
        raise ShapeError(f"bias built for window {rb.window}, asked for {tuple(window)}")
    bias = T.take_rows(rb.table, rb.index)  # [L, L, heads]
    return bias.transpose(2, 0, 1)


# ------------------------------------------------------------ cross attention
def attention_weights(q: Tensor, k: Tensor, bias: Tensor | None) -> Tensor:
    """Softmax(q k^T / sqrt(d) + bias) over the key axis; q, k are [..., L, d]."""
    d = q.shape[-1]
    logits = (q @ T.swap_last(k)) * (1.0 / math.sqrt(d))
    if bias is not None:
        logits = logits + bias
    return T.softmax(logits, axis=-1)


def _split_heads(x: Tensor, heads: int) -> Tensor:
    n, length, c = x.shape
    return x.reshape(n, length, heads, c // heads).transpose(0, 2, 1, 3)


def _merge_heads(x: Tensor) -> Tensor:
    n, heads, length, d = x.shape
    return x.transpose(0, 2, 1, 3).reshape(n, length, heads * d)


def cross_attention(
    q_feats, kv_feats, params: Mapping[str, Tensor], heads: int, window: tuple[int, int]
) -> Tensor:
    """Multi-head cross-attention of [N, L, C] query features over [N, L, C] key/value features."""
    q_feats, kv_feats = as_tensor(q_feats), as_tensor(kv_feats)
    if q_feats.ndim != 3 or q_feats.shape != kv_feats.shape:
        raise ShapeError(f"query {q_feats.shape} and key/value {kv_feats.shape} must match as [N, L, C]")
    _, length, c = q_feats.shape
    if c % heads:
        raise ShapeError(f"channels {c} not divisible by heads {heads}")
    if length != window[0] * window[1]:
        raise ShapeError(f"sequence length {length} != window area {window[0]}x{window[1]}")
    q = _split_heads(q_feats @ params["wq"], heads)
    k = _split_heads(kv_feats @ params["wk"], heads)
    v = _split_heads(kv_feats @ params["wv"], heads)
    bias = relative_bias_matrix(RelPosBias(params["rel_table"], tuple(window)), window)
    attn = attention_weights(q, k, bias)
    return _merge_heads(attn @ v) @ params["wo"] + params["bo"]


def _norm(x: Tensor, params: Mapping[str, Tensor], role: str) -> Tensor:
    return T.layer_norm(x, params[f"{role}.gamma"], params[f"{role}.beta"])


def _partitioned_cross_attention(
    xq_normed: Tensor, y: Tensor, params: Mapping[str, Tensor], heads: int, spec: PartitionSpec
) -> Tensor:
    if xq_normed.shape != y.shape or y.ndim != 4:
        raise ShapeError(f"query {xq_normed.shape} and key/value {y.shape} must match as [B,H,W,C]")
    b, h, w, c = y.shape
    check_divisible(h, w, spec)
    y1 = _norm(y, params, "ln_kv")
    n = b * (h * w) // spec.area
    xw = partition(xq_normed, spec).reshape(n, spec.area, c)
    yw = partition(y1, spec).reshape(n, spec.area, c)
    out = cross_attention(xw, yw, params, heads, (spec.h, spec.w))
    return y + reverse(out.reshape(n, spec.h, spec.w, c), spec, y.shape)


def block_cross_attention(
    x_q, y_kv, params: Mapping[str, Tensor], heads: int, window: tuple[int, int],
    query_normed: Tensor | None = None,
) -> Tensor:
    """Windowed cross-attention; the residual lands on the un-normalized ``y_kv``."""
    y = as_tensor(y_kv)
    xq = query_normed if query_normed is not None else _norm(as_tensor(x_q), params, "ln_q")
    return _partitioned_cross_attention(xq, y, params, heads, PartitionSpec("window", *window))


def grid_cross_attention(
    x_q, y_kv, params: Mapping[str, Tensor], heads: int, grid: tuple[int, int],
    query_normed: Tensor | None = None,
) -> Tensor:
    """Strided-grid cross-attention; same contract as :func:`block_cross_attention`."""
    y = as_tensor(y_kv)
    xq = query_normed if query_normed is not None else _norm(as_tensor(x_q), params, "ln_q")
    return _partitioned_cross_attention(xq, y, params, heads, PartitionSpec("grid", *grid))


# --------------------------------------------------------------- FusedMBConv
def squeeze_excitation(x: Tensor, params: Mapping[str, Tensor]) -> Tensor:
    pooled = x.mean(axis=(1, 2), keepdims=True)
    s = T.gelu(pooled @ params["reduce.w"] + params["reduce.b"])
    gate = T.sigmoid(s @ params["expand.w"] + params["expand.b"])
    return x * gate


def fused_mbconv(y, params: Mapping[str, Tensor]) -> Tensor:
    y = as_tensor(y)
    c = y.shape[-1]
    z = T.conv2d(y, params["dw.kernel"], params["dw.bias"], groups=c)
    z = T.gelu(z)
    z = squeeze_excitation(z, scope(params, "se"))
    z = T.conv2d(z, params["pw.kernel"], params["pw.bias"])
    return y + z


# -------------------------------------------------------------------- LG-CAT
def lg_cat(x_q, y_kv, cfg: AttentionConfig, params: Mapping[str, Tensor]) -> Tensor:
    """Alternate block and grid cross-attention ``cfg.ns`` times, then FusedMBConv.

    The query stream ``x_q`` stays fixed; each round normalizes it once and
    reuses that for both the block and the grid half.
    """
    x, y = as_tensor(x_q), as_tensor(y_kv)
    if x.shape != y.shape:
        raise ShapeError(f"LG-CAT query {x.shape} and key/value {y.shape} differ")
    for i in range(cfg.ns):
        block = scope(params, f"iter{i}.block")
        grid = scope(params, f"iter{i}.grid")
        x1 = _norm(x, block, "ln_q")
        y = block_cross_attention(x, y, block, cfg.heads, cfg.window, query_normed=x1)
        y = grid_cross_attention(x, y, grid, cfg.heads, cfg.grid, query_normed=x1)
    return fused_mbconv(y, scope(params, "mbconv"))


def symbiotic_transformer(
    f_d, f_s, cfg: AttentionConfig, params_dg: Mapping[str, Tensor], params_sg: Mapping[str, Tensor]
) -> tuple[Tensor, Tensor]:
    """Depth-guided and semantics-guided LG-CAT applied in parallel to the same inputs.

    Returns ``(f_d_out, f_s_out)``: depth features contextualized by
    semantics queries, and semantics features contextualized by depth queries.
    """
    f_d, f_s = as_tensor(f_d), as_tensor(f_s)
    if f_d.shape != f_s.shape:
        raise ShapeError(f"depth features {f_d.shape} and semantic features {f_s.shape} differ")
    f_s_out = lg_cat(f_d, f_s, cfg, params_dg)
    f_d_out = lg_cat(f_s, f_d, cfg, params_sg)
    return f_d_out, f_s_out


# ------------------------------------------------------------ initialization
def init_layer_norm(channels: int) -> Params:
    return {
        "gamma": Tensor(np.ones(channels), requires_grad=True),
        "beta": Tensor(np.zeros(channels), requires_grad=True),
    }


def init_cross_attention(
    rng: np.random.Generator, channels: int, heads: int, window: tuple[int, int],
    query_norm: bool = True,
) -> Params:
    if channels % heads:
        raise ValueError(f"channels {channels} not divisible by heads {heads}")
    rows = (2 * window[0] - 1) * (2 * window[1] - 1)
    p: Params = {}
    if query_norm:
        p.update(prefixed(init_layer_norm(channels), "ln_q"))
    p.update(prefixed(init_layer_norm(channels), "ln_kv"))
    for name in ("wq", "wk", "wv", "wo"):
        p[name] = T.trunc_normal(rng, (channels, channels))
    p["bo"] = T.zeros((channels,), requires_grad=True)
    p["rel_table"] = T.trunc_normal(rng, (rows, heads))
    return p


def init_fused_mbconv(rng: np.random.Generator, channels: int, se_ratio: int = 4) -> Params:
    hidden = max(1, channels // se_ratio)
    return {
        "dw.kernel": T.trunc_normal(rng, (3, 3, 1, channels)),
        "dw.bias": T.zeros((channels,), requires_grad=True),
        "se.reduce.w": T.trunc_normal(rng, (channels, hidden)),
        "se.reduce.b": T.zeros((hidden,), requires_grad=True),
        "se.expand.w": T.trunc_normal(rng, (hidden, channels)),
        "se.expand.b": T.zeros((channels,), requires_grad=True),
        "pw.kernel": T.trunc_normal(rng, (1, 1, channels, channels)),
        "pw.bias": T.zeros((channels,), requires_grad=True),
    }


def init_lg_cat(rng: np.random.Generator, cfg: AttentionConfig) -> Params:
    p: Params = {}
    c = cfg.channels
    for i in range(cfg.ns):
        p.update(prefixed(init_cross_attention(rng, c, cfg.heads, cfg.window), f"iter{i}.block"))
        p.update(
            prefixed(
                init_cross_attention(rng, c, cfg.heads, cfg.grid, query_norm=False), f"iter{i}.grid"
            )
        )
    p.update(prefixed(init_fused_mbconv(rng, c), "mbconv"))
    return p


def residual_branch_keys(params: Mapping[str, Tensor]) -> list[str]:
    """Keys whose zeroing turns every attention/MBConv branch into the identity."""
    tails = (".wo", ".bo", "pw.kernel", "pw.bias")
    return [k for k in params if k.endswith(tails) or k in ("wo", "bo")]
