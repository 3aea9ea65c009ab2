"""Toy-scale depth/semantics network: stem, Max-ViT-style encoder, skip decoder,
twin necks, symbiotic transformer and twin heads.

Stride plan: stem /2, encoder stages /4, /8, /16, /32; the decoder climbs
back to /4 where the necks, the symbiotic transformer and the heads run;
heads upsample x4 to full resolution.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Mapping

import numpy as np

from . import tensor as T
from .attention import (
    AttentionConfig,
    Params,
    block_cross_attention,
    fused_mbconv,
    grid_cross_attention,
    init_cross_attention,
    init_fused_mbconv,
    init_layer_norm,
    init_lg_cat,
    prefixed,
    scope,
    symbiotic_transformer,
)
from .tensor import ShapeError, Tensor, as_tensor


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    stage_channels: tuple[int, ...] = (8, 16, 32, 64)
    stage_depths: tuple[int, ...] = (1, 1, 1, 1)
    stage_heads: tuple[int, ...] = (1, 2, 4, 4)
    encoder_window: tuple[int, int] = (2, 2)
    neck_channels: int = 16
    class_count: int = 8
    max_depth: float = 10.0
    attention: AttentionConfig = field(
        default_factory=lambda: AttentionConfig(heads=2, head_dim=8, window=(2, 2), grid=(2, 2), ns=2)
    )
    input_hw: tuple[int, int] = (64, 64)

    def __post_init__(self):
        for name in ("stage_channels", "stage_depths", "stage_heads", "encoder_window", "input_hw"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if isinstance(self.attention, Mapping):
            object.__setattr__(self, "attention", AttentionConfig(**self.attention))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping) -> ModelConfig:
        return cls(**dict(data))

    def stage_hw(self, stage: int) -> tuple[int, int]:
        """Spatial dims of encoder output E_stage (stage 0 is the stem)."""
        h, w = self.input_hw
        return h // 2 ** (stage + 1), w // 2 ** (stage + 1)

    def stage_window(self, stage: int) -> tuple[int, int]:
        """Encoder window/grid size at a stage, clamped to the feature map."""
        h, w = self.stage_hw(stage)
        return min(self.encoder_window[0], h), min(self.encoder_window[1], w)

    def validate(self) -> None:
        if len(self.stage_channels) != 4 or len(self.stage_depths) != 4 or len(self.stage_heads) != 4:
            raise ConfigError("stage_channels, stage_depths and stage_heads need 4 entries each")
        h, w = self.input_hw
        if h % 32 or w % 32:
            raise ConfigError(f"input dims {h}x{w} must be divisible by 32")
        if self.class_count < 2:
            raise ConfigError("class_count must be >= 2")
        if self.max_depth <= 0:
            raise ConfigError("max_depth must be positive")
        for i, (c, heads) in enumerate(zip(self.stage_channels, self.stage_heads)):
            if c % heads:
                raise ConfigError(f"stage {i + 1}: channels {c} not divisible by heads {heads}")
            sh, sw = self.stage_hw(i + 1)
            wh, ww = self.stage_window(i + 1)
            if sh % wh or sw % ww:
                raise ConfigError(f"stage {i + 1}: {sh}x{sw} features not divisible by window {wh}x{ww}")
        if self.neck_channels != self.attention.channels:
            raise ConfigError(
                f"neck_channels {self.neck_channels} != attention heads*head_dim {self.attention.channels}"
            )
        nh, nw = self.stage_hw(1)
        for kind, (ph, pw) in (("window", self.attention.window), ("grid", self.attention.grid)):
            if nh % ph or nw % pw:
                raise ConfigError(f"neck features {nh}x{nw} not divisible by {kind} {ph}x{pw}")


@dataclass
class FeaturePyramid:
    encoder: list[Tensor]  # E0 .. E4
    decoder: dict[int, Tensor]  # 4 -> D4 (= E4), ..., 1 -> D1


# ------------------------------------------------------------------- blocks
def conv_norm_act(x, params: Mapping[str, Tensor], stride: int = 1) -> Tensor:
    y = T.conv2d(x, params["conv.kernel"], params["conv.bias"], stride=stride)
    y = T.layer_norm(y, params["norm.gamma"], params["norm.beta"])
    return T.gelu(y)


def stem_forward(image, params: Mapping[str, Tensor]) -> Tensor:
    image = as_tensor(image)
    if image.ndim != 4 or image.shape[1] % 2 or image.shape[2] % 2:
        raise ShapeError(f"stem needs [B,H,W,3] with even H, W; got {image.shape}")
    x = conv_norm_act(image, scope(params, "conv1"), stride=2)
    return conv_norm_act(x, scope(params, "conv2"), stride=1)


def encoder_block(x: Tensor, params: Mapping[str, Tensor], heads: int, window: tuple[int, int]) -> Tensor:
    """FusedMBConv followed by windowed and grid self-attention."""
    x = fused_mbconv(x, scope(params, "mbconv"))
    x = block_cross_attention(x, x, scope(params, "block"), heads, window)
    return grid_cross_attention(x, x, scope(params, "grid"), heads, window)


def encoder_forward(x, cfg: ModelConfig, params: Mapping[str, Tensor]) -> list[Tensor]:
    """Four stride-2 stages; returns [E1, E2, E3, E4]."""
    feats = []
    x = as_tensor(x)
    for i in range(4):
        stage = scope(params, f"stage{i + 1}")
        x = conv_norm_act(x, scope(stage, "down"), stride=2)
        for j in range(cfg.stage_depths[i]):
            x = encoder_block(x, scope(stage, f"block{j}"), cfg.stage_heads[i], cfg.stage_window(i + 1))
        feats.append(x)
    return feats


def decoder_step(d_prev, e_skip, params: Mapping[str, Tensor]) -> Tensor:
    d_prev, e_skip = as_tensor(d_prev), as_tensor(e_skip)
    up = T.upsample_bilinear(d_prev, 2)
    if up.shape[:3] != e_skip.shape[:3]:
        raise ShapeError(f"upsampled decoder features {up.shape} do not align with skip {e_skip.shape}")
    return conv_norm_act(T.concat([e_skip, up], axis=-1), params)


def neck_forward(d1, params: Mapping[str, Tensor]) -> Tensor:
    x = conv_norm_act(d1, scope(params, "layer1"))
    return conv_norm_act(x, scope(params, "layer2"))


def dss_forward(d1, cfg: ModelConfig, params: Mapping[str, Tensor]) -> tuple[Tensor, Tensor]:
    f_d = neck_forward(d1, scope(params, "depth_neck"))
    f_s = neck_forward(d1, scope(params, "semantic_neck"))
    return symbiotic_transformer(f_d, f_s, cfg.attention, scope(params, "dgt"), scope(params, "sgt"))


def head_forward(f, kind: str, cfg: ModelConfig, params: Mapping[str, Tensor]) -> Tensor:
    y = T.conv2d(f, params["conv.kernel"], params["conv.bias"])
    if kind == "depth":
        return T.upsample_bilinear(T.sigmoid(y), 4) * cfg.max_depth
    if kind == "semantics":
        return T.upsample_bilinear(T.softmax(y, axis=-1), 4)
    raise ValueError(f"unknown head kind {kind!r}")


def pyramid_forward(image, cfg: ModelConfig, params: Mapping[str, Tensor]) -> FeaturePyramid:
    e0 = stem_forward(image, scope(params, "stem"))
    enc = [e0, *encoder_forward(e0, cfg, scope(params, "encoder"))]
    dec = {4: enc[4]}
    for i in (3, 2, 1):
        dec[i] = decoder_step(dec[i + 1], enc[i], scope(params, f"decoder.stage{i}"))
    return FeaturePyramid(enc, dec)


def model_forward(image, cfg: ModelConfig, params: Mapping[str, Tensor]) -> tuple[Tensor, Tensor]:
    """Returns ``(depth [B,H,W,1] in meters, semantic probabilities [B,H,W,C_s])``."""
    image = as_tensor(image)
    if tuple(image.shape[1:3]) != tuple(cfg.input_hw) or image.shape[3] != 3:
        raise ShapeError(f"model expects [B,{cfg.input_hw[0]},{cfg.input_hw[1]},3], got {image.shape}")
    pyr = pyramid_forward(image, cfg, params)
    f_d, f_s = dss_forward(pyr.decoder[1], cfg, scope(params, "dss"))
    depth = head_forward(f_d, "depth", cfg, scope(params, "depth_head"))
    sem = head_forward(f_s, "semantics", cfg, scope(params, "semantic_head"))
    return depth, sem


# ------------------------------------------------------------ initialization
def conv_kernel(rng: np.random.Generator, k: int, cin: int, cout: int) -> Tensor:
    # fan-in scaling keeps pre-norm activations O(1); a 0.02 std leaves the
    # 4-channel stem LayerNorm operating near its eps
    return T.trunc_normal(rng, (k, k, cin, cout), std=1.0 / np.sqrt(k * k * cin))


def init_conv_norm(rng: np.random.Generator, cin: int, cout: int, k: int = 3) -> Params:
    p = {
        "conv.kernel": conv_kernel(rng, k, cin, cout),
        "conv.bias": T.zeros((cout,), requires_grad=True),
    }
    p.update(prefixed(init_layer_norm(cout), "norm"))
    return p


def init_params(cfg: ModelConfig, rng: np.random.Generator) -> Params:
    cfg.validate()
    ch = cfg.stage_channels
    p: Params = {}
    p.update(prefixed(init_conv_norm(rng, 3, ch[0]), "stem.conv1"))
    p.update(prefixed(init_conv_norm(rng, ch[0], ch[0]), "stem.conv2"))
    cin = ch[0]
    for i in range(4):
        base = f"encoder.stage{i + 1}"
        p.update(prefixed(init_conv_norm(rng, cin, ch[i]), f"{base}.down"))
        win = cfg.stage_window(i + 1)
        for j in range(cfg.stage_depths[i]):
            blk = f"{base}.block{j}"
            p.update(prefixed(init_fused_mbconv(rng, ch[i]), f"{blk}.mbconv"))
            p.update(prefixed(init_cross_attention(rng, ch[i], cfg.stage_heads[i], win), f"{blk}.block"))
            p.update(prefixed(init_cross_attention(rng, ch[i], cfg.stage_heads[i], win), f"{blk}.grid"))
        cin = ch[i]
    # decoder stage i consumes [E_i, up(D_{i+1})] and emits stage_channels[i-1]
    for i in (3, 2, 1):
        d_in = ch[3] if i == 3 else ch[i]
        p.update(prefixed(init_conv_norm(rng, ch[i - 1] + d_in, ch[i - 1]), f"decoder.stage{i}"))
    c = cfg.neck_channels
    for neck in ("depth_neck", "semantic_neck"):
        p.update(prefixed(init_conv_norm(rng, ch[0], c), f"dss.{neck}.layer1"))
        p.update(prefixed(init_conv_norm(rng, c, c), f"dss.{neck}.layer2"))
    p.update(prefixed(init_lg_cat(rng, cfg.attention), "dss.dgt"))
    p.update(prefixed(init_lg_cat(rng, cfg.attention), "dss.sgt"))
    for name, cout in (("depth_head", 1), ("semantic_head", cfg.class_count)):
        p[f"{name}.conv.kernel"] = conv_kernel(rng, 3, c, cout)
        p[f"{name}.conv.bias"] = T.zeros((cout,), requires_grad=True)
    return p


def parameter_count(params: Mapping[str, Tensor]) -> int:
    return sum(v.size for v in params.values())
