import dataclasses

import numpy as np
import pytest
from scipy.special import erf

from symdepth import model as M
from symdepth.attention import AttentionConfig, fused_mbconv, residual_branch_keys, scope
from symdepth.gradcheck import grad_check, minimal_model_config
from symdepth.tensor import ShapeError, Tensor, no_grad


def np_gelu(x):
    return 0.5 * x * (1 + erf(x / np.sqrt(2)))


def np_ln(x, eps=1e-5):
    mu = x.mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(x.var(-1, keepdims=True) + eps)


def fresh(params):
    return {k: Tensor(v.data.copy(), requires_grad=True) for k, v in params.items()}


def jitter(params, rng, scale=0.1):
    return {k: Tensor(v.data + rng.normal(0, scale, v.shape), requires_grad=True) for k, v in params.items()}


@pytest.fixture(scope="module")
def toy():
    cfg = M.ModelConfig()
    return cfg, M.init_params(cfg, np.random.default_rng(0))


@pytest.fixture(scope="module")
def tiny():
    cfg = minimal_model_config()
    return cfg, M.init_params(cfg, np.random.default_rng(1))


# ------------------------------------------------------------------ stem
def test_stem_halves_resolution(toy):
    cfg, p = toy
    x = np.random.default_rng(2).uniform(size=(1, 64, 64, 3))
    with no_grad():
        out = M.stem_forward(x, scope(p, "stem"))
    assert out.shape == (1, 32, 32, cfg.stage_channels[0])


def test_stem_zero_weights_give_zero_map(toy):
    _, p = toy
    zeros = {k: Tensor(np.zeros_like(v.data)) for k, v in scope(p, "stem").items()}
    x = np.random.default_rng(3).uniform(size=(2, 8, 8, 3))
    assert np.array_equal(M.stem_forward(x, zeros).data, np.zeros((2, 4, 4, 8)))


def test_stem_rejects_odd_dims(toy):
    _, p = toy
    with pytest.raises(ShapeError):
        M.stem_forward(np.zeros((1, 7, 8, 3)), scope(p, "stem"))


def test_stem_gradient(tiny):
    _, p = tiny
    rng = np.random.default_rng(4)
    stem = jitter(scope(p, "stem"), rng)
    names = list(stem)
    x = Tensor(rng.uniform(size=(1, 8, 8, 3)), requires_grad=True)
    report = grad_check(lambda img, *v: M.stem_forward(img, dict(zip(names, v))), [x, *stem.values()], name="stem")
    assert report.passed, report.line()


# --------------------------------------------------------------- encoder
def test_shape_ladder(toy):
    cfg, p = toy
    x = np.random.default_rng(5).uniform(size=(1, 64, 64, 3))
    with no_grad():
        pyr = M.pyramid_forward(x, cfg, p)
    assert [e.shape[1] for e in pyr.encoder] == [32, 16, 8, 4, 2]
    assert [e.shape[-1] for e in pyr.encoder[1:]] == list(cfg.stage_channels)
    for i in (1, 2, 3, 4):
        assert pyr.decoder[i].shape[1:3] == pyr.encoder[i].shape[1:3]
    assert pyr.decoder[4] is pyr.encoder[4]
    assert pyr.decoder[1].shape[-1] == cfg.stage_channels[0]


def test_zero_attention_projections_leave_conv_path(toy):
    _, p = toy
    blk = fresh(scope(p, "encoder.stage2.block0"))
    for k in ("block.wo", "block.bo", "grid.wo", "grid.bo"):
        blk[k] = Tensor(np.zeros_like(blk[k].data))
    x = np.random.default_rng(6).normal(size=(1, 8, 8, 16))
    with no_grad():
        got = M.encoder_block(Tensor(x), blk, heads=2, window=(2, 2)).data
        want = fused_mbconv(Tensor(x), scope(blk, "mbconv")).data
    assert np.array_equal(got, want)


def test_single_pixel_perturbation_reaches_all_of_e4(toy):
    cfg, p = toy
    rng = np.random.default_rng(7)
    x = rng.uniform(size=(1, 64, 64, 3))
    with no_grad():
        base = M.pyramid_forward(x, cfg, p).encoder[4].data
        for i, j in [(0, 0), (37, 5), (63, 63)]:
            y = x.copy()
            y[0, i, j] += 0.5
            moved = np.abs(M.pyramid_forward(y, cfg, p).encoder[4].data - base).max(axis=-1)
            assert (moved > 0).all(), (i, j)


def test_one_block_has_global_reach():
    # a single encoder block on an 8x8 map: one perturbed position moves every position
    cfg = M.ModelConfig()
    p = M.init_params(cfg, np.random.default_rng(8))
    blk = scope(p, "encoder.stage2.block0")
    x = np.random.default_rng(9).normal(size=(1, 8, 8, 16))
    with no_grad():
        base = M.encoder_block(Tensor(x), blk, 2, (2, 2)).data
        y = x.copy()
        y[0, 3, 6] += 1.0
        moved = np.abs(M.encoder_block(Tensor(y), blk, 2, (2, 2)).data - base).max(axis=-1)
    assert (moved > 0).all()


# --------------------------------------------------------------- decoder
def test_decoder_zero_skip_gives_gelu_of_normed_bias():
    rng = np.random.default_rng(10)
    c_e, c_d, c_out = 4, 8, 6
    kernel = np.zeros((3, 3, c_e + c_d, c_out))
    kernel[:, :, :c_e] = rng.normal(size=(3, 3, c_e, c_out))  # reads skip channels only
    bias = rng.normal(size=c_out)
    params = {
        "conv.kernel": Tensor(kernel),
        "conv.bias": Tensor(bias),
        "norm.gamma": Tensor(np.ones(c_out)),
        "norm.beta": Tensor(np.zeros(c_out)),
    }
    out = M.decoder_step(rng.normal(size=(1, 2, 2, c_d)), np.zeros((1, 4, 4, c_e)), params).data
    want = np.broadcast_to(np_gelu(np_ln(bias)), (1, 4, 4, c_out))
    assert out.shape == (1, 4, 4, c_out)
    assert np.allclose(out, want, atol=1e-12)


def test_decoder_concat_order_is_skip_first():
    rng = np.random.default_rng(11)
    kernel = np.zeros((3, 3, 12, 3))
    kernel[1, 1, 4:] = rng.normal(size=(8, 3))  # centre tap on the upsampled channels only
    params = {
        "conv.kernel": Tensor(kernel),
        "conv.bias": Tensor(np.zeros(3)),
        "norm.gamma": Tensor(np.ones(3)),
        "norm.beta": Tensor(np.zeros(3)),
    }
    d = rng.normal(size=(1, 2, 2, 8))
    a = M.decoder_step(d, rng.normal(size=(1, 4, 4, 4)), params).data
    b = M.decoder_step(d, rng.normal(size=(1, 4, 4, 4)), params).data
    assert np.array_equal(a, b)


def test_decoder_shape_and_mismatch(tiny):
    _, p = tiny
    dec = scope(p, "decoder.stage1")
    rng = np.random.default_rng(12)
    out = M.decoder_step(rng.normal(size=(1, 2, 2, 4)), rng.normal(size=(1, 4, 4, 4)), dec)
    assert out.shape == (1, 4, 4, 4)
    with pytest.raises(ShapeError):
        M.decoder_step(rng.normal(size=(1, 2, 2, 4)), rng.normal(size=(1, 6, 4, 4)), dec)


def test_decoder_gradient(tiny):
    _, p = tiny
    rng = np.random.default_rng(13)
    dec = jitter(scope(p, "decoder.stage1"), rng)
    names = list(dec)
    d = Tensor(rng.normal(size=(1, 2, 2, 4)), requires_grad=True)
    e = Tensor(rng.normal(size=(1, 4, 4, 4)), requires_grad=True)
    report = grad_check(lambda a, b, *v: M.decoder_step(a, b, dict(zip(names, v))), [d, e, *dec.values()])
    assert report.passed, report.line()


# ------------------------------------------------------------------ neck
def test_necks_are_independent(tiny):
    cfg, p = tiny
    rng = np.random.default_rng(14)
    d1 = rng.normal(size=(1, 8, 8, cfg.stage_channels[0]))
    sem_before = M.neck_forward(d1, scope(p, "dss.semantic_neck")).data
    depth_before = M.neck_forward(d1, scope(p, "dss.depth_neck")).data
    q = fresh(p)
    for k in [k for k in q if k.startswith("dss.depth_neck.")]:
        q[k].data += rng.normal(0, 0.5, q[k].shape)
    assert np.array_equal(M.neck_forward(d1, scope(q, "dss.semantic_neck")).data, sem_before)
    after = M.neck_forward(d1, scope(q, "dss.depth_neck"))
    assert after.shape == (1, 8, 8, cfg.neck_channels)
    assert not np.allclose(after.data, depth_before)


def test_neck_gradient(tiny):
    _, p = tiny
    rng = np.random.default_rng(15)
    neck = jitter(scope(p, "dss.semantic_neck"), rng)
    names = list(neck)
    x = Tensor(rng.normal(size=(1, 4, 4, 4)), requires_grad=True)
    report = grad_check(lambda a, *v: M.neck_forward(a, dict(zip(names, v))), [x, *neck.values()])
    assert report.passed, report.line()


# ------------------------------------------------------------------- DSS
def test_dss_zero_residuals_is_identity_on_necks(toy):
    cfg, p = toy
    q = fresh(p)
    for k in residual_branch_keys(scope(q, "dss")):
        q[f"dss.{k}"] = Tensor(np.zeros_like(q[f"dss.{k}"].data))
    d1 = np.random.default_rng(16).normal(size=(1, 8, 8, cfg.stage_channels[0]))
    f_d, f_s = M.dss_forward(d1, cfg, scope(q, "dss"))
    assert f_d.shape == f_s.shape == (1, 8, 8, cfg.neck_channels)
    assert np.array_equal(f_d.data, M.neck_forward(d1, scope(q, "dss.depth_neck")).data)
    assert np.array_equal(f_s.data, M.neck_forward(d1, scope(q, "dss.semantic_neck")).data)


@pytest.mark.parametrize("stream,other", [("depth_neck", 1), ("semantic_neck", 0)])
def test_dss_cross_influence(toy, stream, other):
    cfg, p = toy
    rng = np.random.default_rng(17)
    d1 = rng.normal(size=(1, 8, 8, cfg.stage_channels[0]))
    with no_grad():
        base = M.dss_forward(d1, cfg, scope(p, "dss"))
        q = fresh(p)
        q[f"dss.{stream}.layer2.norm.beta"].data += rng.normal(0, 0.5, cfg.neck_channels)
        moved = M.dss_forward(d1, cfg, scope(q, "dss"))
    # the perturbed stream reaches the opposite output through the guided transformer
    assert not np.allclose(moved[other].data, base[other].data)


# ----------------------------------------------------------------- heads
@pytest.mark.parametrize("max_depth", [10.0, 80.0])
def test_depth_head_bounded(toy, max_depth):
    cfg, p = toy
    cfg = dataclasses.replace(cfg, max_depth=max_depth)
    rng = np.random.default_rng(18)
    head = jitter(scope(p, "depth_head"), rng, scale=2.0)
    out = M.head_forward(rng.normal(size=(2, 8, 8, cfg.neck_channels)), "depth", cfg, head).data
    assert out.shape == (2, 32, 32, 1)
    assert out.min() >= 0.0 and out.max() <= max_depth


def test_semantic_head_is_distribution(toy):
    cfg, p = toy
    rng = np.random.default_rng(19)
    for _ in range(10):
        head = jitter(scope(p, "semantic_head"), rng, scale=1.0)
        out = M.head_forward(rng.normal(size=(1, 8, 8, cfg.neck_channels)), "semantics", cfg, head).data
        assert out.shape == (1, 32, 32, cfg.class_count)
        assert np.abs(out.sum(-1) - 1.0).max() <= 1e-6
        assert out.min() >= 0.0


def test_unknown_head_kind(toy):
    cfg, p = toy
    with pytest.raises(ValueError):
        M.head_forward(np.zeros((1, 8, 8, 16)), "normals", cfg, scope(p, "depth_head"))


# ---------------------------------------------------------- full forward
def test_model_forward_shapes_and_determinism(toy):
    cfg, p = toy
    x = np.random.default_rng(20).uniform(size=(1, 64, 64, 3))
    with no_grad():
        d1, s1 = M.model_forward(x, cfg, p)
        d2, s2 = M.model_forward(x, cfg, p)
    assert d1.shape == (1, 64, 64, 1) and s1.shape == (1, 64, 64, 8)
    assert np.array_equal(d1.data, d2.data) and np.array_equal(s1.data, s2.data)


def test_init_is_deterministic_per_seed():
    cfg = minimal_model_config()
    a = M.init_params(cfg, np.random.default_rng(3))
    b = M.init_params(cfg, np.random.default_rng(3))
    assert a.keys() == b.keys()
    assert all(np.array_equal(a[k].data, b[k].data) for k in a)


def test_model_forward_rejects_wrong_input(toy):
    cfg, p = toy
    with pytest.raises(ShapeError):
        M.model_forward(np.zeros((1, 32, 32, 3)), cfg, p)


@pytest.mark.parametrize(
    "change",
    [
        {"input_hw": (48, 64)},
        {"class_count": 1},
        {"max_depth": 0.0},
        {"neck_channels": 12},
        {"stage_heads": (3, 2, 4, 4)},
        {"stage_channels": (8, 16, 32)},
        {"attention": AttentionConfig(heads=2, head_dim=8, window=(3, 3), grid=(2, 2))},
    ],
)
def test_config_validation(change):
    cfg = dataclasses.replace(M.ModelConfig(), **change)
    with pytest.raises(M.ConfigError):
        cfg.validate()
    with pytest.raises(M.ConfigError):
        M.init_params(cfg, np.random.default_rng(0))


def test_config_round_trip():
    cfg = minimal_model_config()
    assert M.ModelConfig.from_dict(cfg.to_dict()) == cfg


def test_max_depth_values_accepted():
    for md in (10.0, 80.0):
        dataclasses.replace(M.ModelConfig(), max_depth=md).validate()
