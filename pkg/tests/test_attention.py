import numpy as np
import pytest

from symdepth import attention as A
from symdepth import tensor as T
from symdepth.gradcheck import grad_check
from symdepth.tensor import Tensor


def zero_branches(params):
    for key in A.residual_branch_keys(params):
        params[key] = T.zeros(params[key].shape, requires_grad=True)
    return params


# ----------------------------------------------------------- numpy oracles
def np_ln(x, g, b, eps=1e-5):
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * g + b


def np_bias(table, h, w):
    """Brute-force relative bias: B[head, q, k] from per-pair offsets."""
    L = h * w
    out = np.zeros((table.shape[1], L, L))
    for q in range(L):
        for k in range(L):
            di = q // w - k // w
            dj = q % w - k % w
            out[:, q, k] = table[(di + h - 1) * (2 * w - 1) + dj + w - 1]
    return out


def np_attend(xq, ykv, p, heads, h, w):
    """Cross-attention on one window: xq, ykv are [L, C]."""
    L, c = xq.shape
    d = c // heads
    q = (xq @ p["wq"].data).reshape(L, heads, d)
    k = (ykv @ p["wk"].data).reshape(L, heads, d)
    v = (ykv @ p["wv"].data).reshape(L, heads, d)
    bias = np_bias(p["rel_table"].data, h, w)
    out = np.zeros((L, heads, d))
    for head in range(heads):
        logits = q[:, head] @ k[:, head].T / np.sqrt(d) + bias[head]
        e = np.exp(logits - logits.max(-1, keepdims=True))
        out[:, head] = (e / e.sum(-1, keepdims=True)) @ v[:, head]
    return out.reshape(L, c) @ p["wo"].data + p["bo"].data


def rand_params(rng, c, heads, window, scale=0.3):
    p = A.init_cross_attention(rng, c, heads, window)
    for k, v in p.items():
        p[k] = Tensor(rng.normal(0, scale, v.shape) + (1.0 if k.endswith("gamma") else 0.0), requires_grad=True)
    return p


# ----------------------------------------------------------- relative bias
def test_relative_bias_single_position():
    rb = A.RelPosBias(Tensor([[0.7, -0.2]]), (1, 1))
    np.testing.assert_array_equal(A.relative_bias_matrix(rb, (1, 1)).data, [[[0.7]], [[-0.2]]])


def test_relative_bias_zero_table():
    rb = A.RelPosBias(T.zeros((9, 3)), (2, 2))
    assert not A.relative_bias_matrix(rb, (2, 2)).data.any()


def test_relative_index_7x7_brute_force():
    h = w = 7
    idx = A.relative_position_index(h, w)
    assert (2 * h - 1) * (2 * w - 1) == 169
    assert idx.min() >= 0 and idx.max() < 169
    pos = [(i, j) for i in range(h) for j in range(w)]
    by_offset = {}
    for q, (qi, qj) in enumerate(pos):
        for k, (ki, kj) in enumerate(pos):
            by_offset.setdefault((qi - ki, qj - kj), set()).add(int(idx[q, k]))
    # one row per relative offset, distinct rows for distinct offsets
    assert all(len(rows) == 1 for rows in by_offset.values())
    assert len({next(iter(r)) for r in by_offset.values()}) == len(by_offset) == 169
    # simultaneous translation leaves the index unchanged
    for q, (qi, qj) in enumerate(pos):
        for k, (ki, kj) in enumerate(pos):
            if qi + 1 < h and ki + 1 < h:
                assert idx[q + w, k + w] == idx[q, k]


def test_relative_bias_matches_brute_force_and_rejects_mismatch():
    table = np.random.default_rng(0).normal(size=(15, 2))
    rb = A.RelPosBias(Tensor(table), (2, 3))
    np.testing.assert_array_equal(A.relative_bias_matrix(rb, (2, 3)).data, np_bias(table, 2, 3))
    with pytest.raises(ValueError):
        A.relative_bias_matrix(rb, (3, 2))
    with pytest.raises(ValueError):
        A.RelPosBias(Tensor(table), (3, 3))


# ----------------------------------------------------------- cross attention
def test_single_position_returns_projected_value():
    rng = np.random.default_rng(1)
    p = rand_params(rng, 4, 2, (1, 1))
    p["rel_table"] = T.zeros((1, 2))
    q, kv = rng.normal(size=(3, 1, 4)), rng.normal(size=(3, 1, 4))
    out = A.cross_attention(q, kv, p, 2, (1, 1)).data
    expected = kv @ p["wv"].data @ p["wo"].data + p["bo"].data
    np.testing.assert_allclose(out, expected, atol=1e-12)


def test_identical_keys_give_half_weights():
    rng = np.random.default_rng(2)
    p = rand_params(rng, 4, 1, (1, 2))
    p["rel_table"] = T.zeros((3, 1))
    row = rng.normal(size=4)
    kv = np.stack([row, row])[None]
    q = rng.normal(size=(1, 2, 4))
    qp = Tensor(q) @ p["wq"]
    kp = Tensor(kv) @ p["wk"]
    weights = A.attention_weights(qp, kp, None).data
    np.testing.assert_allclose(weights, 0.5, atol=1e-15)
    out = A.cross_attention(q, kv, p, 1, (1, 2)).data
    v = kv[0] @ p["wv"].data
    np.testing.assert_allclose(out[0], np.broadcast_to(v.mean(0) @ p["wo"].data + p["bo"].data, (2, 4)), atol=1e-12)


def test_zero_query_gives_uniform_weights_exactly():
    k = Tensor(np.random.default_rng(3).normal(size=(2, 5, 3)))
    w = A.attention_weights(T.zeros((2, 5, 3)), k, None).data
    assert (w == 0.2).all()


def test_attention_rows_are_probability_vectors():
    rng = np.random.default_rng(4)
    for _ in range(20):
        q, k = rng.normal(0, 5, size=(2, 3, 6, 4)), rng.normal(0, 5, size=(2, 3, 6, 4))
        bias = rng.normal(size=(3, 6, 6))
        w = A.attention_weights(Tensor(q), Tensor(k), Tensor(bias)).data
        assert (w >= 0).all()
        np.testing.assert_allclose(w.sum(-1), 1.0, atol=1e-9)


def test_convex_hull_of_values_single_head_unit_dim():
    rng = np.random.default_rng(5)
    for _ in range(20):
        p = rand_params(rng, 1, 1, (2, 2), scale=2.0)
        p["wo"], p["bo"] = T.ones((1, 1)), T.zeros((1,))
        q, kv = rng.normal(size=(1, 4, 1)), rng.normal(size=(1, 4, 1))
        out = A.cross_attention(q, kv, p, 1, (2, 2)).data[0, :, 0]
        values = kv[0, :, 0] * p["wv"].data[0, 0]
        assert (out >= values.min() - 1e-12).all() and (out <= values.max() + 1e-12).all()


def test_key_value_permutation_invariance_without_bias():
    rng = np.random.default_rng(6)
    for _ in range(20):
        p = rand_params(rng, 6, 2, (2, 3))
        p["rel_table"] = T.zeros(p["rel_table"].shape)
        q, kv = rng.normal(size=(1, 6, 6)), rng.normal(size=(1, 6, 6))
        perm = rng.permutation(6)
        a = A.cross_attention(q, kv, p, 2, (2, 3)).data
        b = A.cross_attention(q, kv[:, perm], p, 2, (2, 3)).data
        np.testing.assert_allclose(a, b, atol=1e-12)


# ----------------------------------------------------------- block / grid
def test_block_zero_output_projection_is_identity():
    rng = np.random.default_rng(7)
    p = zero_branches(rand_params(rng, 8, 2, (2, 2)))
    x, y = rng.normal(size=(1, 4, 4, 8)), rng.normal(size=(1, 4, 4, 8))
    np.testing.assert_array_equal(A.block_cross_attention(x, y, p, 2, (2, 2)).data, y)
    np.testing.assert_array_equal(A.grid_cross_attention(x, y, p, 2, (2, 2)).data, y)


def test_single_window_equals_global_attention():
    rng = np.random.default_rng(8)
    p = rand_params(rng, 4, 2, (3, 3))
    x, y = rng.normal(size=(1, 3, 3, 4)), rng.normal(size=(1, 3, 3, 4))
    xn = np_ln(x, p["ln_q.gamma"].data, p["ln_q.beta"].data).reshape(9, 4)
    yn = np_ln(y, p["ln_kv.gamma"].data, p["ln_kv.beta"].data).reshape(9, 4)
    expected = y + np_attend(xn, yn, p, 2, 3, 3).reshape(1, 3, 3, 4)
    for fn in (A.block_cross_attention, A.grid_cross_attention):
        np.testing.assert_allclose(fn(x, y, p, 2, (3, 3)).data, expected, atol=1e-12)


def naive_block(x, y, p, heads, h, w):
    xn = np_ln(x, p["ln_q.gamma"].data, p["ln_q.beta"].data)
    yn = np_ln(y, p["ln_kv.gamma"].data, p["ln_kv.beta"].data)
    out = y.copy()
    b, H, W, c = x.shape
    for bi in range(b):
        for r in range(0, H, h):
            for s in range(0, W, w):
                xs = xn[bi, r : r + h, s : s + w].reshape(-1, c)
                ys = yn[bi, r : r + h, s : s + w].reshape(-1, c)
                out[bi, r : r + h, s : s + w] += np_attend(xs, ys, p, heads, h, w).reshape(h, w, c)
    return out


def naive_grid(x, y, p, heads, h, w):
    xn = np_ln(x, p["ln_q.gamma"].data, p["ln_q.beta"].data)
    yn = np_ln(y, p["ln_kv.gamma"].data, p["ln_kv.beta"].data)
    out = y.copy()
    b, H, W, c = x.shape
    sh, sw = H // h, W // w
    for bi in range(b):
        for r in range(sh):
            for s in range(sw):
                xs = xn[bi, r::sh, s::sw].reshape(-1, c)
                ys = yn[bi, r::sh, s::sw].reshape(-1, c)
                out[bi, r::sh, s::sw] += np_attend(xs, ys, p, heads, h, w).reshape(h, w, c)
    return out


def test_block_matches_per_window_loop():
    rng = np.random.default_rng(9)
    p = rand_params(rng, 8, 2, (7, 7))
    x, y = rng.normal(size=(1, 14, 14, 8)), rng.normal(size=(1, 14, 14, 8))
    out = A.block_cross_attention(x, y, p, 2, (7, 7)).data
    np.testing.assert_allclose(out, naive_block(x, y, p, 2, 7, 7), atol=1e-10)


def test_grid_matches_strided_gather_loop():
    rng = np.random.default_rng(10)
    p = rand_params(rng, 8, 4, (2, 4))
    x, y = rng.normal(size=(2, 8, 8, 8)), rng.normal(size=(2, 8, 8, 8))
    out = A.grid_cross_attention(x, y, p, 4, (2, 4)).data
    np.testing.assert_allclose(out, naive_grid(x, y, p, 4, 2, 4), atol=1e-10)


def test_divisibility_is_checked():
    rng = np.random.default_rng(0)
    p = rand_params(rng, 4, 1, (2, 2))
    with pytest.raises(ValueError):
        A.block_cross_attention(np.ones((1, 5, 4, 4)), np.ones((1, 5, 4, 4)), p, 1, (2, 2))


@pytest.mark.parametrize("trial", range(20))
def test_block_locality(trial):
    rng = np.random.default_rng(100 + trial)
    p = rand_params(rng, 4, 2, (2, 2))
    p["rel_table"] = T.zeros(p["rel_table"].shape)
    x, y = rng.normal(size=(1, 6, 6, 4)), rng.normal(size=(1, 6, 6, 4))
    wi, wj = rng.integers(0, 3, size=2)
    y2 = y.copy()
    y2[0, 2 * wi : 2 * wi + 2, 2 * wj : 2 * wj + 2] += rng.normal(size=(2, 2, 4))
    diff = np.abs(A.block_cross_attention(x, y2, p, 2, (2, 2)).data - A.block_cross_attention(x, y, p, 2, (2, 2)).data)
    inside = np.zeros((6, 6), bool)
    inside[2 * wi : 2 * wi + 2, 2 * wj : 2 * wj + 2] = True
    assert diff[0][~inside].max() == 0.0
    assert diff[0][inside].max() > 0.0


@pytest.mark.parametrize("trial", range(20))
def test_grid_locality(trial):
    rng = np.random.default_rng(200 + trial)
    p = rand_params(rng, 4, 2, (2, 2))
    p["rel_table"] = T.zeros(p["rel_table"].shape)
    x, y = rng.normal(size=(1, 6, 6, 4)), rng.normal(size=(1, 6, 6, 4))
    r, s = rng.integers(0, 3, size=2)  # stride is 6 / 2 = 3
    y2 = y.copy()
    y2[0, r::3, s::3] += rng.normal(size=(2, 2, 4))
    diff = np.abs(A.grid_cross_attention(x, y2, p, 2, (2, 2)).data - A.grid_cross_attention(x, y, p, 2, (2, 2)).data)
    group = np.zeros((6, 6), bool)
    group[r::3, s::3] = True
    assert diff[0][~group].max() == 0.0
    assert diff[0][group].max() > 0.0


# ----------------------------------------------------------- FusedMBConv
def test_mbconv_zero_pointwise_is_identity():
    rng = np.random.default_rng(11)
    p = zero_branches(A.init_fused_mbconv(rng, 8))
    y = rng.normal(size=(2, 4, 4, 8))
    np.testing.assert_array_equal(A.fused_mbconv(y, p).data, y)


def test_se_zero_excitation_halves():
    rng = np.random.default_rng(12)
    p = A.init_fused_mbconv(rng, 8)
    se = A.scope(p, "se")
    se["expand.w"] = T.zeros(se["expand.w"].shape)
    x = rng.normal(size=(1, 4, 4, 8))
    np.testing.assert_array_equal(A.squeeze_excitation(Tensor(x), se).data, 0.5 * x)


def test_mbconv_constant_input():
    rng = np.random.default_rng(13)
    p = A.init_fused_mbconv(rng, 4)
    y = np.broadcast_to(rng.normal(size=4), (1, 4, 4, 4)).copy()
    out = A.fused_mbconv(y, p).data
    # zero padding touches the border; pixels whose 3x3 support is inside stay constant
    interior = out[0, 1:3, 1:3]
    np.testing.assert_allclose(interior, np.broadcast_to(interior[0, 0], interior.shape), atol=1e-15)
    # with a centre-only depthwise kernel every sub-op preserves constancy everywhere
    k = np.zeros((3, 3, 1, 4))
    k[1, 1, 0] = rng.normal(size=4)
    p["dw.kernel"] = Tensor(k)
    out = A.fused_mbconv(y, p).data
    np.testing.assert_allclose(out, np.broadcast_to(out[0, 0, 0], out.shape), atol=1e-15)


# ----------------------------------------------------------- LG-CAT
CFG = A.AttentionConfig(heads=2, head_dim=4, window=(2, 2), grid=(2, 2), ns=2)


def test_lg_cat_zero_branches_is_identity():
    rng = np.random.default_rng(14)
    p = zero_branches(A.init_lg_cat(rng, CFG))
    x, y = rng.normal(size=(1, 4, 4, 8)), rng.normal(size=(1, 4, 4, 8))
    np.testing.assert_array_equal(A.lg_cat(x, y, CFG, p).data, y)


def test_lg_cat_loop_count_matters():
    rng = np.random.default_rng(15)
    p = {k: Tensor(rng.normal(0, 0.5, v.shape)) for k, v in A.init_lg_cat(rng, CFG).items()}
    x, y = rng.normal(size=(1, 4, 4, 8)), rng.normal(size=(1, 4, 4, 8))
    one = A.AttentionConfig(heads=2, head_dim=4, window=(2, 2), grid=(2, 2), ns=1)
    assert not np.allclose(A.lg_cat(x, y, one, p).data, A.lg_cat(x, y, CFG, p).data)


def test_lg_cat_grad_check_all_inputs_and_params():
    rng = np.random.default_rng(16)
    p = {k: Tensor(v.data + rng.normal(0, 0.3, v.shape), requires_grad=True) for k, v in A.init_lg_cat(rng, CFG).items()}
    x = Tensor(rng.normal(size=(1, 4, 4, 8)), requires_grad=True)
    y = Tensor(rng.normal(size=(1, 4, 4, 8)), requires_grad=True)
    names = list(p)
    fn = lambda xq, ykv, *vals: A.lg_cat(xq, ykv, CFG, dict(zip(names, vals)))
    report = grad_check(fn, [x, y, *p.values()], tolerance=1e-3, name="lg_cat")
    assert report.passed, report.line()
    assert report.checked == 2 * 128 + sum(v.size for v in p.values())


# ----------------------------------------------------------- symbiotic transformer
CFG16 = A.AttentionConfig(heads=4, head_dim=4, window=(2, 2), grid=(4, 4), ns=2)


def test_symbiotic_zero_branches_returns_inputs():
    rng = np.random.default_rng(17)
    dg = zero_branches(A.init_lg_cat(rng, CFG16))
    sg = zero_branches(A.init_lg_cat(rng, CFG16))
    fd, fs = rng.normal(size=(2, 8, 8, 16)), rng.normal(size=(2, 8, 8, 16))
    od, os_ = A.symbiotic_transformer(fd, fs, CFG16, dg, sg)
    np.testing.assert_array_equal(od.data, fd)
    np.testing.assert_array_equal(os_.data, fs)


def test_symbiotic_shapes_and_parameter_roles():
    rng = np.random.default_rng(18)
    dg = A.init_lg_cat(rng, CFG16)
    sg = A.init_lg_cat(rng, CFG16)
    fd, fs = rng.normal(size=(2, 8, 8, 16)), rng.normal(size=(2, 8, 8, 16))
    od, os_ = A.symbiotic_transformer(fd, fs, CFG16, dg, sg)
    assert od.shape == os_.shape == (2, 8, 8, 16)
    # by definition each output is one LG-CAT with its own parameter set
    np.testing.assert_array_equal(os_.data, A.lg_cat(fd, fs, CFG16, dg).data)
    np.testing.assert_array_equal(od.data, A.lg_cat(fs, fd, CFG16, sg).data)
    # swapping the streams swaps which parameter set contextualizes which stream
    sd, ss = A.symbiotic_transformer(fs, fd, CFG16, dg, sg)
    np.testing.assert_array_equal(ss.data, A.lg_cat(fs, fd, CFG16, dg).data)
    assert not np.allclose(ss.data, od.data)
    with pytest.raises(ValueError):
        A.symbiotic_transformer(fd, fs[:, :4], CFG16, dg, sg)
