import numpy as np
import pytest

import volrac.autodiff as ad
from volrac.autodiff import Tensor
from volrac.model import (
    FeatureGrid,
    LayerParams,
    ModelConfig,
    _attention_compact,
    _attention_gather,
    _feature_block,
    config_violations,
    embed,
    feature_block,
    forward,
    init_params,
    load_checkpoint,
    relative_bias_index,
    residual_chain,
    save_checkpoint,
    window_attention,
)
from volrac.volume import PatchGrid, Volume, patchify, unpatchify
from volrac.windows import g2l_ids, w_msa_ids

TINY = ModelConfig(side=8, patch=4, window=2, embed=4, heads=2, layers=2)


def rand_grid(m, d, e, seed=0):
    rng = np.random.default_rng(seed)
    return FeatureGrid(d, m, e, rng.normal(size=(m,) * d + (e,)).astype(np.float32))


def layer_norm_np(x, gamma, beta, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * gamma + beta


# -- config validation -----------------------------------------------------------------


def test_config_violations_named():
    assert config_violations(32, 4, 2, 32, 4, 4) == []
    msgs = config_violations(32, 5, 2, 30, 4, 3)
    joined = " ".join(msgs)
    assert "P=5" in joined and "H=4" in joined and "L=3" in joined


def test_config_window_constraint():
    msgs = config_violations(32, 4, 3, 32, 4, 4)
    assert any("W=3" in m and "S/P=8" in m for m in msgs)
    with pytest.raises(ValueError, match="W=3"):
        ModelConfig(side=32, patch=4, window=3)


# -- embed -----------------------------------------------------------------------------


def test_embed_identity_projection():
    # E = P**3 with identity weight: embedding returns the raw patch vectors.
    cfg = ModelConfig(side=4, patch=2, window=2, embed=8, heads=2, layers=2)
    params = init_params(cfg, seed=0)
    params.h1_w.data = np.eye(8, dtype=np.float32)
    params.h1_b.data = np.zeros(8, dtype=np.float32)
    v = Volume(4, np.random.default_rng(0).random((4, 4, 4), dtype=np.float32))
    grid = patchify(v, 2)
    out = embed(grid, params)
    assert np.allclose(out.cells(), grid.data.reshape(-1, 8), atol=1e-7)


def test_embed_zero_weights_gives_bias():
    cfg = TINY
    params = init_params(cfg, seed=0)
    params.h1_w.data = np.zeros_like(params.h1_w.data)
    params.h1_b.data = np.arange(cfg.embed, dtype=np.float32)
    v = Volume(8, np.random.default_rng(1).random((8, 8, 8), dtype=np.float32))
    out = embed(patchify(v, 4), params)
    assert np.allclose(out.cells(), np.arange(cfg.embed, dtype=np.float32)[None, :])


def test_embed_matches_dense_oracle():
    cfg = TINY
    params = init_params(cfg, seed=5)
    v = Volume(8, np.random.default_rng(2).random((8, 8, 8), dtype=np.float32))
    grid = patchify(v, 4)
    out = embed(grid, params)
    w, b = params.h1_w.data, params.h1_b.data
    for i, patch in enumerate(grid.data.reshape(-1, 64)):
        expected = np.array([patch @ w[:, j] + b[j] for j in range(cfg.embed)])
        assert np.allclose(out.cells()[i], expected, atol=1e-5)


# -- window attention -------------------------------------------------------------------


def make_layer(e, heads, window, dims, seed=0, dtype=np.float64):
    cfg_e = e
    rng = np.random.default_rng(seed)
    dh = e // heads

    def t(shape, scale=1.0):
        return Tensor.param(rng.normal(0, scale, size=shape).astype(dtype))

    def ones(shape):
        return Tensor.param(np.ones(shape, dtype=dtype))

    def zeros(shape):
        return Tensor.param(np.zeros(shape, dtype=dtype))

    return LayerParams(
        ln_attn_g=ones(cfg_e), ln_attn_b=zeros(cfg_e),
        wq=t((heads, e, dh)), bq=t((heads, dh), 0.2),
        wk=t((heads, e, dh)), bk=t((heads, dh), 0.2),
        wv=t((heads, e, dh)), bv=t((heads, dh), 0.2),
        bias_table=t(((2 * window - 1) ** dims, heads), 0.3),
        ln_head_g=ones(cfg_e), ln_head_b=zeros(cfg_e),
        w_out=t((e, e)), b_out=t((e,), 0.2),
        ln_f1_g=ones(cfg_e), ln_f1_b=zeros(cfg_e),
        w_fc1=t((e, 4 * e)), b_fc1=zeros(4 * e),
        ln_f2_g=ones(4 * cfg_e), ln_f2_b=zeros(4 * cfg_e),
        w_fc2=t((4 * e, e)), b_fc2=zeros(e),
    )


def brute_force_attention(cells, ids_flat, layer, window, dims):
    """Per-pair score enumeration: explicit loops over windows, heads, and
    query/key pairs with freshly computed softmax weights."""
    n, e = cells.shape
    heads = layer.heads
    dh = e // heads
    coords = np.stack(np.unravel_index(np.arange(window**dims), (window,) * dims), axis=1)
    out = np.zeros_like(cells)
    xn = layer_norm_np(cells, layer.ln_attn_g.data, layer.ln_attn_b.data)
    for wid in np.unique(ids_flat):
        members = np.flatnonzero(ids_flat == wid)  # canonical (row-major) order
        merged = np.zeros((len(members), e))
        for h in range(heads):
            q = xn[members] @ layer.wq.data[h] + layer.bq.data[h]
            k = xn[members] @ layer.wk.data[h] + layer.bk.data[h]
            v = xn[members] @ layer.wv.data[h] + layer.bv.data[h]
            for i in range(len(members)):
                scores = np.empty(len(members))
                for j in range(len(members)):
                    delta = np.clip(coords[i] - coords[j], -(window - 1), window - 1) + window - 1
                    flat_idx = 0
                    for axis in range(dims):
                        flat_idx = flat_idx * (2 * window - 1) + delta[axis]
                    scores[j] = q[i] @ k[j] / np.sqrt(dh) + layer.bias_table.data[flat_idx, h]
                w = np.exp(scores - scores.max())
                w /= w.sum()
                merged[i, h * dh : (h + 1) * dh] = w @ v
        head_in = layer_norm_np(merged, layer.ln_head_g.data, layer.ln_head_b.data)
        out[members] = head_in @ layer.w_out.data + layer.b_out.data
    return out


def test_attention_matches_brute_force_oracle():
    m, w, d, e, h = 2, 2, 1, 2, 1
    layer = make_layer(e, h, w, d, seed=3)
    ids = w_msa_ids(m, w, d)
    grid = FeatureGrid(d, m, e, np.random.default_rng(4).normal(size=(m, e)))
    got = window_attention(grid, ids, layer)
    expected = brute_force_attention(grid.cells().astype(np.float64), ids.ids.reshape(-1), layer, w, d)
    assert np.allclose(got.cells(), expected, rtol=1e-6, atol=1e-8)


def test_attention_matches_oracle_g2l_3d():
    m, w, d, e, h = 4, 2, 3, 6, 2
    layer = make_layer(e, h, w, d, seed=9)
    ids = g2l_ids(m, w, d)
    grid = FeatureGrid(d, m, e, np.random.default_rng(8).normal(size=(m, m, m, e)))
    got = window_attention(grid, ids, layer)
    expected = brute_force_attention(
        grid.cells().astype(np.float64), ids.ids.reshape(-1), layer, w, d
    )
    assert np.allclose(got.cells(), expected, rtol=1e-6, atol=1e-8)


def test_attention_singleton_window():
    # W=1: softmax over one key; output is the head projection of that cell's
    # normalized value vector.
    m, d, e, h = 2, 1, 4, 2
    layer = make_layer(e, h, 1, d, seed=6)
    ids = w_msa_ids(m, 1, d)
    x = np.random.default_rng(7).normal(size=(m, e))
    got = window_attention(FeatureGrid(d, m, e, x), ids, layer)
    xn = layer_norm_np(x, layer.ln_attn_g.data, layer.ln_attn_b.data)
    merged = np.concatenate(
        [xn @ layer.wv.data[i] + layer.bv.data[i] for i in range(h)], axis=1
    )
    expected = layer_norm_np(merged, layer.ln_head_g.data, layer.ln_head_b.data) @ layer.w_out.data + layer.b_out.data
    assert np.allclose(got.cells(), expected, rtol=1e-6, atol=1e-9)


def test_attention_equal_keys_average_values():
    # Zero key projection and zero bias: weights are uniform 1/W**D, so the
    # output is the head projection of the window-averaged value vector,
    # independent of query content.
    m, w, d, e, h = 4, 2, 1, 4, 2
    layer = make_layer(e, h, w, d, seed=11)
    layer.wk.data = np.zeros_like(layer.wk.data)
    layer.bias_table.data = np.zeros_like(layer.bias_table.data)
    ids = w_msa_ids(m, w, d)
    x = np.random.default_rng(12).normal(size=(m, e))
    got = window_attention(FeatureGrid(d, m, e, x), ids, layer)
    xn = layer_norm_np(x, layer.ln_attn_g.data, layer.ln_attn_b.data)
    out = np.zeros_like(x)
    for wid in range(ids.n_windows):
        members = np.flatnonzero(ids.ids.reshape(-1) == wid)
        v_mean = np.concatenate(
            [(xn[members] @ layer.wv.data[i] + layer.bv.data[i]).mean(axis=0) for i in range(h)]
        )
        head_in = layer_norm_np(v_mean[None], layer.ln_head_g.data, layer.ln_head_b.data)
        out[members] = head_in @ layer.w_out.data + layer.b_out.data
    assert np.allclose(got.cells(), out, rtol=1e-6, atol=1e-9)


def test_attention_permutation_equivariant_with_zero_bias():
    # Single window spanning the whole 1D grid: permuting cells permutes outputs.
    m, e, h = 4, 6, 2
    layer = make_layer(e, h, m, 1, seed=13)
    layer.bias_table.data = np.zeros_like(layer.bias_table.data)
    ids = w_msa_ids(m, m, 1)
    x = np.random.default_rng(14).normal(size=(m, e))
    perm = np.array([2, 0, 3, 1])
    out = window_attention(FeatureGrid(1, m, e, x), ids, layer).data
    out_perm = window_attention(FeatureGrid(1, m, e, x[perm]), ids, layer).data
    assert np.allclose(out[perm], out_perm, rtol=1e-6, atol=1e-9)


def test_attention_rejects_mismatched_ids():
    layer = make_layer(4, 2, 2, 2, seed=1)
    grid = rand_grid(4, 2, 4)
    with pytest.raises(ValueError, match="does not match"):
        window_attention(grid, w_msa_ids(8, 2, 2), layer)


def test_relative_bias_index_range_and_symmetry():
    idx = relative_bias_index(3, 2)
    assert idx.shape == (9, 9)
    assert idx.min() >= 0 and idx.max() < 25
    assert np.all(np.diag(idx) == idx[0, 0])  # zero offset everywhere on diagonal


# -- feature block ------------------------------------------------------------------------


def test_feature_block_zero_second_affine_gives_bias():
    e = 4
    layer = make_layer(e, 2, 2, 1, seed=2)
    layer.w_fc2.data = np.zeros_like(layer.w_fc2.data)
    layer.b_fc2.data = np.arange(e, dtype=np.float64)
    grid = FeatureGrid(1, 4, e, np.random.default_rng(0).normal(size=(4, e)))
    out = feature_block(grid, layer)
    assert np.allclose(out.cells(), np.arange(e)[None, :])


def test_feature_block_matches_dense_oracle():
    from scipy.special import erf

    e = 4
    layer = make_layer(e, 2, 2, 1, seed=21)
    x = np.random.default_rng(22).normal(size=(5, e))
    got = feature_block(FeatureGrid(1, 5, e, x), layer)

    h = layer_norm_np(x, layer.ln_f1_g.data, layer.ln_f1_b.data)
    h = h @ layer.w_fc1.data + layer.b_fc1.data
    h = h * 0.5 * (1.0 + erf(h / np.sqrt(2.0)))
    h = layer_norm_np(h, layer.ln_f2_g.data, layer.ln_f2_b.data)
    expected = h @ layer.w_fc2.data + layer.b_fc2.data
    assert np.allclose(got.cells(), expected, rtol=1e-6, atol=1e-9)


# -- residual chain ------------------------------------------------------------------------


def zero_feature_blocks(params):
    for lp in params.layers:
        lp.w_fc2.data = np.zeros_like(lp.w_fc2.data)
        lp.b_fc2.data = np.zeros_like(lp.b_fc2.data)


def test_residual_chain_identity_when_blocks_vanish():
    params = init_params(TINY, seed=1)
    zero_feature_blocks(params)
    grid = rand_grid(2, 3, 4, seed=5)
    out = residual_chain(grid, params)
    assert np.array_equal(out.data, grid.data)


def test_residual_chain_two_layers_equal_manual_composition():
    params = init_params(TINY, seed=8)
    grid = rand_grid(2, 3, 4, seed=9)
    out = residual_chain(grid, params, g2l_route="gather")

    wmap = w_msa_ids(2, 2, 3)
    gmap = g2l_ids(2, 2, 3)
    z1_data = grid.data + feature_block(window_attention(grid, wmap, params.layers[0]), params.layers[0]).data
    z1 = FeatureGrid(3, 2, 4, z1_data)
    z2 = z1.data + feature_block(window_attention(z1, gmap, params.layers[1]), params.layers[1]).data
    assert np.allclose(out.data, z2, rtol=1e-6, atol=1e-7)


def test_residual_chain_preserves_shape():
    for cfg in (TINY, ModelConfig(side=16, patch=4, window=2, embed=8, heads=2, layers=4)):
        params = init_params(cfg, seed=0)
        grid = rand_grid(cfg.grid_side, 3, cfg.embed, seed=1)
        assert residual_chain(grid, params).data.shape == grid.data.shape


# -- forward -------------------------------------------------------------------------------


def test_forward_shape_and_determinism():
    params = init_params(TINY, seed=2)
    v = Volume(8, np.random.default_rng(3).random((8, 8, 8), dtype=np.float32))
    a = forward(v, params)
    b = forward(v, params)
    assert a.side == v.side
    assert np.array_equal(a.data, b.data)


def test_forward_compact_equals_gather():
    cfg = ModelConfig(side=16, patch=4, window=2, embed=8, heads=2, layers=2)
    params = init_params(cfg, seed=4)
    v = Volume(16, np.random.default_rng(5).random((16, 16, 16), dtype=np.float32))
    a = forward(v, params, g2l_route="compact")
    b = forward(v, params, g2l_route="gather")
    scale = max(1.0, np.abs(b.data).max())
    assert np.abs(a.data - b.data).max() <= 1e-6 * scale


def test_forward_residual_bypass():
    # Zeroed feature blocks: forward reduces to unpatchify(h2(norm(h1(patchify)))).
    params = init_params(TINY, seed=6)
    zero_feature_blocks(params)
    v = Volume(8, np.random.default_rng(7).random((8, 8, 8), dtype=np.float32))
    got = forward(v, params)

    cells = patchify(v, 4).data.reshape(-1, 64)
    z = cells @ params.h1_w.data + params.h1_b.data
    z = layer_norm_np(z, params.final_ln_g.data, params.final_ln_b.data)
    pred = z @ params.h2_w.data + params.h2_b.data
    expected = unpatchify(PatchGrid(2, 4, pred.reshape(2, 2, 2, 64).astype(np.float32)))
    assert np.allclose(got.data, expected.data, atol=1e-6)


def test_forward_rejects_wrong_side():
    params = init_params(TINY, seed=0)
    with pytest.raises(ValueError, match="side"):
        forward(Volume(16, np.zeros((16, 16, 16), np.float32)), params)


def test_compact_attention_matches_gather_attention():
    m, w, d, e, h = 8, 2, 3, 8, 2
    layer = make_layer(e, h, w, d, seed=31, dtype=np.float32)
    x = np.random.default_rng(30).normal(size=(m**d, e)).astype(np.float32)
    with ad.no_grad():
        a = _attention_gather(Tensor(x), layer, g2l_ids(m, w, d)).data
        b = _attention_compact(Tensor(x), layer, m, w, d).data
    scale = max(1.0, np.abs(a).max())
    assert np.abs(a - b).max() <= 1e-6 * scale


# -- init + checkpoint -----------------------------------------------------------------------


def test_init_params_deterministic():
    a = init_params(TINY, seed=9)
    b = init_params(TINY, seed=9)
    for (na, ta), (nb, tb) in zip(a.named_tensors(), b.named_tensors()):
        assert na == nb
        assert np.array_equal(ta.data, tb.data)


def test_init_bias_tables_zero():
    params = init_params(TINY, seed=3)
    for lp in params.layers:
        assert np.all(lp.bias_table.data == 0.0)


def test_forward_finite_at_init():
    params = init_params(ModelConfig(), seed=0)
    v = Volume(32, np.random.default_rng(1).random((32, 32, 32), dtype=np.float32))
    out = forward(v, params)
    assert np.all(np.isfinite(out.data))


def test_checkpoint_roundtrip_bit_exact(tmp_path):
    params = init_params(TINY, seed=12)
    path = tmp_path / "m.g2lc"
    save_checkpoint(params, path)
    back = load_checkpoint(path)
    assert back.config == params.config
    for (na, ta), (nb, tb) in zip(params.named_tensors(), back.named_tensors()):
        assert na == nb
        assert np.array_equal(ta.data, tb.data)


def test_checkpoint_version_mismatch(tmp_path):
    from volrac.model import CheckpointError

    params = init_params(TINY, seed=0)
    path = tmp_path / "m.g2lc"
    save_checkpoint(params, path)
    raw = bytearray(path.read_bytes())
    raw[4] = 99
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="version mismatch"):
        load_checkpoint(path)


def test_checkpoint_truncation_detected(tmp_path):
    from volrac.model import CheckpointError

    params = init_params(TINY, seed=0)
    path = tmp_path / "m.g2lc"
    save_checkpoint(params, path)
    raw = path.read_bytes()
    path.write_bytes(raw[: len(raw) - 10])
    with pytest.raises(CheckpointError, match="truncated|length"):
        load_checkpoint(path)
