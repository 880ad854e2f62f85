import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from decdistill import autograd as ag
from decdistill.autograd import DiffArray
from decdistill.nn import (
    ModelConfig,
    attention_weights,
    build_group_mask,
    decode_groups,
    decoder_forward,
    encoder_forward,
    forward,
    init_params,
    inheritable_names,
    multi_head_attention,
    patchify,
    sine_position_embedding,
)

SMALL = ModelConfig(d_model=16, n_heads=4, n_enc_layers=1, n_dec_layers=2, n_queries=5, n_classes=3,
                    grid_h=4, grid_w=4, c_in=3, patch_size=2, ffn_dim=24)


def _grids(rng, cfg, b=2):
    return rng.normal(size=(b, cfg.grid_h * cfg.patch_size, cfg.grid_w * cfg.patch_size, cfg.c_in))


def _proj(rng, d, identity=False):
    if identity:
        return {f"w{n}": DiffArray(np.eye(d)) for n in "qkvo"} | {f"b{n}": DiffArray(np.zeros(d)) for n in "qkvo"}
    return {f"w{n}": DiffArray(rng.normal(size=(d, d))) for n in "qkvo"} | {
        f"b{n}": DiffArray(rng.normal(size=d)) for n in "qkvo"
    }


# -- config -----------------------------------------------------------------------------


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(d_model=10, n_heads=4)
    with pytest.raises(ValueError):
        ModelConfig(n_dec_layers=0)
    assert ModelConfig(d_model=64, n_heads=4).head_dim == 16
    assert ModelConfig(grid_h=8, grid_w=8).hw == 64


def test_config_dict_roundtrip():
    assert ModelConfig.from_dict(SMALL.to_dict()) == SMALL


# -- attention weights ------------------------------------------------------------------


def test_single_key_gets_all_weight(rng):
    w = attention_weights(rng.normal(size=(3, 4)), rng.normal(size=(1, 4)))
    np.testing.assert_array_equal(w.values, np.ones((3, 1)))


def test_orthogonal_query_splits_evenly():
    w = attention_weights(np.array([[1.0, 0.0]]), np.array([[0.0, 2.0], [0.0, 2.0]]))
    np.testing.assert_array_equal(w.values, [[0.5, 0.5]])


def test_scaled_dot_product_example():
    d = 4
    q = np.array([[1.0, 0, 0, 0]])
    k = np.array([[math.sqrt(d) * math.log(2), 0, 0, 0], [0, 0, 0, 0]])
    np.testing.assert_allclose(attention_weights(q, k).values, [[2 / 3, 1 / 3]], rtol=1e-14)


def test_attention_weights_dimension_mismatch(rng):
    with pytest.raises(ValueError):
        attention_weights(rng.normal(size=(2, 3)), rng.normal(size=(2, 4)))


# -- multi-head attention ---------------------------------------------------------------


def test_identity_projection_single_key_returns_value(rng):
    v = rng.normal(size=(1, 4))
    out, w = multi_head_attention(rng.normal(size=(2, 4)), rng.normal(size=(1, 4)), v, _proj(rng, 4, True), 1)
    np.testing.assert_allclose(out.values, np.repeat(v, 2, axis=0), atol=1e-15)
    assert w.shape == (1, 2, 1)


def test_constant_values_ignore_weights(rng):
    d = 8
    p = _proj(rng, d)
    v = np.tile(rng.normal(size=(1, d)), (5, 1))
    out, _ = multi_head_attention(rng.normal(size=(3, d)), rng.normal(size=(5, d)), v, p, 2)
    expected = (v[0] @ p["wv"].values + p["bv"].values) @ p["wo"].values + p["bo"].values
    np.testing.assert_allclose(out.values, np.tile(expected, (3, 1)), atol=1e-12)


def _head_oracle(xq, xk, xv, p, n_heads, mask=None):
    d = xq.shape[-1]
    dh = d // n_heads
    q = xq @ p["wq"].values + p["bq"].values
    k = xk @ p["wk"].values + p["bk"].values
    v = xv @ p["wv"].values + p["bv"].values
    heads, maps = [], []
    for h in range(n_heads):
        s = slice(h * dh, (h + 1) * dh)
        logits = q[:, s] @ k[:, s].T / math.sqrt(dh)
        if mask is not None:
            logits = np.where(mask, logits, -np.inf)
        e = np.exp(logits - logits.max(axis=1, keepdims=True))
        a = e / e.sum(axis=1, keepdims=True)
        maps.append(a)
        heads.append(a @ v[:, s])
    return np.concatenate(heads, axis=1) @ p["wo"].values + p["bo"].values, np.stack(maps)


@given(st.integers(0, 2**32 - 1), st.sampled_from([1, 2, 4]))
def test_multi_head_equals_concatenated_single_heads(seed, n_heads):
    rng = np.random.default_rng(seed)
    d = 8
    p = _proj(rng, d)
    xq, xk, xv = rng.normal(size=(3, d)), rng.normal(size=(5, d)), rng.normal(size=(5, d))
    out, w = multi_head_attention(xq, xk, xv, p, n_heads)
    ref_out, ref_w = _head_oracle(xq, xk, xv, p, n_heads)
    np.testing.assert_allclose(out.values, ref_out, atol=1e-10)
    np.testing.assert_allclose(w.values, ref_w, atol=1e-12)


def test_masked_multi_head_matches_oracle(rng):
    d = 8
    p = _proj(rng, d)
    x = rng.normal(size=(5, d))
    mask = build_group_mask(3, 2)
    out, w = multi_head_attention(x, x, x, p, 2, mask=mask)
    ref_out, ref_w = _head_oracle(x, x, x, p, 2, mask)
    np.testing.assert_allclose(out.values, ref_out, atol=1e-10)
    assert (w.values[:, ~mask] == 0).all()


def test_multi_head_dimension_errors(rng):
    p = _proj(rng, 8)
    with pytest.raises(ValueError):
        multi_head_attention(rng.normal(size=(2, 6)), rng.normal(size=(2, 8)), rng.normal(size=(2, 8)), p, 2)
    with pytest.raises(ValueError):
        multi_head_attention(rng.normal(size=(2, 8)), rng.normal(size=(3, 8)), rng.normal(size=(2, 8)), p, 2)
    with pytest.raises(ValueError):
        multi_head_attention(rng.normal(size=(2, 8)), rng.normal(size=(2, 8)), rng.normal(size=(2, 8)), p, 3)


# -- group mask -----------------------------------------------------------------------------


def test_group_mask_examples():
    assert build_group_mask(2, 0).all() and build_group_mask(2, 0).shape == (2, 2)
    np.testing.assert_array_equal(build_group_mask(1, 1), [[True, False], [False, True]])
    assert build_group_mask(3, 2).sum() == 13


@given(st.lists(st.integers(0, 6), min_size=1, max_size=4))
def test_group_mask_is_block_diagonal(sizes):
    m = build_group_mask(*sizes)
    assert m.sum() == sum(n * n for n in sizes)
    assert np.array_equal(m, m.T)
    owner = np.repeat(np.arange(len(sizes)), sizes)
    assert np.array_equal(m, owner[:, None] == owner[None, :])


# -- encoder ---------------------------------------------------------------------------------


def test_sine_embedding_shape_and_range():
    pos = sine_position_embedding(4, 6, 16)
    assert pos.shape == (24, 16)
    assert np.abs(pos).max() <= 1.0
    assert len({tuple(r) for r in np.round(pos, 12)}) == 24
    with pytest.raises(ValueError):
        sine_position_embedding(4, 4, 6)


def test_patchify_layout():
    g = np.arange(2 * 4 * 4 * 1, dtype=float).reshape(2, 4, 4, 1)
    p = patchify(g, 2)
    assert p.shape == (2, 4, 4)
    np.testing.assert_array_equal(p[0, 0], [0, 1, 4, 5])
    np.testing.assert_array_equal(p[1, 3], [16 + 10, 16 + 11, 16 + 14, 16 + 15])
    with pytest.raises(ValueError):
        patchify(np.zeros((1, 5, 4, 1)), 2)


def test_empty_encoder_is_the_linear_projection(rng):
    cfg = ModelConfig(**{**SMALL.to_dict(), "n_enc_layers": 0, "pos_in_tokens": False})
    params = init_params(cfg, 0)
    feats = patchify(_grids(rng, cfg), cfg.patch_size)
    enc = encoder_forward(feats, params, cfg)
    expected = feats @ params["backbone.proj.w"].values + params["backbone.proj.b"].values
    np.testing.assert_array_equal(enc.tokens.values, expected)


def test_empty_encoder_with_token_positions_adds_embedding(rng):
    cfg = ModelConfig(**{**SMALL.to_dict(), "n_enc_layers": 0})
    params = init_params(cfg, 0)
    feats = patchify(_grids(rng, cfg), cfg.patch_size)
    enc = encoder_forward(feats, params, cfg)
    expected = feats @ params["backbone.proj.w"].values + params["backbone.proj.b"].values + enc.pos
    np.testing.assert_allclose(enc.tokens.values, expected, atol=1e-14)


def test_encoder_deterministic(rng):
    params = init_params(SMALL, 1)
    feats = patchify(_grids(rng, SMALL), SMALL.patch_size)
    a = encoder_forward(feats, params, SMALL).tokens.values
    b = encoder_forward(feats, params, SMALL).tokens.values
    assert np.array_equal(a, b)


def test_encoder_permutation_equivariance(rng):
    params = init_params(SMALL, 2)
    feats = patchify(_grids(rng, SMALL, 1), SMALL.patch_size)
    pos = sine_position_embedding(SMALL.grid_h, SMALL.grid_w, SMALL.d_model)
    perm = rng.permutation(SMALL.hw)
    a = encoder_forward(feats, params, SMALL, pos=pos).tokens.values
    b = encoder_forward(feats[:, perm], params, SMALL, pos=pos[perm]).tokens.values
    np.testing.assert_allclose(b, a[:, perm], atol=1e-12)


def test_encoder_shape_check(rng):
    with pytest.raises(ValueError):
        encoder_forward(rng.normal(size=(1, 10, SMALL.patch_dim)), init_params(SMALL), SMALL)


# -- decoder ---------------------------------------------------------------------------------


def test_decoder_output_structure(rng):
    params = init_params(SMALL, 0)
    out = forward(params, SMALL, _grids(rng, SMALL, 3))
    assert out.n_layers == SMALL.n_dec_layers
    assert out.group_slices == {"student": slice(0, SMALL.n_queries)}
    for k in range(SMALL.n_dec_layers):
        assert out.probs[k].shape == (3, SMALL.n_queries, SMALL.n_classes)
        assert out.boxes[k].shape == (3, SMALL.n_queries, 4)
        assert ((out.boxes[k].values >= 0) & (out.boxes[k].values <= 1)).all()
        sa = out.attention.self_attn[k].values
        ca = out.attention.cross_attn[k].values
        assert sa.shape == (3, SMALL.n_heads, SMALL.n_queries, SMALL.n_queries)
        assert ca.shape == (3, SMALL.n_heads, SMALL.n_queries, SMALL.hw)
        for m in (sa, ca):
            np.testing.assert_allclose(m.sum(axis=-1), 1.0, atol=1e-6)
            assert ((m >= 0) & (m <= 1)).all()


def test_single_layer_decoder(rng):
    cfg = ModelConfig(**{**SMALL.to_dict(), "n_dec_layers": 1})
    out = forward(init_params(cfg), cfg, _grids(rng, cfg, 1))
    assert len(out.probs) == 1 and out.probs[0].shape == (1, cfg.n_queries, cfg.n_classes)


def test_class_head_prior():
    params = init_params(SMALL)
    assert 1 / (1 + np.exp(-params["head.cls.b"].values[0])) == pytest.approx(0.1)


@given(st.integers(0, 2**16), st.integers(1, 7))
def test_group_isolation(seed, n_aux):
    rng = np.random.default_rng(seed)
    params = init_params(SMALL, seed)
    grids = _grids(rng, SMALL, 2)
    enc = encoder_forward(patchify(grids, SMALL.patch_size), params, SMALL)
    alone = decoder_forward(enc, params["query_embed"], None, params, SMALL)
    aux = rng.normal(size=(n_aux, SMALL.d_model))
    both = decoder_forward(enc, params["query_embed"], aux, params, SMALL)
    s = both.group_slices["student"]
    assert both.group_slices["aux"] == slice(SMALL.n_queries, SMALL.n_queries + n_aux)
    for k in range(SMALL.n_dec_layers):
        assert np.abs(both.probs[k].values[:, s] - alone.probs[k].values).max() < 1e-12
        assert np.abs(both.boxes[k].values[:, s] - alone.boxes[k].values).max() < 1e-12
        sa = both.attention.self_attn[k].values
        assert np.abs(sa[:, :, s, s] - alone.attention.self_attn[k].values).max() < 1e-12
        assert (sa[:, :, s, s.stop :] == 0).all() and (sa[:, :, s.stop :, s] == 0).all()
        ca = both.attention.cross_attn[k].values
        assert np.abs(ca[:, :, s] - alone.attention.cross_attn[k].values).max() < 1e-12


def test_isolation_also_holds_for_gradients(rng):
    # aux-group losses must not reach the student queries
    params = init_params(SMALL, 3)
    enc = encoder_forward(patchify(_grids(rng, SMALL, 1), SMALL.patch_size), params, SMALL)
    out = decode_groups(enc, [("student", params["query_embed"]), ("aux", rng.normal(size=(4, SMALL.d_model)))],
                        params, SMALL)
    ag.backward(ag.sum_(out.group_boxes("aux")[-1]))
    assert not params["query_embed"].grad.any()


def test_aux_dim_mismatch(rng):
    params = init_params(SMALL)
    enc = encoder_forward(patchify(_grids(rng, SMALL, 1), SMALL.patch_size), params, SMALL)
    with pytest.raises(ValueError, match="query transplant requires equal hidden size"):
        decoder_forward(enc, params["query_embed"], rng.normal(size=(3, SMALL.d_model + 4)), params, SMALL)


def test_init_is_seeded_and_xavier():
    a, b = init_params(SMALL, 5), init_params(SMALL, 5)
    assert a.checksum() == b.checksum()
    assert a.checksum() != init_params(SMALL, 6).checksum()
    w = a["dec.0.cross_attn.wq"].values
    assert np.abs(w).max() <= math.sqrt(6 / (2 * SMALL.d_model))


def test_inheritable_names_cover_transformer_and_heads():
    params = init_params(SMALL, n_query_groups=2)
    names = inheritable_names(params)
    assert "query_embed" in names and "query_embed_g1" not in names
    assert all(n.startswith(("backbone.", "enc.", "dec.", "head.", "query_embed")) for n in names)
    assert len(names) == len(params) - 1
