import numpy as np
import pytest
from scipy.special import softmax as sp_softmax
from scipy.stats import norm

from loft import tensor as T
from loft.analysis import window_indicator
from loft.dct import dct2_forward
from loft.errors import ParameterError, ShapeError
from loft.gradcheck import gradcheck
from loft.loft import (AttentionConfig, LoftBlockParams, WindowGrid, canonical_variant,
                       freq_lc_attention, gdfn_forward, lofn_forward, loft_block_forward, mgate,
                       spa_gc_attention, variant_attention, window_partition, window_reverse)
from loft.tensor import Tensor


def gelu(x):
    return x * norm.cdf(x)


def naive_channel_attention(q, k, v, alpha=1.0):
    """q, k, v: [c, n] -> (out [c, n], map [c, c])."""
    a = sp_softmax(q @ k.T / alpha, axis=1)
    return a @ v, a


# partition

def test_partition_counts():
    grid = WindowGrid(6, 6, 2)
    assert (grid.m, grid.n) == (9, 4)
    assert window_partition(np.zeros((6, 6, 3)), grid).shape == (9, 3, 4)


def test_partition_layout():
    z = np.arange(16.0).reshape(4, 4, 1)
    wins = window_partition(z, WindowGrid(4, 4, 2)).data
    np.testing.assert_array_equal(wins[0, 0], [0, 1, 4, 5])
    np.testing.assert_array_equal(wins[1, 0], [2, 3, 6, 7])
    np.testing.assert_array_equal(wins[3, 0], [10, 11, 14, 15])


def test_partition_position_map():
    grid = WindowGrid(8, 12, 4)
    z = np.arange(8 * 12.0).reshape(8, 12, 1)
    wins = window_partition(z, grid).data
    for i in range(grid.m):
        for j in range(grid.n):
            r, c = grid.position(i, j)
            assert wins[i, 0, j] == z[r, c, 0]


def test_partition_is_bijection(rng):
    grid = WindowGrid(8, 12, 4)
    z = rng.standard_normal((8, 12, 5))
    np.testing.assert_array_equal(window_reverse(window_partition(z, grid), grid).data, z)
    wins = rng.standard_normal((grid.m, 5, grid.n))
    np.testing.assert_array_equal(window_partition(window_reverse(wins, grid), grid).data, wins)
    assert not window_reverse(np.zeros((grid.m, 2, grid.n)), grid).data.any()


def test_partition_errors():
    with pytest.raises(ShapeError):
        WindowGrid(6, 7, 2)
    with pytest.raises(ShapeError):
        window_partition(np.zeros((4, 4, 1)), WindowGrid(8, 8, 2))
    with pytest.raises(ShapeError):
        window_reverse(np.zeros((3, 1, 4)), WindowGrid(4, 4, 2))


# channel attention

def test_freq_lc_zero_query_is_uniform(rng):
    v = rng.standard_normal((2, 1, 3, 4))
    k = rng.standard_normal((2, 1, 3, 4))
    out, maps = freq_lc_attention(np.zeros_like(v), k, v)
    np.testing.assert_allclose(maps.data, np.full((2, 1, 3, 3), 1 / 3))
    np.testing.assert_allclose(out.data, np.repeat(v.mean(axis=2, keepdims=True), 3, axis=2))


def test_freq_lc_singleton_channel(rng):
    q, k, v = (rng.standard_normal((3, 2, 1, 4)) for _ in range(3))
    out, maps = freq_lc_attention(q, k, v)
    np.testing.assert_array_equal(maps.data, np.ones((3, 2, 1, 1)))
    np.testing.assert_allclose(out.data, v)


def test_freq_lc_matches_oracle(rng):
    q, k, v = (rng.standard_normal((2, 1, 3, 4)) for _ in range(3))
    out, maps = freq_lc_attention(q, k, v, alpha=0.7)
    for i in range(2):
        o, a = naive_channel_attention(q[i, 0], k[i, 0], v[i, 0], 0.7)
        np.testing.assert_allclose(out.data[i, 0], o, atol=1e-12)
        np.testing.assert_allclose(maps.data[i, 0], a, atol=1e-12)


@pytest.mark.parametrize("alpha", [0.0, -1.0])
def test_nonpositive_alpha_rejected(alpha, rng):
    q = rng.standard_normal((1, 1, 2, 4))
    with pytest.raises(ParameterError):
        freq_lc_attention(q, q, q, alpha)
    with pytest.raises(ParameterError):
        spa_gc_attention(q[0], q[0], q[0], alpha)


def test_spa_gc_is_single_window_freq_lc(rng):
    q, k, v = (rng.standard_normal((2, 3, 16)) for _ in range(3))
    g_out, g_maps = spa_gc_attention(q, k, v)
    l_out, l_maps = freq_lc_attention(q[None], k[None], v[None])
    np.testing.assert_allclose(g_out.data, l_out.data[0], atol=1e-14)
    np.testing.assert_allclose(g_maps.data, l_maps.data[0], atol=1e-14)


def test_spa_gc_zero_key(rng):
    q, v = rng.standard_normal((1, 4, 8)), rng.standard_normal((1, 4, 8))
    _, maps = spa_gc_attention(q, np.zeros_like(q), v)
    np.testing.assert_allclose(maps.data, np.full((1, 4, 4), 0.25))


def test_spa_gc_oracle_on_feature_map(rng):
    x = [rng.standard_normal((8, 8, 4)) for _ in range(3)]
    out, maps = variant_attention("spa_gc", *x)
    tok = [t.reshape(64, 4).T for t in x]
    o, a = naive_channel_attention(*tok)
    np.testing.assert_allclose(out.data, o.T.reshape(8, 8, 4), atol=1e-12)
    np.testing.assert_allclose(maps.data[0], a, atol=1e-12)


def test_multi_head_is_per_group(rng):
    x = [rng.standard_normal((4, 4, 6)) for _ in range(3)]
    out, maps = variant_attention("freq_gc", *x, heads=2, alpha=np.array([0.5, 2.0]))
    assert maps.shape == (2, 3, 3)
    for head, alpha in enumerate((0.5, 2.0)):
        sl = slice(3 * head, 3 * head + 3)
        tok = [t[:, :, sl].reshape(16, 3).T for t in x]
        o, _ = naive_channel_attention(*tok, alpha)
        np.testing.assert_allclose(out.data[:, :, sl], o.T.reshape(4, 4, 3), atol=1e-12)


# variants

def test_freq_gc_equals_freq_lc_on_single_window(rng):
    x = [rng.standard_normal((4, 4, 3)) for _ in range(3)]
    gc, _ = variant_attention("freq_gc", *x)
    lc, maps = variant_attention("freq_lc", *x, grid=WindowGrid(4, 4, 4))
    assert maps.shape == (1, 1, 3, 3)
    np.testing.assert_allclose(gc.data, lc.data, atol=1e-14)


def test_freq_dc_groups(rng):
    grid = WindowGrid(8, 8, 2)
    x = [rng.standard_normal((8, 8, 3)) for _ in range(3)]
    out, maps = variant_attention("freq_dc", *x, grid=grid)
    assert maps.shape[0] == grid.n
    # group j collects token offset j from every window: a stride-b lattice of m positions
    for j in range(grid.n):
        dy, dx = divmod(j, grid.b)
        tok = [t[dy::grid.b, dx::grid.b].reshape(grid.m, 3).T for t in x]
        assert tok[0].shape[1] == grid.m
        o, a = naive_channel_attention(*tok)
        np.testing.assert_allclose(maps.data[j, 0], a, atol=1e-12)
        np.testing.assert_allclose(out.data[dy::grid.b, dx::grid.b], o.T.reshape(4, 4, 3), atol=1e-12)


def test_freq_ls_token_attention(rng):
    grid = WindowGrid(4, 4, 2)
    x = [rng.standard_normal((4, 4, 3)) for _ in range(3)]
    out, maps = variant_attention("freq_ls", *x, grid=grid, alpha=1.5)
    assert maps.shape == (4, 1, 4, 4)
    np.testing.assert_allclose(maps.data.sum(-1), 1.0, atol=1e-9)
    wins = [window_partition(t, grid).data for t in x]
    for i in range(grid.m):
        q, k, v = (w[i] for w in wins)  # [c, n]
        a = sp_softmax(q.T @ k / 1.5, axis=1)
        np.testing.assert_allclose(maps.data[i, 0], a, atol=1e-12)
        np.testing.assert_allclose(window_partition(out, grid).data[i], v @ a.T, atol=1e-12)


@pytest.mark.parametrize("variant", ["freq_lc", "freq_gc", "spa_gc", "freq_dc", "freq_ls"])
def test_attention_rows_are_stochastic(variant, rng):
    x = [3 * rng.standard_normal((8, 8, 4)) for _ in range(3)]
    _, maps = variant_attention(variant, *x, grid=WindowGrid(8, 8, 4), heads=2)
    np.testing.assert_allclose(maps.data.sum(-1), 1.0, atol=1e-9)
    assert np.all(maps.data >= 0)


def test_variant_names():
    assert canonical_variant("Freq-LC") == "freq_lc"
    with pytest.raises(ParameterError):
        canonical_variant("Spa-SS")
    with pytest.raises(ShapeError):
        variant_attention("freq_lc", *(np.zeros((4, 4, 2)),) * 3)


def test_zero_padded_products_match_windowed_products(rng):
    grid = WindowGrid(4, 4, 2)
    q, k = rng.standard_normal((4, 4, 3)), rng.standard_normal((4, 4, 3))
    qw, kw = window_partition(q, grid).data, window_partition(k, grid).data
    for i in range(grid.m):
        mask = window_indicator(grid, i)
        qp = (q * mask).reshape(16, 3).T
        kp = (k * mask).reshape(16, 3).T
        np.testing.assert_allclose(qw[i] @ kw[i].T, qp @ kp.T, atol=1e-13)


# gate

def test_mgate_zero_and_identity(rng):
    v = rng.standard_normal((2, 1, 3, 4))
    assert not mgate(v, np.zeros((4, 4)), np.zeros(4)).data.any()
    np.testing.assert_allclose(mgate(v, np.eye(4), np.zeros(4)).data, gelu(v), atol=1e-15)


def test_mgate_matches_matvec(rng):
    v = rng.standard_normal((1, 1, 1, 4))
    w, b = rng.standard_normal((4, 4)), rng.standard_normal(4)
    np.testing.assert_allclose(mgate(v, w, b).data[0, 0, 0], gelu(w.T @ v[0, 0, 0] + b), atol=1e-14)


def test_cgate_acts_on_channels(rng):
    v = rng.standard_normal((2, 1, 3, 4))
    w = rng.standard_normal((3, 3))
    out = mgate(v, w, axis="channel").data
    np.testing.assert_allclose(out[1, 0, :, 2], gelu(w.T @ v[1, 0, :, 2]), atol=1e-14)
    with pytest.raises(ShapeError):
        mgate(v, np.eye(4), axis="channel")
    with pytest.raises(ParameterError):
        mgate(v, np.eye(4), axis="token")


# blocks

def block(channels=8, window=4, heads=1, seed=0, **kw):
    cfg = AttentionConfig(channels=channels, heads=heads, window=window, **kw)
    params = LoftBlockParams.initialize(cfg, np.random.default_rng(seed), dtype=np.float64, std=0.3)
    return cfg, params


def test_lofn_shape():
    cfg, params = block()
    x = np.random.default_rng(1).standard_normal((16, 24, 8))
    out, maps = lofn_forward(x, params, cfg, return_maps=True)
    assert out.shape == (16, 24, 8)
    assert maps.shape == (24, 1, 8, 8)


def test_lofn_rejects_indivisible():
    cfg, params = block()
    with pytest.raises(ShapeError):
        lofn_forward(np.zeros((10, 16, 8)), params, cfg)


def test_lofn_zero_projection():
    cfg, params = block()
    params.out_proj.data[...] = 0
    assert not lofn_forward(np.ones((8, 8, 8)), params, cfg).data.any()


def test_lofn_spatial_and_frequency_paths_agree(rng):
    # no depthwise conv, no LN, no gate: the 1x1 maps commute with the DCT
    common = dict(channels=8, window=16, heads=2, use_dwconv=False, ln_placement="none", gate="none")
    spa = AttentionConfig(variant="spa_gc", **common)
    frq = AttentionConfig(variant="freq_gc", **common)
    params = LoftBlockParams.initialize(spa, rng, dtype=np.float64, std=0.3)
    x = rng.standard_normal((16, 16, 8))
    diff = lofn_forward(x, params, spa).data - lofn_forward(x, params, frq).data
    assert np.abs(diff).max() < 1e-6


def test_ln_placement_matters(rng):
    x = rng.standard_normal((8, 8, 8)) * np.linspace(3, 0.1, 8)[:, None, None]
    outs = {}
    for ln in ("dct_ln", "ln_dct"):
        cfg, params = block(ln_placement=ln, seed=3)
        outs[ln] = lofn_forward(x, params, cfg).data
    assert np.abs(outs["dct_ln"] - outs["ln_dct"]).max() > 1e-3


def test_gdfn_zero_projection_and_shape(rng):
    cfg, params = block()
    x = rng.standard_normal((8, 8, 8))
    assert gdfn_forward(x, params, cfg).shape == (8, 8, 8)
    params.ffn_out.data[...] = 0
    assert not gdfn_forward(x, params, cfg).data.any()


def test_gdfn_matches_composition(rng):
    cfg, params = block(channels=4)
    x = rng.standard_normal((4, 4, 4))
    hid = cfg.hidden
    assert hid == int(4 * 2.66)
    y = T.channel_layernorm(x, params.ln2_gamma, params.ln2_beta).data
    y = np.einsum("hwc,cd->hwd", y, params.ffn_in.data)
    yp = np.pad(y, ((1, 1), (1, 1), (0, 0)))
    conv = sum(yp[dy:dy + 4, dx:dx + 4] * params.ffn_depth.data[dy, dx]
               for dy in range(3) for dx in range(3))
    gated = gelu(conv[:, :, :hid]) * conv[:, :, hid:]
    expected = np.einsum("hwc,cd->hwd", gated, params.ffn_out.data)
    np.testing.assert_allclose(gdfn_forward(x, params, cfg).data, expected, atol=1e-12)


def test_zero_block_is_identity(rng):
    cfg = AttentionConfig(channels=8, heads=2, window=4)
    x = rng.standard_normal((8, 8, 8))
    np.testing.assert_array_equal(loft_block_forward(x, LoftBlockParams.zeros(cfg), cfg).data, x)


def test_block_input_gradient(rng):
    cfg, params = block(channels=4, window=2)
    x = Tensor(rng.standard_normal((4, 4, 4)), requires_grad=True)
    res = gradcheck(lambda: T.sum_(loft_block_forward(x, params, cfg)), [x])
    assert res.passed(1e-3), res.worst


@pytest.mark.parametrize("variant,gate", [("freq_dc", "mgate"), ("freq_ls", "cgate"),
                                          ("spa_gc", "mgate"), ("freq_lc", "none")])
def test_block_variants_run(variant, gate, rng):
    cfg, params = block(heads=2, variant=variant, gate=gate)
    out = loft_block_forward(rng.standard_normal((8, 8, 8)), params, cfg)
    assert out.shape == (8, 8, 8) and np.all(np.isfinite(out.data))


def test_config_validation():
    with pytest.raises(ParameterError):
        AttentionConfig(channels=6, heads=4)
    with pytest.raises(ParameterError):
        AttentionConfig(channels=4, ln_placement="post")
    cfg = AttentionConfig(channels=8, heads=2, ln_placement="DCT-LN")
    assert cfg.c_hat == 4 and cfg.ln_placement == "dct_ln"


def test_initialisation_contract():
    cfg = AttentionConfig(channels=8, heads=2, window=4)
    params = LoftBlockParams.initialize(cfg, np.random.default_rng(0))
    assert np.all(params.alpha.data > 0)
    assert np.abs(params.qkv_point.data).max() <= 0.04 + 1e-7
    assert np.abs(params.mgate_weight.data - np.eye(16)).max() < 0.1
    for name, shape in LoftBlockParams.shapes(cfg).items():
        assert getattr(params, name).shape == shape


def test_dct_ln_normalises_frequency_tokens(rng):
    x = rng.standard_normal((8, 8, 8))
    cfg = AttentionConfig(channels=8, window=4)
    z = T.channel_layernorm(dct2_forward(x), np.ones(8), np.zeros(8)).data
    np.testing.assert_allclose(z.mean(-1), 0, atol=1e-12)
    assert cfg.frequency_domain
