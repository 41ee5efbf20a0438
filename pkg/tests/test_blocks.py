import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tokenunet.autodiff import DimensionError, Tensor, finite_diff_check, flops, precision, softmax_over_axes
from tokenunet.nn import (
    FeedForward,
    MultiHeadAttention,
    ResBlock,
    TokenFuser,
    TokenLearner,
    TransformerBlock,
    TransformerStack,
    init_parameters,
    self_attention,
)


def _init(m, seed=0):
    init_parameters(m, seed)
    return m


def _zero(*tensors):
    for t in tensors:
        t.data[...] = 0


def _softmax_rows(s):
    e = np.exp(s - s.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


# ---- residual block ---------------------------------------------------------------------------


def test_resblock_zero_residual_is_identity(rng):
    blk = _init(ResBlock(4, 4))
    _zero(blk.conv.weight, blk.conv.gamma)
    x = Tensor(rng.standard_normal((4, 4, 4, 4)))
    assert np.array_equal(blk(x).data, x.data)


@pytest.mark.parametrize("mode,out", [("none", 8), ("down", 4), ("up", 16)])
def test_resblock_shapes(rng, mode, out):
    blk = _init(ResBlock(2, 3, mode))
    assert blk(Tensor(rng.standard_normal((2, 8, 8, 8)))).shape == (3, out, out, out)


def test_resblock_shortcut_projection_iff_channels_change():
    assert "proj" not in dict(ResBlock(4, 4).named_parameters())
    assert dict(ResBlock(4, 8).named_parameters())["proj"].shape == (8, 4)


def test_resblock_errors(rng):
    with pytest.raises(DimensionError):
        _init(ResBlock(2, 2, "down"))(Tensor(np.ones((2, 5, 4, 4))))
    with pytest.raises(DimensionError):
        _init(ResBlock(2, 2))(Tensor(np.ones((3, 4, 4, 4))))
    with pytest.raises(ValueError):
        ResBlock(2, 2, "sideways")


@pytest.mark.parametrize("mode", ["none", "down", "up"])
def test_resblock_gradient(f64, rng, mode):
    blk = _init(ResBlock(2, 4, mode))
    x = Tensor(rng.standard_normal((2, 4, 4, 4)), requires_grad=True)
    c = Tensor(rng.standard_normal(blk(x).shape))
    rep = finite_diff_check(lambda: (blk(x) * c).sum(), [x] + blk.parameters(), max_coords=40)
    assert rep.passed, rep


# ---- token learner / fuser ----------------------------------------------------------------------


def test_token_learner_single_voxel(rng):
    tl = _init(TokenLearner(8, 3))
    x = Tensor(rng.standard_normal((8, 1, 1, 1)))
    t, maps = tl(x)
    assert np.allclose(maps.data, 1.0)
    assert np.allclose(t.data, np.tile(x.data.reshape(1, 8), (3, 1)))


def test_token_learner_constant_logits_give_global_mean(rng):
    tl = _init(TokenLearner(8, 2))
    _zero(tl.mlp.w2)
    x = Tensor(rng.standard_normal((8, 3, 4, 2)))
    t, maps = tl(x)
    assert np.allclose(maps.data, 1.0 / 24)
    assert np.allclose(t.data, np.tile(x.data.mean(axis=(1, 2, 3)), (2, 1)), atol=1e-6)


def test_token_learner_brute_force(f64, rng):
    tl = _init(TokenLearner(8, 3), seed=5)
    x = rng.standard_normal((8, 2, 3, 2))
    t, _ = tl(Tensor(x))
    w1, b1, w2, b2 = (p.data for p in (tl.mlp.w1, tl.mlp.b1, tl.mlp.w2, tl.mlp.b2))
    from scipy.special import erf

    vox = x.reshape(8, -1).T
    h = vox @ w1 + b1
    h = 0.5 * h * (1 + erf(h / np.sqrt(2)))
    logits = (h @ w2 + b2).T
    a = np.exp(logits - logits.max(axis=1, keepdims=True))
    a /= a.sum(axis=1, keepdims=True)
    want = np.zeros((3, 8))
    for n in range(3):
        for v in range(vox.shape[0]):
            want[n] += a[n, v] * vox[v]
    assert np.allclose(t.data, want, atol=1e-6)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 6))
def test_token_learner_maps_and_convex_hull(seed, n_tokens):
    rng = np.random.default_rng(seed)
    tl = _init(TokenLearner(8, n_tokens), seed)
    x = Tensor(3 * rng.standard_normal((8, 2, 3, 3)))
    t, maps = tl(x)
    assert maps.shape == (n_tokens, 2, 3, 3)
    assert np.all(maps.data >= 0)
    assert np.allclose(maps.data.sum(axis=(1, 2, 3)), 1.0, atol=1e-5)
    lo, hi = x.data.min(axis=(1, 2, 3)), x.data.max(axis=(1, 2, 3))
    assert np.all(t.data >= lo - 1e-5) and np.all(t.data <= hi + 1e-5)
    assert np.all(np.isfinite(t.data))


def test_token_learner_spatial_permutation_invariance(f64, rng):
    tl = _init(TokenLearner(8, 4), seed=2)
    x = rng.standard_normal((8, 2, 2, 3))
    perm = rng.permutation(12)
    xp = x.reshape(8, -1)[:, perm].reshape(x.shape)
    t1, m1 = tl(Tensor(x))
    t2, m2 = tl(Tensor(xp))
    assert np.allclose(t1.data, t2.data)
    assert np.allclose(m1.data.reshape(4, -1)[:, perm], m2.data.reshape(4, -1))


def test_token_learner_errors():
    with pytest.raises(ValueError):
        TokenLearner(6, 2)
    with pytest.raises(ValueError):
        TokenLearner(8, 0)
    with pytest.raises(DimensionError):
        _init(TokenLearner(8, 2))(Tensor(np.ones((4, 2, 2, 2))))


def test_token_fuser_zero_init_is_identity(rng):
    tf = _init(TokenFuser(8, 3))
    assert np.array_equal(tf.mix.data, np.eye(3))
    x = Tensor(rng.standard_normal((8, 2, 2, 2)))
    assert np.array_equal(tf(x, Tensor(rng.standard_normal((3, 8)))).data, x.data)


def test_token_fuser_single_token_tiles(rng):
    tf = _init(TokenFuser(8, 1))
    tf.mlp.b2.data[...] = 1.0
    x = Tensor(rng.standard_normal((8, 2, 2, 2)))
    tok = rng.standard_normal((1, 8))
    out = tf(x, Tensor(tok)).data
    assert np.allclose(out, x.data + tok.reshape(8, 1, 1, 1), atol=1e-6)


def test_token_fuser_brute_force(f64, rng):
    tf = _init(TokenFuser(8, 3), seed=3)
    tf.mlp.w2.data[...] = rng.standard_normal(tf.mlp.w2.shape)
    tf.mix.data[...] = rng.standard_normal((3, 3))
    x, t = rng.standard_normal((8, 2, 2, 1)), rng.standard_normal((3, 8))
    out = tf(Tensor(x), Tensor(t)).data
    b = tf.mlp(Tensor(x)).data.reshape(3, -1)
    mt = tf.mix.data @ t
    want = x.reshape(8, -1).copy()
    for f in range(8):
        for v in range(4):
            want[f, v] += sum(b[n, v] * mt[n, f] for n in range(3))
    assert np.allclose(out.reshape(8, -1), want)


def test_token_fuser_mismatch():
    with pytest.raises(DimensionError):
        _init(TokenFuser(8, 3))(Tensor(np.ones((8, 2, 2, 2))), Tensor(np.ones((2, 8))))


def test_token_blocks_gradient(f64, rng):
    tl, tf = _init(TokenLearner(8, 2), 1), _init(TokenFuser(8, 2), 2)
    tf.mlp.w2.data[...] = rng.standard_normal(tf.mlp.w2.shape)
    x = Tensor(rng.standard_normal((8, 2, 2, 2)), requires_grad=True)
    c = Tensor(rng.standard_normal((8, 2, 2, 2)))

    def f():
        t, _ = tl(x)
        return (tf(x, t) * c).sum()

    rep = finite_diff_check(f, [x] + tl.parameters() + tf.parameters(), max_coords=30)
    assert rep.passed, rep


# ---- attention and transformer ------------------------------------------------------------------


def test_self_attention_single_token(rng):
    x = Tensor(rng.standard_normal((1, 4)))
    wq, wk, wv = (Tensor(rng.standard_normal((4, 2))) for _ in range(3))
    assert np.allclose(self_attention(wq, wk, wv, x).data, (x @ wv).data)


def test_self_attention_identical_tokens_give_identical_rows(rng):
    row = rng.standard_normal((1, 4))
    x = Tensor(np.vstack([row, row]))
    wq, wk, wv = (Tensor(rng.standard_normal((4, 2))) for _ in range(3))
    out = self_attention(wq, wk, wv, x).data
    assert np.allclose(out[0], out[1])


def test_self_attention_double_loop(f64, rng):
    x = rng.standard_normal((3, 4))
    wq, wk, wv = (rng.standard_normal((4, 2)) for _ in range(3))
    got = self_attention(Tensor(wq), Tensor(wk), Tensor(wv), Tensor(x)).data
    q, k, v = x @ wq, x @ wk, x @ wv
    want = np.zeros((3, 2))
    for i in range(3):
        s = np.array([q[i] @ k[j] / np.sqrt(2) for j in range(3)])
        a = np.exp(s - s.max())
        a /= a.sum()
        for j in range(3):
            want[i] += a[j] * v[j]
    assert np.allclose(got, want)


def test_mha_single_head_reduces_to_self_attention(f64, rng):
    mha = _init(MultiHeadAttention(8, 1))
    x = Tensor(rng.standard_normal((5, 8)))
    want = self_attention(mha.wq, mha.wk, mha.wv, x) @ mha.wo
    assert np.allclose(mha(x).data, want.data)


def test_mha_zero_values_give_zero(rng):
    mha = _init(MultiHeadAttention(8, 2))
    mha.wo.data[...] = np.eye(8)
    _zero(mha.wv)
    assert np.array_equal(mha(Tensor(rng.standard_normal((4, 8)))).data, np.zeros((4, 8)))


def test_mha_matches_per_head_concat(f64, rng):
    mha = _init(MultiHeadAttention(16, 2), seed=4)
    x = Tensor(rng.standard_normal((8, 16)))
    heads = [self_attention(Tensor(mha.wq.data[:, s]), Tensor(mha.wk.data[:, s]), Tensor(mha.wv.data[:, s]), x).data
             for s in mha.head_slices()]
    assert np.allclose(mha(x).data, np.hstack(heads) @ mha.wo.data)


@pytest.mark.parametrize("n", [1, 8, 33])
def test_attention_score_count_is_n_squared(rng, n):
    mha = _init(MultiHeadAttention(16, 4))
    flops.reset()
    mha(Tensor(rng.standard_normal((n, 16))))
    assert flops.events["attention_scores"] == 4 * n * n


def test_mha_width_must_divide_heads():
    with pytest.raises(ValueError):
        MultiHeadAttention(10, 4)


def test_ffn_zero_and_gelu_passthrough(f64, rng):
    ffn = _init(FeedForward(4))
    for p in ffn.parameters():
        _zero(p)
    x = Tensor(rng.uniform(0.5, 2.0, (3, 4)))
    assert np.array_equal(ffn(x).data, np.zeros((3, 4)))
    ffn.w1.data[:, :4] = np.eye(4)
    ffn.w2.data[:4] = np.eye(4)
    from scipy.stats import norm

    assert np.allclose(ffn(x).data, x.data * norm.cdf(x.data))


def test_ffn_gradient(f64, rng):
    ffn = _init(FeedForward(8))
    x = Tensor(rng.standard_normal((4, 8)), requires_grad=True)
    assert finite_diff_check(lambda: (ffn(x) ** 2).sum(), [x] + ffn.parameters(), max_coords=60).passed


def _zero_sublayers(blk):
    for m in (blk.attn, blk.ffn):
        for p in m.parameters():
            _zero(p)


def test_transformer_block_zero_sublayers_is_identity(rng):
    blk = _init(TransformerBlock(16, 2))
    _zero_sublayers(blk)
    blk.ln1.gamma.data[...] = rng.standard_normal(16)
    x = Tensor(rng.standard_normal((5, 16)))
    assert np.array_equal(blk(x).data, x.data)


@pytest.mark.parametrize("n", [1, 3, 8])
def test_transformer_block_shape(rng, n):
    assert _init(TransformerBlock(16, 2))(Tensor(rng.standard_normal((n, 16)))).shape == (n, 16)


def test_transformer_block_gradient(f64, rng):
    blk = _init(TransformerBlock(16, 2))
    x = Tensor(rng.standard_normal((8, 16)), requires_grad=True)
    c = Tensor(rng.standard_normal((8, 16)))
    rep = finite_diff_check(lambda: (blk(x) * c).sum(), [x] + blk.parameters(), max_coords=40)
    assert rep.passed, rep


def test_stack_zero_sublayers_is_final_norm(f64, rng):
    st_ = _init(TransformerStack(16, 2, 3))
    for blk in st_.blocks:
        _zero_sublayers(blk)
    x = Tensor(rng.standard_normal((4, 16)))
    assert np.allclose(st_(x).data, st_.norm(x).data)


def test_stack_is_composition_and_permutation_equivariant(f64, rng):
    st_ = _init(TransformerStack(16, 2, 2))
    x = rng.standard_normal((6, 16))
    out = st_(Tensor(x)).data
    manual = st_.norm(st_.blocks[1](st_.blocks[0](Tensor(x)))).data
    assert np.allclose(out, manual)
    perm = rng.permutation(6)
    assert np.allclose(st_(Tensor(x[perm])).data, out[perm])


def test_stack_needs_a_block():
    with pytest.raises(ValueError):
        TransformerStack(16, 2, 0)


def test_softmax_and_helper_agree(rng):
    s = rng.standard_normal((3, 5))
    with precision("f64"):
        assert np.allclose(softmax_over_axes(Tensor(s), -1).data, _softmax_rows(s))
