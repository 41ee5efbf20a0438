"""Residual conv blocks, TokenLearner/TokenFuser and the pre-norm Transformer."""
import math

from ..autodiff import (
    DimensionError,
    activation,
    attention_pool,
    attention_unpool,
    avg_pool3d,
    concat,
    conv3d,
    flops,
    gelu,
    layer_norm,
    instance_norm,
    pointwise_conv3d,
    softmax_over_axes,
    trilinear_upsample3d,
)
from .module import Module, ModuleList

RESAMPLE_MODES = ("none", "down", "up")


class ConvNorm(Module):
    """3x3x3 conv -> instance norm -> activation."""

    def __init__(self, c_in, c_out, act="gelu"):
        super().__init__()
        self.act = act
        self.param("weight", (c_out, c_in, 3, 3, 3), fan_in=27 * c_in)
        self.param("bias", (c_out,), "zeros")
        self.param("gamma", (c_out,), "ones")
        self.param("beta", (c_out,), "zeros")

    def __call__(self, x, stride=1):
        y = conv3d(x, self.weight, self.bias, stride=stride)
        return activation(instance_norm(y, self.gamma, self.beta), self.act)


class ResBlock(Module):
    """Residual block: conv/IN/GELU residual plus a resampled, reprojected shortcut.

    ``down`` uses a stride-2 conv on the residual path and average pooling on the
    shortcut; ``up`` upsamples trilinearly before the conv and on the shortcut.
    A pointwise projection is added to the shortcut iff ``c_in != c_out``.
    """

    def __init__(self, c_in, c_out, mode="none", act="gelu"):
        super().__init__()
        if mode not in RESAMPLE_MODES:
            raise ValueError(f"resample mode must be one of {RESAMPLE_MODES}, got {mode!r}")
        self.c_in, self.c_out, self.mode = c_in, c_out, mode
        self.conv = ConvNorm(c_in, c_out, act)
        if c_in != c_out:
            self.param("proj", (c_out, c_in), fan_in=c_in)

    def __call__(self, x):
        if x.shape[0] != self.c_in:
            raise DimensionError(f"ResBlock expects {self.c_in} channels, got {x.shape}")
        if self.mode == "down":
            if any(n % 2 for n in x.shape[1:]):
                raise DimensionError(f"down x2 needs even spatial extents, got {x.shape}")
            res = self.conv(x, stride=2)
            short = avg_pool3d(x)
        elif self.mode == "up":
            short = trilinear_upsample3d(x)
            res = self.conv(short)
        else:
            res = self.conv(x)
            short = x
        if self.c_in != self.c_out:
            short = pointwise_conv3d(short, self.proj)
        return res + short


class TokenMLP(Module):
    """Per-voxel two-layer MLP, F -> F/4 -> N with GELU, mapping (F, D, H, W) to (N, D, H, W)."""

    def __init__(self, features, tokens, zero_out=False):
        super().__init__()
        if features % 4:
            raise ValueError(f"token MLP width {features} must be divisible by 4")
        hidden = features // 4
        self.features, self.tokens = features, tokens
        self.param("w1", (features, hidden), fan_in=features)
        self.param("b1", (hidden,), "zeros")
        self.param("w2", (hidden, tokens), "zeros" if zero_out else "normal", fan_in=hidden)
        self.param("b2", (tokens,), "zeros")

    def __call__(self, x):
        if x.shape[0] != self.features:
            raise DimensionError(f"token MLP expects {self.features} channels, got {x.shape}")
        spatial = x.shape[1:]
        h = gelu(x.reshape(self.features, -1).transpose() @ self.w1 + self.b1)
        logits = h @ self.w2 + self.b2
        return logits.transpose().reshape((self.tokens,) + spatial)


class TokenLearner(Module):
    """Pool ``N`` tokens with spatial softmax attention maps.

    Returns ``(tokens, maps)`` with tokens ``(N, F)`` and maps ``(N, D, H, W)``,
    each map summing to one over space.
    """

    def __init__(self, features, tokens=8):
        super().__init__()
        if tokens < 1:
            raise ValueError("token count must be >= 1")
        self.mlp = TokenMLP(features, tokens)

    def __call__(self, x):
        maps = softmax_over_axes(self.mlp(x), (1, 2, 3))
        return attention_pool(maps, x), maps


class TokenFuser(Module):
    """Mix tokens with ``M``, unpool them through unnormalized per-voxel scores, add to ``x``."""

    def __init__(self, features, tokens=8):
        super().__init__()
        self.mlp = TokenMLP(features, tokens, zero_out=True)
        self.param("mix", (tokens, tokens), "identity")

    def __call__(self, x, tokens):
        if tokens.shape[0] != self.mix.shape[0]:
            raise DimensionError(f"TokenFuser mixes {self.mix.shape[0]} tokens, got {tokens.shape}")
        scores = self.mlp(x)
        return x + attention_unpool(scores, self.mix @ tokens)


def self_attention(wq, wk, wv, x):
    """Single attention head over ``N`` tokens; projections are (d, d_head)."""
    q, k, v = x @ wq, x @ wk, x @ wv
    n, dh = q.shape
    flops.event("attention_scores", n * n)
    scores = softmax_over_axes((q @ k.transpose()) * (1.0 / math.sqrt(dh)), -1)
    return scores @ v


class MultiHeadAttention(Module):
    """Project-then-split multi-head self-attention without biases.

    ``wq``/``wk``/``wv`` are (d, d); columns ``[i*d/h, (i+1)*d/h)`` form head i.
    """

    def __init__(self, d, heads):
        super().__init__()
        if d % heads:
            raise ValueError(f"width {d} not divisible by {heads} heads")
        self.d, self.heads = d, heads
        for name in ("wq", "wk", "wv", "wo"):
            self.param(name, (d, d), fan_in=d)

    def head_slices(self):
        dh = self.d // self.heads
        return [slice(i * dh, (i + 1) * dh) for i in range(self.heads)]

    def __call__(self, x):
        n, d = x.shape
        h, dh = self.heads, d // self.heads

        def split(t):
            return t.reshape(n, h, dh).transpose(1, 0, 2)

        q, k, v = split(x @ self.wq), split(x @ self.wk), split(x @ self.wv)
        flops.event("attention_scores", h * n * n)
        scores = softmax_over_axes((q @ k.transpose(0, 2, 1)) * (1.0 / math.sqrt(dh)), -1)
        heads = (scores @ v).transpose(1, 0, 2).reshape(n, d)
        return heads @ self.wo


class FeedForward(Module):
    def __init__(self, d, expansion=4):
        super().__init__()
        self.param("w1", (d, expansion * d), fan_in=d)
        self.param("b1", (expansion * d,), "zeros")
        self.param("w2", (expansion * d, d), fan_in=expansion * d)
        self.param("b2", (d,), "zeros")

    def __call__(self, x):
        return gelu(x @ self.w1 + self.b1) @ self.w2 + self.b2


class LayerNorm(Module):
    def __init__(self, d):
        super().__init__()
        self.param("gamma", (d,), "ones")
        self.param("beta", (d,), "zeros")

    def __call__(self, x):
        return layer_norm(x, self.gamma, self.beta)


class TransformerBlock(Module):
    """Pre-norm block: x + MHA(LN(x)), then x + FFN(LN(x))."""

    def __init__(self, d, heads):
        super().__init__()
        self.ln1 = LayerNorm(d)
        self.attn = MultiHeadAttention(d, heads)
        self.ln2 = LayerNorm(d)
        self.ffn = FeedForward(d)

    def __call__(self, x):
        x = x + self.attn(self.ln1(x))
        return x + self.ffn(self.ln2(x))


class TransformerStack(Module):
    """``B`` pre-norm blocks followed by a final LayerNorm; no positional encoding."""

    def __init__(self, d, heads=8, blocks=4):
        super().__init__()
        if blocks < 1:
            raise ValueError("transformer needs at least one block")
        self.blocks = ModuleList(TransformerBlock(d, heads) for _ in range(blocks))
        self.norm = LayerNorm(d)

    def __call__(self, tokens):
        for blk in self.blocks:
            tokens = blk(tokens)
        return self.norm(tokens)


class BaselineBlock(Module):
    """Plain double conv/IN/LeakyReLU block of the comparator UNet."""

    def __init__(self, c_in, c_out, stride=1):
        super().__init__()
        self.stride = stride
        self.conv1 = ConvNorm(c_in, c_out, "leaky_relu")
        self.conv2 = ConvNorm(c_out, c_out, "leaky_relu")

    def __call__(self, x):
        return self.conv2(self.conv1(x, stride=self.stride))


class BaselineUp(Module):
    """Pointwise halving conv with trilinear x2 upsampling, then concat skip and double conv."""

    def __init__(self, c_in, c_out):
        super().__init__()
        self.param("proj", (c_out, c_in), fan_in=c_in)
        self.param("proj_bias", (c_out,), "zeros")
        self.block = BaselineBlock(2 * c_out, c_out)

    def __call__(self, x, skip):
        up = trilinear_upsample3d(pointwise_conv3d(x, self.proj, self.proj_bias))
        return self.block(concat([up, skip], axis=0))


__all__ = [
    "ConvNorm", "ResBlock", "TokenMLP", "TokenLearner", "TokenFuser", "self_attention",
    "MultiHeadAttention", "FeedForward", "LayerNorm", "TransformerBlock", "TransformerStack",
    "BaselineBlock", "BaselineUp",
]
