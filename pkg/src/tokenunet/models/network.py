"""Model configuration and assembly of the four UNet / Token-UNet variants."""
from dataclasses import asdict, dataclass, fields

from ..autodiff import DimensionError, flops, no_grad, pointwise_conv3d
from ..nn import (
    BaselineBlock,
    BaselineUp,
    Module,
    ModuleList,
    ResBlock,
    TokenFuser,
    TokenLearner,
    TransformerStack,
    init_parameters,
)

# component matrix: which bottleneck pieces each variant carries
VARIANTS = {
    "unet_baseline": (),
    "unet_star": (),
    "token_unet_plain": ("tokenizer", "detokenizer"),
    "token_unet_transformer": ("tokenizer", "transformer", "detokenizer"),
}

PAPER_WIDTHS = (32, 64, 128, 256)
DESK_WIDTHS = (8, 16, 32, 64)


class ConfigError(ValueError):
    """Invalid model, training or data configuration."""


@dataclass
class ModelConfig:
    in_channels: int = 4
    out_channels: int = 3
    stage_widths: tuple = DESK_WIDTHS
    blocks_per_stage: int = 1
    token_count: int = 8
    token_width: int = None
    decoupled_token_width: int = None
    heads: int = 8
    transformer_blocks: int = 4
    variant: str = "token_unet_transformer"
    seed: int = 0

    def __post_init__(self):
        self.stage_widths = tuple(int(w) for w in self.stage_widths)
        self.validate()

    @classmethod
    def paper(cls, variant="token_unet_transformer", **kw):
        kw.setdefault("stage_widths", PAPER_WIDTHS)
        return cls(variant=variant, **kw)

    @classmethod
    def desk(cls, variant="token_unet_transformer", **kw):
        kw.setdefault("stage_widths", DESK_WIDTHS)
        return cls(variant=variant, **kw)

    @property
    def bottleneck_width(self):
        return self.stage_widths[-1]

    @property
    def transformer_width(self):
        return self.decoupled_token_width or self.bottleneck_width

    @property
    def baseline_widths(self):
        # one deeper stage, 32..256 -> 32..320 at paper scale
        return self.stage_widths + (self.stage_widths[-1] * 5 // 4,)

    @property
    def components(self):
        return VARIANTS[self.variant]

    @property
    def downsampling_factor(self):
        n = len(self.baseline_widths if self.variant == "unet_baseline" else self.stage_widths)
        return 2 ** (n - 1)

    def validate(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {list(VARIANTS)}")
        w = self.stage_widths
        if len(w) < 2 or any(x <= 0 for x in w) or any(b <= a for a, b in zip(w, w[1:])):
            raise ConfigError(f"stage_widths must be >= 2 strictly increasing positive ints, got {w}")
        if self.in_channels < 1 or self.out_channels < 1 or self.blocks_per_stage < 1:
            raise ConfigError("in_channels, out_channels and blocks_per_stage must be >= 1")
        if self.token_width is not None and self.token_width != self.bottleneck_width:
            raise ConfigError(
                f"token_width {self.token_width} differs from bottleneck width {self.bottleneck_width}; "
                "set decoupled_token_width to insert projections")
        if "tokenizer" in self.components:
            if self.token_count < 1:
                raise ConfigError("token_count must be >= 1")
            if self.bottleneck_width % 4:
                raise ConfigError("bottleneck width must be divisible by 4 for the token MLPs")
        if "transformer" in self.components:
            if self.transformer_blocks < 1:
                raise ConfigError("transformer_blocks must be >= 1")
            if self.transformer_width % self.heads:
                raise ConfigError(f"token width {self.transformer_width} not divisible by {self.heads} heads")

    def to_dict(self):
        d = asdict(self)
        d["stage_widths"] = list(self.stage_widths)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


class Decouple(Module):
    """Linear expand (F -> d_t) and shrink (d_t -> F) projections around the token mixer."""

    def __init__(self, features, width):
        super().__init__()
        self.param("expand", (features, width), fan_in=features)
        self.param("shrink", (width, features), fan_in=width)


class Model(Module):
    """A built network. Call :func:`model_forward` (or the instance) on a (C, D, H, W) tensor."""

    def __init__(self, cfg):
        super().__init__()
        self.cfg = cfg
        bps = cfg.blocks_per_stage
        if cfg.variant == "unet_baseline":
            widths = cfg.baseline_widths
            self.encoder = ModuleList()
            for i, c in enumerate(widths):
                c_in = cfg.in_channels if i == 0 else widths[i - 1]
                blocks = ModuleList([BaselineBlock(c_in, c, stride=1 if i == 0 else 2)])
                for _ in range(bps - 1):
                    blocks.append(BaselineBlock(c, c))
                self.encoder.append(blocks)
            self.decoder = ModuleList(BaselineUp(widths[i], widths[i - 1]) for i in range(len(widths) - 1, 0, -1))
        else:
            widths = cfg.stage_widths
            self.encoder = ModuleList()
            for i, c in enumerate(widths):
                c_in = cfg.in_channels if i == 0 else widths[i - 1]
                blocks = ModuleList([ResBlock(c_in, c, "none" if i == 0 else "down")])
                for _ in range(bps - 1):
                    blocks.append(ResBlock(c, c))
                self.encoder.append(blocks)
            self.decoder = ModuleList()
            for i in range(len(widths) - 1, -1, -1):
                c_out = widths[i - 1] if i > 0 else widths[0]
                blocks = ModuleList([ResBlock(widths[i], c_out, "up" if i > 0 else "none")])
                for _ in range(bps - 1):
                    blocks.append(ResBlock(c_out, c_out))
                self.decoder.append(blocks)
            f = cfg.bottleneck_width
            if "tokenizer" in cfg.components:
                self.token_learner = TokenLearner(f, cfg.token_count)
            if "transformer" in cfg.components:
                self.transformer = TransformerStack(cfg.transformer_width, cfg.heads, cfg.transformer_blocks)
            if "tokenizer" in cfg.components and cfg.decoupled_token_width:
                self.decouple = Decouple(f, cfg.decoupled_token_width)
            if "detokenizer" in cfg.components:
                self.token_fuser = TokenFuser(f, cfg.token_count)
        self.param("head", (cfg.out_channels, widths[0]), fan_in=widths[0])
        self.param("head_bias", (cfg.out_channels,), "zeros")
        self.last_maps = None

    def module_names(self):
        """Top-level component names present in this model."""
        return [n for n in ("encoder", "token_learner", "decouple", "transformer", "token_fuser", "decoder")
                if n in self._children] + ["head"]

    def __call__(self, x):
        return model_forward(self, x)


def build_model(cfg):
    """Construct a model and draw its parameters deterministically from ``cfg.seed``."""
    cfg.validate()
    model = Model(cfg)
    init_parameters(model, cfg.seed)
    return model


def _check_input(model, x):
    cfg, k = model.cfg, model.cfg.downsampling_factor
    if x.ndim != 4 or x.shape[0] != cfg.in_channels:
        raise DimensionError(f"model expects ({cfg.in_channels}, D, H, W) input, got {x.shape}")
    if any(n % k for n in x.shape[1:]):
        raise DimensionError(f"spatial extents {x.shape[1:]} must be divisible by {k}")


def _bottleneck(model, x):
    maps = None
    if "tokenizer" not in model.cfg.components:
        return x, maps
    with flops.section("token_learner"):
        tokens, maps = model.token_learner(x)
    with flops.section("bottleneck"):
        if "decouple" in model._children:
            tokens = tokens @ model.decouple.expand
        if "transformer" in model._children:
            tokens = model.transformer(tokens)
        if "decouple" in model._children:
            tokens = tokens @ model.decouple.shrink
    with flops.section("token_fuser"):
        x = model.token_fuser(x, tokens)
    return x, maps


def model_forward(model, x):
    """Return ``(logits, maps)``; logits are pre-sigmoid (L, D, H, W), maps are the
    TokenLearner attention maps for token variants and ``None`` otherwise."""
    _check_input(model, x)
    skips = []
    with flops.section("encoder"):
        for stage in model.encoder:
            for blk in stage:
                x = blk(x)
            skips.append(x)
    if model.cfg.variant == "unet_baseline":
        maps = None
        with flops.section("decoder"):
            for up, skip in zip(model.decoder, reversed(skips[:-1])):
                x = up(x, skip)
    else:
        x, maps = _bottleneck(model, x)
        with flops.section("decoder"):
            n = len(model.decoder)
            for j, stage in enumerate(model.decoder):
                for blk in stage:
                    x = blk(x)
                level = n - 2 - j
                if level >= 0:
                    x = x + skips[level]
    with flops.section("decoder"):
        logits = pointwise_conv3d(x, model.head, model.head_bias)
    model.last_maps = maps
    return logits, maps


def predict(model, x):
    """Inference-only forward returning the logits array."""
    with no_grad():
        return model_forward(model, x)[0].data


__all__ = ["ModelConfig", "Model", "ConfigError", "VARIANTS", "build_model", "model_forward", "predict"]
