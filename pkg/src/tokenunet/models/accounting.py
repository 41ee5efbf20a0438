"""Parameter accounting: enumeration of stored arrays and the closed-form count."""


def count_parameters(model):
    """Per top-level component counts (enumerated from stored arrays) plus ``total``."""
    counts = {}
    for name, t in model.named_parameters():
        key = name.split(".", 1)[0]
        if key == "head_bias":
            key = "head"
        counts[key] = counts.get(key, 0) + t.size
    counts["total"] = sum(counts.values())
    return counts


def _conv_block(c_in, c_out):
    # conv weight + bias + instance-norm affine
    return 27 * c_in * c_out + 3 * c_out


def _res_block(c_in, c_out):
    return _conv_block(c_in, c_out) + (c_in * c_out if c_in != c_out else 0)


def _token_mlp(f, n):
    h = f // 4
    return f * h + h + h * n + n


def transformer_parameters(d, blocks):
    attn = 4 * d * d
    ffn = d * 4 * d + 4 * d + 4 * d * d + d
    return blocks * (attn + ffn + 4 * d) + 2 * d


def closed_form_parameters(cfg):
    """Parameter count predicted from the configuration alone."""
    bps = cfg.blocks_per_stage
    out = {}
    if cfg.variant == "unet_baseline":
        w = cfg.baseline_widths
        enc = _conv_block(cfg.in_channels, w[0]) + _conv_block(w[0], w[0])
        enc += sum(_conv_block(w[i - 1], w[i]) + _conv_block(w[i], w[i]) for i in range(1, len(w)))
        enc += sum((bps - 1) * 2 * _conv_block(c, c) for c in w)
        dec = sum(w[i] * w[i - 1] + w[i - 1] + _conv_block(2 * w[i - 1], w[i - 1]) + _conv_block(w[i - 1], w[i - 1])
                  for i in range(1, len(w)))
        out["encoder"], out["decoder"] = enc, dec
    else:
        w = cfg.stage_widths
        enc = _res_block(cfg.in_channels, w[0]) + sum(_res_block(w[i - 1], w[i]) for i in range(1, len(w)))
        enc += sum((bps - 1) * _res_block(c, c) for c in w)
        dec = sum(_res_block(w[i], w[i - 1]) for i in range(1, len(w))) + _res_block(w[0], w[0])
        dec += (bps - 1) * (sum(_res_block(c, c) for c in w[:-1]) + _res_block(w[0], w[0]))
        out["encoder"], out["decoder"] = enc, dec
        f, n = cfg.bottleneck_width, cfg.token_count
        if "tokenizer" in cfg.components:
            out["token_learner"] = _token_mlp(f, n)
            if cfg.decoupled_token_width:
                out["decouple"] = 2 * f * cfg.decoupled_token_width
        if "transformer" in cfg.components:
            out["transformer"] = transformer_parameters(cfg.transformer_width, cfg.transformer_blocks)
        if "detokenizer" in cfg.components:
            out["token_fuser"] = _token_mlp(f, n) + n * n
    out["head"] = cfg.out_channels * w[0] + cfg.out_channels
    out["total"] = sum(out.values())
    return out
