"""Attention-map export: PGM slices plus the raw map volume."""
import os

import numpy as np

from ..autodiff import Tensor, no_grad
from ..data.volume import save_volume
from .network import model_forward

SLICE_FRACTIONS = (("z25", 0.25), ("z50", 0.5), ("z75", 0.75))


class UnsupportedVariantError(ValueError):
    """Raised when attention maps are requested from a model without a TokenLearner."""


def write_pgm(path, image):
    """Binary 8-bit PGM (P5)."""
    image = np.asarray(image, dtype=np.uint8)
    h, w = image.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(image.tobytes())


def read_pgm(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    parts = raw.split(maxsplit=4)
    if parts[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h = int(parts[1]), int(parts[2])
    return np.frombuffer(parts[4][: w * h], dtype=np.uint8).reshape(h, w)


def normalize_map(m):
    """Min-max scale one map to 0..255; a zero-range map becomes all zeros."""
    lo, hi = float(m.min()), float(m.max())
    if hi - lo <= 0:
        return np.zeros(m.shape, dtype=np.uint8)
    return np.round((m - lo) / (hi - lo) * 255.0).astype(np.uint8)


def write_attention_maps(maps, out_dir):
    """Write slices at 25/50/75% depth of each (D, H, W) map plus ``attention_maps.tvol``."""
    maps = np.asarray(maps)
    os.makedirs(out_dir, exist_ok=True)
    written = []
    depth = maps.shape[1]
    for n, m in enumerate(maps):
        scaled = normalize_map(m)
        for tag, frac in SLICE_FRACTIONS:
            z = min(depth - 1, int(frac * depth))
            path = os.path.join(out_dir, f"map{n:02d}_{tag}.pgm")
            write_pgm(path, scaled[z])
            written.append(path)
    raw = os.path.join(out_dir, "attention_maps.tvol")
    save_volume(maps, raw)
    written.append(raw)
    return written


def export_attention_maps(model, image, out_dir):
    """Run ``model`` on ``image`` (C, D, H, W) and export its TokenLearner maps."""
    if "tokenizer" not in model.cfg.components:
        raise UnsupportedVariantError(f"variant {model.cfg.variant!r} has no TokenLearner maps")
    with no_grad():
        _, maps = model_forward(model, image if isinstance(image, Tensor) else Tensor(image))
    return write_attention_maps(maps.data, out_dir)
