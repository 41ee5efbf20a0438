"""TUNC checkpoints: magic, version, JSON config block, then named float32 arrays."""
import json
import struct

import numpy as np

from .network import ModelConfig, build_model

MAGIC = b"TUNC"
VERSION = 1


class CheckpointError(ValueError):
    """Malformed, truncated or mismatching checkpoint file."""


def save_checkpoint(model, path):
    cfg = json.dumps(model.cfg.to_dict(), sort_keys=True).encode("utf-8")
    params = list(model.named_parameters())
    with open(path, "wb") as fh:
        fh.write(MAGIC + struct.pack("<II", VERSION, len(cfg)) + cfg)
        fh.write(struct.pack("<I", len(params)))
        for name, t in params:
            key = name.encode("utf-8")
            fh.write(struct.pack("<I", len(key)) + key)
            fh.write(struct.pack("<I", t.ndim) + struct.pack(f"<{t.ndim}I", *t.shape))
            fh.write(np.ascontiguousarray(t.data, dtype="<f4").tobytes())


class _Reader:
    def __init__(self, raw):
        self.raw, self.pos = raw, 0

    def take(self, n):
        if self.pos + n > len(self.raw):
            raise CheckpointError(f"truncated checkpoint at byte {self.pos} (need {n} more)")
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self, count=1):
        vals = struct.unpack(f"<{count}I", self.take(4 * count))
        return vals[0] if count == 1 else vals


def load_checkpoint(path):
    """Rebuild the saved model; nothing is returned unless the whole file validates."""
    with open(path, "rb") as fh:
        r = _Reader(fh.read())
    if r.take(4) != MAGIC:
        raise CheckpointError(f"{path}: not a TUNC checkpoint")
    version = r.u32()
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    try:
        cfg = ModelConfig.from_dict(json.loads(r.take(r.u32()).decode("utf-8")))
    except (ValueError, TypeError) as exc:
        raise CheckpointError(f"{path}: bad config block: {exc}") from exc
    arrays = {}
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode("utf-8")
        rank = r.u32()
        shape = tuple(np.atleast_1d(r.u32(rank))) if rank else ()
        n = int(np.prod(shape, dtype=np.int64))
        arrays[name] = np.frombuffer(r.take(4 * n), dtype="<f4").reshape(shape)
    if r.pos != len(r.raw):
        raise CheckpointError(f"{path}: {len(r.raw) - r.pos} trailing bytes")
    model = build_model(cfg)
    expected = dict(model.named_parameters())
    if set(expected) != set(arrays):
        raise CheckpointError(f"{path}: parameter names do not match config "
                              f"(missing {sorted(set(expected) - set(arrays))[:3]}, "
                              f"extra {sorted(set(arrays) - set(expected))[:3]})")
    for name, t in expected.items():
        if arrays[name].shape != t.shape:
            raise CheckpointError(f"{path}: {name} has shape {arrays[name].shape}, config implies {t.shape}")
    for name, t in expected.items():
        t.data = arrays[name].astype(t.dtype)
    return model
