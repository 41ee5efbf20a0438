"""TVOL volume files: little-endian header (magic, version, C, D, H, W) + float32 payload."""
import struct

import numpy as np

MAGIC = b"TVOL"
VERSION = 1
HEADER = struct.Struct("<4s5I")
_MAX_EXTENT = 1 << 16


class VolumeFormatError(ValueError):
    """A TVOL file is malformed, truncated or has an unsupported version."""


def save_volume(volume, path):
    """Write a (C, D, H, W) array or Tensor as TVOL. Values are stored as float32."""
    arr = np.asarray(getattr(volume, "data", volume))
    if arr.ndim != 4:
        raise ValueError(f"TVOL stores rank-4 (C, D, H, W) volumes, got shape {arr.shape}")
    payload = np.ascontiguousarray(arr, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(HEADER.pack(MAGIC, VERSION, *arr.shape))
        fh.write(payload.tobytes())


def load_volume(path):
    """Read a TVOL file into a float32 array of shape (C, D, H, W)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < HEADER.size:
        raise VolumeFormatError(f"{path}: truncated header ({len(raw)} bytes)")
    magic, version, *shape = HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise VolumeFormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise VolumeFormatError(f"{path}: unsupported TVOL version {version}")
    if any(n > _MAX_EXTENT for n in shape):
        raise VolumeFormatError(f"{path}: extent overflow {shape}")
    expected = 4 * int(np.prod(shape, dtype=np.int64))
    body = raw[HEADER.size:]
    if len(body) != expected:
        raise VolumeFormatError(f"{path}: payload is {len(body)} bytes, expected {expected}")
    return np.frombuffer(body, dtype="<f4").reshape(shape).astype(np.float32)


def import_raw(path, shape, dtype="<f4", order="C"):
    """Convert a headerless raw dump (e.g. exported from a medical format) to an array."""
    arr = np.fromfile(path, dtype=dtype)
    if arr.size != int(np.prod(shape)):
        raise VolumeFormatError(f"{path}: {arr.size} values do not fill shape {tuple(shape)}")
    arr = arr.reshape(shape, order=order).astype(np.float32)
    return arr[None] if arr.ndim == 3 else arr
