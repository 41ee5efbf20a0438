"""Synthetic four-modality brain phantoms with nested WT >= TC >= AT tumour labels."""
import hashlib
import os
from dataclasses import dataclass, field

import numpy as np

from .volume import load_volume, save_volume

MODALITIES = ("t1", "t1ce", "t2", "flair")
LABELS = ("wt", "tc", "at")

# rows: modality; columns: brain, WT, TC, AT indicator weights
DEFAULT_CONTRAST = (
    (1.0, -0.3, -0.2, 0.0),
    (1.0, 0.0, -0.3, 1.2),
    (0.8, 0.8, 0.3, 0.0),
    (0.7, 1.0, -0.3, 0.0),
)


@dataclass
class VolumeSample:
    image: np.ndarray  # (4, D, H, W)
    label: np.ndarray  # (3, D, H, W) in {0, 1}
    subject_id: str

    def check_nesting(self):
        wt, tc, at = self.label.astype(bool)
        return bool(np.all(at <= tc) and np.all(tc <= wt))


@dataclass
class PhantomSpec:
    size: int = 32
    subjects: int = 20
    seed: int = 0
    noise: float = 0.1
    tumors: tuple = (1, 3)
    wt_radius: tuple = (0.14, 0.24)
    tc_ratio: tuple = (0.6, 0.75)
    at_ratio: tuple = (0.5, 0.7)
    contrast: tuple = field(default=DEFAULT_CONTRAST)

    def validate(self):
        if self.size < 8 or self.size % 8:
            raise ValueError(f"phantom size must be a positive multiple of 8, got {self.size}")
        if self.subjects < 1:
            raise ValueError("subjects must be >= 1")
        if not (self.tc_ratio[1] < 1.0 and self.at_ratio[1] < 1.0):
            raise ValueError("nested region radius ratios must be < 1")
        if self.tumors[0] < 1 or self.tumors[1] < self.tumors[0]:
            raise ValueError(f"bad tumour count range {self.tumors}")
        if np.shape(self.contrast) != (len(MODALITIES), 4):
            raise ValueError("contrast must be a 4x4 (modality x region) table")


def _grid(n):
    c = (np.arange(n) + 0.5) / n
    return np.meshgrid(c, c, c, indexing="ij")


def _ellipsoid(grid, center, radii):
    z, y, x = grid
    return ((z - center[0]) / radii[0]) ** 2 + ((y - center[1]) / radii[1]) ** 2 + ((x - center[2]) / radii[2]) ** 2 <= 1.0


def make_phantom(spec, index):
    """Build subject ``index``; a pure function of ``(spec, index)``."""
    spec.validate()
    rng = np.random.default_rng([spec.seed, index])
    n = spec.size
    grid = _grid(n)
    b_center = 0.5 + rng.uniform(-0.03, 0.03, 3)
    b_radii = rng.uniform(0.38, 0.46, 3)
    brain = _ellipsoid(grid, b_center, b_radii)

    wt = np.zeros((n, n, n), bool)
    tc = np.zeros_like(wt)
    at = np.zeros_like(wt)
    for _ in range(rng.integers(spec.tumors[0], spec.tumors[1] + 1)):
        r = rng.uniform(*spec.wt_radius)
        shape = rng.uniform(0.85, 1.15, 3)
        r_tc = r * rng.uniform(*spec.tc_ratio)
        r_at = r_tc * rng.uniform(*spec.at_ratio)
        for _attempt in range(64):
            center = b_center + rng.uniform(-1, 1, 3) * b_radii * 0.6
            region = _ellipsoid(grid, center, r * shape)
            if np.all(region <= brain):
                break
            r *= 0.95
            r_tc *= 0.95
            r_at *= 0.95
        else:
            continue
        wt |= region
        tc |= _ellipsoid(grid, center, r_tc * shape)
        at |= _ellipsoid(grid, center, r_at * shape)
    # rasterized inner ellipsoids nest by construction; enforce against rounding anyway
    tc &= wt
    at &= tc

    z, y, x = grid
    phase = rng.uniform(0, 2 * np.pi, 3)
    bias_field = 1.0 + 0.1 * np.sin(2 * np.pi * z + phase[0]) * np.cos(2 * np.pi * y + phase[1]) \
        * np.sin(np.pi * x + phase[2])
    regions = np.stack([brain * bias_field, wt, tc, at]).astype(np.float64)
    contrast = np.asarray(spec.contrast, dtype=np.float64)
    image = np.einsum("mr,rzyx->mzyx", contrast, regions)
    image += spec.noise * rng.standard_normal(image.shape)
    image *= brain
    label = np.stack([wt, tc, at]).astype(np.float32)
    return VolumeSample(image.astype(np.float32), label, f"subject_{index:03d}")


def generate_phantoms(spec, out_dir):
    """Write ``spec.subjects`` phantoms as ``<out>/<subject_id>/{image,label}.tvol``.

    Returns a manifest dict with subject ids, total bytes and a content hash.
    """
    spec.validate()
    os.makedirs(out_dir, exist_ok=True)
    digest = hashlib.sha256()
    total = 0
    ids = []
    for i in range(spec.subjects):
        s = make_phantom(spec, i)
        sub = os.path.join(out_dir, s.subject_id)
        os.makedirs(sub, exist_ok=True)
        for name, arr in (("image", s.image), ("label", s.label)):
            path = os.path.join(sub, f"{name}.tvol")
            save_volume(arr, path)
            with open(path, "rb") as fh:
                blob = fh.read()
            digest.update(blob)
            total += len(blob)
        ids.append(s.subject_id)
    return {"subjects": len(ids), "ids": ids, "bytes": total, "sha256": digest.hexdigest()}


def zscore(image):
    """Per-modality zero-mean unit-variance over nonzero voxels; zeros stay zero."""
    out = image.astype(np.float32, copy=True)
    for m in range(out.shape[0]):
        mask = out[m] != 0
        if mask.sum() < 2:
            continue
        v = out[m][mask]
        out[m][mask] = (v - v.mean()) / max(float(v.std()), 1e-8)
    return out


def load_subject(subject_dir, normalize=True):
    image = load_volume(os.path.join(subject_dir, "image.tvol"))
    label_path = os.path.join(subject_dir, "label.tvol")
    label = load_volume(label_path) if os.path.exists(label_path) else None
    if normalize:
        image = zscore(image)
    return VolumeSample(image, label, os.path.basename(os.path.normpath(subject_dir)))


def load_dataset(root, normalize=True):
    """Load every ``<root>/<subject_id>/`` holding an ``image.tvol``, sorted by id."""
    if not os.path.isdir(root):
        raise FileNotFoundError(f"data directory {root!r} does not exist")
    subs = sorted(d for d in os.listdir(root) if os.path.isfile(os.path.join(root, d, "image.tvol")))
    return [load_subject(os.path.join(root, d), normalize) for d in subs]
