"""Random patch extraction and sliding-window inference assembly."""
import numpy as np

from ..autodiff import Tensor, no_grad


def sample_patch(sample, size, rng):
    """Crop a cubic ``size`` patch at a uniformly random valid corner.

    Returns ``(image_patch, label_patch, corner)``.
    """
    extents = sample.image.shape[1:]
    if any(size > n for n in extents):
        raise ValueError(f"patch {size} larger than volume {extents}")
    corner = tuple(int(rng.integers(0, n - size + 1)) for n in extents)
    sl = (slice(None),) + tuple(slice(c, c + size) for c in corner)
    label = None if sample.label is None else sample.label[sl]
    return sample.image[sl], label, corner


def window_starts(n, window, stride):
    """Window origins along one axis; the last window is clamped to the edge."""
    if n <= window:
        return [0]
    starts = list(range(0, n - window + 1, stride))
    if starts[-1] != n - window:
        starts.append(n - window)
    return starts


def sliding_window_infer(forward, image, window, overlap=0.5, divisor=1, return_coverage=False):
    """Tile ``image`` (C, D, H, W) with cubic windows and average the per-voxel logits.

    ``forward`` maps a (C, w, w, w) Tensor to logits; a Model works, as does any
    callable returning a Tensor or ``(Tensor, ...)``. Volumes smaller than the
    window are zero-padded and cropped back.
    """
    if window % divisor:
        raise ValueError(f"window {window} is not divisible by the model stride {divisor}")
    if not 0.0 <= overlap < 1.0:
        raise ValueError(f"overlap must be in [0, 1), got {overlap}")
    stride = max(1, int(window * (1.0 - overlap)))
    c, *extents = image.shape
    padded = [max(n, window) for n in extents]
    if padded != extents:
        buf = np.zeros((c, *padded), dtype=image.dtype)
        buf[:, :extents[0], :extents[1], :extents[2]] = image
        image = buf
    acc = None
    count = np.zeros(padded, dtype=np.int32)
    with no_grad():
        for z in window_starts(padded[0], window, stride):
            for y in window_starts(padded[1], window, stride):
                for x in window_starts(padded[2], window, stride):
                    sl = (slice(z, z + window), slice(y, y + window), slice(x, x + window))
                    out = forward(Tensor(image[(slice(None),) + sl]))
                    if isinstance(out, tuple):
                        out = out[0]
                    out = out.data
                    if acc is None:
                        acc = np.zeros((out.shape[0], *padded), dtype=np.float64)
                    acc[(slice(None),) + sl] += out
                    count[sl] += 1
    logits = (acc / count).astype(image.dtype)
    crop = (slice(None),) + tuple(slice(0, n) for n in extents)
    logits = logits[crop]
    if return_coverage:
        return logits, count[crop[1:]]
    return logits
