"""Central finite-difference verification of tape gradients."""
from dataclasses import dataclass, field

import numpy as np

from .tensor import no_grad


@dataclass
class GradCheckReport:
    max_rel_error: float
    tol: float
    checked: int
    per_input: list = field(default_factory=list)

    @property
    def passed(self):
        return bool(self.max_rel_error <= self.tol)


ROUNDING_ULPS = 10


def finite_diff_check(f, inputs, h=1e-4, tol=1e-4, max_coords=None, seed=0, floor=1e-6):
    """Compare tape gradients of scalar ``f()`` against central differences.

    ``inputs`` are the leaf tensors (64-bit, ``requires_grad``) that ``f`` closes
    over. The error for each input is
    ``max|num - tape| / max(|num|_inf, |tape|_inf, floor)``, which stays
    meaningful when individual entries are near zero; ``floor`` keeps inputs whose
    true gradient vanishes (e.g. a bias feeding a normalization) from turning
    finite-difference noise into a huge ratio. The floor is raised to
    ``noise / tol`` where ``noise = ROUNDING_ULPS * |f| * eps / h`` is the rounding
    level of a central difference (each evaluation of a deep network carries a
    few ulps of accumulated error), so a large loss value does not make
    structurally zero gradients look wrong. With ``max_coords`` set, that many coordinates per input
    are sampled.

    ``h`` may be a sequence of step sizes; each input then reports its smallest
    error over the steps. Large steps straddle activation kinks on whole
    networks and small steps drown in rounding noise, while a wrong backward
    rule disagrees at every step.
    """
    if not isinstance(inputs, (list, tuple)):
        inputs = [inputs]
    steps = tuple(np.atleast_1d(h).astype(float))
    for t in inputs:
        if t.dtype != np.float64:
            raise ValueError("finite_diff_check requires 64-bit inputs")
        t.requires_grad = True
        t.zero_grad()
    loss = f()
    f0 = abs(loss.item())
    loss.backward()
    rng = np.random.default_rng(seed)
    errors, checked = [], 0
    for t in inputs:
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad.copy()
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            idx = rng.choice(flat.size, size=max_coords, replace=False)
        ana = analytic.reshape(-1)[idx]
        best = np.inf
        for step in steps:
            numeric = np.empty(idx.size)
            with no_grad():
                for j, i in enumerate(idx):
                    old = flat[i]
                    flat[i] = old + step
                    fp = f().item()
                    flat[i] = old - step
                    fm = f().item()
                    flat[i] = old
                    numeric[j] = (fp - fm) / (2 * step)
            noise = ROUNDING_ULPS * f0 * np.finfo(np.float64).eps / step
            scale = max(np.abs(numeric).max(initial=0.0), np.abs(ana).max(initial=0.0), floor, noise / tol)
            best = min(best, float(np.abs(numeric - ana).max(initial=0.0) / scale))
        errors.append(best)
        checked += idx.size
        t.zero_grad()
    return GradCheckReport(max(errors, default=0.0), tol, checked, errors)
