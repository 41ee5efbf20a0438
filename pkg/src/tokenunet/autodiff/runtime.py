"""Process-wide runtime state: default precision, debug checks, FLOP and byte counters."""
import contextlib
import weakref
from collections import defaultdict

import numpy as np

_DTYPES = {"f32": np.float32, "f64": np.float64}


class _Settings:
    dtype = np.float32
    debug = False


settings = _Settings()


def set_precision(name):
    """Select the default floating type for new tensors ("f32" or "f64")."""
    try:
        settings.dtype = _DTYPES[name]
    except KeyError:
        raise ValueError(f"unknown precision {name!r}; expected one of {sorted(_DTYPES)}") from None


def get_precision():
    return "f64" if settings.dtype == np.float64 else "f32"


@contextlib.contextmanager
def precision(name):
    old = get_precision()
    set_precision(name)
    try:
        yield
    finally:
        set_precision(old)


def set_debug(flag):
    """When enabled, every op checks its output for NaN/Inf."""
    settings.debug = bool(flag)


class FlopCounter:
    """Analytic FLOP accounting keyed by the innermost active section name."""

    def __init__(self):
        self.sections = defaultdict(int)
        self.events = defaultdict(int)
        self._stack = ["other"]

    def add(self, n):
        self.sections[self._stack[-1]] += int(n)

    def event(self, name, n):
        """Count a non-FLOP quantity, e.g. attention score entries."""
        self.events[name] += int(n)

    @contextlib.contextmanager
    def section(self, name):
        self._stack.append(name)
        try:
            yield
        finally:
            self._stack.pop()

    @property
    def total(self):
        return sum(self.sections.values())

    def reset(self):
        self.sections.clear()
        self.events.clear()


flops = FlopCounter()


class MemoryCounter:
    """Byte counter for live tensor buffers; ``peak`` is the high-water mark."""

    def __init__(self):
        self.current = 0
        self.peak = 0

    def track(self, obj, nbytes):
        self.current += nbytes
        if self.current > self.peak:
            self.peak = self.current
        weakref.finalize(obj, self._release, nbytes)

    def _release(self, nbytes):
        self.current -= nbytes

    def reset_peak(self):
        self.peak = self.current


memory = MemoryCounter()
