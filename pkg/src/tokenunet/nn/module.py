"""Minimal parameter container with deterministic, name-keyed initialization."""
import zlib

import numpy as np

from ..autodiff import Tensor
from ..autodiff.runtime import settings


class Module:
    """Holds named parameters and child modules in definition order.

    Parameters are declared with :meth:`param` together with an init rule; the
    actual values are drawn by :func:`init_parameters`, seeded per parameter
    name so that two models sharing a sub-structure get identical weights there.
    """

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_children", {})
        object.__setattr__(self, "_init", {})

    def __setattr__(self, name, value):
        if isinstance(value, Module):
            self._children[name] = value
        elif isinstance(value, Tensor) and name in self._params:
            self._params[name] = value
        object.__setattr__(self, name, value)

    def param(self, name, shape, init="normal", fan_in=None):
        t = Tensor(np.zeros(shape, dtype=settings.dtype), requires_grad=True)
        self._params[name] = t
        self._init[name] = (init, fan_in)
        object.__setattr__(self, name, t)
        return t

    def named_parameters(self, prefix=""):
        for name, t in self._params.items():
            yield prefix + name, t
        for cname, child in self._children.items():
            yield from child.named_parameters(f"{prefix}{cname}.")

    def named_inits(self, prefix=""):
        for name, spec in self._init.items():
            yield prefix + name, self._params[name], spec
        for cname, child in self._children.items():
            yield from child.named_inits(f"{prefix}{cname}.")

    def parameters(self):
        return [t for _, t in self.named_parameters()]

    def zero_grad(self):
        for t in self.parameters():
            t.zero_grad()

    def num_parameters(self):
        return sum(t.size for t in self.parameters())


class ModuleList(Module):
    def __init__(self, modules=()):
        super().__init__()
        self._items = []
        for m in modules:
            self.append(m)

    def append(self, m):
        self._children[str(len(self._items))] = m
        self._items.append(m)

    def __iter__(self):
        return iter(self._items)

    def __len__(self):
        return len(self._items)

    def __getitem__(self, i):
        return self._items[i]


def _name_rng(seed, name):
    return np.random.default_rng([int(seed) & 0xFFFFFFFF, zlib.crc32(name.encode())])


def init_parameters(module, seed):
    """Draw every parameter from its init rule with a (seed, name)-keyed stream."""
    for name, t, (rule, fan_in) in module.named_inits():
        shape = t.shape
        if rule == "normal":
            value = _name_rng(seed, name).standard_normal(shape, dtype=settings.dtype)
            value *= settings.dtype(np.sqrt(2.0 / fan_in))
        elif rule == "zeros":
            value = np.zeros(shape)
        elif rule == "ones":
            value = np.ones(shape)
        elif rule == "identity":
            value = np.eye(shape[0], shape[1])
        else:
            raise ValueError(f"unknown init rule {rule!r} for {name}")
        t.data = value.astype(settings.dtype, copy=False)
