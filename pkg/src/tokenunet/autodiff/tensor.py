"""Dense tensor with a define-by-run tape for reverse-mode differentiation."""
import contextlib
import itertools

import numpy as np

from .runtime import flops, memory, settings


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


class TapeError(RuntimeError):
    """Raised on misuse of the gradient tape (non-scalar loss, stale graph)."""


_ids = itertools.count(1)


class _Record:
    __slots__ = ("inputs", "out_id", "backward")

    def __init__(self, inputs, out_id, backward):
        self.inputs = inputs
        self.out_id = out_id
        self.backward = backward


class Tape:
    """Ordered list of recorded operations.

    Records are appended as ops execute, so list order is a topological order.
    ``backward`` consumes the tape and bumps ``generation``; tensors produced in
    an older generation can no longer be differentiated.
    """

    def __init__(self):
        self.records = []
        self.generation = 0
        self.enabled = True
        self._outputs = set()

    def record(self, inputs, out, backward):
        self.records.append(_Record(inputs, out.node_id, backward))
        self._outputs.add(out.node_id)

    def reset(self):
        self.records = []
        self._outputs = set()
        self.generation += 1

    def backward(self, loss, grad=None):
        if loss.data.size != 1:
            raise TapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
        if loss._generation != self.generation or loss.node_id not in self._outputs:
            raise TapeError("loss is not on the active tape (already backpropagated or reset)")
        seed = np.ones_like(loss.data) if grad is None else np.asarray(grad, dtype=loss.dtype)
        grads = {loss.node_id: seed}
        for rec in reversed(self.records):
            g = grads.pop(rec.out_id, None)
            if g is None:
                continue
            for inp, gi in zip(rec.inputs, rec.backward(g)):
                if gi is None or not inp.requires_grad:
                    continue
                if inp._leaf:
                    inp.grad = gi.astype(inp.dtype, copy=True) if inp.grad is None else inp.grad + gi
                elif inp.node_id in grads:
                    grads[inp.node_id] = grads[inp.node_id] + gi
                else:
                    grads[inp.node_id] = gi
        self.reset()


tape = Tape()


@contextlib.contextmanager
def no_grad():
    old = tape.enabled
    tape.enabled = False
    try:
        yield
    finally:
        tape.enabled = old


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


class Tensor:
    """Row-major real array that participates in the gradient tape.

    Leaves created by the user carry ``requires_grad``; results of ops are
    interior nodes whose gradients are only materialized on leaves.
    """

    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, dtype=None, _leaf=True):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype != settings.dtype:
            arr = arr.astype(settings.dtype, copy=False)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.node_id = next(_ids)
        self._leaf = _leaf
        self._generation = tape.generation
        memory.track(self, arr.nbytes)

    # ---- construction of interior nodes -------------------------------------------------

    @staticmethod
    def _make(data, inputs, backward, n_flops=0):
        if settings.debug and not np.all(np.isfinite(data)):
            raise FloatingPointError("non-finite values produced by forward op")
        if n_flops:
            flops.add(n_flops)
        needs = tape.enabled and any(t.requires_grad for t in inputs)
        out = Tensor(data, requires_grad=needs, dtype=data.dtype, _leaf=False)
        if needs:
            tape.record(inputs, out, backward)
        return out

    # ---- introspection -------------------------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def detach(self):
        return Tensor(self.data, dtype=self.dtype)

    def zero_grad(self):
        self.grad = None

    def backward(self, grad=None):
        tape.backward(self, grad)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self):
        return self.shape[0]

    # ---- elementwise arithmetic -------------------------------------------------------------

    def __add__(self, other):
        other = as_tensor(other)
        a, b = self, other

        def backward(g):
            return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

        out = a.data + b.data
        return Tensor._make(out, (a, b), backward, out.size)

    __radd__ = __add__

    def __sub__(self, other):
        other = as_tensor(other)
        a, b = self, other

        def backward(g):
            return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

        out = a.data - b.data
        return Tensor._make(out, (a, b), backward, out.size)

    def __rsub__(self, other):
        return as_tensor(other) - self

    def __mul__(self, other):
        other = as_tensor(other)
        a, b = self, other

        def backward(g):
            return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

        out = a.data * b.data
        return Tensor._make(out, (a, b), backward, out.size)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_tensor(other)
        a, b = self, other

        def backward(g):
            return (_unbroadcast(g / b.data, a.shape),
                    _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

        out = a.data / b.data
        return Tensor._make(out, (a, b), backward, out.size)

    def __rtruediv__(self, other):
        return as_tensor(other) / self

    def __neg__(self):
        return Tensor._make(-self.data, (self,), lambda g: (-g,), self.size)

    def __pow__(self, p):
        if isinstance(p, Tensor):
            raise TypeError("only scalar exponents are supported")
        x = self

        def backward(g):
            return (g * p * x.data ** (p - 1),)

        return Tensor._make(x.data ** p, (x,), backward, x.size)

    def exp(self):
        out = np.exp(self.data)
        return Tensor._make(out, (self,), lambda g: (g * out,), self.size)

    def log(self):
        x = self
        return Tensor._make(np.log(x.data), (x,), lambda g: (g / x.data,), x.size)

    # ---- reductions and layout ---------------------------------------------------------------

    def sum(self, axis=None, keepdims=False):
        shape = self.shape

        def backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        out = np.asarray(self.data.sum(axis=axis, keepdims=keepdims))
        return Tensor._make(out, (self,), backward, self.size)

    def mean(self, axis=None, keepdims=False):
        n = self.size if axis is None else int(np.prod([self.shape[a] for a in np.atleast_1d(axis)]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        src = self.shape
        return Tensor._make(self.data.reshape(shape), (self,), lambda g: (g.reshape(src),))

    def transpose(self, *axes):
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        elif len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        inv = tuple(np.argsort(axes))
        return Tensor._make(self.data.transpose(axes), (self,), lambda g: (g.transpose(inv),))

    @property
    def T(self):
        return self.transpose()

    def __getitem__(self, idx):
        shape, dtype = self.shape, self.dtype

        def backward(g):
            full = np.zeros(shape, dtype=dtype)
            np.add.at(full, idx, g)
            return (full,)

        return Tensor._make(np.array(self.data[idx]), (self,), backward)

    # ---- linear algebra -------------------------------------------------------------------

    def __matmul__(self, other):
        return matmul(self, as_tensor(other))

    def __rmatmul__(self, other):
        return matmul(as_tensor(other), self)


def matmul(a, b):
    """Batched matrix product over the last two axes, with broadcasting batch dims."""
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    try:
        batch = np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise DimensionError(f"matmul batch extents not broadcastable: {a.shape} @ {b.shape}") from None
    m, k, n = a.shape[-2], a.shape[-1], b.shape[-1]

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    out = a.data @ b.data
    return Tensor._make(out, (a, b), backward, 2 * m * k * n * int(np.prod(batch, dtype=np.int64)))


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor._make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward)
