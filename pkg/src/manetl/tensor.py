"""Dense tensors with reverse-mode differentiation.

A :class:`Tensor` wraps a numpy array. Operations on tensors that require
gradients record a node (operation name, parent tensors and a closure over the
intermediates saved by the forward pass). :meth:`Tensor.backward` walks the
recorded graph in reverse topological order and *accumulates* gradients into
``.grad`` of every tensor that requires them.
"""

import contextlib
import threading

import numpy as np

from .exceptions import DimensionError, ManetlError, NumericalError

DEFAULT_DTYPE = np.float32

_state = threading.local()


def _flag(name, default):
    return getattr(_state, name, default)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    prev = _flag("grad_enabled", True)
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


def is_grad_enabled():
    return _flag("grad_enabled", True)


@contextlib.contextmanager
def detect_anomaly():
    """Raise :class:`NumericalError` as soon as any op produces NaN or Inf."""
    prev = _flag("anomaly", False)
    _state.anomaly = True
    try:
        yield
    finally:
        _state.anomaly = prev


@contextlib.contextmanager
def inject_fault(op_name, factor=1.1):
    """Scale the backward rule of ``op_name`` by ``factor``.

    Test-only hook used to prove that the gradient checker notices a broken
    backward rule.
    """
    faults = dict(_flag("faults", {}))
    faults[op_name] = factor
    prev = _flag("faults", {})
    _state.faults = faults
    try:
        yield
    finally:
        _state.faults = prev


class Tensor:
    """N-dimensional array with an optional gradient slot."""

    __array_priority__ = 1000

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and arr.dtype.kind != "f":
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self._op = None

    # -- introspection -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def op(self):
        return self._op

    @property
    def parents(self):
        return self._parents

    @property
    def is_leaf(self):
        return self._backward is None

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __len__(self):
        return len(self.data)

    def __repr__(self):
        extra = f", op={self._op}" if self._op else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{extra})"

    # -- arithmetic ----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, -as_tensor(other, self.dtype))

    def __rsub__(self, other):
        return add(as_tensor(other, self.dtype), -self)

    def __neg__(self):
        return mul(self, -1.0)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def sum(self):
        return total(self)

    def mean(self):
        return mul(total(self), 1.0 / self.data.size)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def flatten(self):
        return reshape(self, (self.shape[0], -1))

    # -- differentiation -----------------------------------------------
    def backward(self, grad=None):
        """Accumulate d(self)/d(t) into ``t.grad`` for every reachable ``t``."""
        if grad is None:
            if self.data.size != 1:
                raise ManetlError(
                    f"backward() needs a scalar loss, got shape {self.shape}"
                )
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=self.dtype).reshape(self.shape)

        order = topological_order(self)
        grads = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


class Parameter(Tensor):
    """A leaf tensor that always requires gradients."""

    def __init__(self, data, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)

    def __repr__(self):
        return f"Parameter(shape={self.shape}, dtype={self.dtype})"


def as_tensor(value, dtype=None):
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype or DEFAULT_DTYPE))


def topological_order(root):
    """Return the graph feeding ``root`` in dependency order (inputs first).

    Iterative DFS; raises if a cycle is found, which would mean a corrupted graph.
    """
    order = []
    done = set()
    active = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        key = id(node)
        if expanded:
            active.discard(key)
            if key not in done:
                done.add(key)
                order.append(node)
            continue
        if key in done:
            continue
        if key in active:
            raise ManetlError("compute graph contains a cycle")
        active.add(key)
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in done:
                if id(parent) in active:
                    raise ManetlError("compute graph contains a cycle")
                stack.append((parent, False))
    return order


def make_result(data, parents, backward, op):
    """Wrap an op output and, when needed, record it in the graph.

    ``backward`` maps the output gradient to a tuple with one entry per parent
    (``None`` for parents that receive no gradient).
    """
    if _flag("anomaly", False) and not np.all(np.isfinite(data)):
        raise NumericalError(f"non-finite values produced by '{op}'")
    out = Tensor(data, dtype=data.dtype)
    out._op = op
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        factor = _flag("faults", {}).get(op)
        if factor is not None:
            inner = backward

            def backward(g, _inner=inner, _f=factor):
                return tuple(None if r is None else r * _f for r in _inner(g))

        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == tuple(shape):
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def add(a, b):
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)
    out = a.data + b.data

    def backward(g):
        return unbroadcast(g, a.shape), unbroadcast(g, b.shape)

    return make_result(out, (a, b), backward, "add")


def mul(a, b):
    a = as_tensor(a)
    if not isinstance(b, Tensor):
        scalar = b

        def backward_scalar(g):
            return (g * scalar,)

        return make_result(a.data * scalar, (a,), backward_scalar, "mul")

    out = a.data * b.data

    def backward(g):
        return unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)

    return make_result(out, (a, b), backward, "mul")


def total(a):
    def backward(g):
        return (np.broadcast_to(g, a.shape).copy(),)

    return make_result(np.asarray(a.data.sum(), dtype=a.dtype), (a,), backward, "sum")


def reshape(a, shape):
    original = a.shape
    out = a.data.reshape(shape)

    def backward(g):
        return (g.reshape(original),)

    return make_result(out, (a,), backward, "reshape")


def check_finite(t, what="tensor"):
    if not np.all(np.isfinite(t.data)):
        raise NumericalError(f"{what} contains non-finite values")


def ensure_shape(t, ndim, name):
    if t.ndim != ndim:
        raise DimensionError(f"{name}: expected a {ndim}-d tensor, got shape {t.shape}")
