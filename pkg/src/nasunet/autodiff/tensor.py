"""Tensor, graph recording and reverse-mode backward."""
import contextlib
import os

import numpy as np


class NumericError(FloatingPointError):
    """A forward or backward pass produced NaN/Inf."""


class GraphError(RuntimeError):
    """Misuse of the compute graph (non-scalar loss, reuse after backward, cycles)."""


class ShapeError(ValueError):
    """Operand shapes violate an op's contract."""


_DTYPE = np.float64 if os.environ.get("NASUNET_FLOAT64", "0") not in ("", "0") else np.float32
_GRAD_ENABLED = True


def get_default_dtype():
    return _DTYPE


def set_default_dtype(dtype):
    global _DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError("default dtype must be float32 or float64")
    _DTYPE = dtype


@contextlib.contextmanager
def default_dtype(dtype):
    prev = _DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(prev)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording (evaluation passes)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def is_grad_enabled():
    return _GRAD_ENABLED


class Tensor:
    """Dense array that records the ops producing it.

    ``grad`` is ``None`` until a backward pass reaches the tensor; an absent
    grad means zero.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_op", "_freed")

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        self.data = np.asarray(data, dtype=dtype or _DTYPE)
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents = ()
        self._backward = None
        self._op = None
        self._freed = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self):
        return self._backward is None

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self._scalar_error()

    def _scalar_error(self):
        raise GraphError(f"item() needs a single-element tensor, got shape {self.shape}")

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data)

    def backward(self):
        backward(self)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # A handful of operators keep small tests and losses readable.
    def __add__(self, other):
        from . import functional as F

        if isinstance(other, Tensor):
            return F.add(self, other)
        return F.affine(self, 1.0, float(other))

    __radd__ = __add__

    def __mul__(self, other):
        from . import functional as F

        if isinstance(other, Tensor):
            return F.mul(self, other)
        return F.affine(self, float(other), 0.0)

    __rmul__ = __mul__

    def __neg__(self):
        return self * -1.0

    def __sub__(self, other):
        return self + (-other)

    def sum(self):
        from . import functional as F

        return F.sum(self)


class Parameter(Tensor):
    """Trainable leaf tensor."""

    __slots__ = ()

    def __init__(self, data, name=None):
        super().__init__(data, requires_grad=True, name=name)


def check_finite(arr, op):
    if not np.isfinite(arr).all():
        raise NumericError(f"non-finite values produced by {op}")
    return arr


def make_result(data, parents, backward_fn, op):
    """Wrap ``data`` as the output of ``op``; record the node only if needed.

    ``backward_fn(grad)`` returns one gradient (or ``None``) per parent.
    """
    check_finite(data, op)
    out = Tensor(data, dtype=data.dtype)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
        out._op = op
    return out


def _topological_order(root):
    order = []
    state = {}  # id -> 1 visiting, 2 done
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        key = id(node)
        if expanded:
            state[key] = 2
            order.append(node)
            continue
        s = state.get(key)
        if s == 2:
            continue
        if s == 1:
            raise GraphError("cycle detected in compute graph")
        state[key] = 1
        stack.append((node, True))
        for p in node._parents:
            ps = state.get(id(p))
            if ps == 1:
                raise GraphError("cycle detected in compute graph")
            if ps is None and p.requires_grad:
                stack.append((p, False))
    return order


def backward(loss):
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf.

    The graph is released afterwards; calling backward again on the same
    loss raises :class:`GraphError`.
    """
    if loss.data.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._freed:
        raise GraphError("graph already consumed by a previous backward; rebuild it")
    if not loss.requires_grad:
        raise GraphError("loss does not depend on any tensor that requires grad")
    order = _topological_order(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if node._backward is None:
            if g is not None and not node._freed:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        if g is not None:
            pgrads = node._backward(g)
            for p, pg in zip(node._parents, pgrads):
                if pg is None or not p.requires_grad:
                    continue
                check_finite(pg, f"backward of {node._op}")
                k = id(p)
                prev = grads.get(k)
                grads[k] = pg if prev is None else prev + pg
        node._backward = None
        node._parents = ()
        node._freed = True
