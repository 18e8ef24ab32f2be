"""Tape-free reverse-mode differentiation over numpy arrays.

Every differentiable op returns a new :class:`Tensor` that remembers its
parents and a closure mapping the output gradient to parent gradients.
:meth:`Tensor.backward` walks the graph in reverse topological order.
Gradients accumulate on leaves only; interior nodes drop theirs once they
have been propagated, and the graph is released after the pass.
"""
from __future__ import annotations

import contextlib
import threading

import numpy as np
import scipy.sparse as sp

_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (thread-local)."""
    prev = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


@contextlib.contextmanager
def record_branches():
    """Collect the branch taken by every piecewise op (ReLU masks, max argmax).

    Yields a list that fills up during the block; two forward passes took the
    same smooth piece exactly when their lists are equal.
    """
    prev = getattr(_state, "branches", None)
    _state.branches = log = []
    try:
        yield log
    finally:
        _state.branches = prev


def _note_branch(arr: np.ndarray) -> None:
    log = getattr(_state, "branches", None)
    if log is not None:
        log.append(arr.copy())


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad=None) -> None:
        """Populate ``.grad`` on every leaf that requires it.

        Without an explicit ``grad`` the tensor must hold a single value.
        """
        if grad is None:
            if self.data.size != 1:
                raise ValueError(
                    f"backward() needs a scalar loss, got shape {self.shape}"
                )
            grad = np.ones_like(self.data)
        if not self.requires_grad:
            raise RuntimeError("tensor is not part of a differentiable graph")

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        self.grad = np.asarray(grad, dtype=self.dtype).reshape(self.shape)
        for node in reversed(order):
            if node._backward is None:
                continue
            g = node.grad
            if g is not None:
                node._backward(g)
            node.grad = None
            node._backward = None
            node._parents = ()

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a tensor is not supported")
        return mul(self, 1.0 / other)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if g.dtype != t.data.dtype:
        g = g.astype(t.data.dtype)
    if t.grad is None:
        t.grad = np.array(g, copy=True) if g.base is not None or not g.flags.writeable else g
    else:
        t.grad = t.grad + g


def _result(data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor(data)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _coerce(a, b) -> tuple[Tensor, Tensor]:
    if not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    if not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    return a, b


# elementwise arithmetic
def add(a, b) -> Tensor:
    a, b = _coerce(a, b)

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _result(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _coerce(a, b)

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(-g, b.shape))

    return _result(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _coerce(a, b)

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _result(a.data * b.data, (a, b), backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    _note_branch(mask)

    def backward(g):
        _accumulate(x, g * mask)

    return _result(x.data * mask, (x,), backward)


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)

    def backward(g):
        _accumulate(x, g * y)

    return _result(y, (x,), backward)


def log(x: Tensor) -> Tensor:
    def backward(g):
        _accumulate(x, g / x.data)

    return _result(np.log(x.data), (x,), backward)


# reductions and shape manipulation
def sum_(x: Tensor, axis=None, keepdims=False) -> Tensor:
    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(x, np.broadcast_to(g, x.shape))

    return _result(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), backward)


def mean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    scale = 1.0 / n

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(x, np.broadcast_to(g * scale, x.shape))

    out = np.asarray(x.data.mean(axis=axis, keepdims=keepdims), dtype=x.dtype)
    return _result(out, (x,), backward)


def max_(x: Tensor, axis: int) -> Tensor:
    """Maximum along ``axis``; the gradient goes to the first maximal entry."""
    idx = np.expand_dims(np.argmax(x.data, axis=axis), axis)
    _note_branch(idx)
    out = np.take_along_axis(x.data, idx, axis=axis).squeeze(axis)

    def backward(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, idx, np.expand_dims(g, axis), axis=axis)
        _accumulate(x, gx)

    return _result(out, (x,), backward)


def reshape(x: Tensor, shape) -> Tensor:
    def backward(g):
        _accumulate(x, g.reshape(x.shape))

    return _result(x.data.reshape(shape), (x,), backward)


def expand(x: Tensor, shape) -> Tensor:
    """Broadcast ``x`` to ``shape`` (numpy broadcasting rules)."""

    def backward(g):
        _accumulate(x, _unbroadcast(g, x.shape))

    return _result(np.broadcast_to(x.data, shape), (x,), backward)


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ValueError("concat of an empty list")
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(
            t.shape[d] != ref[d] for d in range(len(ref)) if d != ax
        ):
            raise ValueError(
                f"concat shape mismatch: {ref} vs {t.shape} along axis {axis}"
            )
    if len(tensors) == 1:
        return tensors[0]
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def backward(g):
        for t, part in zip(tensors, np.split(g, bounds, axis=ax)):
            _accumulate(t, part)

    return _result(np.concatenate([t.data for t in tensors], axis=ax), tuple(tensors), backward)


def gather(x: Tensor, index: np.ndarray) -> Tensor:
    """Row gather with a leading batch axis.

    ``x`` is (B, N, C) and ``index`` is (B, ...) of ints into N; the result
    has shape index.shape + (C,).
    """
    B, N, C = x.shape
    index = np.asarray(index)
    if index.shape[0] != B:
        raise ValueError(f"index batch {index.shape[0]} != tensor batch {B}")
    flat = (index.reshape(B, -1) + (np.arange(B) * N)[:, None]).ravel()
    out = x.data.reshape(B * N, C)[flat].reshape(index.shape + (C,))

    def backward(g):
        g2 = g.reshape(-1, C)
        scatter = sp.csr_matrix(
            (np.ones(flat.size, dtype=g2.dtype), (flat, np.arange(flat.size))),
            shape=(B * N, flat.size),
        )
        _accumulate(x, np.asarray(scatter @ g2).reshape(B, N, C))

    return _result(out, (x,), backward)


# dense layers
def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight (+ bias)`` over the last axis of ``x``."""
    c_in, c_out = weight.shape
    if x.shape[-1] != c_in:
        raise ValueError(
            f"linear expects {c_in} input channels, got {x.shape[-1]}"
        )
    x2 = x.data.reshape(-1, c_in)
    y = x2 @ weight.data
    if bias is not None:
        y = y + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        g2 = g.reshape(-1, c_out)
        if x.requires_grad:
            _accumulate(x, (g2 @ weight.data.T).reshape(x.shape))
        if weight.requires_grad:
            _accumulate(weight, x2.T @ g2)
        if bias is not None and bias.requires_grad:
            _accumulate(bias, g2.sum(axis=0))

    return _result(y.reshape(x.shape[:-1] + (c_out,)), parents, backward)


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.9,
    eps: float = 1e-5,
) -> Tensor:
    """Channel-wise normalization with statistics over every non-channel axis.

    In training mode the running buffers are updated in place as
    ``r <- momentum * r + (1 - momentum) * batch``.
    """
    C = x.shape[-1]
    x2 = x.data.reshape(-1, C)
    n = x2.shape[0]
    if training:
        mu = x2.mean(axis=0)
        xc = x2 - mu
        var = (xc * xc).mean(axis=0)
        running_mean *= momentum
        running_mean += (1 - momentum) * mu
        unbiased = var * (n / (n - 1)) if n > 1 else var
        running_var *= momentum
        running_var += (1 - momentum) * unbiased
    else:
        xc = x2 - running_mean
        var = running_var
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    y = xhat * gamma.data + beta.data

    def backward(g):
        g2 = g.reshape(-1, C)
        if gamma.requires_grad:
            _accumulate(gamma, (g2 * xhat).sum(axis=0))
        if beta.requires_grad:
            _accumulate(beta, g2.sum(axis=0))
        if x.requires_grad:
            gxhat = g2 * gamma.data
            if training:
                gx = (inv / n) * (
                    n * gxhat - gxhat.sum(axis=0) - xhat * (gxhat * xhat).sum(axis=0)
                )
            else:
                gx = gxhat * inv
            _accumulate(x, gx.reshape(x.shape))

    return _result(y.reshape(x.shape).astype(x.dtype, copy=False), (x, gamma, beta), backward)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        _accumulate(x, y * (g - (g * y).sum(axis=axis, keepdims=True)))

    return _result(y, (x,), backward)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean over points of ``-log softmax(logits)[label]``.

    ``logits`` has classes on the last axis; ``labels`` matches the
    remaining shape.
    """
    labels = np.asarray(labels).astype(np.int64)
    K = logits.shape[-1]
    z = logits.data.reshape(-1, K)
    lab = labels.reshape(-1)
    if lab.shape[0] != z.shape[0]:
        raise ValueError(f"{z.shape[0]} logit rows vs {lab.shape[0]} labels")
    if lab.size and (lab.min() < 0 or lab.max() >= K):
        raise ValueError("labels out of range")
    zmax = z.max(axis=1, keepdims=True)
    shifted = z - zmax
    lse = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(z.shape[0])
    n = z.shape[0]
    loss = np.asarray((lse - shifted[rows, lab]).mean(), dtype=logits.dtype)

    def backward(g):
        p = np.exp(shifted - lse[:, None])
        p[rows, lab] -= 1.0
        _accumulate(logits, (p * (g / n)).reshape(logits.shape))

    return _result(loss, (logits,), backward)
