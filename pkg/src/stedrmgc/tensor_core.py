"""Dense float64 tensors with a small reverse-mode autodiff tape.

Only the operations the forecasting networks need are provided. Every op
returns a new :class:`Tensor`; inputs are never mutated. Gradients are
accumulated into ``Tensor.grad`` by :meth:`Tensor.backward` and must be
cleared explicitly with :func:`zero_grad` between steps.
"""
from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ConfigError, ContractError, DimensionError

__all__ = [
    "Tensor",
    "tensor",
    "matmul",
    "batch_dot",
    "reshape",
    "transpose",
    "flatten",
    "concat",
    "take",
    "narrow",
    "add",
    "sub",
    "mul",
    "activation",
    "affine",
    "sum_all",
    "sum_squares",
    "zero_grad",
    "gradient_check",
    "ACTIVATIONS",
]


class Tensor:
    """A value on the tape.

    ``data`` is always a C-contiguous float64 ndarray. ``grad`` is ``None``
    until a backward pass reaches this node.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.ascontiguousarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __mul__(self, other):
        return mul(self, _lift(other))

    def __rmul__(self, other):
        return mul(_lift(other), self)

    def __matmul__(self, other):
        return matmul(self, other)

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def backward(self) -> None:
        """Accumulate d(self)/d(node) into every ``requires_grad`` ancestor."""
        if self.data.size != 1:
            raise ContractError(f"backward() needs a scalar loss, got shape {self.shape}")
        order = _topological_order(self)
        # local buffers so intermediate nodes do not keep grads between calls
        upstream: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = upstream.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad and not node._parents:
                node._accumulate(g)
            if node._backward is not None:
                for parent, pg in zip(node._parents, node._backward(g)):
                    if pg is None or not parent.requires_grad:
                        continue
                    key = id(parent)
                    if key in upstream:
                        upstream[key] = upstream[key] + pg
                    else:
                        upstream[key] = pg


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# ---------------------------------------------------------------- products


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Plain 2-D matrix product."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    A, B = a.data, b.data

    def backward(g):
        return g @ B.T, A.T @ g

    return _result(A @ B, (a, b), backward)


def batch_dot(a: Tensor, b: Tensor) -> Tensor:
    """Per-batch matrix product.

    Accepted layouts: ``[B,p,q] x [B,q,r]``, ``[B,p,q] x [q,r]`` (right side
    shared across the batch) and ``[p,q] x [B,q,r]`` (left side shared, used
    for the stacked adjacency so it is never copied B times).
    """
    A, Bm = a.data, b.data
    if A.ndim == 3 and Bm.ndim == 3:
        if A.shape[0] != Bm.shape[0]:
            raise DimensionError(f"batch_dot: batch sizes differ, {a.shape} vs {b.shape}")
        if A.shape[2] != Bm.shape[1]:
            raise DimensionError(f"batch_dot: inner dims differ, {a.shape} vs {b.shape}")
        out = np.matmul(A, Bm)

        def backward(g):
            return np.matmul(g, Bm.transpose(0, 2, 1)), np.matmul(A.transpose(0, 2, 1), g)

    elif A.ndim == 3 and Bm.ndim == 2:
        if A.shape[2] != Bm.shape[0]:
            raise DimensionError(f"batch_dot: inner dims differ, {a.shape} vs {b.shape}")
        bsz, p, q = A.shape
        out = (A.reshape(bsz * p, q) @ Bm).reshape(bsz, p, Bm.shape[1])

        def backward(g):
            g2 = g.reshape(bsz * p, -1)
            return (g2 @ Bm.T).reshape(A.shape), A.reshape(bsz * p, q).T @ g2

    elif A.ndim == 2 and Bm.ndim == 3:
        if A.shape[1] != Bm.shape[1]:
            raise DimensionError(f"batch_dot: inner dims differ, {a.shape} vs {b.shape}")
        bsz, q, r = Bm.shape
        p = A.shape[0]
        # fold the batch into columns: one GEMM instead of B small ones
        B2 = Bm.transpose(1, 0, 2).reshape(q, bsz * r)
        out = np.ascontiguousarray((A @ B2).reshape(p, bsz, r).transpose(1, 0, 2))

        def backward(g):
            g2 = g.transpose(1, 0, 2).reshape(p, bsz * r)
            gb = (A.T @ g2).reshape(q, bsz, r).transpose(1, 0, 2)
            return g2 @ B2.T, np.ascontiguousarray(gb)

    else:
        raise DimensionError(f"batch_dot: unsupported ranks {a.shape} and {b.shape}")
    return _result(out, (a, b), backward)


def affine(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` over the trailing axis of ``x``."""
    if w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise DimensionError(f"affine: input {x.shape} does not fit weight {w.shape}")
    if b is not None and b.shape != (w.shape[1],):
        raise DimensionError(f"affine: bias {b.shape} does not fit weight {w.shape}")
    lead = x.shape[:-1]
    X2 = x.data.reshape(-1, w.shape[0])
    W = w.data
    out = X2 @ W
    if b is not None:
        out = out + b.data
    out = out.reshape(*lead, W.shape[1])

    def backward(g):
        g2 = g.reshape(-1, W.shape[1])
        gx = (g2 @ W.T).reshape(x.shape)
        gw = X2.T @ g2
        gb = g2.sum(axis=0) if b is not None else None
        return gx, gw, gb

    parents = (x, w, b) if b is not None else (x, w)
    if b is None:
        return _result(out, parents, lambda g: backward(g)[:2])
    return _result(out, parents, backward)


# ---------------------------------------------------------------- layout


def reshape(t: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != t.data.size:
        raise DimensionError(f"reshape: cannot map {t.shape} onto {shape}")
    src = t.shape
    return _result(t.data.reshape(shape), (t,), lambda g: (g.reshape(src),))


def transpose(t: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(int(a) for a in axes)
    if sorted(axes) != list(range(t.ndim)):
        raise DimensionError(f"transpose: {axes} is not a permutation of {t.ndim} axes")
    inverse = tuple(np.argsort(axes))
    out = np.ascontiguousarray(t.data.transpose(axes))
    return _result(out, (t,), lambda g: (g.transpose(inverse),))


def flatten(t: Tensor) -> Tensor:
    """Collapse everything but the leading (batch) axis."""
    return reshape(t, (t.shape[0], int(np.prod(t.shape[1:]))))


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    if not parts:
        raise DimensionError("concat: nothing to join")
    datas = [p.data for p in parts]
    try:
        out = np.concatenate(datas, axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat: {[p.shape for p in parts]} along axis {axis}") from exc
    ax = axis % out.ndim
    bounds = np.cumsum([d.shape[ax] for d in datas])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _result(out, tuple(parts), backward)


def take(t: Tensor, index: int, axis: int) -> Tensor:
    """Select one slice along ``axis`` (the axis is dropped)."""
    ax = axis % t.ndim
    out = np.ascontiguousarray(np.take(t.data, index, axis=ax))
    src = t.shape

    def backward(g):
        full = np.zeros(src)
        sl = [slice(None)] * len(src)
        sl[ax] = index
        full[tuple(sl)] = g
        return (full,)

    return _result(out, (t,), backward)


def narrow(t: Tensor, start: int, stop: int, axis: int = -1) -> Tensor:
    """Contiguous slice ``[start:stop]`` along ``axis`` (axis kept)."""
    ax = axis % t.ndim
    sl = [slice(None)] * t.ndim
    sl[ax] = slice(start, stop)
    sl = tuple(sl)
    src = t.shape

    def backward(g):
        full = np.zeros(src)
        full[sl] = g
        return (full,)

    return _result(np.ascontiguousarray(t.data[sl]), (t,), backward)


# ---------------------------------------------------------------- elementwise


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def add(a: Tensor, b: Tensor) -> Tensor:
    sa, sb = a.shape, b.shape
    try:
        out = a.data + b.data
    except ValueError as exc:
        raise DimensionError(f"add: shapes {sa} and {sb} do not broadcast") from exc
    return _result(out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    sa, sb = a.shape, b.shape
    try:
        out = a.data - b.data
    except ValueError as exc:
        raise DimensionError(f"sub: shapes {sa} and {sb} do not broadcast") from exc
    return _result(out, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    A, B = a.data, b.data
    try:
        out = A * B
    except ValueError as exc:
        raise DimensionError(f"mul: shapes {a.shape} and {b.shape} do not broadcast") from exc
    return _result(
        out, (a, b), lambda g: (_unbroadcast(g * B, A.shape), _unbroadcast(g * A, B.shape))
    )


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


ACTIVATIONS = ("relu", "tanh", "sigmoid", "linear")


def activation(kind: str, t: Tensor) -> Tensor:
    """Elementwise nonlinearity. ``relu'(0)`` is taken as 0."""
    x = t.data
    if kind == "relu":
        mask = x > 0
        return _result(x * mask, (t,), lambda g: (g * mask,))
    if kind == "tanh":
        y = np.tanh(x)
        return _result(y, (t,), lambda g: (g * (1.0 - y * y),))
    if kind == "sigmoid":
        y = _sigmoid(x)
        return _result(y, (t,), lambda g: (g * y * (1.0 - y),))
    if kind == "linear":
        return _result(x.copy(), (t,), lambda g: (g,))
    raise ConfigError(f"unknown activation {kind!r}; expected one of {ACTIVATIONS}")


# ---------------------------------------------------------------- reductions


def sum_all(t: Tensor) -> Tensor:
    src = t.shape
    return _result(np.asarray(t.data.sum()), (t,), lambda g: (np.broadcast_to(g, src).copy(),))


def sum_squares(t: Tensor) -> Tensor:
    X = t.data
    return _result(np.asarray(np.sum(X * X)), (t,), lambda g: (2.0 * g * X,))


# ---------------------------------------------------------------- checking


def gradient_check(f: Callable[[Tensor], Tensor], x, h: float = 1e-5) -> float:
    """Largest relative gap between the tape gradient and central differences.

    The relative error per component is
    ``|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)``.
    """
    x0 = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    xt = Tensor(x0.copy(), requires_grad=True)
    f(xt).backward()
    analytic = xt.grad if xt.grad is not None else np.zeros_like(x0)

    numeric = np.zeros_like(x0)
    flat = x0.reshape(-1)
    num_flat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(Tensor(x0)).item()
        flat[i] = orig - h
        fm = f(Tensor(x0)).item()
        flat[i] = orig
        num_flat[i] = (fp - fm) / (2.0 * h)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom)) if x0.size else 0.0
