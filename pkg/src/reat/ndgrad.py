"""Minimal reverse-mode differentiation over float64 numpy arrays.

A :class:`Tensor` remembers the operation that produced it and its operands.
:func:`backward` walks that graph in reverse topological order.  A
:class:`Record` wraps a traced function so that it can be re-evaluated with new
bindings and differentiated with respect to any of its inputs.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Record",
    "NonFiniteError",
    "ShapeError",
    "tensor",
    "constant",
    "backward",
    "grad",
    "finite_diff_check",
    "exp",
    "log",
    "sqrt",
    "relu",
    "tanh",
    "matmul",
    "log_softmax",
    "softmax",
    "logsumexp",
    "take_labels",
    "max_other",
    "conv2d",
    "avg_pool2",
    "concat_rows",
]


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    def __init__(self, op: str, message: str = ""):
        self.op = op
        super().__init__(message or f"non-finite value produced by node '{op}'")


class Tensor:
    """Immutable float64 array that participates in a recorded computation."""

    __slots__ = ("data", "requires_grad", "_parents", "_vjp", "op")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, _parents=(), _vjp=None, op: str = "leaf"):
        arr = np.array(data, dtype=np.float64)
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = requires_grad
        self._parents = _parents
        self._vjp = _vjp
        self.op = op

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def values(self) -> np.ndarray:
        """Flat row-major view of the data."""
        return self.data.reshape(-1)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        grad = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{grad}, op={self.op})"

    # -- arithmetic ----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(other))

    def __rsub__(self, other):
        return add(other, neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return getitem(self, index)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        n = self.size if axis is None else self.shape[axis]
        return tsum(self, axis=axis, keepdims=keepdims) * (1.0 / n)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def tensor(data, requires_grad: bool = True) -> Tensor:
    """Differentiable leaf."""
    return Tensor(data, requires_grad=requires_grad)


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: Sequence[Tensor], vjp, op: str) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(op)
    needs = any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data, op=op)
    return Tensor(data, requires_grad=True, _parents=tuple(parents), _vjp=vjp, op=op)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# -- primitives --------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError as exc:
        raise ShapeError(f"add: cannot broadcast {a.shape} with {b.shape}") from exc
    return _node(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _node(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.data * b.data
    except ValueError as exc:
        raise ShapeError(f"mul: cannot broadcast {a.shape} with {b.shape}") from exc
    return _node(
        out,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        "mul",
    )


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data
    return _node(
        out,
        (a, b),
        lambda g: (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        ),
        "div",
    )


def power(a, exponent: float) -> Tensor:
    a = _as_tensor(a)
    p = float(exponent)
    out = a.data**p
    if p == 0.0:
        return _node(out, (a,), lambda g: (np.zeros_like(a.data),), "pow")
    return _node(out, (a,), lambda g: (g * p * a.data ** (p - 1.0),), "pow")


def exp(a) -> Tensor:
    a = _as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = _as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return _node(out, (a,), lambda g: (g / a.data,), "log")


def sqrt(a) -> Tensor:
    a = _as_tensor(a)
    out = np.sqrt(a.data)
    with np.errstate(divide="ignore"):
        return _node(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    out = np.tanh(a.data)
    return _node(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def relu(a) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0
    return _node(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    return _node(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g), "matmul")


def transpose(a) -> Tensor:
    a = _as_tensor(a)
    return _node(a.data.T, (a,), lambda g: (g.T,), "transpose")


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}") from exc
    return _node(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _node(out, (a,), vjp, "sum")


def getitem(a, index) -> Tensor:
    a = _as_tensor(a)
    out = a.data[index]

    def vjp(g):
        full = np.zeros(a.shape)
        np.add.at(full, index, g)
        return (full,)

    return _node(np.array(out), (a,), vjp, "index")


def take_labels(a, labels) -> Tensor:
    """Pick ``a[i, labels[i]]`` for every row of a 2-d tensor."""
    a = _as_tensor(a)
    labels = np.asarray(labels, dtype=np.int64)
    if a.ndim != 2 or labels.shape != (a.shape[0],):
        raise ShapeError(f"take_labels: rows {a.shape} vs labels {labels.shape}")
    rows = np.arange(a.shape[0])
    out = a.data[rows, labels]

    def vjp(g):
        full = np.zeros(a.shape)
        full[rows, labels] = g
        return (full,)

    return _node(out, (a,), vjp, "take_labels")


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    out = np.concatenate([p.data for p in parts], axis=0)
    bounds = np.cumsum([0] + [p.shape[0] for p in parts])

    def vjp(g):
        return tuple(g[bounds[k] : bounds[k + 1]] for k in range(len(parts)))

    return _node(out, parts, vjp, "concat")


def logsumexp(a, axis: int = -1) -> Tensor:
    """Row-wise log-sum-exp with max subtraction; keeps the reduced axis."""
    a = _as_tensor(a)
    m = a.data.max(axis=axis, keepdims=True)
    e = np.exp(a.data - m)
    s = e.sum(axis=axis, keepdims=True)
    out = m + np.log(s)
    return _node(out, (a,), lambda g: (g * (e / s),), "logsumexp")


def log_softmax(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    m = a.data.max(axis=axis, keepdims=True)
    shifted = a.data - m
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    p = np.exp(out)

    def vjp(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return _node(out, (a,), vjp, "log_softmax")


def softmax(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    m = a.data.max(axis=axis, keepdims=True)
    e = np.exp(a.data - m)
    p = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return _node(p, (a,), vjp, "softmax")


def max_other(a, labels) -> Tensor:
    """Row-wise ``max_{j != labels[i]} a[i, j]``; gradient goes to the argmax."""
    a = _as_tensor(a)
    labels = np.asarray(labels, dtype=np.int64)
    rows = np.arange(a.shape[0])
    masked = a.data.copy()
    masked[rows, labels] = -np.inf
    idx = masked.argmax(axis=1)
    out = masked[rows, idx]

    def vjp(g):
        full = np.zeros(a.shape)
        full[rows, idx] = g
        return (full,)

    return _node(out, (a,), vjp, "max_other")


def conv2d(x, w, b=None, padding: int = 0) -> Tensor:
    """Stride-1 convolution.  ``x``: (B, Cin, H, W), ``w``: (Cout, Cin, k, k)."""
    x, w = _as_tensor(x), _as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: input {x.shape} vs kernel {w.shape}")
    k = w.shape[2]
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    hout = xp.shape[2] - k + 1
    wout = xp.shape[3] - k + 1
    if hout < 1 or wout < 1:
        raise ShapeError(f"conv2d: kernel {k} larger than padded input {xp.shape[2:]}")
    out = np.zeros((x.shape[0], w.shape[0], hout, wout))
    for di in range(k):
        for dj in range(k):
            patch = xp[:, :, di : di + hout, dj : dj + wout]
            out += np.einsum("bchw,oc->bohw", patch, w.data[:, :, di, dj])
    parents: tuple = (x, w)
    if b is not None:
        b = _as_tensor(b)
        out = out + b.data[None, :, None, None]
        parents = (x, w, b)

    def vjp(g):
        gx = np.zeros_like(xp)
        gw = np.zeros(w.shape)
        for di in range(k):
            for dj in range(k):
                patch = xp[:, :, di : di + hout, dj : dj + wout]
                gw[:, :, di, dj] = np.einsum("bohw,bchw->oc", g, patch)
                gx[:, :, di : di + hout, dj : dj + wout] += np.einsum("bohw,oc->bchw", g, w.data[:, :, di, dj])
        if padding:
            gx = gx[:, :, padding:-padding, padding:-padding]
        grads = (gx, gw)
        if b is not None:
            grads += (g.sum(axis=(0, 2, 3)),)
        return grads

    return _node(out, parents, vjp, "conv2d")


def avg_pool2(x) -> Tensor:
    """2x2 average pooling, stride 2 (trailing odd row/column dropped)."""
    x = _as_tensor(x)
    bsz, ch, h, w = x.shape
    h2, w2 = h // 2, w // 2
    view = x.data[:, :, : 2 * h2, : 2 * w2].reshape(bsz, ch, h2, 2, w2, 2)
    out = view.mean(axis=(3, 5))

    def vjp(g):
        full = np.zeros(x.shape)
        up = np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * 0.25
        full[:, :, : 2 * h2, : 2 * w2] = up
        return (full,)

    return _node(out, (x,), vjp, "avg_pool2")


# -- differentiation -----------------------------------------------------------


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(output: Tensor, wrt: Iterable[Tensor], seed=None) -> list[np.ndarray]:
    """Gradient of ``sum(seed * output)`` with respect to each tensor in ``wrt``.

    Tensors in ``wrt`` that the output does not depend on get zero gradients.
    """
    wrt = list(wrt)
    if seed is None:
        if output.size != 1:
            raise ShapeError(f"seed required for non-scalar output of shape {output.shape}")
        seed = np.ones(output.shape)
    seed = np.asarray(seed, dtype=np.float64)
    if seed.shape != output.shape:
        raise ShapeError(f"seed shape {seed.shape} does not match output shape {output.shape}")
    grads: dict[int, np.ndarray] = {id(output): seed}
    if output.requires_grad:
        for node in reversed(_topo_order(output)):
            g = grads.get(id(node))
            if g is None or node._vjp is None:
                continue
            for parent, pg in zip(node._parents, node._vjp(g)):
                if not parent.requires_grad:
                    continue
                if not np.all(np.isfinite(pg)):
                    raise NonFiniteError(node.op, f"non-finite gradient through node '{node.op}'")
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else pg
    return [grads.get(id(t), np.zeros(t.shape)) for t in wrt]


def grad(fn: Callable[..., Tensor], argnum: int = 0) -> Callable[..., np.ndarray]:
    """``grad(f)(x, ...)`` returns df/dx for a scalar-valued ``f``."""

    def wrapped(*args):
        args = list(args)
        args[argnum] = tensor(args[argnum])
        out = fn(*args)
        return backward(out, [args[argnum]])[0]

    return wrapped


class Record:
    """A traced function with named inputs.

    ``inputs`` names the differentiable bindings; every other binding passed to
    :meth:`forward` is a constant and receives no gradient.
    """

    def __init__(self, fn: Callable[..., Tensor], inputs: Sequence[str]):
        self.fn = fn
        self.inputs = tuple(inputs)
        self._leaves: dict[str, Tensor] | None = None
        self._output: Tensor | None = None

    def forward(self, **bindings) -> Tensor:
        missing = [name for name in self.inputs if name not in bindings]
        if missing:
            raise KeyError(f"unbound inputs: {missing}")
        leaves = {}
        args = {}
        for name, value in bindings.items():
            if name in self.inputs:
                leaves[name] = tensor(value.data if isinstance(value, Tensor) else value)
                args[name] = leaves[name]
            else:
                args[name] = constant(value.data if isinstance(value, Tensor) else value)
        self._output = _as_tensor(self.fn(**args))
        self._leaves = leaves
        return self._output

    def backward(self, seed=None) -> dict[str, np.ndarray]:
        if self._output is None or self._leaves is None:
            raise RuntimeError("backward called before forward")
        names = list(self._leaves)
        grads = backward(self._output, [self._leaves[n] for n in names], seed)
        self._output = None
        self._leaves = None
        return dict(zip(names, grads))


def finite_diff_check(fn: Callable[[Tensor], Tensor], point, h: float = 1e-5) -> float:
    """Max over coordinates of |analytic - central difference| / max(1, |analytic|)."""
    if h <= 0:
        raise ValueError("h must be positive")
    x0 = np.array(point, dtype=np.float64)
    leaf = tensor(x0)
    out = fn(leaf)
    if out.size != 1:
        raise ShapeError(f"finite_diff_check needs a scalar function, got shape {out.shape}")
    analytic = backward(out, [leaf])[0].reshape(-1)
    flat = x0.reshape(-1)
    numeric = np.empty_like(flat)
    for k in range(flat.size):
        xp = flat.copy()
        xm = flat.copy()
        xp[k] += h
        xm[k] -= h
        fp = fn(constant(xp.reshape(x0.shape))).item()
        fm = fn(constant(xm.reshape(x0.shape))).item()
        numeric[k] = (fp - fm) / (2 * h)
    return float(np.max(np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic)), initial=0.0))

