"""Dense tensors with reverse-mode automatic differentiation.

Only the operations the model needs are provided. Every op records its
parents and a backward closure on the output tensor; each recorded node also
gets a global sequence number, and :meth:`Tensor.backward` replays the
reachable nodes in descending sequence order, i.e. exact reverse recording
order. Gradients are therefore deterministic.

Broadcasting is deliberately absent. Binary ops require identical shapes,
with one exception: a size-1 operand (python float or one-element tensor)
acts as a scalar. Everything else goes through explicit ``expand`` /
``reshape`` calls.
"""

from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Iterable, Sequence

import numpy as np

# Storage dtype for every tensor. Switch to np.float32 here for throughput;
# the gradient tolerances in the test-suite assume float64.
DTYPE = np.float64

_seq = itertools.count()
_grad_enabled = True


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_seq", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._seq = -1
        self.name = name

    # ------------------------------------------------------------------ basics
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{label})"

    def __len__(self):
        return self.shape[0]

    # ---------------------------------------------------------------- backward
    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every leaf.

        Calling twice without zeroing adds the second gradient to the first.
        """
        if self.data.size != 1:
            raise ShapeError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            return

        nodes = []
        seen = set()
        stack = [self]
        while stack:
            t = stack.pop()
            if id(t) in seen:
                continue
            seen.add(id(t))
            if t._parents:
                nodes.append(t)
                stack.extend(t._parents)
        nodes.sort(key=lambda n: n._seq, reverse=True)

        grads = {id(self): np.ones_like(self.data)}
        if not self._parents:
            _accumulate(self, grads.pop(id(self)))
        for node in nodes:
            g = grads.pop(id(node), None)
            if g is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if parent._parents:
                    prev = grads.get(id(parent))
                    grads[id(parent)] = pg if prev is None else prev + pg
                else:
                    _accumulate(parent, pg)

    # -------------------------------------------------------------- operators
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def swapaxes(self, a: int, b: int):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return transpose(self, tuple(axes))

    def expand(self, shape):
        return expand(self, tuple(shape))

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def abs(self):
        return tabs(self)

    def relu(self):
        return relu(self)

    def sigmoid(self):
        return sigmoid(self)

    def silu(self):
        return silu(self)


def _accumulate(leaf: Tensor, g: np.ndarray) -> None:
    if leaf.grad is None:
        leaf.grad = np.array(g, dtype=DTYPE, copy=True)
    else:
        leaf.grad = leaf.grad + g


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.requires_grad = _grad_enabled and any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward
        out._seq = next(_seq)
    else:
        out._parents = ()
        out._backward = None
        out._seq = -1
    return out


def _is_scalar(t: Tensor) -> bool:
    return t.data.size == 1


def _binary_operands(a, b, opname: str):
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape and not (_is_scalar(a) or _is_scalar(b)):
        raise ShapeError(f"{opname}: shape mismatch {a.shape} vs {b.shape}")
    return a, b


def _reduce_to(g: np.ndarray, t: Tensor) -> np.ndarray:
    """Sum a gradient back onto a scalar operand that was implicitly spread."""
    if g.shape == t.shape:
        return g
    return np.full(t.shape, g.sum(), dtype=DTYPE)


# ------------------------------------------------------------------ elementwise
def add(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "add")

    def backward(g):
        return _reduce_to(g, a), _reduce_to(g, b)

    return _node(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "sub")

    def backward(g):
        return _reduce_to(g, a), _reduce_to(-g, b)

    return _node(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "mul")

    def backward(g):
        return _reduce_to(g * b.data, a), _reduce_to(g * a.data, b)

    return _node(a.data * b.data, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "div")
    out = a.data / b.data

    def backward(g):
        return _reduce_to(g / b.data, a), _reduce_to(-g * out / b.data, b)

    return _node(out, (a, b), backward)


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _node(x.data * c, (x,), lambda g: (g * c,))


def tabs(x: Tensor) -> Tensor:
    # np.sign(0) == 0, which is the subgradient we want at the kink
    return _node(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _node(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def _sigmoid(v: np.ndarray) -> np.ndarray:
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)
    return out


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    return _node(s, (x,), lambda g: (g * s * (1.0 - s),))


def silu(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    out = x.data * s
    return _node(out, (x,), lambda g: (g * (s + out * (1.0 - s)),))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _node(out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    return _node(np.log(x.data), (x,), lambda g: (g / x.data,))


_UNARY = {"abs": tabs, "relu": relu, "sigmoid": sigmoid, "silu": silu, "exp": exp, "log": log}
_BINARY = {"add": add, "sub": sub, "mul": mul, "div": div}


def elementwise(op: str, x, y=None) -> Tensor:
    """Dispatch an elementwise op by name.

    ``scale`` takes a python number as ``y``.
    """
    if op in _UNARY:
        if y is not None:
            raise ValueError(f"op {op!r} is unary")
        return _UNARY[op](as_tensor(x))
    if op in _BINARY:
        if y is None:
            raise ValueError(f"op {op!r} needs a second operand")
        return _BINARY[op](x, y)
    if op == "scale":
        return scale(as_tensor(x), y)
    raise ValueError(f"unsupported elementwise op {op!r}")


# ---------------------------------------------------------------- shape ops
def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    src = x.shape
    return _node(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),))


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _node(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def expand(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    """Explicitly replicate ``x`` to ``shape``.

    New leading axes may be added and size-1 axes stretched; this is the only
    way a smaller operand reaches a larger shape.
    """
    shape = tuple(shape)
    lead = len(shape) - x.ndim
    if lead < 0:
        raise ShapeError(f"expand: cannot expand {x.shape} to {shape}")
    for have, want in zip(x.shape, shape[lead:]):
        if have != want and have != 1:
            raise ShapeError(f"expand: cannot expand {x.shape} to {shape}")
    src = x.shape

    def backward(g):
        g = g.sum(axis=tuple(range(lead))) if lead else g
        axes = tuple(i for i, (have, want) in enumerate(zip(src, shape[lead:])) if have == 1 and want != 1)
        if axes:
            g = g.sum(axis=axes, keepdims=True)
        return (g,)

    return _node(np.broadcast_to(x.data, shape).copy(), (x,), backward)


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    src = x.shape
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return _node(np.asarray(out, dtype=DTYPE), (x,), backward)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return scale(tsum(x, axis, keepdims), 1.0 / n)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ax = axis % tensors[0].ndim
    for t in tensors[1:]:
        if t.ndim != tensors[0].ndim or any(
            i != ax and a != b for i, (a, b) in enumerate(zip(t.shape, tensors[0].shape))
        ):
            raise ShapeError(f"concat: incompatible shapes {tensors[0].shape} and {t.shape} on axis {axis}")
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def backward(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax) for i in range(len(tensors)))

    return _node(np.concatenate([t.data for t in tensors], axis=ax), tensors, backward)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    return concat([reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) for t in tensors], axis=axis)


def getitem(x: Tensor, index) -> Tensor:
    """Basic or integer-array indexing; the backward scatters with ``np.add.at``."""
    out = x.data[index]
    src = x.shape

    def backward(g):
        full = np.zeros(src, dtype=DTYPE)
        np.add.at(full, index, g)
        return (full,)

    return _node(np.array(out, dtype=DTYPE), (x,), backward)


def diag_embed(x: Tensor) -> Tensor:
    """``[..., L] -> [..., L, L]`` with ``x`` on the diagonal and exact zeros elsewhere."""
    n = x.shape[-1]
    out = np.zeros(x.shape + (n,), dtype=DTYPE)
    idx = np.arange(n)
    out[..., idx, idx] = x.data
    return _node(out, (x,), lambda g: (g[..., idx, idx].copy(),))


# ------------------------------------------------------------------- linear algebra
def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product.

    Accepted layouts: ``[m,k] @ [k,n]``; ``[...,m,k] @ [k,n]`` (a weight
    applied to every leading slice, equivalent to reshaping ``a`` to 2-D); and
    ``[...,m,k] @ [...,k,n]`` with identical leading extents.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch extents differ, {a.shape} vs {b.shape}")
    if b.ndim == 2 and a.ndim > 2:
        # np.matmul runs one product per leading slice, so a sample's result
        # does not depend on what else is in the batch
        k = a.shape[-1]

        def backward(g):
            g2 = g.reshape(-1, b.shape[-1])
            return np.matmul(g, b.data.T), a.data.reshape(-1, k).T @ g2

        return _node(np.matmul(a.data, b.data), (a, b), backward)

    def backward(g):
        return g @ np.swapaxes(b.data, -1, -2), np.swapaxes(a.data, -1, -2) @ g

    return _node(a.data @ b.data, (a, b), backward)


# --------------------------------------------------------------- normalisers
def softmax_lastdim(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _node(y, (x,), backward)


def masked_softmax(x: Tensor, mask: np.ndarray) -> Tensor:
    """Softmax over the last axis where ``mask`` is False positions get exactly 0.

    Every row must keep at least one unmasked entry.
    """
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
    z = np.where(mask, x.data, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.where(mask, np.exp(z), 0.0)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _node(y, (x,), backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: affine shapes {gamma.shape}/{beta.shape} do not match last dim {d}")
    if eps <= 0:
        raise ValueError("layer_norm: eps must be positive")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data
    lead = tuple(range(x.ndim - 1))

    def backward(g):
        gx = g * gamma.data
        dx = inv * (gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _node(out, (x, gamma, beta), backward)


def cross_entropy(logits: Tensor, targets, weights=None) -> Tensor:
    """Mean negative log-likelihood of integer ``targets`` under ``softmax(logits)``.

    ``logits`` is ``[..., V]`` and ``targets`` has the leading shape. Positions
    with weight 0 are excluded from both sum and count.
    """
    targets = np.asarray(targets, dtype=np.int64)
    v = logits.shape[-1]
    if targets.shape != logits.shape[:-1]:
        raise ShapeError(f"cross_entropy: targets {targets.shape} vs logits {logits.shape}")
    if targets.size and (targets.min() < 0 or targets.max() >= v):
        raise ValueError(f"cross_entropy: target id out of range [0, {v})")
    w = np.ones(targets.shape, dtype=DTYPE) if weights is None else np.asarray(weights, dtype=DTYPE)
    count = w.sum()
    if count <= 0:
        raise ValueError("cross_entropy: no positions to average over")
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse
    picked = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    loss = -(picked * w).sum() / count

    def backward(g):
        p = np.exp(logp)
        np.put_along_axis(p, targets[..., None], np.take_along_axis(p, targets[..., None], axis=-1) - 1.0, axis=-1)
        return (g * p * (w / count)[..., None],)

    return _node(np.asarray(loss, dtype=DTYPE), (logits,), backward)


# ---------------------------------------------------------------- convolution
def _im2col3x3(x: np.ndarray) -> np.ndarray:
    h, w = x.shape[-3], x.shape[-2]
    pad = [(0, 0)] * (x.ndim - 3) + [(1, 1), (1, 1), (0, 0)]
    xp = np.pad(x, pad)
    cols = [xp[..., i : i + h, j : j + w, :] for i in range(3) for j in range(3)]
    return np.concatenate(cols, axis=-1)


def conv3x3(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """3x3 convolution, stride 1, zero padding 1, channels-last.

    ``x`` is ``[..., H, W, D]``, ``weight`` is ``[3, 3, D, D']``, ``bias`` ``[D']``.
    """
    if x.ndim < 3:
        raise ShapeError(f"conv3x3: input must be [..., H, W, D], got {x.shape}")
    d = x.shape[-1]
    if weight.shape[:3] != (3, 3, d) or weight.ndim != 4:
        raise ShapeError(f"conv3x3: kernel {weight.shape} does not match {d} input channels")
    d_out = weight.shape[3]
    if bias.shape != (d_out,):
        raise ShapeError(f"conv3x3: bias {bias.shape} does not match {d_out} output channels")
    h, w = x.shape[-3], x.shape[-2]
    cols = _im2col3x3(x.data)
    wmat = weight.data.reshape(9 * d, d_out)
    # one product per image keeps per-sample results batch-independent
    flat_cols = cols.reshape(x.shape[:-3] + (h * w, 9 * d))
    out = (np.matmul(flat_cols, wmat) + bias.data).reshape(x.shape[:-1] + (d_out,))

    def backward(g):
        g2 = g.reshape(-1, d_out)
        dw = (cols.reshape(-1, 9 * d).T @ g2).reshape(weight.shape)
        db = g2.sum(axis=0)
        dcols = (g2 @ wmat.T).reshape(x.shape[:-1] + (9 * d,))
        pad_shape = x.shape[:-3] + (h + 2, w + 2, d)
        dxp = np.zeros(pad_shape, dtype=DTYPE)
        for t, (i, j) in enumerate((i, j) for i in range(3) for j in range(3)):
            dxp[..., i : i + h, j : j + w, :] += dcols[..., t * d : (t + 1) * d]
        return dxp[..., 1 : h + 1, 1 : w + 1, :], dw, db

    return _node(out, (x, weight, bias), backward)


# ---------------------------------------------------------------- selection
def top_k(scores, k: int) -> tuple[list[int], list[float]]:
    """Indices of the ``k`` largest entries, by descending value, ties by ascending index."""
    s = np.asarray(scores.data if isinstance(scores, Tensor) else scores, dtype=DTYPE).reshape(-1)
    n = s.size
    if not 1 <= k <= n:
        raise ValueError(f"top_k: need 1 <= k <= {n}, got k={k}")
    # lexsort: last key is primary; stable ordering on index breaks ties
    order = np.lexsort((np.arange(n), -s))[:k]
    return [int(i) for i in order], [float(s[i]) for i in order]


def top_k_rows(scores: np.ndarray, k: int) -> np.ndarray:
    """Row-wise :func:`top_k` returning an ``[N, k]`` index array."""
    scores = np.asarray(scores, dtype=DTYPE)
    n = scores.shape[-1]
    if not 1 <= k <= n:
        raise ValueError(f"top_k: need 1 <= k <= {n}, got k={k}")
    # stable sort of the negated scores keeps equal entries in index order
    return np.argsort(-scores, axis=-1, kind="stable")[..., :k]


# ---------------------------------------------------------------- grad check
def numerical_grad(f: Callable[..., Tensor], inputs: Sequence[Tensor], eps: float = 1e-5) -> list[np.ndarray]:
    """Central finite differences of scalar ``f(*inputs)`` for every input coordinate."""
    grads = []
    with no_grad():
        for t in inputs:
            t.data = np.ascontiguousarray(t.data)
            g = np.zeros_like(t.data)
            flat = t.data.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                fp = f(*inputs).item()
                flat[i] = orig - eps
                fm = f(*inputs).item()
                flat[i] = orig
                g.reshape(-1)[i] = (fp - fm) / (2 * eps)
            grads.append(g)
    return grads


def grad_check(f: Callable[..., Tensor], inputs: Iterable[Tensor], eps: float = 1e-4) -> float:
    """Largest relative disagreement between backprop and central differences.

    ``inputs`` must be the tensors ``f`` reads; their ``grad`` fields are reset.
    The measure is ``|a - fd| / max(|a|, |fd|, 1e-8)`` maximised over coordinates.
    """
    inputs = list(inputs)
    saved = [t.requires_grad for t in inputs]
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    loss = f(*inputs)
    loss.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad for t in inputs]
    numeric = numerical_grad(f, inputs, eps)
    for t, rg in zip(inputs, saved):
        t.requires_grad = rg
        t.grad = None
    worst = 0.0
    for a, n in zip(analytic, numeric):
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)
        if a.size:
            worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst


def param(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


__all__ = [
    "DTYPE",
    "ShapeError",
    "Tensor",
    "add",
    "as_tensor",
    "concat",
    "conv3x3",
    "cross_entropy",
    "diag_embed",
    "div",
    "elementwise",
    "exp",
    "expand",
    "getitem",
    "grad_check",
    "is_grad_enabled",
    "layer_norm",
    "log",
    "masked_softmax",
    "matmul",
    "mean",
    "mul",
    "no_grad",
    "numerical_grad",
    "param",
    "relu",
    "reshape",
    "scale",
    "sigmoid",
    "silu",
    "softmax_lastdim",
    "stack",
    "sub",
    "tabs",
    "top_k",
    "top_k_rows",
    "transpose",
    "tsum",
]
