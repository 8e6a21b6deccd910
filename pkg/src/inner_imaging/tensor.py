"""Dense double-precision tensors with tape-based reverse-mode differentiation.

Every differentiable operation records its parents and a backward closure that
maps the upstream gradient to one gradient per parent. ``Tensor.backward`` walks
the recorded graph once in reverse topological order and then releases it, so a
second call on the same loss is an error.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "ShapeError",
    "NonFiniteError",
    "TapeError",
    "Tensor",
    "no_grad",
    "as_tensor",
    "topological_order",
    "conv2d",
    "global_avg_pool",
    "matmul",
    "elementwise",
    "sigmoid",
    "relu",
    "add",
    "hadamard",
    "scale_channels",
    "reshape",
    "concat",
    "concat_zero_fill",
    "batchnorm",
    "log_softmax",
    "cross_entropy",
]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class NonFiniteError(FloatingPointError):
    """Raised when a tensor holds NaN or Inf."""


class TapeError(RuntimeError):
    """Raised on misuse of the gradient tape."""


_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """N-dimensional float64 array that can take part in a gradient tape."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._op = "leaf"
        self._consumed = False

    # -- construction helpers -------------------------------------------------
    @classmethod
    def _from_op(cls, data: np.ndarray, parents: Sequence["Tensor"], backward, op: str) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.name = None
        out._op = op
        out._consumed = False
        needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
        out.requires_grad = needs
        if needs:
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def check_finite(self, where: str = "tensor") -> "Tensor":
        if not np.all(np.isfinite(self.data)):
            bad = int(np.size(self.data) - np.count_nonzero(np.isfinite(self.data)))
            raise NonFiniteError(f"{where}: {bad} non-finite value(s) in tensor of shape {self.shape}")
        return self

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self._op}{flag})"

    # -- backward ---------------------------------------------------------------
    def backward(self, grad: np.ndarray | None = None) -> None:
        if self._consumed:
            raise TapeError("tape already consumed by a previous backward pass")
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"backward needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=np.float64)
        if grad.shape != self.shape:
            raise ShapeError(f"seed gradient shape {grad.shape} != tensor shape {self.shape}")

        order = topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        for node in order:
            if node._backward is not None:
                node._backward = None
                node._parents = ()
                node._consumed = True
        self._consumed = True

    # -- arithmetic -------------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, -as_tensor(other))

    def __rsub__(self, other):
        return add(as_tensor(other), -self)

    def __neg__(self):
        return Tensor._from_op(-self.data, (self,), lambda g: (-g,), "neg")

    def __mul__(self, other):
        other = as_tensor(other)
        a, b = self.data, other.data

        def backward(g):
            return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)

        return Tensor._from_op(a * b, (self, other), backward, "mul")

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_tensor(other)
        a, b = self.data, other.data

        def backward(g):
            return _unbroadcast(g / b, a.shape), _unbroadcast(-g * a / (b * b), b.shape)

        return Tensor._from_op(a / b, (self, other), backward, "div")

    def __pow__(self, p: float):
        a = self.data

        def backward(g):
            return (g * p * a ** (p - 1),)

        return Tensor._from_op(a**p, (self,), backward, "pow")

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        a = self.data

        def backward(g):
            out = np.zeros_like(a)
            np.add.at(out, idx, g)
            return (out,)

        return Tensor._from_op(a[idx], (self,), backward, "getitem")

    # -- reductions and shape ---------------------------------------------------
    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        a = self.data
        out = a.sum(axis=axis, keepdims=keepdims)

        def backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, a.shape).copy(),)

        return Tensor._from_op(np.asarray(out), (self,), backward, "sum")

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        a = self.data
        count = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    def max(self, axis: int, keepdims: bool = False) -> "Tensor":
        """Maximum along one axis; the gradient goes to the first maximal entry."""
        a = self.data
        idx = np.expand_dims(a.argmax(axis=axis), axis)
        out = np.take_along_axis(a, idx, axis=axis)
        if not keepdims:
            out = np.squeeze(out, axis=axis)

        def backward(g):
            if not keepdims:
                g = np.expand_dims(g, axis)
            full = np.zeros_like(a)
            np.put_along_axis(full, idx, g, axis=axis)
            return (full,)

        return Tensor._from_op(out, (self,), backward, "max")

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        elif len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        inv = np.argsort(axes)

        def backward(g):
            return (g.transpose(inv),)

        return Tensor._from_op(self.data.transpose(axes), (self,), backward, "transpose")

    @property
    def T(self) -> "Tensor":
        return self.transpose()

    def flatten(self, start: int = 1) -> "Tensor":
        return reshape(self, self.shape[:start] + (-1,))

    # -- pointwise --------------------------------------------------------------
    def sigmoid(self) -> "Tensor":
        return sigmoid(self)

    def relu(self) -> "Tensor":
        return relu(self)

    def exp(self) -> "Tensor":
        out = np.exp(self.data)
        return Tensor._from_op(out, (self,), lambda g: (g * out,), "exp")

    def log(self) -> "Tensor":
        a = self.data
        return Tensor._from_op(np.log(a), (self,), lambda g: (g / a,), "log")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def topological_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root`` with every node after all of its inputs."""
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
            if id(p) not in seen:
                stack.append((p, False))
    return order


# -- pointwise ops ---------------------------------------------------------------

def sigmoid(x: Tensor) -> Tensor:
    a = x.data
    # split by sign to avoid overflow in exp
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    ea = np.exp(a[~pos])
    out[~pos] = ea / (1.0 + ea)

    def backward(g):
        return (g * out * (1.0 - out),)

    return Tensor._from_op(out, (x,), backward, "sigmoid")


def relu(x: Tensor) -> Tensor:
    a = x.data
    mask = a > 0
    return Tensor._from_op(a * mask, (x,), lambda g: (g * mask,), "relu")


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError as exc:
        raise ShapeError(f"cannot broadcast {a.shape} with {b.shape}") from exc
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return Tensor._from_op(out, (a, b), backward, "add")


def _channel_view(v: Tensor, target: tuple) -> Tensor:
    """Reshape a [C] or [B,C] vector so it broadcasts over [B,C,...] per channel."""
    if v.ndim >= len(target) or v.ndim == 0:
        return v
    if v.ndim == 1 and len(target) >= 2 and v.shape[0] == target[1]:
        return reshape(v, (1, v.shape[0]) + (1,) * (len(target) - 2))
    if v.ndim == 2 and v.shape == tuple(target[:2]):
        return reshape(v, v.shape + (1,) * (len(target) - 2))
    return v


def hadamard(a, b) -> Tensor:
    """Elementwise product; a channel vector broadcasts over [B,C,H,W] per channel."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < b.ndim:
        a = _channel_view(a, b.shape)
    elif b.ndim < a.ndim:
        b = _channel_view(b, a.shape)
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"cannot broadcast {a.shape} with {b.shape}") from exc
    return a * b


def scale_channels(u: Tensor, s: Tensor) -> Tensor:
    """``out[b,c,...] = s[b,c] * u[b,c,...]``."""
    if s.shape != u.shape[:2]:
        raise ShapeError(f"gate shape {s.shape} does not match channels of {u.shape}")
    return hadamard(s, u)


_ELEMENTWISE = {
    "sigmoid": sigmoid,
    "relu": relu,
    "add": add,
    "hadamard": hadamard,
}


def elementwise(op: str, *args) -> Tensor:
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    return fn(*args)


# -- linear algebra and shape ------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    A, B = a.data, b.data

    def backward(g):
        return g @ B.T, A.T @ g

    return Tensor._from_op(A @ B, (a, b), backward, "matmul")


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    src = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {src} into {shape}") from exc
    return Tensor._from_op(out, (x,), lambda g: (g.reshape(src),), "reshape")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat of an empty list")
    sizes = [t.shape[axis] for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(str(exc)) from exc
    cuts = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, cuts, axis=axis))

    return Tensor._from_op(out, tensors, backward, "concat")


def concat_zero_fill(blocks: Sequence[Tensor]) -> Tensor:
    """Horizontally join matrices of unequal height, padding short ones with zeros.

    Acts on the last two axes; leading axes must agree. The result has
    ``max(rows)`` rows and ``sum(cols)`` columns, and the padded cells receive no
    gradient.
    """
    blocks = [as_tensor(b) for b in blocks]
    if not blocks:
        raise ShapeError("concat_zero_fill needs at least one block")
    lead = blocks[0].shape[:-2]
    for b in blocks:
        if b.ndim < 2 or b.shape[:-2] != lead:
            raise ShapeError(f"incompatible block shapes {[blk.shape for blk in blocks]}")
    rows = max(b.shape[-2] for b in blocks)
    cols = sum(b.shape[-1] for b in blocks)
    out = np.zeros(lead + (rows, cols))
    spans = []
    c0 = 0
    for b in blocks:
        n, m = b.shape[-2:]
        out[..., :n, c0:c0 + m] = b.data
        spans.append((n, c0, c0 + m))
        c0 += m

    def backward(g):
        return tuple(g[..., :n, lo:hi].copy() for n, lo, hi in spans)

    return Tensor._from_op(out, blocks, backward, "concat_zero_fill")


# -- convolution and pooling ---------------------------------------------------------

def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, dilation: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of ``x`` [B,Cin,H,W] with ``kernel`` [Cout,Cin,a,b]."""
    x, kernel = as_tensor(x), as_tensor(kernel)
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and kernel, got {x.shape} and {kernel.shape}")
    if stride < 1 or dilation < 1 or padding < 0:
        raise ValueError("stride and dilation must be positive, padding non-negative")
    B, cin, H, W = x.shape
    cout, kcin, a, b = kernel.shape
    if kcin != cin:
        raise ShapeError(f"kernel expects {kcin} input channels, input has {cin}")
    ea, eb = dilation * (a - 1) + 1, dilation * (b - 1) + 1
    hp, wp = H + 2 * padding, W + 2 * padding
    if ea > hp or eb > wp:
        raise ShapeError(
            f"kernel extent {ea}x{eb} is larger than the padded input extent {hp}x{wp}"
        )
    ho, wo = (hp - ea) // stride + 1, (wp - eb) // stride + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data

    cols = np.empty((cin, a, b, B, ho, wo))
    for i in range(a):
        r0 = i * dilation
        rs = slice(r0, r0 + stride * (ho - 1) + 1, stride)
        for j in range(b):
            c0 = j * dilation
            cs = slice(c0, c0 + stride * (wo - 1) + 1, stride)
            cols[:, i, j] = xp[:, :, rs, cs].transpose(1, 0, 2, 3)
    cols2 = cols.reshape(cin * a * b, B * ho * wo)
    kmat = kernel.data.reshape(cout, -1)
    out = (kmat @ cols2).reshape(cout, B, ho, wo).transpose(1, 0, 2, 3)

    def backward(g):
        g2 = g.transpose(1, 0, 2, 3).reshape(cout, -1)
        dk = (g2 @ cols2.T).reshape(kernel.shape)
        dx = None
        if x.requires_grad:
            dcols = (kmat.T @ g2).reshape(cin, a, b, B, ho, wo)
            dxp = np.zeros((B, cin, hp, wp))
            for i in range(a):
                r0 = i * dilation
                rs = slice(r0, r0 + stride * (ho - 1) + 1, stride)
                for j in range(b):
                    c0 = j * dilation
                    cs = slice(c0, c0 + stride * (wo - 1) + 1, stride)
                    dxp[:, :, rs, cs] += dcols[:, i, j].transpose(1, 0, 2, 3)
            dx = dxp[:, :, padding:padding + H, padding:padding + W] if padding else dxp
        return dx, dk

    return Tensor._from_op(np.ascontiguousarray(out), (x, kernel), backward, "conv2d")


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over the two spatial axes: [B,C,H,W] -> [B,C]."""
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool expects [B,C,H,W], got {x.shape}")
    return x.mean(axis=(2, 3))


# -- normalisation and losses -----------------------------------------------------------

def batchnorm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.9,
    eps: float = 1e-5,
) -> Tensor:
    """Batch normalisation over every axis except axis 1.

    In training mode the running statistics are updated in place as
    ``running = momentum * running + (1 - momentum) * batch``.
    """
    C = x.shape[1]
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ShapeError(f"affine parameters {gamma.shape}/{beta.shape} do not match {C} channels")
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, C) + (1,) * (x.ndim - 2)
    X = x.data
    G = gamma.data.reshape(bshape)
    if training:
        n = X.size // C
        mu = X.mean(axis=axes, keepdims=True)
        var = X.var(axis=axes, keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = (X - mu) * inv
        unbiased = var.reshape(C) * (n / (n - 1)) if n > 1 else var.reshape(C)
        running_mean *= momentum
        running_mean += (1 - momentum) * mu.reshape(C)
        running_var *= momentum
        running_var += (1 - momentum) * unbiased

        def backward(g):
            dgamma = (g * xhat).sum(axis=axes)
            dbeta = g.sum(axis=axes)
            dxhat = g * G
            dx = inv / n * (
                n * dxhat
                - dxhat.sum(axis=axes, keepdims=True)
                - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True)
            )
            return dx, dgamma, dbeta
    else:
        inv = 1.0 / np.sqrt(running_var.reshape(bshape) + eps)
        xhat = (X - running_mean.reshape(bshape)) * inv

        def backward(g):
            return g * G * inv, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    out = xhat * G + beta.data.reshape(bshape)
    return Tensor._from_op(out, (x, gamma, beta), backward, "batchnorm")


def log_softmax(logits: Tensor) -> Tensor:
    z = logits.data
    shifted = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)

    def backward(g):
        return (g - soft * g.sum(axis=1, keepdims=True),)

    return Tensor._from_op(out, (logits,), backward, "log_softmax")


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under ``softmax(logits)``."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"logits {logits.shape} and labels {labels.shape} disagree")
    logp = log_softmax(logits)
    rows = np.arange(labels.size)
    picked = logp[rows, labels]
    return -picked.mean()


def parameters_finite(tensors: Iterable[Tensor]) -> bool:
    return all(np.all(np.isfinite(t.data)) for t in tensors)
