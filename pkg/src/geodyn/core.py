"""Dense tensors with reverse-mode gradients.

Only the handful of operations the landmark/fusion pipeline needs are
provided. Every tensor wraps a numpy array; operations record their parents
and a closure that maps the output gradient to parent gradients. Reductions
use numpy's fixed pairwise order, so results are bitwise reproducible for a
fixed input on a fixed platform and BLAS thread count.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np


class NonFiniteError(FloatingPointError):
    """Raised when an operation produces NaN or Inf."""


def _check_finite(data: np.ndarray, op: str) -> np.ndarray:
    if not np.isfinite(data).all():
        raise NonFiniteError(f"non-finite value produced by {op}")
    return data


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (undo numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    ndim_extra = grad.ndim - len(shape)
    if ndim_extra > 0:
        grad = grad.sum(axis=tuple(range(ndim_extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = _check_finite(arr, "tensor construction")
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward: Callable | None = None
        self.op = "leaf"

    # -- bookkeeping -------------------------------------------------------
    @classmethod
    def _result(cls, data: np.ndarray, parents: Sequence["Tensor"], backward, op: str) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = _check_finite(data, op)
        out.grad = None
        out.op = op
        out.requires_grad = any(p.requires_grad for p in parents)
        if out.requires_grad:
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
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op})"

    def _topo(self) -> list["Tensor"]:
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in reversed(node._parents):
                if id(parent) not in seen:
                    stack.append((parent, False))
        return order

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every leaf that requires grad."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.dtype)}
        for node in reversed(self._topo()):
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
                grads[key] = pg if key not in grads else grads[key] + pg

    # -- arithmetic --------------------------------------------------------
    def _wrap(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return other
        return Tensor(np.asarray(other, dtype=self.dtype))

    def __add__(self, other):
        other = self._wrap(other)
        a, b = self.shape, other.shape
        return Tensor._result(
            self.data + other.data, (self, other),
            lambda g: (_unbroadcast(g, a), _unbroadcast(g, b)), "add")

    __radd__ = __add__

    def __sub__(self, other):
        other = self._wrap(other)
        a, b = self.shape, other.shape
        return Tensor._result(
            self.data - other.data, (self, other),
            lambda g: (_unbroadcast(g, a), _unbroadcast(-g, b)), "sub")

    def __rsub__(self, other):
        return self._wrap(other) - self

    def __mul__(self, other):
        other = self._wrap(other)
        x, y = self.data, other.data
        return Tensor._result(
            x * y, (self, other),
            lambda g: (_unbroadcast(g * y, x.shape), _unbroadcast(g * x, y.shape)), "mul")

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = self._wrap(other)
        x, y = self.data, other.data
        return Tensor._result(
            x / y, (self, other),
            lambda g: (_unbroadcast(g / y, x.shape), _unbroadcast(-g * x / (y * y), y.shape)),
            "div")

    def __neg__(self):
        return Tensor._result(-self.data, (self,), lambda g: (-g,), "neg")

    def __pow__(self, exponent: float):
        x = self.data
        e = float(exponent)
        return Tensor._result(x ** e, (self,), lambda g: (g * e * x ** (e - 1.0),), "pow")

    def __matmul__(self, other):
        other = self._wrap(other)
        x, y = self.data, other.data
        if x.ndim < 2 or y.ndim < 2:
            raise ValueError("matmul operands must have at least 2 dimensions")

        def backward(g):
            gx = g @ np.swapaxes(y, -1, -2)
            gy = np.swapaxes(x, -1, -2) @ g
            return _unbroadcast(gx, x.shape), _unbroadcast(gy, y.shape)

        return Tensor._result(x @ y, (self, other), backward, "matmul")

    # -- elementwise -------------------------------------------------------
    def exp(self):
        out = np.exp(self.data)
        return Tensor._result(out, (self,), lambda g: (g * out,), "exp")

    def log(self):
        x = self.data
        return Tensor._result(np.log(x), (self,), lambda g: (g / x,), "log")

    def relu(self):
        mask = self.data > 0
        return Tensor._result(np.where(mask, self.data, 0).astype(self.dtype), (self,),
                              lambda g: (g * mask,), "relu")

    def sigmoid(self):
        out = _sigmoid(self.data)
        return Tensor._result(out, (self,), lambda g: (g * out * (1 - out),), "sigmoid")

    def clamp_min(self, floor: float):
        """max(x, floor); gradient is zero where the floor is active."""
        mask = self.data > floor
        out = np.where(mask, self.data, np.asarray(floor, dtype=self.dtype))
        return Tensor._result(out, (self,), lambda g: (g * mask,), "clamp_min")

    # -- reductions & shape ------------------------------------------------
    def sum(self, axis=None, keepdims: bool = False):
        shape = self.shape
        out = self.data.sum(axis=axis, keepdims=keepdims)

        def backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return Tensor._result(np.asarray(out), (self,), backward, "sum")

    def mean(self, axis=None, keepdims: bool = False):
        if axis is None:
            count = self.data.size
        else:
            axes = (axis,) if isinstance(axis, int) else axis
            count = math.prod(self.shape[a] for a in axes)
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    def max(self, axis, keepdims: bool = False):
        """Max reduction; the gradient goes to the first maximal entry."""
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(a % self.ndim for a in axes)
        rest = tuple(a for a in range(self.ndim) if a not in axes)
        moved = np.transpose(self.data, rest + axes)
        flat = moved.reshape(moved.shape[: len(rest)] + (-1,))
        idx = flat.argmax(axis=-1)
        out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
        shape = self.shape

        def backward(g):
            gflat = np.zeros_like(flat)
            np.put_along_axis(gflat, idx[..., None], g.reshape(idx.shape)[..., None], axis=-1)
            gmoved = gflat.reshape(moved.shape)
            inv = np.argsort(rest + axes)
            return (np.transpose(gmoved, inv).reshape(shape),)

        if keepdims:
            out = np.expand_dims(out, axes)
        return Tensor._result(out, (self,), backward, "max")

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.shape
        return Tensor._result(self.data.reshape(shape), (self,),
                              lambda g: (g.reshape(old),), "reshape")

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        inv = tuple(np.argsort(axes))
        return Tensor._result(np.transpose(self.data, axes), (self,),
                              lambda g: (np.transpose(g, inv),), "transpose")

    def __getitem__(self, index):
        shape = self.shape

        def backward(g):
            full = np.zeros(shape, dtype=g.dtype)
            np.add.at(full, index, g)
            return (full,)

        return Tensor._result(np.array(self.data[index]), (self,), backward, "getitem")


class Parameter(Tensor):
    """A named trainable tensor with an SGD momentum buffer."""

    __slots__ = ("name", "momentum_buffer")

    def __init__(self, data, name: str, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)
        self.data = np.ascontiguousarray(self.data)
        self.name = name
        self.grad = np.zeros_like(self.data)
        self.momentum_buffer = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape}, dtype={self.dtype})"


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    datas = [t.data for t in tensors]
    sizes = [d.shape[axis] for d in datas]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor._result(np.concatenate(datas, axis=axis), tuple(tensors), backward, "concat")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(x) -> np.ndarray:
    """Plain numpy sigmoid, overflow-safe."""
    return _sigmoid(np.asarray(x, dtype=np.float64) if np.isscalar(x) else np.asarray(x))


def _softmax_np(x: np.ndarray, axis: int) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax(v, axis: int = -1):
    """Numerically stable softmax.

    With a Tensor argument the result is a Tensor carrying gradients; with a
    plain sequence or array a numpy array is returned.
    """
    if isinstance(v, Tensor):
        if v.data.size == 0:
            raise ValueError("softmax of an empty input")
        out = _softmax_np(v.data, axis)

        def backward(g):
            return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

        return Tensor._result(out, (v,), backward, "softmax")
    arr = np.asarray(v, dtype=np.float64)
    if arr.size == 0:
        raise ValueError("softmax of an empty input")
    if not np.isfinite(arr).all():
        raise NonFiniteError("softmax input contains a non-finite entry")
    return _softmax_np(arr, axis)


def _check_binary(labels: np.ndarray) -> None:
    if not np.isin(labels, (0, 1)).all():
        raise ValueError("binary labels must be 0 or 1")


def bce_with_logits(logits, labels) -> Tensor:
    """Elementwise -[l log sigmoid(z) + (1-l) log(1-sigmoid(z))], computed stably.

    ``logits`` may be a scalar or a Tensor of any shape; ``labels`` must match.
    The gradient with respect to each logit is sigmoid(z) - l.
    """
    z = as_tensor(logits)
    lab = np.asarray(labels)
    _check_binary(lab)
    lab = lab.astype(z.dtype)
    x = z.data
    # max(z, 0) - z*l + log(1 + exp(-|z|))
    loss = np.maximum(x, 0) - x * lab + np.log1p(np.exp(-np.abs(x)))
    return Tensor._result(loss, (z,), lambda g: (g * (_sigmoid(x) - lab),), "bce_with_logits")


def cross_entropy(logits, classes) -> Tensor:
    """Per-row -log softmax(logits)[class] for logits of shape (..., K)."""
    z = as_tensor(logits)
    cls = np.asarray(classes)
    k = z.shape[-1]
    if cls.dtype.kind not in "iu" or (cls < 0).any() or (cls >= k).any():
        raise ValueError(f"class index out of range [0, {k})")
    x = z.data
    shifted = x - x.max(axis=-1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=-1))
    picked = np.take_along_axis(shifted, cls[..., None], axis=-1)[..., 0]
    loss = logsum - picked

    def backward(g):
        p = _softmax_np(x, -1)
        onehot = np.zeros_like(p)
        np.put_along_axis(onehot, cls[..., None], 1.0, axis=-1)
        return (g[..., None] * (p - onehot),)

    return Tensor._result(np.asarray(loss), (z,), backward, "cross_entropy")


def temporal_conv1d(f, kernel, bias=None, stride: int = 1) -> Tensor:
    """Convolve every node's channel sequence along the time axis.

    ``f`` has shape (..., N, S, C_in) and ``kernel`` (k, C_in, C_out); the same
    taps are shared by all nodes. Zero padding of (k-1)/2 on both ends gives
    ceil(S / stride) output steps.
    """
    f = as_tensor(f)
    kernel = as_tensor(kernel)
    k, c_in, c_out = kernel.shape
    if k % 2 == 0:
        raise ValueError(f"temporal kernel size must be odd, got {k}")
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    if f.shape[-1] != c_in:
        raise ValueError(f"input has {f.shape[-1]} channels, kernel expects {c_in}")
    x = f.data
    s = x.shape[-2]
    pad = (k - 1) // 2
    s_out = -(-s // stride)
    lead = x.shape[:-2]
    widths = [(0, 0)] * (x.ndim - 2) + [(pad, pad), (0, 0)]
    xp = np.pad(x, widths)
    stop = stride * (s_out - 1) + 1
    # im2col: rows are (lead..., t), columns are (tap, channel)
    cols = np.stack([xp[..., j:j + stop:stride, :] for j in range(k)], axis=-2)
    cols = cols.reshape(-1, k * c_in)
    w2 = kernel.data.reshape(k * c_in, c_out)
    out = (cols @ w2).reshape(lead + (s_out, c_out))
    parents = [f, kernel]
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data
        parents.append(bias)

    def backward(g):
        g2 = g.reshape(-1, c_out)
        gw = (cols.T @ g2).reshape(k, c_in, c_out)
        gcols = (g2 @ w2.T).reshape(lead + (s_out, k, c_in))
        gxp = np.zeros_like(xp)
        for j in range(k):
            gxp[..., j:j + stop:stride, :] += gcols[..., j, :]
        grads = [gxp[..., pad:pad + s, :], gw]
        if bias is not None:
            grads.append(g2.sum(axis=0))
        return tuple(grads)

    return Tensor._result(out, tuple(parents), backward, "temporal_conv1d")


def sgd_step(params: Iterable[Parameter], lr: float, momentum: float = 0.0,
             weight_decay: float = 0.0) -> None:
    """One SGD update with weight decay folded into the gradient before momentum.

    g' = g + wd * value; buf = momentum * buf + g'; value -= lr * buf.
    Gradients are zeroed afterwards.
    """
    if not lr > 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    params = list(params)
    for p in params:
        if p.grad is not None and not np.isfinite(p.grad).all():
            raise NonFiniteError(f"non-finite gradient for parameter {p.name!r}")
    for p in params:
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if weight_decay:
            g = g + weight_decay * p.data
        if momentum:
            p.momentum_buffer = momentum * p.momentum_buffer + g
        else:
            p.momentum_buffer = g
        p.data = (p.data - lr * p.momentum_buffer).astype(p.data.dtype, copy=False)
        _check_finite(p.data, f"sgd_step({p.name})")
        p.grad = np.zeros_like(p.data)


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = np.zeros_like(p.data)


def grad_check(loss_fn: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-4,
               floor: float = 1e-6) -> float:
    """Worst relative error between reverse-mode and central-difference gradients.

    ``loss_fn`` takes no arguments and reads the current parameter values;
    parameters must be float64. The relative error uses max(|a|, |b|, floor)
    as denominator; the floor sits well above central-difference round-off
    (about 1e-16 * |loss| / eps) so vanishing gradients do not read as errors.
    """
    params = list(params)
    for p in params:
        if p.dtype != np.float64:
            raise TypeError("grad_check needs float64 parameters")
    first = loss_fn()
    second = loss_fn()
    if first.data.tobytes() != second.data.tobytes():
        raise RuntimeError("loss_fn is not deterministic across calls")
    for p in params:
        p.grad = None
    loss_fn().backward()
    worst = 0.0
    for p in params:
        p.data = np.ascontiguousarray(p.data)
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            plus = float(loss_fn().data)
            flat[i] = orig - eps
            minus = float(loss_fn().data)
            flat[i] = orig
            numeric = (plus - minus) / (2 * eps)
            a = float(analytic.reshape(-1)[i])
            err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            worst = max(worst, err)
    for p in params:
        p.grad = np.zeros_like(p.data)
    return worst
