"""Minimal reverse-mode autodiff over numpy arrays.

Tensors store float32 by default. Reductions and products accumulate in
float64 and round once on output, so results do not depend on BLAS
blocking for the small shapes used here. A tensor built from float64 data
stays float64 through every op, which is what :func:`grad_check` relies on.
"""
from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DimensionError, UsageError

__all__ = [
    "Tensor",
    "tensor",
    "matmul",
    "conv2d",
    "global_avg_pool",
    "avg_pool2d",
    "leaky_relu",
    "relu",
    "cross_entropy",
    "sgd_step",
    "zero_grad",
    "grad_check",
    "make_rng",
]

DEFAULT_DTYPE = np.float32


def make_rng(seed: int) -> np.random.Generator:
    """PCG64 generator; every random draw in the package goes through here."""
    return np.random.Generator(np.random.PCG64(int(seed)))


def _result_dtype(*arrays: np.ndarray):
    dt = np.result_type(*[a.dtype for a in arrays])
    return np.float64 if dt == np.float64 else DEFAULT_DTYPE


def _narrow(arr: np.ndarray, *like: np.ndarray) -> np.ndarray:
    """Cast a float64 accumulator back to storage precision; overflow becomes inf."""
    with np.errstate(over="ignore"):
        return arr.astype(_result_dtype(*like))


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0, dtype=np.float64)
    for i, n in enumerate(shape):
        if n == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True, dtype=np.float64)
    return grad


class Tensor:
    """Dense float array with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is None:
            # explicit float64 arrays stay float64 (grad_check); everything else is stored as float32
            explicit64 = isinstance(data, (np.ndarray, np.floating)) and arr.dtype == np.float64
            dtype = np.float64 if explicit64 else DEFAULT_DTYPE
        self.data = np.ascontiguousarray(arr, dtype=dtype)
        if self.data.ndim and min(self.data.shape) == 0:
            raise DimensionError(f"tensor extents must be positive, got {self.data.shape}")
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    # -- construction helpers -------------------------------------------------

    @classmethod
    def _op(cls, out: np.ndarray, parents: Sequence["Tensor"], backward) -> "Tensor":
        if not np.all(np.isfinite(out)):
            raise FloatingPointError("non-finite value produced by tensor op")
        t = cls.__new__(cls)
        t.data = out
        t.grad = None
        t.requires_grad = any(p.requires_grad for p in parents)
        t._parents = tuple(parents) if t.requires_grad else ()
        t._backward = backward if t.requires_grad else None
        return t

    @property
    def shape(self) -> tuple:
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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), dtype=self.data.dtype)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{flag})"

    # -- backward -------------------------------------------------------------

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into every leaf with ``requires_grad``."""
        if grad is None:
            if self.data.size != 1:
                raise UsageError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data, dtype=np.float64)
        order = _topo_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                # leaf
                if node.requires_grad:
                    g = g.astype(node.data.dtype)
                    node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

    # -- elementwise arithmetic ----------------------------------------------

    def __add__(self, other) -> "Tensor":
        other = _as_tensor(other)
        a, b = self, other

        def bw(g):
            return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

        return Tensor._op((a.data + b.data).astype(_result_dtype(a.data, b.data)), (a, b), bw)

    __radd__ = __add__

    def __neg__(self) -> "Tensor":
        return Tensor._op(-self.data, (self,), lambda g: (-g,))

    def __sub__(self, other) -> "Tensor":
        other = _as_tensor(other)
        a, b = self, other

        def bw(g):
            return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

        return Tensor._op((a.data - b.data).astype(_result_dtype(a.data, b.data)), (a, b), bw)

    def __rsub__(self, other) -> "Tensor":
        return _as_tensor(other) - self

    def __mul__(self, other) -> "Tensor":
        other = _as_tensor(other)
        a, b = self, other

        def bw(g):
            return (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape))

        return Tensor._op((a.data * b.data).astype(_result_dtype(a.data, b.data)), (a, b), bw)

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Tensor":
        other = _as_tensor(other)
        a, b = self, other

        def bw(g):
            bd = b.data.astype(np.float64)
            return (
                _unbroadcast(g / bd, a.shape),
                _unbroadcast(-g * a.data / (bd * bd), b.shape),
            )

        with np.errstate(divide="ignore", invalid="ignore"):
            out = (a.data.astype(np.float64) / b.data).astype(_result_dtype(a.data, b.data))
        return Tensor._op(out, (a, b), bw)

    def __rtruediv__(self, other) -> "Tensor":
        return _as_tensor(other) / self

    def __pow__(self, k: float) -> "Tensor":
        a = self
        k = float(k)

        def bw(g):
            return (g * k * np.power(a.data.astype(np.float64), k - 1),)

        out = np.power(a.data.astype(np.float64), k).astype(a.data.dtype)
        return Tensor._op(out, (a,), bw)

    def __matmul__(self, other) -> "Tensor":
        return matmul(self, other)

    def sqrt(self) -> "Tensor":
        a = self
        out64 = np.sqrt(a.data.astype(np.float64))

        def bw(g):
            return (g * 0.5 / out64,)

        return Tensor._op(out64.astype(a.data.dtype), (a,), bw)

    # -- reductions and shape ops --------------------------------------------

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        a = self
        out = a.data.sum(axis=axis, keepdims=keepdims, dtype=np.float64)

        def bw(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, a.shape),)

        return Tensor._op(np.asarray(out, dtype=a.data.dtype), (a,), bw)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        a = self
        out = a.data.sum(axis=axis, keepdims=keepdims, dtype=np.float64)
        count = a.data.size // max(np.size(out), 1)
        out = out / count

        def bw(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g / count, a.shape),)

        return Tensor._op(np.asarray(out, dtype=a.data.dtype), (a,), bw)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        a = self
        return Tensor._op(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))

    def transpose(self, *axes) -> "Tensor":
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        elif len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        inv = np.argsort(axes)
        return Tensor._op(
            np.ascontiguousarray(self.data.transpose(axes)),
            (self,),
            lambda g: (g.transpose(inv),),
        )

    @property
    def T(self) -> "Tensor":
        return self.transpose()

    def __getitem__(self, idx) -> "Tensor":
        a = self

        def bw(g):
            full = np.zeros(a.shape, dtype=np.float64)
            np.add.at(full, idx, g)
            return (full,)

        return Tensor._op(np.ascontiguousarray(a.data[idx]), (a,), bw)

    def relu(self) -> "Tensor":
        return relu(self)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x)
    return Tensor(arr, dtype=np.float64 if arr.dtype == np.float64 and arr.ndim else DEFAULT_DTYPE)


def _topo_order(root: Tensor) -> list[Tensor]:
    """Iterative post-order DFS: parents before children, each node once."""
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
        for p in reversed(node._parents):
            if id(p) not in seen:
                stack.append((p, False))
    return order


# -- primitives ----------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D matrix product ``a @ b``."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    a64 = a.data.astype(np.float64)
    b64 = b.data.astype(np.float64)

    def bw(g):
        return g @ b64.T, a64.T @ g

    return Tensor._op(_narrow(a64 @ b64, a.data, b.data), (a, b), bw)


def _im2col(x: np.ndarray, k: int, stride: int) -> np.ndarray:
    # x: (N, C, Hp, Wp) padded -> (N, H', W', C*k*k)
    win = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]  # (N, C, H', W', k, k)
    n, c, ho, wo = win.shape[:4]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n, ho, wo, c * k * k)


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of ``x`` (C,H,W) or (N,C,H,W) with ``w`` (C_out,C_in,k,k)."""
    x, w = _as_tensor(x), _as_tensor(w)
    unbatched = x.ndim == 3
    if x.ndim not in (3, 4) or w.ndim != 4:
        raise DimensionError(f"conv2d expects x of rank 3/4 and w of rank 4, got {x.shape}, {w.shape}")
    xd = x.data[None] if unbatched else x.data
    n, c, h, wd = xd.shape
    c_out, c_in, k, k2 = w.shape
    if k != k2:
        raise DimensionError("conv2d supports square kernels only")
    if c_in != c:
        raise DimensionError(f"conv2d channel mismatch: input has {c}, kernel expects {c_in}")
    if stride < 1 or padding < 0:
        raise UsageError("stride must be >= 1 and padding >= 0")
    if k > h + 2 * padding or k > wd + 2 * padding:
        raise DimensionError(f"kernel {k} larger than padded input {h}x{wd} (pad {padding})")

    xp = np.pad(xd.astype(np.float64), ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = _im2col(xp, k, stride)  # (N, H', W', C*k*k)
    ho, wo = cols.shape[1:3]
    wmat = w.data.astype(np.float64).reshape(c_out, -1)
    out = cols.reshape(-1, c * k * k) @ wmat.T  # (N*H'*W', C_out)
    out = out.reshape(n, ho, wo, c_out).transpose(0, 3, 1, 2)
    if unbatched:
        out = out[0]
    out = _narrow(np.ascontiguousarray(out), x.data, w.data)

    def bw(g):
        g4 = g[None] if unbatched else g
        gmat = g4.transpose(0, 2, 3, 1).reshape(-1, c_out)  # (N*H'*W', C_out)
        gw = (gmat.T @ cols.reshape(-1, c * k * k)).reshape(w.shape)
        gcols = (gmat @ wmat).reshape(n, ho, wo, c, k, k)
        gxp = np.zeros_like(xp)
        for i in range(k):
            for j in range(k):
                gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += gcols[
                    :, :, :, :, i, j
                ].transpose(0, 3, 1, 2)
        gx = gxp[:, :, padding : padding + h, padding : padding + wd]
        if unbatched:
            gx = gx[0]
        return gx, gw

    return Tensor._op(out, (x, w), bw)


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over the two trailing spatial axes: (C,H,W)->(C), (N,C,H,W)->(N,C)."""
    x = _as_tensor(x)
    if x.ndim not in (3, 4):
        raise DimensionError(f"global_avg_pool expects rank 3 or 4, got {x.shape}")
    return x.mean(axis=(-2, -1))


def avg_pool2d(x: Tensor, size: int) -> Tensor:
    """Non-overlapping ``size`` x ``size`` average pooling on (N,C,H,W)."""
    n, c, h, w = x.shape
    if h % size or w % size:
        raise DimensionError(f"spatial extent {h}x{w} not divisible by pool size {size}")
    return x.reshape(n, c, h // size, size, w // size, size).mean(axis=(3, 5))


def leaky_relu(x: Tensor, slope: float = 0.01) -> Tensor:
    if not 0.0 <= slope < 1.0:
        raise UsageError(f"leaky_relu slope must lie in [0, 1), got {slope}")
    x = _as_tensor(x)
    pos = x.data > 0
    out = np.where(pos, x.data, x.data * np.asarray(slope, dtype=x.data.dtype))
    return Tensor._op(out.astype(x.data.dtype), (x,), lambda g: (np.where(pos, g, g * slope),))


def relu(x: Tensor) -> Tensor:
    return leaky_relu(x, 0.0)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean softmax cross-entropy of (N, K) logits against integer labels."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    z = logits.data.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    n = z.shape[0]
    rows = np.arange(n)
    loss = (logsum - z[rows, labels]).sum() / n

    def bw(g):
        p = np.exp(z - logsum[:, None])
        p[rows, labels] -= 1.0
        return (p * (g / n),)

    return Tensor._op(np.asarray(loss, dtype=logits.data.dtype), (logits,), bw)


# -- optimisation and checking -------------------------------------------------


def sgd_step(params: Iterable[Tensor], lr: float) -> None:
    """In-place ``p -= lr * p.grad`` followed by clearing the gradient."""
    params = list(params)
    for p in params:
        if p.grad is None:
            raise UsageError("sgd_step: parameter has no gradient (call backward first)")
    for p in params:
        upd = p.data.astype(np.float64) - lr * p.grad.astype(np.float64)
        if not np.all(np.isfinite(upd)):
            raise FloatingPointError("sgd_step produced a non-finite parameter")
        p.data[...] = upd.astype(p.data.dtype)
        p.grad = None


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


def grad_check(f: Callable[[Tensor], Tensor], x, eps: float = 1e-4, floor: float = 1e-6) -> float:
    """Max relative error between backprop and central differences.

    ``f`` is evaluated on a float64 copy of ``x`` so that the finite-difference
    side is accurate; every primitive here is dtype-generic, so the gradient
    code exercised is the same one float32 training runs through.

    Relative error per coordinate is ``|a - n| / max(|a|, |n|, floor)``.
    """
    if eps <= 0:
        raise UsageError("eps must be positive")
    x0 = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    xt = Tensor(x0.copy(), requires_grad=True, dtype=np.float64)
    out = f(xt)
    if not isinstance(out, Tensor) or out.size != 1:
        raise UsageError("grad_check: f must return a scalar Tensor")
    out.backward()
    analytic = np.zeros_like(x0) if xt.grad is None else xt.grad.astype(np.float64)

    numeric = np.empty_like(x0)
    flat = x0.reshape(-1)
    nflat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(f(Tensor(x0.copy(), dtype=np.float64)).data.reshape(()))
        flat[i] = orig - eps
        fm = float(f(Tensor(x0.copy(), dtype=np.float64)).data.reshape(()))
        flat[i] = orig
        nflat[i] = (fp - fm) / (2 * eps)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))
