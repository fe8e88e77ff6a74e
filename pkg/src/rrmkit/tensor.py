"""Dense float64 tensors with reverse-mode automatic differentiation.

The graph is define-by-run: every primitive records its inputs and a
closure that pushes the output gradient back to them. ``backward`` walks
the recorded graph from a scalar sink. Gradients accumulate into ``.grad``
until explicitly reset, so repeated backward calls sum their results.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigurationError, ContractError, DimensionError

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording (used for frozen-teacher forwards)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    """A dense n-dimensional float64 array with an optional gradient slot."""

    __slots__ = ("data", "grad", "_prev", "_backward")

    def __init__(self, data, _validate: bool = True):
        self.data = np.asarray(data, dtype=np.float64)
        if _validate and not np.all(np.isfinite(self.data)):
            raise ContractError("non-finite values rejected at graph boundary")
        self.grad: np.ndarray | None = None
        self._prev: tuple[Tensor, ...] = ()
        self._backward: Callable[[], None] | None = None

    @classmethod
    def _node(cls, data: np.ndarray, prev: tuple["Tensor", ...]) -> "Tensor":
        out = cls(data, _validate=False)
        out._prev = prev if _GRAD_ENABLED else ()
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def _accum(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape})"

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __mul__(self, c: float) -> "Tensor":
        return scale(self, c)

    __rmul__ = __mul__


def _record(out: Tensor, bwd: Callable[[], None]) -> Tensor:
    if _GRAD_ENABLED:
        out._backward = bwd
    return out


# ---------------------------------------------------------------------------
# primitives


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"add shapes differ: {a.shape} vs {b.shape}")
    out = Tensor._node(a.data + b.data, (a, b))

    def bwd():
        a._accum(out.grad)
        b._accum(out.grad)

    return _record(out, bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"mul shapes differ: {a.shape} vs {b.shape}")
    out = Tensor._node(a.data * b.data, (a, b))

    def bwd():
        a._accum(out.grad * b.data)
        b._accum(out.grad * a.data)

    return _record(out, bwd)


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    out = Tensor._node(x.data * c, (x,))

    def bwd():
        x._accum(out.grad * c)

    return _record(out, bwd)


def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """y[i, j] = sum_k x[i, k] * w[k, j] + b[j]."""
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[0]:
        raise DimensionError(f"affine inner dims disagree: x {x.shape} vs W {w.shape}")
    if b.shape != (w.shape[1],):
        raise DimensionError(f"affine bias shape {b.shape} does not match W {w.shape}")
    out = Tensor._node(x.data @ w.data + b.data, (x, w, b))

    def bwd():
        x._accum(out.grad @ w.data.T)
        w._accum(x.data.T @ out.grad)
        b._accum(out.grad.sum(axis=0))

    return _record(out, bwd)


def relu(x: Tensor) -> Tensor:
    out = Tensor._node(np.maximum(x.data, 0.0), (x,))

    def bwd():
        # subgradient at exactly 0 is taken as 0
        x._accum(out.grad * (x.data > 0))

    return _record(out, bwd)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    out = Tensor._node(x.data.reshape(shape), (x,))

    def bwd():
        x._accum(out.grad.reshape(x.shape))

    return _record(out, bwd)


def conv2d(x: Tensor, k: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of NCHW input with FCKhKw kernels."""
    if x.data.ndim != 4 or k.data.ndim != 4:
        raise DimensionError(f"conv2d expects 4-d input/kernel, got {x.shape} / {k.shape}")
    n, c, h, w = x.shape
    f, kc, kh, kw = k.shape
    if kc != c:
        raise DimensionError(f"conv2d channel mismatch: input {c}, kernel {kc}")
    if kh > h + 2 * pad or kw > w + 2 * pad:
        raise DimensionError(f"kernel {kh}x{kw} larger than padded input {h + 2 * pad}x{w + 2 * pad}")
    if (h + 2 * pad - kh) % stride or (w + 2 * pad - kw) % stride:
        raise ConfigurationError(
            f"conv2d output extent not integral: input {h}x{w}, kernel {kh}x{kw}, "
            f"stride {stride}, pad {pad}"
        )
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    out = Tensor._node(np.einsum("nchwij,fcij->nfhw", win, k.data), (x, k))

    def bwd():
        gy = out.grad
        k._accum(np.einsum("nchwij,nfhw->fcij", win, gy))
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += np.einsum(
                    "nfhw,fc->nchw", gy, k.data[:, :, i, j]
                )
        if pad:
            gxp = gxp[:, :, pad : pad + h, pad : pad + w]
        x._accum(gxp)

    return _record(out, bwd)


def avg_pool2d(x: Tensor, size: int = 2) -> Tensor:
    if x.data.ndim != 4:
        raise DimensionError(f"avg_pool2d expects 4-d input, got {x.shape}")
    n, c, h, w = x.shape
    if h % size or w % size:
        raise ConfigurationError(f"pool size {size} does not divide spatial extent {h}x{w}")
    out_data = x.data.reshape(n, c, h // size, size, w // size, size).mean(axis=(3, 5))
    out = Tensor._node(out_data, (x,))

    def bwd():
        g = np.repeat(np.repeat(out.grad, size, axis=2), size, axis=3) / (size * size)
        x._accum(g)

    return _record(out, bwd)


def tsum(x: Tensor) -> Tensor:
    out = Tensor._node(np.asarray(x.data.sum()), (x,))

    def bwd():
        x._accum(np.full(x.shape, float(out.grad)))

    return _record(out, bwd)


def tmean(x: Tensor) -> Tensor:
    return scale(tsum(x), 1.0 / x.data.size)


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean of -log softmax(logits)[label], stabilized by max subtraction."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.data.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"expected logits [n, C] with n labels, got {logits.shape} / {labels.shape}")
    n, nc = logits.shape
    if labels.size and (labels.min() < 0 or labels.max() >= nc):
        raise IndexError(f"label out of range [0, {nc})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsumexp
    loss = -logp[np.arange(n), labels].mean()
    out = Tensor._node(np.asarray(loss), (logits,))

    def bwd():
        p = np.exp(logp)
        p[np.arange(n), labels] -= 1.0
        logits._accum(float(out.grad) * p / n)

    return _record(out, bwd)


def softmax(logits_data: np.ndarray) -> np.ndarray:
    """Plain (non-graph) softmax over the last axis, for evaluation code."""
    z = logits_data - logits_data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


# ---------------------------------------------------------------------------
# backward pass


def backward(sink: Tensor) -> None:
    """Populate grad slots of every tensor reachable from a scalar sink."""
    if sink.data.size != 1:
        raise ContractError(f"backward sink must be scalar, got shape {sink.shape}")
    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(sink, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._prev:
            if id(p) not in visited:
                stack.append((p, False))
    sink._accum(np.ones_like(sink.data))
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward()


def zero_grads(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.zero_grad()


def finite_difference_check(f: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-5) -> float:
    """Max relative error between analytic gradients and central differences.

    ``f`` rebuilds and returns the scalar loss from the current parameter
    values. Relative error is |analytic - numeric| / max(1, |analytic|).
    """
    if h <= 0:
        raise ConfigurationError("finite difference step h must be positive")
    zero_grads(params)
    backward(f())
    grads = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    max_err = 0.0
    for p, g in zip(params, grads):
        flat = p.data.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            with no_grad():
                fp = f().item()
            flat[i] = orig - h
            with no_grad():
                fm = f().item()
            flat[i] = orig
            numeric = (fp - fm) / (2.0 * h)
            err = abs(gflat[i] - numeric) / max(1.0, abs(gflat[i]))
            max_err = max(max_err, err)
    zero_grads(params)
    return max_err
