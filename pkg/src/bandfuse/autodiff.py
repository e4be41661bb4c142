"""Dense-tensor engine with reverse-mode automatic differentiation.

Tensors wrap numpy arrays (float32 for training, float64 for gradient
checking) and record a computation graph when ``requires_grad`` is set.
Reductions run in numpy's fixed row-major order, so forward results and
accumulated gradients are bitwise reproducible for a fixed seed.

Graph nodes are created by the free functions in this module; ``backward``
walks the graph once in reverse topological order and accumulates
vector-Jacobian products into leaf ``grad`` buffers.
"""

from __future__ import annotations

import contextlib
import logging
import math
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import NumericError, ParameterError, ShapeError, UsageError

log = logging.getLogger(__name__)

DEFAULT_DTYPE = np.float32

_grad_enabled = True
_finite_checks = False


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference mode)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def set_finite_checks(enabled: bool) -> None:
    """Toggle debug assertion that every op output is finite."""
    global _finite_checks
    _finite_checks = enabled


class Tensor:
    """A dense array plus optional autodiff bookkeeping."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name}{tag})"

    # operator sugar; library code mostly calls the module functions
    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    def __radd__(self, other):
        return add(_as_tensor(other, self.dtype), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self.dtype))

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other, self.dtype))

    def __rmul__(self, other):
        return mul(_as_tensor(other, self.dtype), self)

    def __truediv__(self, other):
        return div(self, _as_tensor(other, self.dtype))

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other, self.dtype))

    def __neg__(self):
        return neg(self)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes: Sequence[int]) -> "Tensor":
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False) -> "Tensor":
        return tmean(self, axis=axis, keepdims=keepdims)


def _as_tensor(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _node(data: np.ndarray, parents: tuple[Tensor, ...], vjp) -> Tensor:
    """Build an op output, recording the graph only when it is needed."""
    if _finite_checks and not np.all(np.isfinite(data)):
        raise NumericError("non-finite value in op output")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._vjp = vjp
    else:
        out.requires_grad = False
        out._parents = ()
        out._vjp = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise and structural ops


def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data
    return _node(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = a.data - b.data
    return _node(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def neg(a: Tensor) -> Tensor:
    return _node(-a.data, (a,), lambda g: (-g,))


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data

    def vjp(g):
        return (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape))

    return _node(out, (a, b), vjp)


def div(a: Tensor, b: Tensor) -> Tensor:
    out = a.data / b.data

    def vjp(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return (ga, gb)

    return _node(out, (a, b), vjp)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} x {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner-dim mismatch: {a.shape} x {b.shape}")
    # stacked input x 2D weight folds into one flat GEMM, both directions;
    # this also keeps the weight gradient free of huge batched temporaries
    flat_weight = b.ndim == 2 and a.ndim > 2
    if flat_weight:
        k, n = b.shape
        out = (a.data.reshape(-1, k) @ b.data).reshape(a.shape[:-1] + (n,))
    else:
        out = np.matmul(a.data, b.data)

    def vjp(g):
        if flat_weight:
            k, n = b.shape
            g2 = g.reshape(-1, n)
            ga = (g2 @ b.data.T).reshape(a.shape)
            gb = a.data.reshape(-1, k).T @ g2
            return (ga, gb)
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return (ga, gb)

    return _node(out, (a, b), vjp)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    out = a.data.reshape(shape)
    return _node(out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = np.transpose(a.data, axes)
    return _node(out, (a,), lambda g: (np.transpose(g, inv),))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    datas = [t.data for t in tensors]
    out = np.concatenate(datas, axis=axis)
    sizes = [d.shape[axis] for d in datas]
    splits = list(np.cumsum(sizes[:-1]))

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _node(out, tuple(tensors), vjp)


def query_logits(keys: Tensor, query: Tensor, scale: float) -> Tensor:
    """Per-head dot products of a learned query with key tokens.

    keys (B, P, n, h, dh) x query (h, dh) -> logits (B, P, n, h), scaled.
    """
    out = np.einsum("bpnhd,hd->bpnh", keys.data, query.data) * scale

    def vjp(g):
        gs = g * scale
        gk = np.einsum("bpnh,hd->bpnhd", gs, query.data)
        gq = np.einsum("bpnh,bpnhd->hd", gs, keys.data)
        return (gk, gq)

    return _node(out, (keys, query), vjp)


def weighted_pool(scores: Tensor, values: Tensor) -> Tensor:
    """Collapse the fused axis: scores (B, P, n, h) x values
    (B, P, n, h, dv) -> (B, P, h, dv)."""
    out = np.einsum("bpnh,bpnhd->bphd", scores.data, values.data)

    def vjp(g):
        gscores = (g[:, :, None, :, :] * values.data).sum(axis=-1)
        gvalues = np.einsum("bpnh,bphd->bpnhd", scores.data, g)
        return (gscores, gvalues)

    return _node(out, (scores, values), vjp)


def slice_axis0(a: Tensor, index: int) -> Tensor:
    """Take a[index] along axis 0 (the axis is dropped)."""
    out = a.data[index]

    def vjp(g):
        ga = np.zeros_like(a.data)
        ga[index] = g
        return (ga,)

    return _node(out, (a,), vjp)


def where(mask: np.ndarray, a: Tensor, b: Tensor) -> Tensor:
    """Select ``a`` where mask is true else ``b``; mask is a constant."""
    mask = np.asarray(mask, dtype=bool)
    out = np.where(mask, a.data, b.data)

    def vjp(g):
        ga = _unbroadcast(np.where(mask, g, 0.0), a.shape)
        gb = _unbroadcast(np.where(mask, 0.0, g), b.shape)
        return (ga, gb)

    return _node(out, (a, b), vjp)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        # read-only broadcast views are safe: accumulation never mutates
        if axis is None:
            return (np.broadcast_to(g, a.shape),)
        ax = axis if isinstance(axis, tuple) else (axis,)
        if not keepdims:
            g = np.expand_dims(g, ax)
        return (np.broadcast_to(g, a.shape),)

    return _node(out, (a,), vjp)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size if axis is None else np.prod(
        [a.shape[i] for i in (axis if isinstance(axis, tuple) else (axis,))]
    )

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g / count, a.shape),)
        ax = axis if isinstance(axis, tuple) else (axis,)
        if not keepdims:
            g = np.expand_dims(g, ax)
        return (np.broadcast_to(g / count, a.shape),)

    return _node(out, (a,), vjp)


# ---------------------------------------------------------------------------
# nonlinearities

_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """Gaussian error linear unit (tanh approximation)."""
    x = a.data
    x2 = x * x
    t = np.tanh(_GELU_C * (x + 0.044715 * (x2 * x)))
    out = 0.5 * x * (1.0 + t)

    def vjp(g):
        dinner = _GELU_C * (1.0 + 0.134145 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _node(out, (a,), vjp)


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _node(out, (a,), lambda g: (g * out * (1.0 - out),))


def softmax(a: Tensor, axis: int = -1, temperature: float = 1.0) -> Tensor:
    """Temperature softmax with max-subtraction for stability."""
    if temperature <= 0:
        raise ParameterError(f"softmax temperature must be > 0, got {temperature}")
    z = a.data / temperature
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot) / temperature,)

    return _node(out, (a,), vjp)


def log_softmax(a: Tensor, axis: int = -1, temperature: float = 1.0) -> Tensor:
    if temperature <= 0:
        raise ParameterError(f"softmax temperature must be > 0, got {temperature}")
    z = a.data / temperature
    z = z - z.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def vjp(g):
        sm = np.exp(out)
        return ((g - sm * g.sum(axis=axis, keepdims=True)) / temperature,)

    return _node(out, (a,), vjp)


def layer_norm(a: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the trailing axis to zero mean / unit variance, then affine."""
    if eps <= 0:
        raise ParameterError(f"layer_norm eps must be > 0, got {eps}")
    d = a.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(
            f"layer_norm affine shapes {gamma.shape}/{beta.shape} do not match feature dim ({d},)"
        )
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = gamma.data * xhat + beta.data

    def vjp(g):
        gxhat = g * gamma.data
        gx = inv * (
            gxhat
            - gxhat.mean(axis=-1, keepdims=True)
            - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True)
        )
        lead = tuple(range(g.ndim - 1))
        ggamma = (g * xhat).sum(axis=lead)
        gbeta = g.sum(axis=lead)
        return (gx, ggamma, gbeta)

    return _node(out, (a, gamma, beta), vjp)


def l2_normalize(a: Tensor, axis: int = -1) -> Tensor:
    """Divide by the L2 norm along ``axis``.

    Rows with exactly zero norm fall back to a uniform unit vector (a
    constant, so they carry no gradient); the event is logged.
    """
    x = a.data
    norm = np.sqrt((x * x).sum(axis=axis, keepdims=True))
    zero = norm == 0.0
    if np.any(zero):
        log.warning("l2_normalize: %d zero-norm rows replaced by uniform unit vectors", int(zero.sum()))
    d = x.shape[axis]
    uniform = np.full_like(x, 1.0 / math.sqrt(d))
    safe = np.where(zero, 1.0, norm)
    y = np.where(zero, uniform, x / safe)

    def vjp(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        gx = (g - y * dot) / safe
        return (np.where(zero, 0.0, gx),)

    return _node(y, (a,), vjp)


# ---------------------------------------------------------------------------
# losses


def bce_with_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Elementwise binary cross-entropy on logits, numerically stable."""
    x = logits.data
    t = np.asarray(targets, dtype=x.dtype)
    if t.shape != x.shape:
        raise ShapeError(f"bce targets shape {t.shape} != logits shape {x.shape}")
    out = np.maximum(x, 0.0) - x * t + np.log1p(np.exp(-np.abs(x)))

    def vjp(g):
        sig = np.empty_like(x)
        pos = x >= 0
        neg_ = ~pos
        sig[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[neg_])
        sig[neg_] = ex / (1.0 + ex)
        return (g * (sig - t),)

    return _node(out, (logits,), vjp)


def cross_entropy(target_dist: np.ndarray, scores: Tensor, axis: int = -1,
                  temperature: float = 1.0) -> Tensor:
    """CE between a fixed target distribution and softmax(scores / T)."""
    logp = log_softmax(scores, axis=axis, temperature=temperature)
    q = Tensor(np.asarray(target_dist, dtype=scores.dtype))
    return neg(tsum(mul(q, logp), axis=axis))


# ---------------------------------------------------------------------------
# spatial ops for the segmentation decoder


def conv2d_3x3(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Same-padded 3x3 convolution, channels-last (B, H, W, C)."""
    if x.ndim != 4 or w.shape[:2] != (3, 3) or w.shape[2] != x.shape[3]:
        raise ShapeError(f"conv2d_3x3 shapes: x {x.shape}, w {w.shape}")
    bsz, h, wd, _ = x.shape
    xp = np.pad(x.data, ((0, 0), (1, 1), (1, 1), (0, 0)))
    out = None
    for i in range(3):
        for j in range(3):
            part = np.matmul(xp[:, i:i + h, j:j + wd, :], w.data[i, j])
            out = part if out is None else out + part
    if b is not None:
        out = out + b.data

    def vjp(g):
        gxp = np.zeros_like(xp)
        gw = np.zeros_like(w.data)
        for i in range(3):
            for j in range(3):
                gxp[:, i:i + h, j:j + wd, :] += np.matmul(g, w.data[i, j].T)
                gw[i, j] = np.einsum("bhwc,bhwd->cd", xp[:, i:i + h, j:j + wd, :], g)
        grads = [gxp[:, 1:1 + h, 1:1 + wd, :], gw]
        if b is not None:
            grads.append(g.sum(axis=(0, 1, 2)))
        return tuple(grads)

    parents = (x, w) if b is None else (x, w, b)
    return _node(out, parents, vjp)


def upsample_nearest(x: Tensor, scale: int) -> Tensor:
    """Integer nearest-neighbour upsampling on (B, H, W, C)."""
    if x.ndim != 4:
        raise ShapeError(f"upsample expects rank-4 input, got {x.shape}")
    k = int(scale)
    out = np.repeat(np.repeat(x.data, k, axis=1), k, axis=2)
    bsz, h, wd, c = x.shape

    def vjp(g):
        return (g.reshape(bsz, h, k, wd, k, c).sum(axis=(2, 4)),)

    return _node(out, (x,), vjp)


# ---------------------------------------------------------------------------
# backward pass


def backward(loss: Tensor, store=None) -> None:
    """Accumulate gradients of a scalar ``loss`` into leaf tensors.

    Visits nodes in reverse topological order (fixed by construction
    order, so accumulation is deterministic). When ``store`` (a
    ParamStore) is given, parameters that did not participate in the
    graph receive zero gradients, per the backward contract.
    """
    if loss.data.size != 1:
        raise UsageError(f"backward requires a scalar loss, got shape {loss.shape}")
    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topo):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._vjp is None:
            node.grad = g if node.grad is None else node.grad + g
            continue
        parent_grads = node._vjp(g)
        for p, pg in zip(node._parents, parent_grads):
            if not p.requires_grad or pg is None:
                continue
            acc = grads.get(id(p))
            grads[id(p)] = pg if acc is None else acc + pg

    if store is not None:
        for param in store.tensors():
            if param.grad is None:
                param.grad = np.zeros_like(param.data)
