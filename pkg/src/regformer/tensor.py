"""Dense float tensors with reverse-mode automatic differentiation.

Arithmetic is float64 by default; :func:`precision` switches new tensors to
float32 for long training runs where speed matters more than the last bits.

The operation set is deliberately small and coarse-grained: attention
softmax, layer norm and the smoothed cross entropy are single fused nodes
with hand-written backward rules, which keeps the graph short enough that
a few-layer transformer trains at a usable speed on one CPU core.

Every op has a pure-numpy kernel (``*_np``) that the incremental decoder
reuses, so cached and full-sequence forwards share arithmetic exactly.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping

import numpy as np

from .errors import ConfigurationError, EmptyLossError, NonFiniteError, ShapeError

DTYPE = np.float64
MASK_VALUE = -1e9
LN_EPS = 1e-5

_grad_enabled = True
_dtype = DTYPE


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


def current_dtype():
    return _dtype


@contextlib.contextmanager
def precision(dtype):
    """Create tensors (and parameters) as ``dtype`` inside the block."""
    global _dtype
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ConfigurationError(f"unsupported precision {dtype}")
    prev = _dtype
    _dtype = dtype
    try:
        yield
    finally:
        _dtype = prev


class Tensor:
    """An n-dimensional float array that records how it was computed.

    Leaf tensors created with ``requires_grad=True`` carry a zero gradient
    buffer from the start, so parameters that do not influence a loss end up
    with an all-zero gradient after :func:`backward`.
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=_dtype)
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

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

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Iterable[Tensor], backward_fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    parents = tuple(parents)
    out.requires_grad = _grad_enabled and any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(p for p in parents if p.requires_grad)
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    # never in place: the same array may be handed to several parents
    if not t.requires_grad:
        return
    g = g.astype(t.data.dtype, copy=False)
    t.grad = g if t.grad is None else t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every reachable tensor."""
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
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
            if id(parent) not in seen:
                stack.append((parent, False))
    _accum(loss, np.ones_like(loss.data))
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def _bw(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))

    return _result(a.data + b.data, (a, b), _bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def _bw(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(-g, b.shape))

    return _result(a.data - b.data, (a, b), _bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def _bw(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g * a.data, b.shape))

    return _result(a.data * b.data, (a, b), _bw)


def relu(x: Tensor) -> Tensor:
    keep = x.data > 0
    return _result(np.where(keep, x.data, 0.0), (x,), lambda g: _accum(x, np.where(keep, g, 0.0)))


def tsum(x: Tensor) -> Tensor:
    return _result(np.asarray(x.data.sum()), (x,), lambda g: _accum(x, np.broadcast_to(g, x.shape).copy()))


def mean(x: Tensor) -> Tensor:
    n = x.data.size
    return _result(np.asarray(x.data.mean()), (x,), lambda g: _accum(x, np.full(x.shape, g / n)))


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None, train: bool) -> Tensor:
    """Inverted dropout; identity outside training."""
    if not train or rate <= 0.0:
        return x
    if rng is None:
        raise ConfigurationError("dropout in training mode needs an rng")
    keep = ((rng.random(x.shape) >= rate) / (1.0 - rate)).astype(x.data.dtype)
    return _result(x.data * keep, (x,), lambda g: _accum(x, g * keep))


# ---------------------------------------------------------------- shapes


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    return _result(x.data.reshape(shape), (x,), lambda g: _accum(x, g.reshape(x.shape)))


def transpose(x: Tensor, axes: tuple[int, ...]) -> Tensor:
    inverse = tuple(np.argsort(axes))
    return _result(x.data.transpose(axes), (x,), lambda g: _accum(x, g.transpose(inverse)))


def matmul(a, b) -> Tensor:
    """Matrix product with numpy broadcasting over leading dimensions."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} x {b.shape}")
    if b.ndim == 2 and a.ndim > 2:
        return _matmul_flat(a, b)

    def _bw(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))

    return _result(a.data @ b.data, (a, b), _bw)


def _matmul_flat(a: Tensor, b: Tensor) -> Tensor:
    # [..., k] @ [k, n] as one 2-D GEMM instead of a broadcast loop
    lead = a.shape[:-1]
    a2 = a.data.reshape(-1, a.shape[-1])
    out = (a2 @ b.data).reshape(*lead, b.shape[-1])

    def _bw(g):
        g2 = g.reshape(-1, b.shape[-1])
        if a.requires_grad:
            _accum(a, (g2 @ b.data.T).reshape(a.shape))
        if b.requires_grad:
            _accum(b, a2.T @ g2)

    return _result(out, (a, b), _bw)


def take_rows(x: Tensor, rows: np.ndarray) -> Tensor:
    """Select rows of ``x`` flattened to ``[-1, x.shape[-1]]``."""
    rows = np.asarray(rows, dtype=np.int64)
    width = x.shape[-1]

    def _bw(g):
        full = np.zeros((x.data.size // width, width), dtype=g.dtype)
        full[rows] = g
        _accum(x, full.reshape(x.shape))

    return _result(x.data.reshape(-1, width)[rows], (x,), _bw)


def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)

    def _bw(g):
        gw = np.zeros_like(weight.data)
        np.add.at(gw, ids.reshape(-1), g.reshape(-1, weight.shape[-1]))
        _accum(weight, gw)

    return _result(weight.data[ids], (weight,), _bw)


# ---------------------------------------------------------------- fused ops


def layer_norm_np(x: np.ndarray, gain: np.ndarray, bias: np.ndarray):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + LN_EPS)
    xhat = xc * inv
    return xhat * gain + bias, xhat, inv


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale and shift."""
    out, xhat, inv = layer_norm_np(x.data, gain.data, bias.data)

    def _bw(g):
        if x.requires_grad:
            gx = g * gain.data
            gx = inv * (gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
            _accum(x, gx)
        lead = tuple(range(g.ndim - 1))
        if gain.requires_grad:
            _accum(gain, (g * xhat).sum(axis=lead))
        if bias.requires_grad:
            _accum(bias, g.sum(axis=lead))

    return _result(out, (x, gain, bias), _bw)


def _mask_array(mask) -> np.ndarray:
    return np.asarray(getattr(mask, "visible", mask), dtype=bool)


def masked_softmax_np(scores: np.ndarray, visible: np.ndarray) -> np.ndarray:
    z = scores + np.where(visible, 0.0, MASK_VALUE).astype(scores.dtype, copy=False)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def masked_softmax(scores: Tensor, mask) -> Tensor:
    """Softmax over the last axis with -1e9 added to hidden cells first.

    ``mask`` is a boolean array (True = visible) broadcastable to ``scores``,
    or anything with a ``visible`` attribute holding one.
    """
    visible = _mask_array(mask)
    if not np.all(np.any(visible, axis=-1)):
        raise ConfigurationError("attention mask has a row with no visible column")
    p = masked_softmax_np(scores.data, visible)

    def _bw(g):
        _accum(scores, p * (g - (g * p).sum(axis=-1, keepdims=True)))

    return _result(p, (scores,), _bw)


def log_softmax_np(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def cross_entropy_label_smoothed(
    logits: Tensor,
    targets: np.ndarray,
    smoothing: float,
    ignore_mask: np.ndarray | None = None,
) -> Tensor:
    """Mean label-smoothed NLL over the positions not flagged in ``ignore_mask``.

    The smoothed target puts ``1 - smoothing`` on the gold id and spreads
    ``smoothing`` uniformly over the whole vocabulary. Ignored rows get an
    exactly-zero gradient.
    """
    if logits.ndim != 2:
        raise ShapeError(f"logits must be [T, V], got {logits.shape}")
    n_rows, vocab = logits.shape
    targets = np.asarray(targets, dtype=np.int64)
    if targets.shape != (n_rows,):
        raise ShapeError(f"targets shape {targets.shape} does not match logits {logits.shape}")
    keep = np.ones(n_rows, bool) if ignore_mask is None else ~np.asarray(ignore_mask, bool)
    n = int(keep.sum())
    if n == 0:
        raise EmptyLossError("every position is ignored; the loss is empty")
    safe_targets = np.where(keep, targets, 0)
    if np.any(safe_targets < 0) or np.any(safe_targets >= vocab):
        raise ShapeError(f"target ids must lie in [0, {vocab})")

    logp = log_softmax_np(logits.data)
    rows = np.arange(n_rows)
    nll = -logp[rows, safe_targets]
    smooth = -logp.mean(axis=-1)
    per_row = (1.0 - smoothing) * nll + smoothing * smooth
    loss = np.where(keep, per_row, 0.0).sum() / n

    def _bw(g):
        q = np.full((n_rows, vocab), smoothing / vocab)
        q[rows, safe_targets] += 1.0 - smoothing
        grad = (np.exp(logp) - q) * (g / n)
        _accum(logits, np.where(keep[:, None], grad, 0.0))

    return _result(np.asarray(loss), (logits,), _bw)


# ---------------------------------------------------------------- positions


def sinusoidal_positions(offset: int, count: int, d: int) -> np.ndarray:
    """Interleaved sin/cos encodings for absolute positions offset..offset+count-1."""
    if d % 2:
        raise ConfigurationError(f"sinusoidal encoding needs an even width, got {d}")
    pos = np.arange(offset, offset + count, dtype=np.float64)[:, None]
    freq = 1.0 / np.power(10000.0, np.arange(0, d, 2, dtype=np.float64) / d)
    out = np.empty((count, d), dtype=_dtype)
    out[:, 0::2] = np.sin(pos * freq)
    out[:, 1::2] = np.cos(pos * freq)
    return out


# ---------------------------------------------------------------- optimizer


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    beta1: float = 0.9
    beta2: float = 0.98
    epsilon: float = 1e-9


def adam_step(
    params: Mapping[str, Tensor],
    grads: Mapping[str, np.ndarray],
    state: AdamState,
    lr: float,
) -> None:
    """One bias-corrected Adam update, in place on ``params`` and ``state``."""
    if lr <= 0:
        raise ConfigurationError(f"learning rate must be positive, got {lr}")
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for parameter {name!r}")
        if g.shape != params[name].shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter {name!r} shape {params[name].shape}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, g in grads.items():
        p = params[name]
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1.0 - b1) * g if m is None else b1 * m + (1.0 - b1) * g
        v = (1.0 - b2) * (g * g) if v is None else b2 * v + (1.0 - b2) * (g * g)
        state.m[name] = m
        state.v[name] = v
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + state.epsilon)
