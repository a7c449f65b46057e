"""Dense tensors with reverse-mode automatic differentiation.

The op set is deliberately small: exactly what a joint feature/label token
encoder needs. Values are row-major numpy buffers in one of two run-level
float widths (32-bit for training speed, 64-bit for gradient verification).
Operations executed inside a ``with Tape():`` block are recorded in
execution order; replaying that record backward visits nodes in reverse
topological order and accumulates gradients into every ``requires_grad``
leaf. ``grad_check`` compares those gradients against central finite
differences.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np

from .errors import (
    ConfigurationError,
    NumericsError,
    ShapeMismatchError,
    TapeStateError,
)

_FLOAT_DTYPES = {"float32": np.dtype(np.float32), "float64": np.dtype(np.float64)}

_state = threading.local()


def set_default_dtype(name: str) -> None:
    """Select the run-level float width ("float32" or "float64")."""
    if name not in _FLOAT_DTYPES:
        raise ConfigurationError(f"unknown dtype {name!r}; expected one of {sorted(_FLOAT_DTYPES)}")
    _state.dtype = _FLOAT_DTYPES[name]


def get_default_dtype() -> np.dtype:
    return getattr(_state, "dtype", _FLOAT_DTYPES["float32"])


@contextmanager
def using_dtype(name: str):
    """Temporarily switch the default float width (used by verification runs)."""
    previous = get_default_dtype()
    set_default_dtype(name)
    try:
        yield
    finally:
        _state.dtype = previous


class Tensor:
    """A dense row-major array plus an optional accumulated gradient."""

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(get_default_dtype())
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        """Same buffer, no gradient tracking."""
        return Tensor(self.data, requires_grad=False, name=self.name)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{tag})"


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def parameter(data, name: str | None = None) -> Tensor:
    """A trainable leaf."""
    return Tensor(data, requires_grad=True, name=name)


class _TapeOp:
    __slots__ = ("output", "inputs", "backward")

    def __init__(self, output, inputs, backward):
        self.output = output
        self.inputs = inputs
        self.backward = backward


class Tape:
    """Execution-ordered record of primitive ops for one backward pass.

    Execution order is a topological order of the data-flow graph, so
    iterating the record in reverse visits every node after all of its
    consumers. A tape is single-use: ``backward`` marks it consumed.
    """

    def __init__(self):
        self._ops: list[_TapeOp] = []
        self._consumed = False
        self._entered = False

    def __enter__(self):
        stack = _tape_stack()
        stack.append(self)
        self._entered = True
        return self

    def __exit__(self, exc_type, exc, tb):
        _tape_stack().pop()
        return False

    def __len__(self):
        return len(self._ops)

    def backward(self, loss: Tensor, grad: np.ndarray | None = None) -> None:
        """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

        ``loss`` must be a scalar produced on this tape; a non-scalar target
        is allowed only with an explicit seed ``grad`` (used by staged
        composition checks).
        """
        if self._consumed:
            raise TapeStateError("tape already consumed; build a fresh tape per backward pass")
        if not any(op.output is loss for op in self._ops):
            raise TapeStateError("backward target was not produced on this tape")
        if grad is None:
            if loss.data.size != 1:
                raise TapeStateError(f"backward target must be scalar, got shape {loss.data.shape}")
            grad = np.ones_like(loss.data)
        else:
            grad = np.asarray(grad, dtype=loss.data.dtype)
            if grad.shape != loss.data.shape:
                raise ShapeMismatchError(f"seed gradient shape {grad.shape} != target shape {loss.data.shape}")
        self._consumed = True
        loss.grad = grad
        for op in reversed(self._ops):
            upstream = op.output.grad
            if upstream is None:
                continue
            for inp, g in zip(op.inputs, op.backward(upstream)):
                if g is None or not isinstance(inp, Tensor) or not inp.requires_grad:
                    continue
                if inp.grad is None:
                    inp.grad = g
                else:
                    inp.grad = inp.grad + g


def _tape_stack() -> list:
    stack = getattr(_state, "tapes", None)
    if stack is None:
        stack = []
        _state.tapes = stack
    return stack


def _active_tape() -> Tape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


def _record(out: Tensor, inputs: tuple, backward) -> Tensor:
    tape = _active_tape()
    if tape is None:
        return out
    if not any(isinstance(t, Tensor) and t.requires_grad for t in inputs):
        return out
    out.requires_grad = True
    tape._ops.append(_TapeOp(out, inputs, backward))
    return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def zero_grads(tensors) -> None:
    """Drop accumulated gradients (dict of tensors or iterable)."""
    values = tensors.values() if isinstance(tensors, dict) else tensors
    for t in values:
        t.grad = None


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    """Elementwise sum; ``b`` may also be a last-dimension bias vector."""
    a, b = _as_tensor(a), _as_tensor(b)
    bias = False
    if a.shape != b.shape:
        if b.ndim == 1 and a.ndim >= 1 and b.shape[0] == a.shape[-1]:
            bias = True
        else:
            raise ShapeMismatchError(f"add: shapes {a.shape} and {b.shape} are incompatible")
    out = Tensor(a.data + b.data)

    def backward(g):
        gb = g.reshape(-1, b.shape[0]).sum(axis=0) if bias else g
        return g, gb

    return _record(out, (a, b), backward)


def mul(a, b) -> Tensor:
    """Elementwise product; ``b`` may broadcast over leading axes of ``a``."""
    a, b = _as_tensor(a), _as_tensor(b)
    trailing = False
    if a.shape != b.shape:
        if b.ndim <= a.ndim and b.shape == a.shape[a.ndim - b.ndim:]:
            trailing = True
        else:
            raise ShapeMismatchError(f"mul: shapes {a.shape} and {b.shape} are incompatible")
    out = Tensor(a.data * b.data)

    def backward(g):
        ga = g * b.data
        gb = g * a.data
        if trailing:
            gb = gb.reshape((-1,) + b.shape).sum(axis=0)
        return ga, gb

    return _record(out, (a, b), backward)


def scale(a, c: float) -> Tensor:
    """Multiply by a python scalar constant."""
    a = _as_tensor(a)
    factor = a.data.dtype.type(c)
    out = Tensor(a.data * factor)
    return _record(out, (a,), lambda g: (g * factor,))


def matmul(a, b) -> Tensor:
    """Matrix product.

    Supported operand ranks: 2-D x 2-D, N-D x 2-D (shared right matrix),
    and N-D x N-D with identical leading (batch) dimensions.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise ShapeMismatchError(f"matmul needs rank >= 2 operands, got {ad.shape} and {bd.shape}")
    if ad.shape[-1] != bd.shape[-2]:
        raise ShapeMismatchError(f"matmul: inner dimensions disagree for {ad.shape} and {bd.shape}")
    if bd.ndim == 2:
        mode = "right2d"
    elif ad.shape[:-2] == bd.shape[:-2]:
        mode = "batched"
    else:
        raise ShapeMismatchError(f"matmul: leading dimensions disagree for {ad.shape} and {bd.shape}")
    out = Tensor(ad @ bd)

    def backward(g):
        if mode == "right2d":
            ga = g @ bd.T
            k, n = bd.shape
            gb = ad.reshape(-1, k).T @ g.reshape(-1, n)
        else:
            ga = g @ np.swapaxes(bd, -1, -2)
            gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _record(out, (a, b), backward)


def permute(a, axes: tuple) -> Tensor:
    a = _as_tensor(a)
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeMismatchError(f"permute: axes {axes} are not a permutation of rank {a.ndim}")
    inverse = tuple(np.argsort(axes))
    out = Tensor(a.data.transpose(axes))
    return _record(out, (a,), lambda g: (g.transpose(inverse),))


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    original = a.shape
    out = Tensor(a.data.reshape(shape))
    return _record(out, (a,), lambda g: (g.reshape(original),))


def concat(parts, axis: int = 0) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    if not parts:
        raise ShapeMismatchError("concat of zero tensors")
    sizes = [p.shape[axis] for p in parts]
    out = Tensor(np.concatenate([p.data for p in parts], axis=axis))
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        slicer = [slice(None)] * g.ndim
        grads = []
        for i in range(len(parts)):
            slicer[axis] = slice(offsets[i], offsets[i + 1])
            grads.append(g[tuple(slicer)])
        return tuple(grads)

    return _record(out, tuple(parts), backward)


def narrow(a, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice along one axis."""
    a = _as_tensor(a)
    if start < 0 or start + length > a.shape[axis]:
        raise ShapeMismatchError(f"narrow [{start}:{start + length}] out of range for axis {axis} of {a.shape}")
    slicer = [slice(None)] * a.ndim
    slicer[axis] = slice(start, start + length)
    slicer = tuple(slicer)
    out = Tensor(a.data[slicer].copy())

    def backward(g):
        full = np.zeros_like(a.data)
        full[slicer] = g
        return (full,)

    return _record(out, (a,), backward)


def gather_rows(table, indices) -> Tensor:
    """Select rows of a 2-D table; ``indices`` may have any shape."""
    table = _as_tensor(table)
    if table.ndim != 2:
        raise ShapeMismatchError(f"gather_rows expects a 2-D table, got {table.shape}")
    idx = np.asarray(indices)
    if not np.issubdtype(idx.dtype, np.integer):
        raise ShapeMismatchError("gather_rows indices must be integers")
    out = Tensor(table.data[idx])

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx, g)
        return (gt,)

    return _record(out, (table,), backward)


def softmax_lastdim(a) -> Tensor:
    """Softmax over the last dimension, computed with max subtraction."""
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(s)

    def backward(g):
        inner = (g * s).sum(axis=-1, keepdims=True)
        return (s * (g - inner),)

    return _record(out, (a,), backward)


LAYER_NORM_EPS = 1e-5


def layer_norm(a, gamma, beta, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalize each last-dimension slice to zero mean / unit variance, then affine."""
    a, gamma, beta = _as_tensor(a), _as_tensor(gamma), _as_tensor(beta)
    d = a.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeMismatchError(f"layer_norm: gamma/beta must have shape ({d},), got {gamma.shape} and {beta.shape}")
    mu = a.data.mean(axis=-1, keepdims=True)
    centered = a.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + a.data.dtype.type(eps))
    xhat = centered * inv
    out = Tensor(xhat * gamma.data + beta.data)

    def backward(g):
        dxhat = g * gamma.data
        dgamma = (g * xhat).reshape(-1, d).sum(axis=0)
        dbeta = g.reshape(-1, d).sum(axis=0)
        da = inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return da, dgamma, dbeta

    return _record(out, (a, gamma, beta), backward)


def relu(a) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(np.maximum(a.data, 0))
    return _record(out, (a,), lambda g: (g * (a.data > 0),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # Stable on both tails: exp of a non-positive argument only.
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    s = _sigmoid(a.data)
    out = Tensor(s)
    return _record(out, (a,), lambda g: (g * s * (1.0 - s),))


def dropout(a, p: float, train: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Zero each element with probability ``p`` and rescale survivors.

    In eval mode (or at p == 0) this is exactly the identity and nothing is
    recorded. Train mode requires an explicit generator so masks are
    reproducible.
    """
    if not 0.0 <= p < 1.0:
        raise ConfigurationError(f"dropout probability must be in [0, 1), got {p}")
    a = _as_tensor(a)
    if not train or p == 0.0:
        return a
    if rng is None:
        raise ConfigurationError("dropout in train mode needs an explicit rng")
    keep = (rng.random(a.shape) >= p).astype(a.data.dtype)
    factor = a.data.dtype.type(1.0 / (1.0 - p))
    mask = keep * factor
    out = Tensor(a.data * mask)
    return _record(out, (a,), lambda g: (g * mask,))


def sum_all(a) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(np.asarray(a.data.sum()))
    return _record(out, (a,), lambda g: (np.broadcast_to(g, a.shape).astype(a.data.dtype, copy=False),))


def sum_axes(a, axes: tuple, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    axes = tuple(ax % a.ndim for ax in axes)
    out = Tensor(a.data.sum(axis=axes, keepdims=keepdims))
    kept_shape = tuple(1 if i in axes else n for i, n in enumerate(a.shape))

    def backward(g):
        return (np.broadcast_to(g.reshape(kept_shape), a.shape).astype(a.data.dtype, copy=False),)

    return _record(out, (a,), backward)


def bce_with_logits(logits, targets, weights) -> Tensor:
    """Weighted sum of per-element binary cross entropies, from logits.

    ``targets`` and ``weights`` are plain arrays (no gradient). Elements
    with weight zero contribute exactly zero loss and exactly zero
    gradient, which is what makes loss masking exact. The per-element
    value is the standard stable form max(z,0) - z*y + log(1 + e^-|z|),
    identical to -[y log p + (1-y) log(1-p)] at p = sigmoid(z).
    """
    logits = _as_tensor(logits)
    y = np.asarray(targets, dtype=logits.data.dtype)
    w = np.asarray(weights, dtype=logits.data.dtype)
    if y.shape != logits.shape or w.shape != logits.shape:
        raise ShapeMismatchError(
            f"bce_with_logits: logits {logits.shape}, targets {y.shape}, weights {w.shape} must match"
        )
    z = logits.data
    elem = np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))
    out = Tensor(np.asarray((w * elem).sum()))

    def backward(g):
        return (g * w * (_sigmoid(z) - y), None, None)

    return _record(out, (logits, targets, weights), backward)


def im2col(a, kh: int, kw: int) -> Tensor:
    """Unfold [B, C, H, W] into [B, H*W, C*kh*kw] patches (stride 1, same padding).

    Odd kernel sides only; padding is zeros of width k//2 so the spatial
    extent is preserved.
    """
    a = _as_tensor(a)
    if a.ndim != 4:
        raise ShapeMismatchError(f"im2col expects [B, C, H, W], got {a.shape}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ConfigurationError(f"im2col kernel sides must be odd, got {kh}x{kw}")
    b_, c, h, w = a.shape
    ph, pw = kh // 2, kw // 2
    padded = np.pad(a.data, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    windows = np.lib.stride_tricks.sliding_window_view(padded, (kh, kw), axis=(2, 3))
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(b_, h * w, c * kh * kw)
    out = Tensor(np.ascontiguousarray(cols))

    def backward(g):
        gw = g.reshape(b_, h, w, c, kh, kw).transpose(0, 3, 1, 2, 4, 5)
        gpad = np.zeros_like(padded)
        for i in range(kh):
            for j in range(kw):
                gpad[:, :, i:i + h, j:j + w] += gw[:, :, :, :, i, j]
        return (gpad[:, :, ph:ph + h, pw:pw + w],)

    return _record(out, (a,), backward)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    """Worst relative error per parameter tensor, and overall pass/fail.

    Errors are measured as |analytic - numeric| / max(1, |analytic|,
    |numeric|), i.e. relative at large magnitudes and absolute near zero.
    """

    per_parameter: dict
    max_rel_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance

    def worst(self) -> tuple:
        name = max(self.per_parameter, key=self.per_parameter.get)
        return name, self.per_parameter[name]


def grad_check(f, params: dict, step: float = 1e-6, tolerance: float = 1e-5) -> GradCheckReport:
    """Compare analytic gradients of ``f()`` against central differences.

    ``f`` must be a deterministic zero-argument callable returning a scalar
    Tensor computed from the tensors in ``params`` (name -> Tensor). It is
    invoked once under a tape for the analytic pass and twice per parameter
    element for the numeric pass.
    """
    if step <= 0:
        raise ConfigurationError(f"finite-difference step must be positive, got {step}")
    zero_grads(params)
    with Tape() as tape:
        loss = f()
    if not np.isfinite(loss.data).all():
        raise NumericsError("grad_check: objective is non-finite")
    if any(op.output is loss for op in tape._ops):
        tape.backward(loss)
    elif loss.data.size != 1:
        raise TapeStateError(f"grad_check objective must be scalar, got shape {loss.data.shape}")
    # else: nothing reached the tape; analytic gradients are all zero
    analytic = {
        name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
        for name, p in params.items()
    }
    zero_grads(params)

    per_parameter = {}
    for name, p in params.items():
        flat = p.data.reshape(-1)
        ana = analytic[name].reshape(-1)
        worst = 0.0
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + step
            hi = float(f().data)
            flat[i] = original - step
            lo = float(f().data)
            flat[i] = original
            if not (np.isfinite(hi) and np.isfinite(lo)):
                raise NumericsError(f"grad_check: non-finite objective while perturbing {name}[{i}]")
            numeric = (hi - lo) / (2.0 * step)
            denom = max(1.0, abs(ana[i]), abs(numeric))
            worst = max(worst, abs(ana[i] - numeric) / denom)
        per_parameter[name] = worst
    max_err = max(per_parameter.values()) if per_parameter else 0.0
    return GradCheckReport(per_parameter=per_parameter, max_rel_error=max_err, tolerance=tolerance)
