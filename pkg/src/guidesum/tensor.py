"""Dense tensors with tape-based reverse-mode differentiation.

Every differentiable operation records its parents and a closure that maps
the gradient of its output to gradients of its inputs. ``backward`` walks
that tape in reverse topological order and then releases it, so each graph
can be differentiated exactly once.

Arrays are numpy arrays. Two precisions are used: float64 for gradient
checks and metric oracles, float32 for training.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DimensionError, GraphError, GuardError, InputError, NumericError, UndefinedLossError

_DTYPES = {32: np.float32, 64: np.float64}
_default_dtype = np.float64
_grad_enabled = True


def dtype_for(bits: int):
    try:
        return _DTYPES[int(bits)]
    except (KeyError, ValueError):
        raise InputError(f"precision must be 32 or 64, got {bits!r}") from None


def get_default_dtype():
    return _default_dtype


def set_default_dtype(bits: int) -> None:
    global _default_dtype
    _default_dtype = dtype_for(bits)


@contextlib.contextmanager
def precision(bits: int):
    global _default_dtype
    prev = _default_dtype
    _default_dtype = dtype_for(bits)
    try:
        yield
    finally:
        _default_dtype = prev


@contextlib.contextmanager
def no_grad():
    """Run operations without recording them on the tape."""
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
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_consumed")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        if dtype is None:
            if isinstance(data, np.ndarray) and data.dtype.kind == "f":
                dtype = data.dtype
            else:
                dtype = _default_dtype
        self.data = np.asarray(data, dtype=dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._consumed = False

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
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label}, requires_grad={self.requires_grad})"

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

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if dtype is None:
        dtype = _default_dtype
    return Tensor(np.asarray(x, dtype=dtype))


def _wrap(data: np.ndarray) -> Tensor:
    # skips the dtype resolution in __init__; data is already a float array
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = False
    out.name = None
    out._parents = ()
    out._backward = None
    out._consumed = False
    return out


def _result(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    out = _wrap(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if type(b) is not Tensor:
        b = _wrap(np.asarray(b, dtype=a.dtype))
    elif type(a) is not Tensor:
        a = _wrap(np.asarray(a, dtype=b.dtype))
    return a, b


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = _pair(a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(a.data * b.data, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = _pair(a, b)

    def bw(g):
        ga = g / b.data
        gb = -g * a.data / (b.data * b.data)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _result(a.data / b.data, (a, b), bw)


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _result(y, (x,), lambda g: (g * y,))


def log(x: Tensor) -> Tensor:
    return _result(np.log(x.data), (x,), lambda g: (g / x.data,))


def relu(x: Tensor) -> Tensor:
    on = x.data > 0
    return _result(np.where(on, x.data, 0).astype(x.dtype), (x,), lambda g: (g * on,))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """Tanh approximation of GELU."""
    v = x.data
    inner = _GELU_C * (v + 0.044715 * v**3)
    t = np.tanh(inner)
    y = 0.5 * v * (1.0 + t)

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * v**2)
        return (g * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * dinner),)

    return _result(y, (x,), bw)


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None, training: bool = True) -> Tensor:
    if not training or rate <= 0.0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    return _result(x.data * keep, (x,), lambda g: (g * keep,))


# ------------------------------------------------------------------- shaping


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))

    def bw(g):
        return (np.transpose(g, np.argsort(axes)),)

    return _result(np.transpose(x.data, axes), (x,), bw)


def swapaxes(x: Tensor, a1: int, a2: int) -> Tensor:
    return _result(np.swapaxes(x.data, a1, a2), (x,), lambda g: (np.swapaxes(g, a1, a2),))


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _result(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), bw)


def tmean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return tsum(x, axis, keepdims) * (1.0 / float(n))


def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise InputError(f"token id out of range [0, {weight.shape[0]})")

    def bw(g):
        gw = np.zeros_like(weight.data)
        np.add.at(gw, ids.reshape(-1), g.reshape(-1, weight.shape[1]))
        return (gw,)

    return _result(weight.data[ids], (weight,), bw)


# -------------------------------------------------------------------- linear


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes, broadcasting leading axes."""
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs at least 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        try:
            np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
        except ValueError:
            raise DimensionError(f"matmul batch dimensions differ: {a.shape} x {b.shape}") from None

    def bw(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.ndim == 2 and a.ndim > 2:
            q = a.shape[-1]
            gb = a.data.reshape(-1, q).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _result(a.data @ b.data, (a, b), bw)


def matmul_nt(a: Tensor, b: Tensor) -> Tensor:
    """``a @ swapaxes(b, -1, -2)`` for same-rank operands, as one tape entry."""
    if a.ndim != b.ndim or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-1]:
        raise DimensionError(f"matmul_nt operands do not align: {a.shape} and {b.shape}")

    def bw(g):
        return g @ b.data, np.swapaxes(g, -1, -2) @ a.data

    return _result(a.data @ np.swapaxes(b.data, -1, -2), (a, b), bw)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` with a 2-D weight applied over the last axis of ``x``."""
    if weight.ndim != 2 or x.shape[-1] != weight.shape[0]:
        raise DimensionError(f"linear: input {x.shape} does not match weight {weight.shape}")
    y = x.data @ weight.data
    if bias is not None:
        y = y + bias.data

    def bw(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = g @ weight.data.T
        gw = x.data.reshape(-1, x.shape[-1]).T @ g2
        return (gx, gw) if bias is None else (gx, gw, g2.sum(axis=0))

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result(y, parents, bw)


def split_heads(x: Tensor, n_heads: int) -> Tensor:
    """(batch, len, d) -> (batch, heads, len, d / heads)."""
    b, n, d = x.shape
    if d % n_heads:
        raise DimensionError(f"width {d} is not divisible by {n_heads} heads")
    y = x.data.reshape(b, n, n_heads, d // n_heads).transpose(0, 2, 1, 3)
    return _result(y, (x,), lambda g: (g.transpose(0, 2, 1, 3).reshape(b, n, d),))


def merge_heads(x: Tensor) -> Tensor:
    """(batch, heads, len, d_head) -> (batch, len, heads * d_head)."""
    b, h, n, dh = x.shape
    y = x.data.transpose(0, 2, 1, 3).reshape(b, n, h * dh)
    return _result(y, (x,), lambda g: (g.reshape(b, n, h, dh).transpose(0, 2, 1, 3),))


# ------------------------------------------------------------- normalization


def softmax(x: Tensor, axis: int = -1, mask: np.ndarray | None = None, scale: float = 1.0) -> Tensor:
    """Softmax of ``scale * x`` along ``axis``; ``mask`` (True = keep) sends dropped logits to -inf."""
    z = x.data * scale if scale != 1.0 else x.data
    if mask is not None:
        z = np.where(mask, z, -np.inf)
    top = z.max(axis=axis, keepdims=True)
    if mask is not None and np.isneginf(top).any():
        raise GuardError("attention row has no attendable key")
    z = z - top
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        gx = y * (g - (g * y).sum(axis=axis, keepdims=True))
        return (gx * scale if scale != 1.0 else gx,)

    return _result(y, (x,), bw)


def softmax_rows(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise DimensionError(f"softmax_rows expects a matrix, got shape {x.shape}")
    return softmax(x, axis=-1)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse

    def bw(g):
        return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)

    return _result(y, (x,), bw)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    if eps <= 0:
        raise InputError("layer_norm eps must be positive")
    if gain.shape != (x.shape[-1],) or bias.shape != (x.shape[-1],):
        raise DimensionError(f"layer_norm parameters must have shape ({x.shape[-1]},)")
    scale = 1.0 / x.shape[-1]
    xc = x.data - x.data.sum(axis=-1, keepdims=True) * scale
    var = (xc * xc).sum(axis=-1, keepdims=True) * scale
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def bw(g):
        gxhat = g * gain.data
        gx = inv * (gxhat - gxhat.mean(axis=-1, keepdims=True) - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _result(out, (x, gain, bias), bw)


# ---------------------------------------------------------------------- loss


def cross_entropy(logits: Tensor, targets, ignore_id: int | None = 0) -> Tensor:
    """Mean negative log-likelihood over positions whose target is not ``ignore_id``."""
    targets = np.asarray(targets, dtype=np.int64)
    V = logits.shape[-1]
    if targets.shape != logits.shape[:-1]:
        raise DimensionError(f"targets shape {targets.shape} does not match logits {logits.shape[:-1]}")
    keep = np.ones(targets.shape, dtype=bool) if ignore_id is None else targets != ignore_id
    if not keep.any():
        raise UndefinedLossError("all target positions are ignored")
    live = targets[keep]
    if live.min() < 0 or live.max() >= V:
        raise InputError(f"target id out of range [0, {V})")
    count = int(keep.sum())

    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    safe = np.where(keep, targets, 0)
    picked = np.take_along_axis(logp, safe[..., None], axis=-1)[..., 0]
    loss = -(picked * keep).sum() / count

    def bw(g):
        p = np.exp(logp)
        np.put_along_axis(p, safe[..., None], np.take_along_axis(p, safe[..., None], axis=-1) - 1.0, axis=-1)
        return (p * (keep[..., None] * (float(g) / count)),)

    return _result(np.asarray(loss, dtype=logits.dtype), (logits,), bw)


# ------------------------------------------------------------------ backward


def backward(loss: Tensor, grad: np.ndarray | None = None) -> None:
    """Populate ``.grad`` on every leaf reachable from ``loss`` and release the tape."""
    if loss._consumed:
        raise GraphError("graph already consumed by a previous backward; re-run the forward pass")
    if not loss.requires_grad:
        raise GraphError("tensor is detached from any differentiation graph")
    if grad is None:
        if loss.size != 1:
            raise GraphError("backward without an explicit gradient needs a scalar")
        grad = np.ones_like(loss.data)

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
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.asarray(grad, dtype=loss.dtype)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for p, pg in zip(node._parents, node._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            if id(p) in grads:
                grads[id(p)] = grads[id(p)] + pg
            else:
                grads[id(p)] = pg

    for node in order:
        if node._backward is not None:
            node._backward = None
            node._parents = ()
            node._consumed = True


# ---------------------------------------------------------------- grad check


@dataclass
class GradCheckReport:
    max_rel_error: float
    per_param: dict[str, float] = field(default_factory=dict)
    worst: tuple[str, int] | None = None
    n_checked: int = 0
    n_refined: int = 0

    def passed(self, tol: float) -> bool:
        return self.max_rel_error < tol


def _rel_error(a: float, n: float) -> float:
    return abs(a - n) / max(abs(a), abs(n), 1e-8)


def grad_check(
    f: Callable[[], Tensor],
    params: Iterable[Tensor] | dict[str, Tensor],
    h: float = 1e-5,
    tol: float | None = None,
    refine_above: float | None = 1e-7,
) -> GradCheckReport:
    """Compare analytic gradients with central differences, element by element.

    ``f`` re-evaluates the scalar objective from the current values of
    ``params``; parameters are perturbed in place and restored. The relative
    error per element is ``|a - n| / max(|a|, |n|, 1e-8)``.

    A float64 difference quotient cannot resolve gradients much below
    ``eps * |f| / h``. Elements whose float64 relative error exceeds
    ``refine_above`` are therefore re-differenced with every parameter held in
    extended precision (``np.longdouble``); the analytic side stays float64.
    When ``tol`` is given, a failing check raises ``AssertionError``.
    """
    named = dict(params) if isinstance(params, dict) else {p.name or f"param{i}": p for i, p in enumerate(params)}
    if not 1e-6 <= h <= 1e-4:
        raise InputError(f"finite-difference step {h} outside [1e-6, 1e-4]")
    for name, p in named.items():
        if p.dtype != np.float64:
            raise InputError(f"grad_check needs float64 parameters; {name} is {p.dtype}")
        p.grad = None

    loss = f()
    if not np.isfinite(loss.data).all():
        raise NumericError("objective is not finite")
    backward(loss)
    analytic = {name: (p.grad if p.grad is not None else np.zeros_like(p.data)).reshape(-1).copy() for name, p in named.items()}

    def central(p: Tensor, i: int) -> float:
        flat = p.data.reshape(-1)
        orig = flat[i]
        flat[i] = orig + h
        fp = f().data
        flat[i] = orig - h
        fm = f().data
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError("objective is not finite under perturbation")
        return float((fp - fm) / (2 * h))

    errors = {name: np.zeros(p.size) for name, p in named.items()}
    with no_grad():
        for name, p in named.items():
            a = analytic[name]
            for i in range(p.size):
                errors[name][i] = _rel_error(a[i], central(p, i))

        suspects = [(name, i) for name in named for i in np.flatnonzero(errors[name] > refine_above)] if refine_above is not None else []
        if suspects:
            originals = {name: p.data for name, p in named.items()}
            try:
                for p in named.values():
                    p.data = p.data.astype(np.longdouble)
                for name, i in suspects:
                    errors[name][i] = _rel_error(analytic[name][i], central(named[name], int(i)))
            finally:
                for name, p in named.items():
                    p.data = originals[name]

    report = GradCheckReport(max_rel_error=0.0, n_refined=len(suspects))
    for name, err in errors.items():
        worst = float(err.max()) if err.size else 0.0
        report.per_param[name] = worst
        report.n_checked += err.size
        if worst > report.max_rel_error or report.worst is None:
            report.max_rel_error = max(worst, report.max_rel_error)
            report.worst = (name, int(err.argmax()) if err.size else 0)
    if tol is not None and not report.passed(tol):
        raise AssertionError(f"gradient check failed: max rel error {report.max_rel_error:.3e} at {report.worst}")
    return report
