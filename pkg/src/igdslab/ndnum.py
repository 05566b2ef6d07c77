"""Dense float64 tensors with reverse-mode differentiation.

Every operation returns a new :class:`Tensor`. When any input requires a
gradient the result remembers its parents and a vector-Jacobian product, so a
later call to :meth:`Tensor.backward` can walk the recorded graph in reverse
creation order.
"""
from __future__ import annotations

import contextlib
import itertools
from dataclasses import dataclass
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

LOG_FLOOR = 1e-12

_ids = itertools.count()
_grad_enabled = True


class StructuralError(ValueError):
    """Shapes or call structure are incompatible with the requested op."""


class DomainError(ValueError):
    """An op was evaluated outside its numeric domain."""


@contextlib.contextmanager
def no_grad():
    """Evaluate ops without recording a graph."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_vjp", "_id")
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable | None = None
        self._id = next(_ids)

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
        if self.data.size != 1:
            raise StructuralError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    def backward(self, grad=None) -> None:
        """Populate ``.grad`` on every leaf reachable from this tensor.

        Leaf gradients are overwritten, not accumulated, so each call reflects
        exactly one output.
        """
        if grad is None:
            if self.data.size != 1:
                raise StructuralError(f"backward() without a seed needs a scalar output, got shape {self.shape}")
            seed = np.ones_like(self.data)
        else:
            seed = np.broadcast_to(np.asarray(grad, dtype=np.float64), self.shape).copy()
        order = _topo_order(self)
        pending: dict[int, np.ndarray] = {self._id: seed}
        for node in order:
            g = pending.pop(node._id, None)
            if g is None:
                continue
            if not node._parents:
                if node.requires_grad:
                    node.grad = g
                continue
            for parent, pg in zip(node._parents, node._vjp(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if parent._id in pending:
                    pending[parent._id] = pending[parent._id] + pg
                else:
                    pending[parent._id] = pg

    # operator sugar
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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, idx):
        return take(self, idx)

    @property
    def T(self) -> Tensor:
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def _topo_order(root: Tensor) -> list[Tensor]:
    seen: dict[int, Tensor] = {}
    stack = [root]
    while stack:
        node = stack.pop()
        if node._id in seen:
            continue
        seen[node._id] = node
        stack.extend(p for p in node._parents if p.requires_grad)
    # ids increase with creation time, so descending id is a valid reverse topological order
    return sorted(seen.values(), key=lambda n: n._id, reverse=True)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], vjp: Callable, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    out._id = next(_ids)
    track = _grad_enabled and any(p.requires_grad for p in parents)
    out.requires_grad = track
    out._parents = tuple(parents) if track else ()
    out._vjp = vjp if track else None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise StructuralError(f"{op}: cannot broadcast {a.shape} with {b.shape}") from exc


def _finite_or_raise(data: np.ndarray, op: str) -> np.ndarray:
    if not np.all(np.isfinite(data)):
        raise DomainError(f"{op} produced non-finite values")
    return data


# elementwise binary ------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")
    ad, bd = a.data, b.data

    def vjp(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _make(ad * bd, (a, b), vjp, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "div")
    if np.any(b.data == 0):
        raise DomainError("div: division by zero")
    ad, bd = a.data, b.data
    out = ad / bd

    def vjp(g):
        return _unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)

    return _make(out, (a, b), vjp, "div")


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    if p < 1 and np.any(ad <= 0):
        raise DomainError("power: non-positive base with exponent below 1")
    return _make(ad**p, (a,), lambda g: (g * p * ad ** (p - 1),), "pow")


def square(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _make(ad * ad, (a,), lambda g: (2.0 * g * ad,), "square")


def inner(a, b) -> Tensor:
    """Inner product along the last axis (row-wise for matrices)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[-1:] != b.shape[-1:]:
        raise StructuralError(f"inner: trailing dims differ {a.shape} vs {b.shape}")
    _check_broadcast(a, b, "inner")
    ad, bd = a.data, b.data

    def vjp(g):
        g = g[..., None]
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _make(np.sum(ad * bd, axis=-1), (a, b), vjp, "inner")


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim == 0 or b.ndim == 0 or a.ndim > 2 or b.ndim > 2:
        raise StructuralError(f"matmul supports 1-D and 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[0]:
        raise StructuralError(f"matmul: inner dims differ {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    a2 = ad if ad.ndim == 2 else ad[None, :]
    b2 = bd if bd.ndim == 2 else bd[:, None]

    def vjp(g):
        g2 = np.asarray(g).reshape(a2.shape[0], b2.shape[1])
        return (g2 @ b2.T).reshape(ad.shape), (a2.T @ g2).reshape(bd.shape)

    return _make(ad @ bd, (a, b), vjp, "matmul")


# elementwise unary -------------------------------------------------------

def exp(a) -> Tensor:
    a = as_tensor(a)
    out = _finite_or_raise(np.exp(a.data), "exp")
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a, floor: float = LOG_FLOOR) -> Tensor:
    """Natural log of ``max(a, floor)``; negative arguments are a domain error."""
    a = as_tensor(a)
    ad = a.data
    if np.any(ad < 0) or np.any(np.isnan(ad)):
        raise DomainError("log: negative or NaN argument")
    clipped = np.maximum(ad, floor)
    live = ad > floor
    return _make(np.log(clipped), (a,), lambda g: (np.where(live, g / clipped, 0.0),), "log")


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data < 0):
        raise DomainError("sqrt: negative argument")
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def softplus(a, sharpness: float = 1.0) -> Tensor:
    """(1/s)·log(1 + exp(s·a)), evaluated without overflow."""
    if sharpness <= 0:
        raise DomainError("softplus: sharpness must be positive")
    a = as_tensor(a)
    z = sharpness * a.data
    out = np.logaddexp(0.0, z) / sharpness
    sig = np.exp(-np.logaddexp(0.0, -z))
    return _make(out, (a,), lambda g: (g * sig,), "softplus")


# reductions --------------------------------------------------------------

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    shape = a.shape

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.sum(a.data, axis=axes, keepdims=keepdims), (a,), vjp, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    if count == 0:
        raise StructuralError("mean over an empty axis")
    return mul(tsum(a, axis, keepdims), 1.0 / count)


def logsumexp(a, axis: int = -1, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    m = np.max(ad, axis=axis, keepdims=True)
    lse = m + np.log(np.sum(np.exp(ad - m), axis=axis, keepdims=True))
    soft = np.exp(ad - lse)
    out = lse if keepdims else np.squeeze(lse, axis=axis)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * soft,)

    return _make(out, (a,), vjp, "logsumexp")


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    z = np.exp(ad - np.max(ad, axis=axis, keepdims=True))
    out = z / np.sum(z, axis=axis, keepdims=True)

    def vjp(g):
        return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)

    return _make(out, (a,), vjp, "softmax")


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    shifted = ad - np.max(ad, axis=axis, keepdims=True)
    out = shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))
    soft = np.exp(out)

    def vjp(g):
        return (g - soft * np.sum(g, axis=axis, keepdims=True),)

    return _make(out, (a,), vjp, "log_softmax")


def center(a) -> Tensor:
    """Subtract the mean of the last axis, so each vector sums to zero."""
    a = as_tensor(a)
    ad = a.data
    out = ad - np.mean(ad, axis=-1, keepdims=True)
    return _make(out, (a,), lambda g: (g - np.mean(g, axis=-1, keepdims=True),), "center")


def l2_normalize(a, eps: float = 1e-12) -> Tensor:
    """Scale each last-axis vector to unit Euclidean norm."""
    a = as_tensor(a)
    ad = a.data
    norm = np.sqrt(np.sum(ad * ad, axis=-1, keepdims=True))
    if np.any(norm < eps):
        raise DomainError("l2_normalize: vector with (near) zero norm")
    out = ad / norm

    def vjp(g):
        return ((g - out * np.sum(g * out, axis=-1, keepdims=True)) / norm,)

    return _make(out, (a,), vjp, "l2_normalize")


# structure ---------------------------------------------------------------

def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise StructuralError("concat of an empty list")
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise StructuralError(f"concat: {exc}") from exc
    splits = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(out, ts, vjp, "concat")


def transpose(a) -> Tensor:
    a = as_tensor(a)
    return _make(a.data.T, (a,), lambda g: (g.T,), "transpose")


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise StructuralError(f"reshape: {exc}") from exc
    return _make(out, (a,), lambda g: (g.reshape(old),), "reshape")


def take(a, idx) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def vjp(g):
        full = np.zeros(shape)
        np.add.at(full, idx, g)
        return (full,)

    return _make(a.data[idx], (a,), vjp, "take")


# composite losses --------------------------------------------------------

def cross_entropy(logits, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=int)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise StructuralError(f"cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    onehot = np.zeros(logits.shape)
    onehot[np.arange(labels.size), labels] = 1.0
    return -mean(tsum(log_softmax(logits) * onehot, axis=1))


def entropy(p, axis: int = -1) -> Tensor:
    p = as_tensor(p)
    return -tsum(p * log(p), axis=axis)


def kl(p, q, axis: int = -1) -> Tensor:
    """KL(p || q) along ``axis`` with floored logs."""
    p, q = as_tensor(p), as_tensor(q)
    return tsum(p * (log(p) - log(q)), axis=axis)


# graph-level helpers -----------------------------------------------------

def forward_eval(fn: Callable[..., Tensor], inputs: Mapping[str, np.ndarray], wrt: Iterable[str] = ()) -> tuple[Tensor, dict[str, Tensor]]:
    """Bind ``inputs`` as leaves and evaluate ``fn(**leaves)``.

    Leaves named in ``wrt`` are marked as requiring gradients. Returns the
    output tensor and the bound leaves.
    """
    wrt = set(wrt)
    unknown = wrt - set(inputs)
    if unknown:
        raise StructuralError(f"unbound inputs requested for differentiation: {sorted(unknown)}")
    leaves = {name: Tensor(np.array(val, dtype=np.float64), requires_grad=name in wrt) for name, val in inputs.items()}
    out = fn(**leaves)
    if not isinstance(out, Tensor):
        raise StructuralError("graph function must return a Tensor")
    return out, leaves


def backward_grad(output: Tensor, wrt: Mapping[str, Tensor]) -> dict[str, np.ndarray]:
    if output.data.size != 1:
        raise StructuralError(f"backward_grad needs a scalar output, got shape {output.shape}")
    for leaf in wrt.values():
        leaf.grad = None
    output.backward()
    return {name: (leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)) for name, leaf in wrt.items()}


def value_and_grad(fn, inputs: Mapping[str, np.ndarray], wrt: Iterable[str]) -> tuple[float, dict[str, np.ndarray]]:
    wrt = list(wrt)
    out, leaves = forward_eval(fn, inputs, wrt)
    grads = backward_grad(out, {k: leaves[k] for k in wrt})
    return out.item(), grads


@dataclass
class GradCheckReport:
    max_rel_error: float
    passed: bool
    analytic: np.ndarray
    numeric: np.ndarray


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> float:
    """Max over coordinates of |a-b| / max(|a|, |b|, floor)."""
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))


def numeric_grad(fn, inputs: Mapping[str, np.ndarray], wrt: str, step: float = 1e-5) -> np.ndarray:
    base = {k: np.array(v, dtype=np.float64) for k, v in inputs.items()}
    x = base[wrt]
    out = np.zeros_like(x)
    with no_grad():
        for i in range(x.size):
            orig = x.flat[i]
            x.flat[i] = orig + step
            hi = fn(**{k: Tensor(v) for k, v in base.items()}).item()
            x.flat[i] = orig - step
            lo = fn(**{k: Tensor(v) for k, v in base.items()}).item()
            x.flat[i] = orig
            out.flat[i] = (hi - lo) / (2 * step)
    return out


def grad_check(fn, inputs: Mapping[str, np.ndarray], wrt: str, step: float = 1e-5, tolerance: float = 1e-4) -> GradCheckReport:
    """Compare reverse-mode and central-difference gradients of a scalar ``fn``."""
    if not 1e-6 <= step <= 1e-3:
        raise ValueError(f"step must lie in [1e-6, 1e-3], got {step}")
    _, grads = value_and_grad(fn, inputs, [wrt])
    num = numeric_grad(fn, inputs, wrt, step)
    err = relative_error(grads[wrt], num)
    return GradCheckReport(err, err <= tolerance, grads[wrt], num)
