"""Reverse-mode automatic differentiation over float64 numpy arrays.

A small tape engine: every operation returns a `Tensor` that remembers its
inputs and a vector-Jacobian closure. Gradients are obtained by a reverse
topological sweep from a scalar loss. Everything runs in float64, and every
op output is checked for NaN/Inf so numerical failures surface at the op
that produced them rather than at the loss.

Conventions (deliberate, tested):
  * relu'(0) = 0 and abs'(0) = 0.
  * log has no implicit epsilon; callers add one where they need it.
  * broadcasting follows numpy rules (leading batch dims and size-1 dims);
    backward sums gradients over broadcast axes.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Iterator

import numpy as np

Array = np.ndarray


class NonFiniteError(FloatingPointError):
    """Raised when an op produces NaN or Inf; carries the op name."""

    def __init__(self, op: str):
        super().__init__(f"non-finite values produced by op '{op}'")
        self.op = op


def _check_finite(data: Array, op: str) -> None:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(op)


class Tensor:
    """A float64 array plus the graph edge that produced it."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp", "_op")

    def __init__(self, data, requires_grad: bool = False):
        self.data: Array = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: Array | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable[[Array], tuple] | None = None
        self._op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    # convenience operators; scalars and ndarrays become constant leaves
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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return reduce_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes) -> "Tensor":
        return transpose(self, axes)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op!r}, requires_grad={self.requires_grad})"


def _coerce(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: Array, parents: tuple[Tensor, ...], vjp, op: str) -> Tensor:
    _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._vjp = vjp
        out._op = op
    else:
        # constant subgraphs are pruned so backward never visits them
        out.requires_grad = False
        out._parents = ()
        out._vjp = None
        out._op = op
    return out


def _unbroadcast(g: Array, shape: tuple[int, ...]) -> Array:
    """Sum gradient over axes that were broadcast in the forward op."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise ops


def add(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    return _make(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        "add",
    )


def sub(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    return _make(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
        "sub",
    )


def mul(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    return _make(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        "mul",
    )


def div(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    inv = 1.0 / b.data
    return _make(
        a.data * inv,
        (a, b),
        lambda g: (
            _unbroadcast(g * inv, a.shape),
            _unbroadcast(-g * a.data * inv * inv, b.shape),
        ),
        "div",
    )


def neg(a) -> Tensor:
    a = _coerce(a)
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def relu(a) -> Tensor:
    a = _coerce(a)
    keep = a.data > 0.0  # subgradient at 0 is 0
    return _make(np.where(keep, a.data, 0.0), (a,), lambda g: (g * keep,), "relu")


def sigmoid(a) -> Tensor:
    a = _coerce(a)
    # stable for both signs of the argument
    s = np.where(a.data >= 0, 1.0 / (1.0 + np.exp(-np.abs(a.data))),
                 np.exp(-np.abs(a.data)) / (1.0 + np.exp(-np.abs(a.data))))
    return _make(s, (a,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def softplus(a) -> Tensor:
    a = _coerce(a)
    out = np.logaddexp(0.0, a.data)
    sig = 1.0 / (1.0 + np.exp(-np.clip(a.data, -700, 700)))
    return _make(out, (a,), lambda g: (g * sig,), "softplus")


def exp(a) -> Tensor:
    a = _coerce(a)
    e = np.exp(a.data)
    return _make(e, (a,), lambda g: (g * e,), "exp")


def log(a) -> Tensor:
    a = _coerce(a)
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def absval(a) -> Tensor:
    a = _coerce(a)
    sgn = np.sign(a.data)  # sign(0)=0, so abs'(0)=0
    return _make(np.abs(a.data), (a,), lambda g: (g * sgn,), "abs")


# ---------------------------------------------------------------------------
# contractions and normalizations


def matmul(a, b) -> Tensor:
    """Batched matrix product; both operands must be at least 2-D."""
    a, b = _coerce(a), _coerce(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul operands must be at least 2-D")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def vjp(g: Array):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(out, (a, b), vjp, "matmul")


def masked_softmax(logits, additive_mask=None) -> Tensor:
    """Softmax over the last axis with an optional additive {0, -inf} mask.

    Masked positions come out exactly 0. A row with every position masked is
    rejected ("degenerate attention row"). Stabilized by max subtraction.
    """
    logits = _coerce(logits)
    z = logits.data
    if additive_mask is not None:
        m = additive_mask.data if isinstance(additive_mask, Tensor) else np.asarray(additive_mask)
        z = z + m
    zmax = np.max(z, axis=-1, keepdims=True)
    if not np.all(np.isfinite(zmax)):
        raise ValueError("degenerate attention row: all positions masked")
    e = np.exp(z - zmax)  # exp(-inf) -> exactly 0
    s = e.sum(axis=-1, keepdims=True)
    y = e / s

    def vjp(g: Array):
        dot = (g * y).sum(axis=-1, keepdims=True)
        return (y * (g - dot),)

    return _make(y, (logits,), vjp, "masked_softmax")


def log_softmax(logits) -> Tensor:
    """Numerically stable log softmax over the last axis."""
    logits = _coerce(logits)
    z = logits.data
    zmax = np.max(z, axis=-1, keepdims=True)
    shifted = z - zmax
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse
    sm = np.exp(out)

    def vjp(g: Array):
        return (g - sm * g.sum(axis=-1, keepdims=True),)

    return _make(out, (logits,), vjp, "log_softmax")


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    x, gain, bias = _coerce(x), _coerce(gain), _coerce(bias)
    if eps <= 0:
        raise ValueError("layer_norm eps must be positive")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def vjp(g: Array):
        gg = g * gain.data
        gx = inv * (gg - gg.mean(axis=-1, keepdims=True)
                    - xhat * (gg * xhat).mean(axis=-1, keepdims=True))
        dgain = _unbroadcast(g * xhat, gain.shape)
        dbias = _unbroadcast(g, bias.shape)
        return gx, dgain, dbias

    return _make(out, (x, gain, bias), vjp, "layer_norm")


# ---------------------------------------------------------------------------
# reductions and shape ops


def reduce_sum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _coerce(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g: Array):
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        gg = g
        if not keepdims:
            gg = np.expand_dims(g, axis=axis)
        return (np.broadcast_to(gg, x.shape).copy(),)

    return _make(np.asarray(out), (x,), vjp, "sum")


def reduce_mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _coerce(x)
    count = x.data.size if axis is None else np.prod(
        [x.shape[a] for a in (axis if isinstance(axis, tuple) else (axis,))]
    )
    return mul(reduce_sum(x, axis=axis, keepdims=keepdims), 1.0 / float(count))


def reshape(x, shape: tuple[int, ...]) -> Tensor:
    x = _coerce(x)
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def transpose(x, axes: tuple[int, ...]) -> Tensor:
    x = _coerce(x)
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),), "transpose")


def narrow(x, axis: int, start: int, length: int) -> Tensor:
    """Slice `length` elements along `axis` starting at `start`."""
    x = _coerce(x)
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)

    def vjp(g: Array):
        full = np.zeros(x.shape)
        full[idx] = g
        return (full,)

    return _make(x.data[idx].copy(), (x,), vjp, "narrow")


def pad_axis(x, axis: int, before: int, after: int) -> Tensor:
    """Zero-pad along one axis."""
    x = _coerce(x)
    widths = [(0, 0)] * x.ndim
    widths[axis] = (before, after)
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(before, before + x.shape[axis])
    idx = tuple(idx)
    return _make(np.pad(x.data, widths), (x,), lambda g: (g[idx],), "pad")


def concat(parts: Iterable[Tensor], axis: int) -> Tensor:
    parts = tuple(_coerce(p) for p in parts)
    sizes = [p.shape[axis] for p in parts]
    out = np.concatenate([p.data for p in parts], axis=axis)

    def vjp(g: Array):
        grads = []
        start = 0
        for p, n in zip(parts, sizes):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(start, start + n)
            grads.append(g[tuple(idx)])
            start += n
        return tuple(grads)

    return _make(out, parts, vjp, "concat")


def embedding(ids: Array, table: Tensor) -> Tensor:
    """Row lookup `table[ids]`; backward scatter-adds into the table."""
    table = _coerce(table)
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ValueError("embedding id out of range")

    def vjp(g: Array):
        gt = np.zeros(table.shape)
        np.add.at(gt, ids, g)
        return (gt,)

    return _make(table.data[ids], (table,), vjp, "embedding")


def dropout(x: Tensor, p: float, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout. With p == 0 or rng None (eval mode) returns x unchanged."""
    if p <= 0.0 or rng is None:
        return x
    x = _coerce(x)
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return _make(x.data * keep, (x,), lambda g: (g * keep,), "dropout")


# ---------------------------------------------------------------------------
# parameters and backward


class ParameterStore:
    """Ordered name -> Tensor map of learnable parameters.

    Iteration order is insertion order and is the canonical order for
    serialization, so it must be deterministic across runs.
    """

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, value) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self) -> Iterator[tuple[str, Tensor]]:
        return iter(self._params.items())

    def n_values(self) -> int:
        return sum(int(t.data.size) for t in self._params.values())


GradientMap = dict[str, Tensor]


def _topo_order(root: Tensor) -> list[Tensor]:
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, store: ParameterStore) -> GradientMap:
    """Gradient of a scalar loss w.r.t. every parameter in `store`.

    Parameters that do not reach the loss get zero gradients.
    """
    if loss.data.shape != ():
        raise ValueError("backward requires a scalar loss")
    order = _topo_order(loss)
    for node in order:
        node.grad = None
    for _, p in store.items():
        p.grad = None
    loss.grad = np.ones(())
    for node in reversed(order):
        if node._vjp is None or node.grad is None:
            continue
        grads = node._vjp(node.grad)
        for parent, g in zip(node._parents, grads):
            if g is None or not parent.requires_grad:
                continue
            if parent.grad is None:
                parent.grad = np.array(g, dtype=np.float64, copy=True)
            else:
                parent.grad += g
    out: GradientMap = {}
    for name, p in store.items():
        g = p.grad if p.grad is not None else np.zeros(p.shape)
        out[name] = Tensor(g)
    return out


@dataclass
class GradCheckReport:
    max_rel_err: float
    worst_param: str
    n_coords: int

    def passed(self, tol: float) -> bool:
        return self.max_rel_err < tol


def grad_check(
    f: Callable[[], Tensor],
    store: ParameterStore,
    eps: float = 1e-4,
    tol: float = 1e-4,
) -> GradCheckReport:
    """Compare analytic gradients of `f` against central finite differences.

    `f` must be a deterministic scalar function of the parameters in `store`.
    Relative error per coordinate uses denominator max(|a|, |b|, 1e-8).
    """
    if not (1e-6 <= eps <= 1e-3):
        raise ValueError("grad_check eps must lie in [1e-6, 1e-3]")
    analytic = backward(f(), store)
    worst = 0.0
    worst_name = ""
    n = 0
    for name, p in store.items():
        ga = analytic[name].data
        flat = p.data.reshape(-1)
        gflat = ga.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = f().item()
            flat[i] = orig - eps
            f_minus = f().item()
            flat[i] = orig
            fd = (f_plus - f_minus) / (2.0 * eps)
            a = gflat[i]
            rel = abs(a - fd) / max(abs(a), abs(fd), 1e-8)
            n += 1
            if rel > worst:
                worst = rel
                worst_name = f"{name}[{i}]"
    return GradCheckReport(max_rel_err=worst, worst_param=worst_name, n_coords=n)
