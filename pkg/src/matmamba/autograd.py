"""Dense float32 tensors with define-by-run reverse-mode autodiff.

Every op builds a fresh node holding a closure that maps the output gradient
to one gradient per parent. The graph is rebuilt on every forward call, so
forwards at different granularities produce different graphs over the same
leaf tensors and their gradients simply add up in ``leaf.grad``.

Slices (``prefix_slice``/``slice_axis``) are numpy views of the parent buffer.
Their backward hands back a :class:`Window`, which is added into the matching
region of the parent gradient only; entries outside the window are never
written.
"""
from __future__ import annotations

import contextlib
import string
from typing import Callable, Iterator, Sequence

import numpy as np

from .errors import DimensionError, NumericError

DTYPE = np.float32

_grad_enabled = True


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording (inference, benchmarking, optimizer updates)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class Window:
    """Gradient that covers only ``index`` of the parent's buffer."""

    __slots__ = ("index", "value")

    def __init__(self, index: tuple, value: np.ndarray):
        self.index = index
        self.value = value


BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | Window | None"]]


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None
        self.op = "leaf"

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
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return negate(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis, keepdims)

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
        if grad is None:
            if self.data.size != 1:
                raise DimensionError("backward() without a seed needs a single-element tensor")
            grad = np.ones_like(self.data)
        order = _topo_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=DTYPE)}
        owned: set[int] = set()
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else _add_into(node.grad, g)
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if isinstance(pg, Window):
                    buf = grads.get(key)
                    if buf is None:
                        buf = np.zeros(parent.shape, dtype=DTYPE)
                        grads[key] = buf
                        owned.add(key)
                    elif key not in owned:
                        # may alias another node's gradient; never write through it
                        buf = buf.copy()
                        grads[key] = buf
                        owned.add(key)
                    buf[pg.index] += pg.value
                elif key in grads:
                    grads[key] = grads[key] + pg
                    owned.add(key)
                else:
                    grads[key] = pg


def _add_into(buf: np.ndarray, g: np.ndarray) -> np.ndarray:
    buf += g
    return buf


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
        for p in reversed(node._parents):
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def parameter(data) -> Tensor:
    """A leaf that collects gradients."""
    return Tensor(np.array(data, dtype=DTYPE), requires_grad=True)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward: BackwardFn, op: str) -> Tensor:
    out = Tensor(data)
    out.op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def validate_finite(t: Tensor, what: str = "tensor") -> Tensor:
    if not np.all(np.isfinite(t.data)):
        raise NumericError(f"non-finite values in {what}")
    return t


# ---------------------------------------------------------------- elementwise

def _broadcast_shape(a: tuple, b: tuple) -> tuple:
    try:
        return np.broadcast_shapes(a, b)
    except ValueError as exc:
        raise DimensionError(f"cannot broadcast {a} with {b}") from exc


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a.shape, b.shape)
    ad, bd = a.data, b.data

    def backward(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return _make(ad * bd, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a.shape, b.shape)
    ad, bd = a.data, b.data

    def backward(g):
        ga = _unbroadcast(g / bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * ad / (bd * bd), bd.shape) if b.requires_grad else None
        return ga, gb

    return _make(ad / bd, (a, b), backward, "div")


def negate(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def scale(a: Tensor, c: float) -> Tensor:
    c = DTYPE(c)
    return _make(a.data * c, (a,), lambda g: (g * c,), "scale")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    ad = a.data
    return _make(np.log(ad), (a,), lambda g: (g / ad,), "log")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form stays finite for any f32 input
    return (0.5 * (1.0 + np.tanh(0.5 * x))).astype(DTYPE, copy=False)


def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)
    return _make(s, (a,), lambda g: (g * s * (1 - s),), "sigmoid")


def silu(a: Tensor) -> Tensor:
    x = a.data
    s = _sigmoid(x)
    return _make(x * s, (a,), lambda g: (g * (s * (1 + x * (1 - s))),), "silu")


def softplus(a: Tensor) -> Tensor:
    x = a.data
    out = np.logaddexp(DTYPE(0), x)
    return _make(out, (a,), lambda g: (g * _sigmoid(x),), "softplus")


def where(mask: np.ndarray, a: Tensor, fill: float) -> Tensor:
    """``a`` where ``mask`` holds, constant ``fill`` elsewhere (mask is not differentiated)."""
    mask = np.asarray(mask, dtype=bool)
    _broadcast_shape(mask.shape, a.shape)
    out = np.where(mask, a.data, DTYPE(fill)).astype(DTYPE, copy=False)
    shape = a.shape
    return _make(out, (a,), lambda g: (_unbroadcast(np.where(mask, g, 0).astype(DTYPE, copy=False), shape),),
                 "where")


# --------------------------------------------------------------- linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b`` for ``a[..., m, k]`` and ``b[k, n]`` (or matching batch dims)."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 1 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dims disagree: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        if b.requires_grad:
            if bd.ndim == 2:
                k, n = bd.shape
                gb = ad.reshape(-1, k).T @ g.reshape(-1, n)
            else:
                gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return _make(ad @ bd, (a, b), backward, "matmul")


def linear(x: Tensor, w: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ w.T (+ bias)`` with ``w`` stored as ``[out, in]``."""
    y = matmul(x, transpose(w, (1, 0)))
    return y if bias is None else add(y, bias)


_PATHS: dict = {}


def _pair_contract(sa: str, a: np.ndarray, sb: str, b: np.ndarray, keep: set) -> tuple[str, np.ndarray]:
    """Contract two operands through one batched matmul; ``keep`` are letters still needed."""
    only_a = [ch for ch in sa if ch not in sb and ch not in keep]
    if only_a:
        a = a.sum(axis=tuple(sa.index(ch) for ch in only_a))
        sa = "".join(ch for ch in sa if ch not in only_a)
    only_b = [ch for ch in sb if ch not in sa and ch not in keep]
    if only_b:
        b = b.sum(axis=tuple(sb.index(ch) for ch in only_b))
        sb = "".join(ch for ch in sb if ch not in only_b)
    batch = [ch for ch in sa if ch in sb and ch in keep]
    contract = [ch for ch in sa if ch in sb and ch not in keep]
    left = [ch for ch in sa if ch not in sb]
    right = [ch for ch in sb if ch not in sa]
    dims = dict(zip(sa, a.shape)) | dict(zip(sb, b.shape))
    size = lambda letters: int(np.prod([dims[ch] for ch in letters], dtype=np.int64))
    at = a.transpose([sa.index(ch) for ch in batch + left + contract])
    bt = b.transpose([sb.index(ch) for ch in batch + contract + right])
    res = np.matmul(at.reshape(size(batch), size(left), size(contract)),
                    bt.reshape(size(batch), size(contract), size(right)))
    letters = batch + left + right
    return "".join(letters), res.reshape([dims[ch] for ch in letters])


def _einsum(spec: str, *arrays: np.ndarray) -> np.ndarray:
    """einsum that routes every pairwise contraction through BLAS matmul."""
    key = (spec, tuple(a.shape for a in arrays))
    path = _PATHS.get(key)
    if path is None:
        path = np.einsum_path(spec, *arrays, optimize="greedy")[0][1:]
        _PATHS[key] = path
    lhs, out = spec.split("->")
    ops = list(zip(lhs.split(","), arrays))
    if len(ops) == 1:
        return np.einsum(spec, *arrays)
    for step in path:
        if len(step) != 2:
            return np.einsum(spec, *arrays, optimize="greedy")
        i, j = sorted(step)
        (sb, b), (sa, a) = ops.pop(j), ops.pop(i)
        keep = set(out).union(*(s for s, _ in ops))
        ops.append(_pair_contract(sa, a, sb, b, keep))
    (s, res), = ops
    extra = [ch for ch in s if ch not in out]
    if extra:
        res = res.sum(axis=tuple(s.index(ch) for ch in extra))
        s = "".join(ch for ch in s if ch not in extra)
    return np.ascontiguousarray(res.transpose([s.index(ch) for ch in out]))


def einsum(spec: str, *operands: Tensor) -> Tensor:
    """Explicit-output einsum without repeated indices inside one operand."""
    spec = spec.replace(" ", "")
    lhs, out_sub = spec.split("->")
    subs = lhs.split(",")
    if len(subs) != len(operands):
        raise DimensionError(f"einsum {spec!r} expects {len(subs)} operands")
    sizes: dict[str, int] = {}
    for s, t in zip(subs, operands):
        if len(s) != t.ndim or len(set(s)) != len(s):
            raise DimensionError(f"einsum subscript {s!r} does not fit shape {t.shape}")
        for ch, n in zip(s, t.shape):
            if sizes.setdefault(ch, n) != n:
                raise DimensionError(f"einsum index {ch!r} has sizes {sizes[ch]} and {n}")
    arrays = [t.data for t in operands]

    def backward(g):
        grads = []
        for i, (s, t) in enumerate(zip(subs, operands)):
            if not t.requires_grad:
                grads.append(None)
                continue
            other_subs = [subs[j] for j in range(len(subs)) if j != i] + [out_sub]
            other_arrays = [arrays[j] for j in range(len(arrays)) if j != i] + [g]
            present = set("".join(other_subs))
            target = "".join(ch for ch in s if ch in present)
            r = _einsum(",".join(other_subs) + "->" + target, *other_arrays)
            if target != s:
                r = r.reshape([sizes[ch] if ch in present else 1 for ch in s])
                r = np.broadcast_to(r, t.shape).copy()
            grads.append(r)
        return grads

    return _make(_einsum(spec, *arrays), tuple(operands), backward, "einsum")


# ------------------------------------------------------------------ structure

def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {src} to {tuple(shape)}") from exc
    return _make(out, (a,), lambda g: (g.reshape(src),), "reshape")


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    axes = tuple(range(a.ndim))[::-1] if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def expand_dims(a: Tensor, axis: int) -> Tensor:
    return reshape(a, np.expand_dims(a.data, axis).shape)


def broadcast_to(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    src = a.shape
    _broadcast_shape(src, shape)
    return _make(np.broadcast_to(a.data, shape), (a,), lambda g: (_unbroadcast(g, src),), "broadcast")


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    """View of ``a[start:stop]`` along ``axis``; gradients land in that window only."""
    axis = axis % a.ndim
    if not 0 <= start < stop <= a.shape[axis]:
        raise DimensionError(f"slice [{start}:{stop}] out of range for axis {axis} of {a.shape}")
    index = (slice(None),) * axis + (slice(start, stop),)
    if start == 0 and stop == a.shape[axis]:
        return _make(a.data, (a,), lambda g: (g,), "slice")
    return _make(a.data[index], (a,), lambda g: (Window(index, g),), "slice")


def prefix_slice(a: Tensor, axis: int, n: int) -> Tensor:
    """First ``n`` entries of ``a`` along ``axis``, as a view sharing storage."""
    if a.ndim == 0:
        raise DimensionError("cannot slice a scalar")
    axis = axis % a.ndim
    if not 0 < n <= a.shape[axis]:
        raise DimensionError(f"prefix length {n} out of range (0, {a.shape[axis]}] on axis {axis}")
    return slice_axis(a, axis, 0, n)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    axis = axis % tensors[0].ndim
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != axis):
            raise DimensionError(f"concat shapes disagree off axis {axis}: {ref} vs {t.shape}")
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])
    pre = (slice(None),) * axis

    def backward(g):
        return [g[pre + (slice(bounds[i], bounds[i + 1]),)] for i in range(len(tensors))]

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward, "concat")


def split(a: Tensor, sizes: Sequence[int], axis: int) -> list[Tensor]:
    if sum(sizes) != a.shape[axis]:
        raise DimensionError(f"split sizes {list(sizes)} do not sum to {a.shape[axis]}")
    out, start = [], 0
    for n in sizes:
        out.append(slice_axis(a, axis, start, start + n))
        start += n
    return out


def pad_end(a: Tensor, axis: int, n: int) -> Tensor:
    """Append ``n`` zeros along ``axis``."""
    if n == 0:
        return a
    axis = axis % a.ndim
    widths = [(0, 0)] * a.ndim
    widths[axis] = (0, n)
    keep = (slice(None),) * axis + (slice(0, a.shape[axis]),)
    return _make(np.pad(a.data, widths), (a,), lambda g: (g[keep],), "pad")


def take_rows(table: Tensor, index: np.ndarray) -> Tensor:
    """Embedding lookup: ``table[index]`` for integer ``index`` of any shape."""
    index = np.asarray(index)
    if index.size and (index.min() < 0 or index.max() >= table.shape[0]):
        raise IndexError(f"row index out of range [0, {table.shape[0]})")
    shape = table.shape

    def backward(g):
        buf = np.zeros(shape, dtype=DTYPE)
        np.add.at(buf, index.reshape(-1), g.reshape(-1, *shape[1:]))
        return (buf,)

    return _make(table.data[index], (table,), backward, "take_rows")


# ------------------------------------------------------------------ reductions

def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    src = a.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).astype(DTYPE, copy=True),)

    return _make(np.asarray(a.data.sum(axis=axis, keepdims=keepdims), dtype=DTYPE), (a,), backward, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return scale(sum_(a, axis, keepdims), 1.0 / n)


def cumsum(a: Tensor, axis: int) -> Tensor:
    def backward(g):
        return (np.flip(np.cumsum(np.flip(g, axis), axis=axis), axis),)

    return _make(np.cumsum(a.data, axis=axis, dtype=DTYPE), (a,), backward, "cumsum")


# -------------------------------------------------------------- fused layers

def rmsnorm(x: Tensor, w: Tensor, eps: float = 1e-5) -> Tensor:
    """``x / sqrt(mean(x**2) + eps) * w`` over the last axis."""
    if x.shape[-1] != w.shape[-1] or w.ndim != 1:
        raise DimensionError(f"rmsnorm weight {w.shape} does not match last dim of {x.shape}")
    xd, wd = x.data, w.data
    r = 1.0 / np.sqrt(np.mean(xd * xd, axis=-1, keepdims=True) + DTYPE(eps))
    xn = xd * r

    def backward(g):
        gw = _unbroadcast(g * xn, wd.shape) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            gwx = g * wd
            gx = r * (gwx - xn * np.mean(gwx * xn, axis=-1, keepdims=True))
        return gx, gw

    return _make((xn * wd).astype(DTYPE, copy=False), (x, w), backward, "rmsnorm")


def log_softmax_np(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def cross_entropy(logits: Tensor, targets, label_smoothing: float = 0.0) -> Tensor:
    """Mean label-smoothed negative log-likelihood; ``logits[..., V]``, integer ``targets[...]``."""
    targets = np.asarray(targets)
    V = logits.shape[-1]
    if logits.shape[:-1] != targets.shape:
        raise DimensionError(f"targets {targets.shape} do not match logits {logits.shape}")
    if not 0.0 <= label_smoothing < 1.0:
        raise ValueError("label_smoothing must lie in [0, 1)")
    if targets.size and (targets.min() < 0 or targets.max() >= V):
        raise IndexError(f"target out of range [0, {V})")
    flat = logits.data.reshape(-1, V)
    t = targets.reshape(-1)
    n = flat.shape[0]
    logp = log_softmax_np(flat)
    eps = label_smoothing
    rows = np.arange(n)
    nll = -logp[rows, t]
    loss = (1 - eps) * nll - eps * logp.mean(axis=-1) if eps else nll
    shape = logits.shape

    def backward(g):
        q = np.full_like(logp, eps / V)
        q[rows, t] += 1 - eps
        return (((np.exp(logp) - q) * (g / n)).reshape(shape),)

    return _make(np.asarray(loss.mean(), dtype=DTYPE), (logits,), backward, "cross_entropy")
