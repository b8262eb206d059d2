"""Dense tensors with tape-based reverse-mode differentiation.

A :class:`Tensor` is a thin wrapper around a contiguous numpy array. Operations
in this module record themselves on the active :class:`Tape` only when at
least one input is tracked, i.e. is a trainable leaf of that tape or was
produced by an earlier recorded node. Frozen parameters are simply never
registered as trainable, so no gradient is ever computed for them.

    >>> w = Tensor([[1.0, 2.0]])
    >>> with Tape([w]) as tape:
    ...     loss = sum_all(mul(w, w))
    >>> tape.backward(loss)
    >>> w.grad
    array([[2., 4.]], dtype=float32)
"""

from __future__ import annotations

import contextvars
import math
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ArgumentError, DimensionError, NumericError

DEFAULT_DTYPE = np.float32

_ACTIVE_TAPE: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar(
    "vitsink_active_tape", default=None
)


class Tensor:
    """Row-major float array with an optional gradient buffer."""

    __slots__ = ("data", "grad", "tape_id", "name")

    def __init__(self, data, name: str | None = None, dtype=None):
        arr = np.asarray(data)
        if dtype is None:
            dtype = arr.dtype if arr.dtype in (np.float32, np.float64) else DEFAULT_DTYPE
        self.data = np.ascontiguousarray(arr, dtype=dtype)
        self.grad: np.ndarray | None = None
        self.tape_id: int | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError("item() requires a single-element tensor")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label})"

    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    def __radd__(self, other):
        return add(_as_tensor(other, self.dtype), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self.dtype))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x, dtype) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=dtype))


@dataclass
class Node:
    op: str
    out: Tensor
    parents: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Records one forward pass and replays it backwards.

    Only tensors listed in ``trainable`` (and values derived from them) are
    tracked. After :meth:`backward`, each trainable tensor's ``grad`` holds
    d(loss)/d(tensor); nothing else is touched.
    """

    def __init__(self, trainable: Iterable[Tensor] = (), check_finite: bool = False):
        self.nodes: list[Node] = []
        self.trainable: list[Tensor] = list(trainable)
        self._tracked: set[int] = {id(t) for t in self.trainable}
        self.check_finite = check_finite
        self._token = None

    def __enter__(self) -> "Tape":
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPE.reset(self._token)
        self._token = None

    def tracks(self, t: Tensor) -> bool:
        return id(t) in self._tracked

    def record(self, op: str, out: Tensor, parents: tuple[Tensor, ...], backward) -> None:
        out.tape_id = len(self.nodes)
        self.nodes.append(Node(op, out, parents, backward))
        self._tracked.add(id(out))

    def backward(self, loss: Tensor) -> None:
        if loss.data.size != 1:
            raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            for parent, pg in zip(node.parents, node.backward(g)):
                if pg is None or id(parent) not in self._tracked:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        for t in self.trainable:
            g = grads.get(id(t))
            t.grad = np.zeros_like(t.data) if g is None else g.astype(t.dtype, copy=False)


def active_tape() -> Tape | None:
    return _ACTIVE_TAPE.get()


def _emit(op: str, data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor(data, dtype=data.dtype if data.dtype in (np.float32, np.float64) else None)
    tape = _ACTIVE_TAPE.get()
    if tape is None:
        return out
    if tape.check_finite and not np.all(np.isfinite(out.data)):
        raise NumericError(f"non-finite output from op '{op}'")
    if any(id(p) in tape._tracked for p in parents):
        tape.record(op, out, parents, backward)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _swap_last(a: np.ndarray) -> np.ndarray:
    return np.swapaxes(a, -1, -2)


# ---------------------------------------------------------------------------
# elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data + b.data
    except ValueError as e:
        raise DimensionError(f"add: incompatible shapes {a.shape} and {b.shape}") from e
    sa, sb = a.shape, b.shape
    return _emit("add", out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    return add(a, scale(b, -1.0))


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data * b.data
    except ValueError as e:
        raise DimensionError(f"mul: incompatible shapes {a.shape} and {b.shape}") from e
    ad, bd = a.data, b.data
    return _emit(
        "mul",
        out,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def scale(a: Tensor, s: float) -> Tensor:
    s = a.dtype.type(s)
    return _emit("scale", a.data * s, (a,), lambda g: (g * s,))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """tanh-approximated GELU."""
    xd = x.data
    c = xd.dtype.type(_GELU_C)
    k = xd.dtype.type(0.044715)
    half = xd.dtype.type(0.5)
    t = np.tanh(c * (xd + k * xd * xd * xd))
    out = half * xd * (1 + t)

    def backward(g):
        dt = (1 - t * t) * c * (1 + 3 * k * xd * xd)
        return (g * (half * (1 + t) + half * xd * dt),)

    return _emit("gelu", out, (x,), backward)


def softplus(x: Tensor) -> Tensor:
    xd = x.data
    out = np.logaddexp(xd.dtype.type(0), xd)

    def backward(g):
        return (g / (1 + np.exp(-xd)),)

    return _emit("softplus", out, (x,), backward)


# ---------------------------------------------------------------------------
# normalization


def rmsnorm(x: Tensor, gain: Tensor, eps: float = 1e-6) -> Tensor:
    """y = x / sqrt(mean(x^2) + eps) * gain over the last axis."""
    if x.ndim == 0 or x.shape[-1] < 1:
        raise DimensionError("rmsnorm needs a non-empty last axis")
    if gain.shape != (x.shape[-1],):
        raise DimensionError(f"rmsnorm gain shape {gain.shape} != ({x.shape[-1]},)")
    if eps < 0:
        raise ArgumentError("eps must be non-negative")
    xd, gd = x.data, gain.data
    ms = np.mean(xd * xd, axis=-1, keepdims=True) + xd.dtype.type(eps)
    with np.errstate(divide="ignore"):
        r = np.where(ms > 0, 1.0 / np.sqrt(ms), 0.0).astype(xd.dtype)
    xr = xd * r
    out = xr * gd
    d = xd.shape[-1]

    def backward(g):
        u = g * gd
        gx = r * u - xd * (r * r * r) * (np.sum(u * xd, axis=-1, keepdims=True) / d)
        ggain = (g * xr).reshape(-1, d).sum(axis=0)
        return gx, ggain

    return _emit("rmsnorm", out, (x, gain), backward)


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis."""
    if x.ndim == 0 or x.shape[-1] == 0:
        raise DimensionError("softmax needs a non-empty last axis")
    xd = x.data
    e = np.exp(xd - xd.max(axis=-1, keepdims=True))
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (y * (g - np.sum(g * y, axis=-1, keepdims=True)),)

    return _emit("softmax", y, (x,), backward)


# ---------------------------------------------------------------------------
# linear algebra and layout


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul operands must be at least 2-D")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    try:
        out = np.matmul(ad, bd)
    except ValueError as e:
        raise DimensionError(f"matmul: {a.shape} @ {b.shape}") from e

    def backward(g):
        return (
            _unbroadcast(np.matmul(g, _swap_last(bd)), ad.shape),
            _unbroadcast(np.matmul(_swap_last(ad), g), bd.shape),
        )

    return _emit("matmul", out, (a, b), backward)


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    """Permute axes; by default swaps the last two."""
    if axes is None:
        axes = list(range(x.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(np.transpose(x.data, axes))
    return _emit("transpose", out, (x,), lambda g: (np.transpose(g, inv),))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as e:
        raise DimensionError(f"cannot reshape {src} to {tuple(shape)}") from e
    return _emit("reshape", out, (x,), lambda g: (g.reshape(src),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise DimensionError("concat of no tensors")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise DimensionError(f"concat: {[t.shape for t in tensors]}") from e
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _emit("concat", out, tuple(tensors), backward)


def take(x: Tensor, index, axis: int = 0) -> Tensor:
    """Gather along one axis (covers slicing and permutation)."""
    idx = np.asarray(index, dtype=np.int64)
    ax = axis % x.ndim
    if idx.size and (idx.min() < -x.shape[ax] or idx.max() >= x.shape[ax]):
        raise DimensionError(f"take: index out of range for axis of extent {x.shape[ax]}")
    out = np.take(x.data, idx, axis=ax)
    src = x.shape
    unique = np.unique(idx).size == idx.size

    def backward(g):
        gx = np.zeros(src, dtype=g.dtype)
        gm = np.moveaxis(gx, ax, 0)
        gv = np.moveaxis(g, ax, 0)
        if unique:
            gm[idx] += gv
        else:
            np.add.at(gm, idx, gv)
        return (gx,)

    return _emit("take", out, (x,), backward)


def slice_(x: Tensor, start: int, stop: int, axis: int = 0) -> Tensor:
    return take(x, np.arange(start, stop), axis=axis)


def sum_all(x: Tensor) -> Tensor:
    src = x.shape
    out = np.asarray(x.data.sum(), dtype=x.dtype)
    return _emit("sum", out, (x,), lambda g: (np.broadcast_to(g, src).copy(),))


def embedding(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if table.ndim != 2:
        raise DimensionError("embedding table must be 2-D")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise DimensionError("embedding id out of range")
    out = table.data[ids]

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return _emit("embedding", out, (table,), backward)


def cross_entropy(logits: Tensor, targets, mask=None) -> Tensor:
    """Mean token cross-entropy over the positions selected by ``mask``."""
    ld = logits.data
    t = np.asarray(targets, dtype=np.int64)
    if t.shape != ld.shape[:-1]:
        raise DimensionError(f"targets shape {t.shape} != logits {ld.shape[:-1]}")
    m = np.ones(t.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    count = int(m.sum())
    if count == 0:
        raise ArgumentError("cross_entropy: empty mask")
    shifted = ld - ld.max(axis=-1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    logp = shifted - logz
    tsafe = np.where(m, t, 0)
    picked = np.take_along_axis(logp, tsafe[..., None], axis=-1)[..., 0]
    loss = -(picked * m).sum() / count
    out = np.asarray(loss, dtype=ld.dtype)

    def backward(g):
        p = np.exp(logp)
        onehot = np.zeros_like(p)
        np.put_along_axis(onehot, tsafe[..., None], 1.0, axis=-1)
        return ((p - onehot) * (m[..., None] * (g / count)),)

    return _emit("cross_entropy", out, (logits,), backward)


# ---------------------------------------------------------------------------
# gradient checking


def grad_check(
    f: Callable[[Tensor], Tensor],
    x0: Tensor,
    h: float = 1e-4,
    coords: Iterable[int] | None = None,
) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` must build its scalar output from ops in this module; it is called
    with ``x0`` itself, which is perturbed in place and restored. The error
    per coordinate is |a - c| / (|a| + |c| + 1e-8). Run in float64 for tight
    tolerances: float32 central differences bottom out around 1e-3.
    """
    if not 1e-5 <= h <= 1e-2:
        raise ArgumentError(f"step h={h} outside [1e-5, 1e-2]")
    with Tape([x0], check_finite=True) as tape:
        y = f(x0)
    if y.data.size != 1:
        raise DimensionError("grad_check needs a scalar-valued function")
    tape.backward(y)
    analytic = x0.grad.reshape(-1).astype(np.float64)
    flat = x0.data.reshape(-1)
    idx = range(flat.size) if coords is None else coords
    worst = 0.0
    for i in idx:
        orig = flat[i]
        flat[i] = orig + h
        xp = float(flat[i])
        with Tape(check_finite=True):
            fp = f(x0).item()
        flat[i] = orig - h
        xm = float(flat[i])
        with Tape(check_finite=True):
            fm = f(x0).item()
        flat[i] = orig
        central = (fp - fm) / (xp - xm)
        a = analytic[i]
        worst = max(worst, abs(a - central) / (abs(a) + abs(central) + 1e-8))
    x0.grad = None
    return worst
