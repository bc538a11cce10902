"""Dense tensors with reverse-mode gradients on numpy storage.

Values are immutable once produced by an op; the operation graph hangs off
each result's parent links and is consumed (cleared) by a single backward
pass from a scalar loss. Every completed op fails fast on NaN/Inf.
"""

from __future__ import annotations

import contextlib
from typing import Callable

import numpy as np


class ShapeError(ValueError):
    """Operand shapes incompatible with the requested op."""


class NonFiniteError(FloatingPointError):
    """An op produced NaN or Inf."""


class TapeError(RuntimeError):
    """Backward invoked on a loss with no usable operation graph."""


_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference paths)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def seeded_rng(seed: int) -> np.random.Generator:
    """Deterministic generator: identical seeds give identical draw sequences."""
    return np.random.default_rng(seed)


class MacCounter:
    """Tallies multiply-accumulates of matmul-family ops while active."""

    def __init__(self) -> None:
        self.total = 0


_MAC_COUNTERS: list[MacCounter] = []


@contextlib.contextmanager
def matmul_mac_counter():
    counter = MacCounter()
    _MAC_COUNTERS.append(counter)
    try:
        yield counter
    finally:
        _MAC_COUNTERS.remove(counter)


def _record_macs(n: int) -> None:
    for counter in _MAC_COUNTERS:
        counter.total += n


def _check_finite(data: np.ndarray, op: str) -> None:
    if not np.isfinite(data).all():
        raise NonFiniteError(f"{op} produced non-finite values")


def _op(fn):
    """Ops report overflow through NonFiniteError, not numpy warnings."""

    def wrapped(*args, **kwargs):
        with np.errstate(over="ignore", invalid="ignore", divide="ignore", under="ignore"):
            return fn(*args, **kwargs)

    wrapped.__name__ = fn.__name__
    wrapped.__doc__ = fn.__doc__
    return wrapped


class Tensor:
    """n-dimensional real value, optionally tracked for gradients.

    `requires_grad=True` on a directly-constructed tensor marks a parameter
    (leaf). Results of ops become non-leaf nodes carrying backward closures.
    """

    __slots__ = ("data", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float32)
        _check_finite(arr, "tensor construction")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], list[tuple["Tensor", np.ndarray]]] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def is_leaf(self) -> bool:
        return self._backward is None and not self._parents

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # operator sugar; constants wrap as non-tracked tensors
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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other, self.dtype))


def _as_tensor(value, dtype) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype))


def _make(
    data: np.ndarray,
    parents: tuple[Tensor, ...],
    backward: Callable[[np.ndarray], list[tuple[Tensor, np.ndarray]]],
    op: str,
) -> Tensor:
    _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = parents
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# primitive ops
# ---------------------------------------------------------------------------


@_op
def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data + b.data
    except ValueError as exc:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} do not broadcast") from exc

    def backward(g):
        return [(a, _unbroadcast(g, a.shape)), (b, _unbroadcast(g, b.shape))]

    return _make(data, (a, b), backward, "add")


@_op
def sub(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data - b.data
    except ValueError as exc:
        raise ShapeError(f"sub: shapes {a.shape} and {b.shape} do not broadcast") from exc

    def backward(g):
        return [(a, _unbroadcast(g, a.shape)), (b, _unbroadcast(-g, b.shape))]

    return _make(data, (a, b), backward, "sub")


@_op
def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data * b.data
    except ValueError as exc:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} do not broadcast") from exc

    def backward(g):
        return [
            (a, _unbroadcast(g * b.data, a.shape)),
            (b, _unbroadcast(g * a.data, b.shape)),
        ]

    return _make(data, (a, b), backward, "mul")


@_op
def neg(a: Tensor) -> Tensor:
    def backward(g):
        return [(a, -g)]

    return _make(-a.data, (a,), backward, "neg")


@_op
def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the trailing two axes."""
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dims {a.shape} @ {b.shape} do not match")
    data = a.data @ b.data
    _record_macs(data.size // data.shape[-1] * a.shape[-1] * data.shape[-1])

    def backward(g):
        ga = g @ b.data.swapaxes(-1, -2)
        gb = a.data.swapaxes(-1, -2) @ g
        return [(a, _unbroadcast(ga, a.shape)), (b, _unbroadcast(gb, b.shape))]

    return _make(data, (a, b), backward, "matmul")


@_op
def linear(x: Tensor, w: Tensor) -> Tensor:
    """y = x @ w.T for a 2-d weight (out, in) and x with trailing dim `in`."""
    if w.data.ndim != 2:
        raise ShapeError(f"linear weight must be 2-d, got {w.shape}")
    if x.shape[-1] != w.shape[1]:
        raise ShapeError(f"linear: input dim {x.shape[-1]} != weight in-dim {w.shape[1]}")
    data = x.data @ w.data.T
    _record_macs(data.size // data.shape[-1] * w.shape[1] * w.shape[0])

    def backward(g):
        gx = g @ w.data
        gw = g.reshape(-1, w.shape[0]).T @ x.data.reshape(-1, w.shape[1])
        return [(x, gx), (w, gw)]

    return _make(data, (x, w), backward, "linear")


@_op
def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    data = a.data.reshape(shape)

    def backward(g):
        return [(a, g.reshape(a.shape))]

    return _make(data, (a,), backward, "reshape")


@_op
def transpose(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    data = a.data.transpose(axes)
    inverse = np.argsort(axes)

    def backward(g):
        return [(a, g.transpose(inverse))]

    return _make(data, (a,), backward, "transpose")


@_op
def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row gather: out[..., :] = table[ids[...], :]."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(
            f"embedding ids out of range [0, {table.shape[0]}): min={ids.min()}, max={ids.max()}"
        )
    data = table.data[ids]

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        return [(table, gt)]

    return _make(data, (table,), backward, "embedding")


@_op
def rms_norm(x: Tensor, weight: Tensor, eps: float = 1e-5) -> Tensor:
    """y = x / rms(x) * weight, rms over the last axis."""
    if weight.shape != (x.shape[-1],):
        raise ShapeError(f"rms_norm weight {weight.shape} != last dim of {x.shape}")
    dim = x.shape[-1]
    inv = 1.0 / np.sqrt((x.data * x.data).mean(axis=-1, keepdims=True) + eps)
    normed = x.data * inv
    data = normed * weight.data

    def backward(g):
        gw = (g * normed).reshape(-1, dim).sum(axis=0)
        gy = g * weight.data
        # d/dx of x * inv: inv * gy - x * inv^3 / dim * sum(gy * x)
        dot = (gy * x.data).sum(axis=-1, keepdims=True)
        gx = inv * gy - x.data * (inv**3) * dot / dim
        return [(x, gx), (weight, gw)]

    return _make(data, (x, weight), backward, "rms_norm")


@_op
def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    exps = np.exp(shifted)
    data = exps / exps.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * data).sum(axis=axis, keepdims=True)
        return [(x, data * (g - dot))]

    return _make(data, (x,), backward, "softmax")


@_op
def silu(x: Tensor) -> Tensor:
    sig = 1.0 / (1.0 + np.exp(-x.data))
    data = x.data * sig

    def backward(g):
        return [(x, g * sig * (1.0 + x.data * (1.0 - sig)))]

    return _make(data, (x,), backward, "silu")


@_op
def cross_entropy(
    logits: Tensor,
    targets: np.ndarray,
    mask: np.ndarray | None = None,
    reduction: str = "mean",
) -> Tensor:
    """Next-token style cross-entropy over the last axis.

    targets holds integer class ids shaped like logits minus the class axis;
    mask (same shape as targets) weights positions, 0 excluding them. The
    mean reduction divides by the mask total (position count when no mask).
    """
    targets = np.asarray(targets)
    if targets.shape != logits.shape[:-1]:
        raise ShapeError(f"cross_entropy: targets {targets.shape} vs logits {logits.shape}")
    if targets.size and (targets.min() < 0 or targets.max() >= logits.shape[-1]):
        raise ShapeError("cross_entropy: target id out of range")
    shifted = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1))
    picked = np.take_along_axis(shifted, targets[..., None], axis=-1)[..., 0]
    nll = lse - picked
    if mask is None:
        weights = np.ones_like(nll)
    else:
        weights = np.asarray(mask, dtype=nll.dtype)
        if weights.shape != nll.shape:
            raise ShapeError(f"cross_entropy: mask {weights.shape} vs targets {targets.shape}")
    total_weight = weights.sum()
    if reduction == "mean":
        if total_weight == 0:
            raise ShapeError("cross_entropy: mask excludes every position")
        value = (nll * weights).sum() / total_weight
        scale = 1.0 / total_weight
    elif reduction == "sum":
        value = (nll * weights).sum()
        scale = 1.0
    else:
        raise ValueError(f"unknown reduction {reduction!r}")
    data = np.asarray(value, dtype=logits.dtype)

    def backward(g):
        probs = np.exp(shifted - lse[..., None])
        onehot = np.zeros_like(probs)
        np.put_along_axis(onehot, targets[..., None], 1.0, axis=-1)
        gl = (probs - onehot) * (weights * scale)[..., None] * g
        return [(logits, gl.astype(logits.dtype))]

    return _make(data, (logits,), backward, "cross_entropy")


@_op
def tsum(a: Tensor, axis: int | None = None) -> Tensor:
    data = a.data.sum(axis=axis)

    def backward(g):
        if axis is None:
            return [(a, np.broadcast_to(g, a.shape).copy())]
        return [(a, np.broadcast_to(np.expand_dims(g, axis), a.shape).copy())]

    return _make(np.asarray(data, dtype=a.dtype), (a,), backward, "sum")


@_op
def tmean(a: Tensor, axis: int | None = None) -> Tensor:
    count = a.size if axis is None else a.shape[axis]
    data = a.data.mean(axis=axis)

    def backward(g):
        if axis is None:
            return [(a, np.broadcast_to(g / count, a.shape).copy())]
        return [(a, np.broadcast_to(np.expand_dims(g, axis), a.shape).copy() / count)]

    return _make(np.asarray(data, dtype=a.dtype), (a,), backward, "mean")


@_op
def repeat_heads(x: Tensor, repeats: int) -> Tensor:
    """Tile the head axis of (B, H, T, D) grouped-query k/v to match q heads."""
    if repeats == 1:
        return x
    b, h, t, d = x.shape
    data = np.repeat(x.data, repeats, axis=1)

    def backward(g):
        return [(x, g.reshape(b, h, repeats, t, d).sum(axis=2))]

    return _make(data, (x,), backward, "repeat_heads")


@_op
def rope_rotate(x: Tensor, base: float = 10000.0) -> Tensor:
    """Rotary position encoding over (B, H, T, D); rotates half-split pairs."""
    b, h, t, d = x.shape
    if d % 2:
        raise ShapeError(f"rope needs an even head dim, got {d}")
    cos, sin = _rope_tables(t, d, base, x.data.dtype)
    x1, x2 = x.data[..., : d // 2], x.data[..., d // 2 :]
    data = np.concatenate([x1 * cos - x2 * sin, x1 * sin + x2 * cos], axis=-1)

    def backward(g):
        g1, g2 = g[..., : d // 2], g[..., d // 2 :]
        return [(x, np.concatenate([g1 * cos + g2 * sin, -g1 * sin + g2 * cos], axis=-1))]

    return _make(data, (x,), backward, "rope")


_ROPE_CACHE: dict[tuple[int, int, float, str], tuple[np.ndarray, np.ndarray]] = {}


def _rope_tables(t: int, d: int, base: float, dtype) -> tuple[np.ndarray, np.ndarray]:
    key = (t, d, base, np.dtype(dtype).name)
    if key not in _ROPE_CACHE:
        freqs = base ** (-np.arange(0, d // 2, dtype=np.float64) * 2.0 / d)
        angles = np.arange(t, dtype=np.float64)[:, None] * freqs[None, :]
        _ROPE_CACHE[key] = (
            np.cos(angles).astype(dtype),
            np.sin(angles).astype(dtype),
        )
    return _ROPE_CACHE[key]


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------


def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Reverse-mode sweep from a scalar loss.

    Returns the gradient map: one entry per requires-grad leaf reachable from
    the loss, shapes matching the leaves. The traversed graph is cleared, so a
    second backward on the same loss raises TapeError.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad or loss._backward is None:
        raise TapeError("loss is detached from the tape (no recorded operations)")

    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    by_id: dict[int, Tensor] = {id(node): node for node in topo}
    leaves: dict[Tensor, np.ndarray] = {}
    for node in reversed(topo):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            leaves[node] = g
            continue
        for parent, contribution in node._backward(g):
            if not parent.requires_grad:
                continue
            pid = id(parent)
            by_id[pid] = parent
            if pid in grads:
                grads[pid] = grads[pid] + contribution
            else:
                grads[pid] = np.asarray(contribution)
        node._parents = ()
        node._backward = None
    for pid, g in grads.items():
        leaves[by_id[pid]] = g
    for tensor, g in leaves.items():
        if g.shape != tensor.shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter shape {tensor.shape}")
    return leaves


def finite_difference_gradient(
    f: Callable[[list[np.ndarray]], float],
    params: list[np.ndarray],
    step: float = 1e-5,
) -> list[np.ndarray]:
    """Central finite-difference gradient of f at params (oracle use only)."""
    grads = []
    for k, p in enumerate(params):
        g = np.zeros_like(p, dtype=np.float64)
        flat = p.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            saved = flat[i]
            flat[i] = saved + step
            hi = f(params)
            flat[i] = saved - step
            lo = f(params)
            flat[i] = saved
            gflat[i] = (hi - lo) / (2.0 * step)
        grads.append(g)
    return grads
