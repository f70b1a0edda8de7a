"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Operations only record onto a tape while one is active::

    with Tape() as tape:
        loss = mean(mul(w, x))
    grads = backward(loss, tape)

Outside a ``Tape`` block every op is a plain numpy evaluation, which is how
inference runs.

Binary elementwise ops broadcast in exactly two cases (either operand may be
the smaller one):

    ============  ==========================  ==============================
    smaller       larger                      backward reduction
    ============  ==========================  ==============================
    shape (1,)    any                         sum over every element
    shape (n,)    (..., n)                    sum over all leading axes
    ============  ==========================  ==============================

Everything else raises :class:`DimensionError`; use :func:`broadcast_to` to
expand explicitly.
"""
from __future__ import annotations

import contextvars
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, DimensionError, UsageError

MAX_RANK = 3


class Tensor:
    """Immutable float64 array plus autodiff bookkeeping.

    The buffer is flagged read-only. Optimizers rebind ``data`` to a fresh
    array rather than writing into it, so earlier readers keep a stable view.
    """

    __slots__ = ("data", "requires_grad", "node_id", "_tape", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if arr.ndim > MAX_RANK:
            raise DimensionError(f"rank {arr.ndim} exceeds maximum rank {MAX_RANK}")
        if arr.size == 0:
            raise DimensionError("tensors must have at least one element")
        arr.setflags(write=False)
        self.data = arr
        self.requires_grad = requires_grad
        self.node_id: int | None = None
        self._tape: Tape | None = None
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if arr.ndim > MAX_RANK:
            raise DimensionError(f"rank {arr.ndim} exceeds maximum rank {MAX_RANK}")
        arr.setflags(write=False)
        t.data = arr
        t.requires_grad = False
        t.node_id = None
        t._tape = None
        t.name = None
        return t

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
            raise UsageError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    # Operator sugar. __eq__ is deliberately left as identity so tensors can
    # key gradient dictionaries.
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(_as_tensor(other), self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    __hash__ = object.__hash__


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


# --------------------------------------------------------------------------
# Tape
# --------------------------------------------------------------------------

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


@dataclass
class Node:
    op: str
    parents: tuple[Tensor, ...]
    backward: BackwardFn
    shape: tuple[int, ...]
    meta: dict = field(default_factory=dict)


_ACTIVE_TAPE: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar(
    "active_tape", default=None
)


class Tape:
    """Append-only record of differentiable operations.

    Nodes are appended in execution order, so parents always precede children
    and a reverse sweep is a valid topological order. A tape belongs to one
    thread and one forward pass.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self._token = None

    def __enter__(self) -> "Tape":
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE_TAPE.reset(self._token)
        self._token = None
        return False

    def __len__(self):
        return len(self.nodes)

    def ops(self) -> list[str]:
        return [n.op for n in self.nodes]


def active_tape() -> Tape | None:
    return _ACTIVE_TAPE.get()


def _record(op: str, out: np.ndarray, parents: Sequence[Tensor], backward: BackwardFn, **meta) -> Tensor:
    result = Tensor._wrap(out)
    tape = _ACTIVE_TAPE.get()
    if tape is None or not any(p.requires_grad for p in parents):
        return result
    result.requires_grad = True
    result.node_id = len(tape.nodes)
    result._tape = tape
    tape.nodes.append(Node(op, tuple(parents), backward, out.shape, meta))
    return result


def backward(root: Tensor, tape: Tape) -> dict[Tensor, np.ndarray]:
    """Reverse sweep from a scalar ``root``.

    Returns a mapping from every reachable tensor that requires grad (leaf
    parameters and recorded intermediates) to its gradient array.
    """
    if root.size != 1:
        raise UsageError(f"backward needs a scalar root, got shape {root.shape}")
    if root.node_id is None or root._tape is not tape:
        raise UsageError("root was not produced on this tape (is a Tape active and does it need grad?)")

    node_grads: dict[int, np.ndarray] = {root.node_id: np.ones(root.shape)}
    result: dict[Tensor, np.ndarray] = {}
    produced: dict[int, Tensor] = {}

    for idx in range(root.node_id, -1, -1):
        g = node_grads.pop(idx, None)
        if g is None:
            continue
        node = tape.nodes[idx]
        parent_grads = node.backward(g)
        for parent, pg in zip(node.parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            if pg.shape != parent.shape:
                raise DimensionError(
                    f"{node.op} backward produced {pg.shape} for parent of shape {parent.shape}"
                )
            if parent.node_id is not None and parent._tape is tape:
                pid = parent.node_id
                node_grads[pid] = node_grads[pid] + pg if pid in node_grads else pg
                produced[pid] = parent
            else:
                result[parent] = result[parent] + pg if parent in result else pg
        if idx in produced:
            result[produced.pop(idx)] = g
    result[root] = np.ones(root.shape)
    return result


# --------------------------------------------------------------------------
# Shape helpers
# --------------------------------------------------------------------------


def _broadcast_kind(a: tuple, b: tuple) -> str:
    """Classify an (a, b) shape pair; see the module docstring table."""
    if a == b:
        return "same"
    if b == (1,):
        return "b_scalar"
    if a == (1,):
        return "a_scalar"
    if len(b) == 1 and len(a) > 1 and a[-1] == b[0]:
        return "b_row"
    if len(a) == 1 and len(b) > 1 and b[-1] == a[0]:
        return "a_row"
    raise DimensionError(f"incompatible shapes {a} and {b}")


def _reduce_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape == (1,):
        return np.array([g.sum()])
    if len(shape) == 1:
        return g.reshape(-1, shape[0]).sum(axis=0)
    raise DimensionError(f"cannot reduce gradient {g.shape} to {shape}")


def _check_axis(x: Tensor, axis: int) -> int:
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"axis {axis} out of range for shape {x.shape}")
    return axis % x.ndim


# --------------------------------------------------------------------------
# Elementwise ops
# --------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_kind(a.shape, b.shape)
    out = a.data + b.data
    return _record("add", out, (a, b), lambda g: (_reduce_to(g, a.shape), _reduce_to(g, b.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_kind(a.shape, b.shape)
    out = a.data - b.data
    return _record("sub", out, (a, b), lambda g: (_reduce_to(g, a.shape), _reduce_to(-g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_kind(a.shape, b.shape)
    ad, bd = a.data, b.data
    out = ad * bd
    return _record(
        "mul", out, (a, b), lambda g: (_reduce_to(g * bd, a.shape), _reduce_to(g * ad, b.shape))
    )


def div(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_kind(a.shape, b.shape)
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        return _reduce_to(g / bd, a.shape), _reduce_to(-g * ad / (bd * bd), b.shape)

    return _record("div", out, (a, b), bw)


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _record("scale", x.data * c, (x,), lambda g: (g * c,), c=c)


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _record("tanh", y, (x,), lambda g: (g * (1.0 - y * y),))


def silu(x: Tensor) -> Tensor:
    xd = x.data
    sig = 0.5 * (1.0 + np.tanh(0.5 * xd))  # overflow-free logistic
    y = xd * sig
    return _record("silu", y, (x,), lambda g: (g * (sig * (1.0 + xd * (1.0 - sig))),))


def leaky_relu(x: Tensor, alpha: float = 0.01) -> Tensor:
    xd = x.data
    slope = np.where(xd > 0, 1.0, alpha)
    return _record("leaky_relu", xd * slope, (x,), lambda g: (g * slope,), alpha=alpha)


def dropout(x: Tensor, p: float, rng: "Rng", training: bool = True) -> Tensor:
    """Inverted dropout. Eval mode, or ``p == 0``, returns ``x`` itself."""
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"dropout probability must lie in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    keep = (rng.uniform(x.size).reshape(x.shape) >= p) / (1.0 - p)
    return _record("dropout", x.data * keep, (x,), lambda g: (g * keep,), p=p)


def activation(x: Tensor, kind: str, alpha: float = 0.01) -> Tensor:
    if kind == "silu":
        return silu(x)
    if kind == "leaky_relu":
        return leaky_relu(x, alpha)
    if kind == "tanh":
        return tanh(x)
    raise ConfigError(f"unknown activation {kind!r}")


# --------------------------------------------------------------------------
# Structural ops
# --------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """(..., m, k) @ (k, n) or batched (B, m, k) @ (B, k, n)."""
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    if b.ndim == 3 and (a.ndim != 3 or a.shape[0] != b.shape[0]):
        raise DimensionError(f"batched matmul needs matching batch dims: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    out = ad @ bd

    def bw(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        if b.ndim == 2 and a.ndim == 3:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _record("matmul", out, (a, b), bw)


def transpose(x: Tensor) -> Tensor:
    """Swap the last two axes."""
    if x.ndim < 2:
        raise DimensionError(f"transpose needs rank >= 2, got {x.shape}")
    return _record("transpose", np.swapaxes(x.data, -1, -2).copy(), (x,), lambda g: (np.swapaxes(g, -1, -2),))


def permute(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise DimensionError(f"invalid permutation {axes} for shape {x.shape}")
    inverse = tuple(np.argsort(axes))
    return _record("permute", np.transpose(x.data, axes).copy(), (x,), lambda g: (np.transpose(g, inverse),))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {x.shape} to {shape}") from exc
    return _record("reshape", out.copy(), (x,), lambda g: (g.reshape(x.shape),))


def broadcast_to(x: Tensor, shape: Sequence[int]) -> Tensor:
    """Explicit numpy-style broadcast; backward sums over expanded axes."""
    shape = tuple(shape)
    try:
        out = np.broadcast_to(x.data, shape).copy()
    except ValueError as exc:
        raise DimensionError(f"cannot broadcast {x.shape} to {shape}") from exc
    lead = len(shape) - x.ndim
    expanded = tuple(i for i in range(len(shape)) if i < lead or x.shape[i - lead] == 1 and shape[i] != 1)

    def bw(g):
        return (g.sum(axis=expanded, keepdims=True).reshape(x.shape),)

    return _record("broadcast_to", out, (x,), bw)


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    if not xs:
        raise DimensionError("concat needs at least one tensor")
    axis = _check_axis(xs[0], axis)
    for x in xs[1:]:
        if x.ndim != xs[0].ndim or any(
            x.shape[i] != xs[0].shape[i] for i in range(x.ndim) if i != axis
        ):
            raise DimensionError(f"concat shape mismatch: {[t.shape for t in xs]}")
    out = np.concatenate([x.data for x in xs], axis=axis)
    splits = np.cumsum([x.shape[axis] for x in xs])[:-1]
    return _record("concat", out, tuple(xs), lambda g: tuple(np.split(g, splits, axis=axis)))


def embedding(table: Tensor, indices: np.ndarray) -> Tensor:
    """Gather rows of a (n, d) table; output shape is indices.shape + (d,)."""
    idx = np.asarray(indices)
    if table.ndim != 2:
        raise DimensionError(f"embedding table must be rank 2, got {table.shape}")
    if idx.ndim + 1 > MAX_RANK:
        raise DimensionError(f"index array of rank {idx.ndim} is too deep")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise DimensionError(f"embedding index out of range [0, {table.shape[0]})")
    out = table.data[idx]

    def bw(g):
        gt = np.zeros(table.shape)
        np.add.at(gt, idx.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return _record("embedding", out, (table,), bw)


def mask(x: Tensor, keep: np.ndarray) -> Tensor:
    """Multiply by a constant 0/1 array of the same shape."""
    keep = np.asarray(keep, dtype=np.float64)
    if keep.shape != x.shape:
        raise DimensionError(f"mask shape {keep.shape} differs from {x.shape}")
    return _record("mask", x.data * keep, (x,), lambda g: (g * keep,))


# --------------------------------------------------------------------------
# Reductions
# --------------------------------------------------------------------------


def sum(x: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    if axis is None:
        out = np.array([x.data.sum()])
        return _record("sum", out, (x,), lambda g: (np.full(x.shape, g[0]),))
    ax = _check_axis(x, axis)
    if x.ndim == 1 and not keepdims:
        keepdims = True
    out = x.data.sum(axis=ax, keepdims=keepdims)

    def bw(g):
        g = g if keepdims else np.expand_dims(g, ax)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _record("sum", out, (x,), bw, axis=ax)


def mean(x: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    n = x.size if axis is None else x.shape[_check_axis(x, axis)]
    return scale(sum(x, axis, keepdims), 1.0 / n)


def _extreme(x: Tensor, axis, keepdims, kind: str) -> Tensor:
    pick = np.argmax if kind == "max" else np.argmin
    if axis is None:
        flat = x.data.reshape(-1)
        i = int(pick(flat))
        out = np.array([flat[i]])

        def bw_all(g):
            gx = np.zeros(x.size)
            gx[i] = g[0]
            return (gx.reshape(x.shape),)

        return _record(kind, out, (x,), bw_all)
    ax = _check_axis(x, axis)
    if x.ndim == 1:
        keepdims = True
    arg = np.expand_dims(pick(x.data, axis=ax), ax)
    out = np.take_along_axis(x.data, arg, axis=ax)
    if not keepdims:
        out = out.squeeze(ax)

    def bw(g):
        g = g if keepdims else np.expand_dims(g, ax)
        gx = np.zeros(x.shape)
        np.put_along_axis(gx, arg, g, axis=ax)
        return (gx,)

    return _record(kind, out, (x,), bw, axis=ax)


def max(x: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    """Maximum; the subgradient goes entirely to the first maximal element."""
    return _extreme(x, axis, keepdims, "max")


def min(x: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    """Minimum; the subgradient goes entirely to the first minimal element."""
    return _extreme(x, axis, keepdims, "min")


def reduce(op: str, x: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    fns = {"sum": sum, "mean": mean, "min": min, "max": max}
    if op not in fns:
        raise UsageError(f"unknown reduction {op!r}")
    return fns[op](x, axis, keepdims)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    ax = _check_axis(x, axis)
    z = x.data - x.data.max(axis=ax, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=ax, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=ax, keepdims=True)),)

    return _record("softmax", y, (x,), bw, axis=ax)


def mse(pred: Tensor, target: Tensor) -> Tensor:
    if pred.shape != target.shape:
        raise DimensionError(f"mse shape mismatch: {pred.shape} vs {target.shape}")
    d = sub(pred, target)
    return mean(mul(d, d))


# --------------------------------------------------------------------------
# Deterministic random numbers
# --------------------------------------------------------------------------

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


def _splitmix64_scalar(z: int) -> int:
    z = (z + _GOLDEN) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def _splitmix64_array(z: np.ndarray) -> np.ndarray:
    z = z ^ (z >> np.uint64(30))
    z = z * np.uint64(0xBF58476D1CE4E5B9)
    z = z ^ (z >> np.uint64(27))
    z = z * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


class Rng:
    """Counter-based SplitMix64 stream.

    Draw ``i`` is ``mix(key + (i + 1) * golden)`` in 64-bit wraparound
    arithmetic, so sequences are identical on every platform and numpy
    version. ``spawn`` derives an independent child stream from a label.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & _MASK64
        self._key = _splitmix64_scalar(self.seed)
        self.counter = 0

    def bits(self, n: int) -> np.ndarray:
        ctr = np.arange(self.counter + 1, self.counter + n + 1, dtype=np.uint64)
        self.counter += n
        z = np.uint64(self._key) + ctr * np.uint64(_GOLDEN)
        return _splitmix64_array(z)

    def uniform(self, n: int, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        u = (self.bits(n) >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))
        return low + (high - low) * u

    def normal(self, n: int, mean: float = 0.0, std: float = 1.0) -> np.ndarray:
        m = (n + 1) // 2
        u1 = 1.0 - self.uniform(m)  # (0, 1]
        u2 = self.uniform(m)
        r = np.sqrt(-2.0 * np.log(u1))
        z = np.concatenate([r * np.cos(2 * math.pi * u2), r * np.sin(2 * math.pi * u2)])[:n]
        return mean + std * z

    def permutation(self, n: int) -> np.ndarray:
        return np.argsort(self.bits(n), kind="stable")

    def spawn(self, label: str) -> "Rng":
        h = self.seed
        for ch in label.encode():
            h = _splitmix64_scalar(h ^ ch)
        return Rng(h)


# --------------------------------------------------------------------------
# Gradient checking
# --------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_error: float
    tol: float
    worst_index: tuple | None
    passed: bool


REL_FLOOR = 1e-2


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    """|a - n| / max(|a|, |n|, REL_FLOOR).

    The floor keeps near-zero gradients from turning finite-difference
    round-off into huge ratios.
    """
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), REL_FLOOR)
    return np.abs(analytic - numeric) / denom


def grad_check(
    f: Callable[..., Tensor],
    inputs: Tensor | Sequence[Tensor],
    eps: float = 1e-5,
    tol: float = 1e-4,
) -> GradCheckReport:
    """Compare analytic gradients of scalar ``f(*inputs)`` with central differences.

    ``f`` must be deterministic: a recorded dropout with ``p > 0`` raises
    :class:`UsageError`.
    """
    xs = [inputs] if isinstance(inputs, Tensor) else list(inputs)
    for x in xs:
        if not x.requires_grad:
            raise UsageError("grad_check inputs must require grad")
    with Tape() as tape:
        out = f(*xs)
    if any(n.op == "dropout" for n in tape.nodes):
        raise UsageError("grad_check needs a deterministic function; dropout is active")
    if out.size != 1:
        raise UsageError(f"grad_check needs a scalar-valued function, got {out.shape}")
    grads = backward(out, tape)

    worst, worst_idx = 0.0, None
    for k, x in enumerate(xs):
        analytic = grads.get(x, np.zeros(x.shape))
        base = x.data
        numeric = np.zeros(x.shape)
        for idx in np.ndindex(x.shape):
            plus = base.copy()
            plus[idx] += eps
            minus = base.copy()
            minus[idx] -= eps
            x.data = plus
            fp = f(*xs).item()
            x.data = minus
            fm = f(*xs).item()
            numeric[idx] = (fp - fm) / (2 * eps)
        x.data = base
        err = rel_error(analytic, numeric)
        i = np.unravel_index(int(np.argmax(err)), err.shape)
        if err[i] > worst or worst_idx is None:
            worst, worst_idx = float(err[i]), (k,) + tuple(int(v) for v in i)
    return GradCheckReport(worst, tol, worst_idx, worst < tol)
