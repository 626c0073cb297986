"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations always compute eagerly. When a :class:`Tape` is active and at
least one operand requires a gradient, the operation appends a node holding
its backward closure. :func:`backward` walks the tape in reverse.

Elementwise binary ops are strict about shapes; use :func:`broadcast_to`
to expand an operand explicitly.
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "ShapeError",
    "TapeError",
    "Tensor",
    "Parameter",
    "Tape",
    "backward",
    "zero_grad",
    "tensor",
    "add",
    "sub",
    "mul",
    "neg",
    "scale",
    "square",
    "sigmoid",
    "relu",
    "elu",
    "tanh",
    "leaky_relu",
    "log",
    "clip",
    "lincomb",
    "select",
    "transpose",
    "broadcast_to",
    "reshape",
    "concat",
    "take",
    "matmul",
    "linear",
    "bilinear",
    "conv2d",
    "mean",
    "sum",
    "softmax",
    "masked_softmax",
    "l2_norm",
    "elementwise",
    "reduce",
]


class ShapeError(ValueError):
    """Operand shapes do not conform."""


class TapeError(RuntimeError):
    """Misuse of the tape (double backward, stale gradients, non-scalar loss)."""


class Tensor:
    __slots__ = ("data", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _as_tensor(other, self))

    def __radd__(self, other):
        return add(_as_tensor(other, self), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self))

    def __rsub__(self, other):
        return sub(_as_tensor(other, self), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


class Parameter(Tensor):
    """A trainable leaf tensor; ``grad`` is populated by :func:`backward`."""

    __slots__ = ("grad",)

    def __init__(self, data, name: str = ""):
        super().__init__(np.array(data, dtype=np.float64, copy=True), requires_grad=True, name=name)
        self.grad: np.ndarray | None = None


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _as_tensor(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.broadcast_to(np.asarray(x, dtype=np.float64), like.shape).copy())


# ---------------------------------------------------------------- tape

_local = threading.local()


class _Node:
    __slots__ = ("out", "inputs", "fn")

    def __init__(self, out: Tensor, inputs: tuple[Tensor, ...], fn: Callable):
        self.out = out
        self.inputs = inputs
        self.fn = fn


class Tape:
    """Append-only record of differentiable operations.

    Used as a context manager; tapes nest, the innermost one records.
    A tape supports exactly one :func:`backward` call.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def mark(self) -> int:
        return len(self.nodes)

    def truncate(self, mark: int) -> None:
        """Drop every node recorded after ``mark`` (used to discard rejected solver steps)."""
        del self.nodes[mark:]


def _active_tape() -> Tape | None:
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


def _record(out_data: np.ndarray, inputs: Sequence[Tensor], fn: Callable) -> Tensor:
    needs = any(t.requires_grad for t in inputs)
    tape = _active_tape() if needs else None
    out = Tensor(out_data, requires_grad=tape is not None)
    if tape is not None:
        tape.nodes.append(_Node(out, tuple(inputs), fn))
    return out


def zero_grad(params: Iterable[Parameter]) -> None:
    for p in params:
        p.grad = None


def backward(tape: Tape, loss: Tensor) -> dict[int, np.ndarray]:
    """Reverse pass from a scalar ``loss``.

    Writes ``grad`` on every reachable :class:`Parameter` and returns the
    full gradient map keyed by ``id(tensor)``. Reached parameters must have
    been reset with :func:`zero_grad`; a tape cannot be replayed.
    """
    if tape.consumed:
        raise TapeError("backward already ran on this tape; higher-order or repeated passes are not supported")
    if loss.size != 1:
        raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape.consumed = True
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        in_grads = node.fn(g)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
            if isinstance(t, Parameter):
                leaves[key] = t
    if id(loss) in grads and isinstance(loss, Parameter):
        leaves[id(loss)] = loss
    for key, p in leaves.items():
        if p.grad is not None:
            raise TapeError(f"parameter {p.name!r} holds a gradient from a previous pass; call zero_grad first")
        p.grad = grads[key]
    return grads


# ---------------------------------------------------------------- helpers


def _check_same(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        for axis, (x, y) in enumerate(zip(a.shape, b.shape)):
            if x != y:
                raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape} on axis {axis}")
        raise ShapeError(f"{op}: rank mismatch {a.shape} vs {b.shape}")


def _sum_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same("add", a, b)
    return _record(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same("sub", a, b)
    return _record(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same("mul", a, b)
    ad, bd = a.data, b.data
    return _record(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def neg(a: Tensor) -> Tensor:
    return _record(-a.data, (a,), lambda g: (-g,))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _record(a.data * c, (a,), lambda g: (g * c,))


def square(a: Tensor) -> Tensor:
    ad = a.data
    return _record(ad * ad, (a,), lambda g: (2.0 * ad * g,))


def sigmoid(a: Tensor) -> Tensor:
    # split by sign so large |x| never overflows exp
    x = a.data
    ex = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + ex), ex / (1.0 + ex))
    return _record(out, (a,), lambda g: (g * out * (1.0 - out),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _record(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def elu(a: Tensor) -> Tensor:
    x = a.data
    neg_part = np.expm1(np.minimum(x, 0.0))
    out = np.where(x > 0, x, neg_part)
    return _record(out, (a,), lambda g: (g * np.where(x > 0, 1.0, neg_part + 1.0),))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _record(out, (a,), lambda g: (g * (1.0 - out * out),))


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    x = a.data
    out = np.where(x > 0, x, slope * x)
    return _record(out, (a,), lambda g: (g * np.where(x > 0, 1.0, slope),))


def log(a: Tensor) -> Tensor:
    x = a.data
    return _record(np.log(x), (a,), lambda g: (g / x,))


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    x = a.data
    inside = (x >= lo) & (x <= hi)
    return _record(np.clip(x, lo, hi), (a,), lambda g: (g * inside,))


def lincomb(coeffs: Sequence, terms: Sequence[Tensor]) -> Tensor:
    """``sum_i coeffs[i] * terms[i]`` as a single node.

    A coefficient may be a float or a 1-D array holding one value per entry
    of the leading axis (per-sample step sizes). Scalar zeros are skipped.
    """
    pairs = []
    for c, t in zip(coeffs, terms):
        if np.ndim(c) == 0:
            if c == 0.0:
                continue
            c = float(c)
        else:
            c = np.asarray(c, dtype=np.float64)
            if c.shape != (t.shape[0],):
                raise ShapeError(f"lincomb: per-sample coefficient shape {c.shape} vs leading axis {t.shape[0]}")
            c = c.reshape((-1,) + (1,) * (t.ndim - 1))
        pairs.append((c, t))
    if not pairs:
        raise ValueError("lincomb needs at least one nonzero coefficient")
    shape = pairs[0][1].shape
    for _, t in pairs[1:]:
        _check_same("lincomb", pairs[0][1], t)
    out = pairs[0][0] * pairs[0][1].data
    for c, t in pairs[1:]:
        out = out + c * t.data
    cs = [c for c, _ in pairs]
    return _record(np.broadcast_to(out, shape).copy(), [t for _, t in pairs], lambda g: tuple(c * g for c in cs))


def select(mask: np.ndarray, a: Tensor, b: Tensor) -> Tensor:
    """Rows of ``a`` where ``mask`` (over the leading axis) is true, else rows of ``b``."""
    _check_same("select", a, b)
    m = np.asarray(mask, dtype=bool).reshape((-1,) + (1,) * (a.ndim - 1))
    return _record(np.where(m, a.data, b.data), (a, b), lambda g: (np.where(m, g, 0.0), np.where(m, 0.0, g)))


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _record(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


_UNARY = {
    "neg": neg,
    "square": square,
    "sigmoid": sigmoid,
    "relu": relu,
    "elu": elu,
    "tanh": tanh,
}
_BINARY = {"add": add, "sub": sub, "mul": mul}


def elementwise(op: str, *args, **kwargs) -> Tensor:
    """Dispatch by name: add, sub, mul, square, sigmoid, relu, elu, tanh, scale."""
    if op in _BINARY:
        return _BINARY[op](*args)
    if op in _UNARY:
        return _UNARY[op](*args)
    if op == "scale":
        return scale(*args, **kwargs)
    raise ValueError(f"unknown elementwise op {op!r}")


# ---------------------------------------------------------------- shape ops


def broadcast_to(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    src = a.shape
    try:
        out = np.broadcast_to(a.data, shape).copy()
    except ValueError as exc:
        raise ShapeError(f"cannot broadcast {src} to {shape}") from exc
    return _record(out, (a,), lambda g: (_sum_to(g, src),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    src = a.shape
    return _record(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),))


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    out = np.concatenate([p.data for p in parts], axis=axis)
    bounds = np.cumsum([p.shape[axis] for p in parts])[:-1]

    def fn(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _record(out, parts, fn)


def take(a: Tensor, index, axis: int = 0) -> Tensor:
    """Gather along ``axis`` with an integer index array (repeats allowed)."""
    idx = np.asarray(index, dtype=np.intp)
    src = a.shape
    out = np.take(a.data, idx, axis=axis)

    def fn(g):
        full = np.zeros(src)
        moved = np.moveaxis(full, axis, 0)
        np.add.at(moved, idx, np.moveaxis(g, axis, 0))
        return (full,)

    return _record(out, (a,), fn)


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``np.matmul`` semantics; a 2-D right operand may be shared across a batch."""
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ShapeError(f"matmul: inner dimension mismatch {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    out = ad @ bd

    def fn(g):
        if bd.ndim == 1:
            return g[..., None] * bd, (ad * g[..., None]).reshape(-1, bd.shape[0]).sum(0)
        if ad.ndim == 1:
            return g @ bd.T, np.outer(ad, g)
        ga = _sum_to(g @ np.swapaxes(bd, -1, -2), ad.shape)
        gb = np.swapaxes(ad, -1, -2) @ g
        gb = _sum_to(gb, bd.shape)
        return ga, gb

    return _record(out, (a, b), fn)


def linear(x: Tensor, W: Tensor, b: Tensor) -> Tensor:
    """``W x + b`` applied over the last axis of ``x`` (so x may carry leading batch axes)."""
    if W.ndim != 2 or x.shape[-1] != W.shape[1]:
        raise ShapeError(f"linear: input width {x.shape[-1]} does not match weight {W.shape}")
    if b.shape != (W.shape[0],):
        raise ShapeError(f"linear: bias shape {b.shape} != ({W.shape[0]},)")
    xd, Wd = x.data, W.data
    out = xd @ Wd.T + b.data

    def fn(g):
        gx = g @ Wd
        g2 = g.reshape(-1, Wd.shape[0])
        gW = g2.T @ xd.reshape(-1, Wd.shape[1])
        return gx, gW, g2.sum(0)

    return _record(out, (x, W, b), fn)


def bilinear(a: Tensor, M: Tensor, b: Tensor) -> Tensor:
    """``a^T M b`` over the last axis; leading batch axes are kept."""
    n = M.shape[0]
    if M.shape != (n, n) or a.shape[-1] != n or b.shape != a.shape:
        raise ShapeError(f"bilinear: shapes a={a.shape}, M={M.shape}, b={b.shape}")
    ad, Md, bd = a.data, M.data, b.data
    Mb = bd @ Md.T
    out = np.sum(ad * Mb, axis=-1)

    def fn(g):
        ge = g[..., None]
        ga = ge * Mb
        gb = ge * (ad @ Md)
        gM = (ge * ad).reshape(-1, n).T @ bd.reshape(-1, n)
        return ga, gM, gb

    return _record(out, (a, M, b), fn)


def _windows(xh: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    # channels-last [N,Hp,Wp,C] -> [N,Ho,Wo,k,k,C] view; the innermost run stays contiguous
    sn, sh, sw, sc = xh.strides
    n, c = xh.shape[0], xh.shape[3]
    return np.lib.stride_tricks.as_strided(xh, (n, ho, wo, k, k, c), (sn, sh * stride, sw * stride, sh, sw, sc),
                                           writeable=False)


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of ``[N,C,H,W]`` (or unbatched ``[C,H,W]``) with ``[O,C,k,k]``."""
    if stride < 1 or padding < 0:
        raise ValueError("conv2d: stride must be >= 1 and padding >= 0")
    squeeze = x.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 4:
        raise ShapeError(f"conv2d: input must be [C,H,W] or [N,C,H,W], got {x.shape}")
    kd = kernel.data
    if kd.ndim != 4 or kd.shape[2] != kd.shape[3]:
        raise ShapeError(f"conv2d: kernel must be [O,C,k,k], got {kernel.shape}")
    n, c, h, w = xd.shape
    o, kc, k, _ = kd.shape
    if kc != c:
        raise ShapeError(f"conv2d: input channel axis (axis {1 - squeeze}) has {c}, kernel expects {kc}")
    if bias.shape != (o,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({o},)")
    if k > h + 2 * padding:
        raise ShapeError(f"conv2d: kernel {k} exceeds padded height {h + 2 * padding} (axis {2 - squeeze})")
    if k > w + 2 * padding:
        raise ShapeError(f"conv2d: kernel {k} exceeds padded width {w + 2 * padding} (axis {3 - squeeze})")
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1
    xh = np.zeros((n, h + 2 * padding, w + 2 * padding, c))
    xh[:, padding : padding + h, padding : padding + w, :] = xd.transpose(0, 2, 3, 1)
    cols = _windows(xh, k, stride, ho, wo).reshape(n * ho * wo, k * k * c)
    kmat = kd.transpose(0, 2, 3, 1).reshape(o, k * k * c)
    out = (cols @ kmat.T + bias.data).reshape(n, ho, wo, o).transpose(0, 3, 1, 2)
    if squeeze:
        out = out[0]
    need_x = x.requires_grad

    def fn(g):
        g4 = g[None] if squeeze else g
        gmat = g4.transpose(0, 2, 3, 1).reshape(n * ho * wo, o)
        gk = (gmat.T @ cols).reshape(o, k, k, c).transpose(0, 3, 1, 2)
        gb = gmat.sum(0)
        if not need_x:
            return None, gk, gb
        gcols = (gmat @ kmat).reshape(n, ho, wo, k, k, c)
        gxh = np.zeros_like(xh)
        for i in range(k):
            for j in range(k):
                gxh[:, i : i + stride * ho : stride, j : j + stride * wo : stride, :] += gcols[:, :, :, i, j, :]
        gx = np.ascontiguousarray(gxh[:, padding : padding + h, padding : padding + w, :].transpose(0, 3, 1, 2))
        if squeeze:
            gx = gx[0]
        return gx, gk, gb

    return _record(out, (x, kernel, bias), fn)


# ---------------------------------------------------------------- reductions


def _norm_axis(axis, ndim):
    if axis is None:
        return None
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise ShapeError(f"axis {ax} out of range for rank {ndim}")
        out.append(ax % ndim)
    return tuple(out)


def sum(a: Tensor, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    axes = _norm_axis(axis, a.ndim)
    src = a.shape
    if a.size == 0:
        raise ShapeError("sum over an empty tensor")
    out = a.data.sum(axis=axes)

    def fn(g):
        if axes is not None:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, src).copy(),)

    return _record(out, (a,), fn)


def mean(a: Tensor, axis=None) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    count = a.size if axes is None else int(np.prod([a.shape[i] for i in axes]))
    if count == 0:
        raise ShapeError("mean over an empty axis")
    return scale(sum(a, axis), 1.0 / count)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    if a.shape[axis] == 0:
        raise ShapeError("softmax over an empty axis")
    x = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(x)
    out = e / e.sum(axis=axis, keepdims=True)

    def fn(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _record(out, (a,), fn)


def masked_softmax(a: Tensor, mask: np.ndarray, axis: int = -1) -> Tensor:
    """Softmax restricted to entries where ``mask`` is true; masked entries get exactly 0."""
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), a.shape)
    if not mask.any(axis=axis).all():
        raise ValueError("masked_softmax: a row has no unmasked entries (isolated vertex without self-loop?)")
    x = np.where(mask, a.data, -np.inf)
    x = x - x.max(axis=axis, keepdims=True)
    e = np.where(mask, np.exp(x), 0.0)
    out = e / e.sum(axis=axis, keepdims=True)

    def fn(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _record(out, (a,), fn)


def reduce(op: str, x: Tensor, axis: int | None = None) -> Tensor:
    """Dispatch by name: mean_all, mean_axis, sum, softmax_axis."""
    if op == "mean_all":
        return mean(x)
    if op == "mean_axis":
        if axis is None:
            raise ValueError("mean_axis requires an axis")
        return mean(x, axis)
    if op == "sum":
        return sum(x, axis)
    if op == "softmax_axis":
        return softmax(x, -1 if axis is None else axis)
    raise ValueError(f"unknown reduction {op!r}")


def l2_norm(a: Tensor, axis: int = -1, eps: float = 1e-12) -> Tensor:
    """Euclidean norm along ``axis``; ``eps`` keeps the gradient finite at zero."""
    x = a.data
    out = np.sqrt((x * x).sum(axis=axis) + eps)

    def fn(g):
        return (np.expand_dims(g / out, axis) * x,)

    return _record(out, (a,), fn)
