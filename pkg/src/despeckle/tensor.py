"""Dense float64 tensors with a taped reverse-mode gradient.

Only the primitives the despeckling network and its losses need are
provided. Every primitive returns a new :class:`Tensor` that remembers its
parents and a vector-Jacobian function; :func:`backward` replays the tape
in reverse creation order.
"""

from __future__ import annotations

import itertools
import math
from typing import Callable, Sequence

import numpy as np

_next_id = itertools.count()


class Tensor:
    """Immutable array node in a compute graph."""

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_vjp", "_id")

    def __init__(self, data, requires_grad: bool = False, *, _parents=(), _vjp=None, op="leaf"):
        arr = np.asarray(data, dtype=np.float64)
        if arr.size == 0:
            raise ValueError("zero-size tensor")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in _parents)
        self.op = op
        self._parents: tuple[Tensor, ...] = tuple(_parents)
        self._vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = _vjp
        self._id = next(_next_id)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op!r})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(scale(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents, vjp, op) -> Tensor:
    parents = tuple(parents)
    if not any(p.requires_grad for p in parents):
        return Tensor(data, op=op)
    return Tensor(data, _parents=parents, _vjp=vjp, op=op)


def _check_same_shape(a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        a = as_tensor(a)
        c = float(b)
        return _node(a.data + c, (a,), lambda g: (g,), "add_scalar")
    a = as_tensor(a)
    _check_same_shape(a, b)
    return _node(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        return add(a, -float(b))
    a, b = as_tensor(a), as_tensor(b)
    _check_same_shape(a, b)
    return _node(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        return scale(a, float(b))
    a = as_tensor(a)
    _check_same_shape(a, b)
    ad, bd = a.data, b.data
    return _node(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def scale(a: Tensor, c: float) -> Tensor:
    a = as_tensor(a)
    return _node(a.data * c, (a,), lambda g: (g * c,), "scale")


def square(a: Tensor) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _node(ad * ad, (a,), lambda g: (2.0 * ad * g,), "square")


def relu(a: Tensor) -> Tensor:
    a = as_tensor(a)
    pos = a.data > 0
    return _node(np.where(pos, a.data, 0.0), (a,), lambda g: (np.where(pos, g, 0.0),), "relu")


def mean(a: Tensor) -> Tensor:
    a = as_tensor(a)
    n = a.data.size
    shape = a.shape
    return _node(np.mean(a.data), (a,), lambda g: (np.full(shape, float(g) / n),), "mean")


def total(a: Tensor) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    return _node(np.sum(a.data), (a,), lambda g: (np.full(shape, float(g)),), "sum")


def scale_add(inputs: Sequence[Tensor]) -> Tensor:
    """Sum of ``N`` equally shaped maps divided by ``sqrt(N)``."""
    inputs = [as_tensor(t) for t in inputs]
    if not inputs:
        raise ValueError("scale_add needs at least one input")
    for t in inputs[1:]:
        _check_same_shape(inputs[0], t)
    acc = inputs[0].data.copy()
    for t in inputs[1:]:
        acc += t.data
    k = 1.0 / math.sqrt(len(inputs))
    return _node(acc * k, inputs, lambda g: [g * k] * len(inputs), "scale_add")


def plain_add(inputs: Sequence[Tensor]) -> Tensor:
    """Unscaled sum; the ablation counterpart of :func:`scale_add`."""
    inputs = [as_tensor(t) for t in inputs]
    if not inputs:
        raise ValueError("plain_add needs at least one input")
    for t in inputs[1:]:
        _check_same_shape(inputs[0], t)
    acc = inputs[0].data.copy()
    for t in inputs[1:]:
        acc += t.data
    return _node(acc, inputs, lambda g: [g] * len(inputs), "plain_add")


# ---------------------------------------------------------------- geometry
# All geometric ops act on the last two (row, column) axes.


def rotate180(t: Tensor) -> Tensor:
    t = as_tensor(t)
    return _node(t.data[..., ::-1, ::-1].copy(), (t,), lambda g: (g[..., ::-1, ::-1],), "rotate180")


def rot90k(t: Tensor, k: int) -> Tensor:
    """Counter-clockwise rotation by ``k`` quarter turns."""
    t = as_tensor(t)
    k %= 4
    out = np.ascontiguousarray(np.rot90(t.data, k, axes=(-2, -1)))
    return _node(out, (t,), lambda g: (np.rot90(g, -k, axes=(-2, -1)),), "rot90k")


def flip_h(t: Tensor) -> Tensor:
    t = as_tensor(t)
    return _node(t.data[..., ::-1].copy(), (t,), lambda g: (g[..., ::-1],), "flip_h")


def flip_v(t: Tensor) -> Tensor:
    t = as_tensor(t)
    return _node(t.data[..., ::-1, :].copy(), (t,), lambda g: (g[..., ::-1, :],), "flip_v")


def channel(t: Tensor, k: int) -> Tensor:
    """Select channel ``k`` of a ``[N, C, H, W]`` tensor, giving ``[N, H, W]``."""
    t = as_tensor(t)
    shape = t.shape

    def vjp(g):
        full = np.zeros(shape)
        full[:, k] = g
        return (full,)

    return _node(t.data[:, k].copy(), (t,), vjp, "channel")


def reshape(t: Tensor, shape) -> Tensor:
    t = as_tensor(t)
    old = t.shape
    return _node(t.data.reshape(shape), (t,), lambda g: (g.reshape(old),), "reshape")


# ---------------------------------------------------------------- convolution


def tap_offsets(kh: int, kw: int, mask: np.ndarray, shift=(0, 0)) -> list[tuple[int, int, int, int]]:
    """Active taps as ``(u, v, row_offset, col_offset)`` tuples."""
    dy, dx = shift
    return [
        (u, v, u - kh // 2 + dy, v - kw // 2 + dx)
        for u in range(kh)
        for v in range(kw)
        if mask[u, v]
    ]


def conv2d(x: Tensor, kernel: Tensor, mask=None, shift=(0, 0), bias: Tensor | None = None) -> Tensor:
    """Same-size masked, shifted 2-D convolution (cross-correlation).

    Tap ``(u, v)`` of ``kernel`` reads ``x`` at
    ``(y + u - kh//2 + dy, x + v - kw//2 + dx)``; positions outside the image
    read zero. Taps with ``mask[u, v] == 0`` are skipped entirely.

    ``x`` is ``[C_in, H, W]`` or ``[N, C_in, H, W]``; ``kernel`` is
    ``[C_out, C_in, kh, kw]``.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    squeeze = x.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 4 or kernel.ndim != 4:
        raise ValueError("conv2d expects [N,C,H,W] input and [O,C,kh,kw] kernel")
    n, c, h, w = xd.shape
    o, ck, kh, kw = kernel.shape
    if ck != c:
        raise ValueError(f"kernel expects {ck} input channels, got {c}")
    mask = np.ones((kh, kw), dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if mask.shape != (kh, kw):
        raise ValueError(f"mask shape {mask.shape} does not match kernel {(kh, kw)}")
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (o,):
            raise ValueError(f"bias shape {bias.shape} != ({o},)")

    taps = tap_offsets(kh, kw, mask, shift)
    if not taps:
        raise ValueError("mask has no active taps")
    py = max(abs(t[2]) for t in taps)
    px = max(abs(t[3]) for t in taps)
    # Channel-major layout so the im2col matrix is contiguous without a transpose.
    xc = np.pad(xd.transpose(1, 0, 2, 3), ((0, 0), (0, 0), (py, py), (px, px)))
    cols = np.stack([xc[:, :, py + oy : py + oy + h, px + ox : px + ox + w] for _, _, oy, ox in taps], axis=1)
    cols = cols.reshape(c * len(taps), n * h * w)
    us = [t[0] for t in taps]
    vs = [t[1] for t in taps]
    wk = kernel.data[:, :, us, vs].reshape(o, c * len(taps))
    out = (wk @ cols).reshape(o, n, h, w).transpose(1, 0, 2, 3)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)
    if squeeze:
        out = out[0]

    def vjp(g):
        g4 = g[None] if squeeze else g
        g2 = g4.transpose(1, 0, 2, 3).reshape(o, n * h * w)
        gx = gk = gb = None
        if x.requires_grad:
            gcols = (wk.T @ g2).reshape(c, len(taps), n, h, w)
            gpad = np.zeros((c, n, h + 2 * py, w + 2 * px))
            for t, (_, _, oy, ox) in enumerate(taps):
                gpad[:, :, py + oy : py + oy + h, px + ox : px + ox + w] += gcols[:, t]
            gx = gpad[:, :, py : py + h, px : px + w].transpose(1, 0, 2, 3)
            if squeeze:
                gx = gx[0]
        if kernel.requires_grad:
            gk = np.zeros(kernel.shape)
            gk[:, :, us, vs] = (g2 @ cols.T).reshape(o, c, len(taps))
        if bias is not None and bias.requires_grad:
            gb = g4.sum(axis=(0, 2, 3))
        return (gx, gk, gb) if bias is not None else (gx, gk)

    parents = (x, kernel, bias) if bias is not None else (x, kernel)
    return _node(out, parents, vjp, "conv2d")


# ---------------------------------------------------------------- backward


def graph(output: Tensor) -> list[Tensor]:
    """All nodes that ``output`` depends on, in creation (topological) order."""
    seen: dict[int, Tensor] = {}
    stack = [output]
    while stack:
        t = stack.pop()
        if t._id in seen or not t.requires_grad:
            continue
        seen[t._id] = t
        stack.extend(t._parents)
    return [seen[i] for i in sorted(seen)]


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every leaf that ``loss`` depends on.

    Leaf gradients are overwritten, not accumulated across calls.
    """
    if loss.data.ndim != 0:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    nodes = graph(loss)
    grads: dict[int, np.ndarray] = {loss._id: np.ones(())}
    for node in reversed(nodes):
        g = grads.pop(node._id, None)
        if node._vjp is None:
            node.grad = g if g is not None else np.zeros(node.shape)
            continue
        if g is None:
            continue
        for parent, pg in zip(node._parents, node._vjp(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent._id in grads:
                grads[parent._id] = grads[parent._id] + pg
            else:
                grads[parent._id] = np.asarray(pg, dtype=np.float64)
