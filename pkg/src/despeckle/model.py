"""Double-sided masked CNN producing per-pixel affine coefficients.

Layout of one direction (the left-up "LU" stack; the right-down stack is
the same computation run on the 180-degree rotated image and rotated back)::

    V_1 = relu(conv_1x3(Z) reading the row above)
    H_1 = relu(SA(conv(Z) reading the left neighbour, conv_1x1(V_1)))
    V_l = relu(conv_3x3(V_{l-1}) masked to rows {y-1, y})
    H_l = relu(SA(conv_1x2(H_{l-1}) over columns {x-1, x}, conv_1x1(V_l)))

``V_l`` sees rows ``y-l .. y-1`` over columns ``x-l .. x+l``; ``H_l`` adds
the ``l`` pixels to the left on row ``y``. Merging with the mirrored stack,
``S_l = SA(H_l^LU, H_l^RD)`` sees the ``(2l+1) x (2l+1)`` window minus its
centre. All ``S_l`` are scale-added and passed through a 1x1-only residual
head to the two output maps ``(a, b)``.
"""

from __future__ import annotations

import copy
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import tensor as T
from .tensor import Tensor

DIRECTIONS = ("lu", "rd")


@dataclass(frozen=True)
class ConvSpec:
    in_ch: int
    out_ch: int
    mask: np.ndarray  # bool [kh, kw]
    shift: tuple[int, int] = (0, 0)

    @property
    def kernel_shape(self) -> tuple[int, int, int, int]:
        return (self.out_ch, self.in_ch) + self.mask.shape

    @property
    def fan_in(self) -> int:
        return self.in_ch * int(self.mask.sum())


def _mask(rows) -> np.ndarray:
    return np.array(rows, dtype=bool)


def conv_specs(num_layers: int, channels: int) -> dict[str, ConvSpec]:
    """Ordered convolution table; keys are parameter-name prefixes."""
    c = channels
    specs: dict[str, ConvSpec] = {}
    for d in DIRECTIONS:
        specs[f"{d}.1.v"] = ConvSpec(1, c, _mask([[1, 1, 1]]), (-1, 0))
        # taps (x-1, x) with the centre masked out
        specs[f"{d}.1.hz"] = ConvSpec(1, c, _mask([[1, 0]]))
        specs[f"{d}.1.hv"] = ConvSpec(c, c, _mask([[1]]))
        for layer in range(2, num_layers + 1):
            specs[f"{d}.{layer}.v"] = ConvSpec(c, c, _mask([[1, 1, 1], [1, 1, 1], [0, 0, 0]]))
            specs[f"{d}.{layer}.hh"] = ConvSpec(c, c, _mask([[1, 1]]))
            specs[f"{d}.{layer}.hv"] = ConvSpec(c, c, _mask([[1]]))
    specs["head.0"] = ConvSpec(c, c, _mask([[1]]))
    specs["head.1"] = ConvSpec(c, c, _mask([[1]]))
    specs["out"] = ConvSpec(c, 2, _mask([[1]]))
    return specs


@dataclass
class AffineField:
    """Per-pixel slope ``a`` and bias ``b``; arrays or graph tensors."""

    a: np.ndarray | Tensor
    b: np.ndarray | Tensor

    def __post_init__(self):
        if T.as_tensor(self.a).shape != T.as_tensor(self.b).shape:
            raise ValueError("a and b must have the same shape")


@dataclass
class StackTrace:
    """Intermediate maps recorded during a forward pass (probing only)."""

    v: dict[str, list[np.ndarray]] = field(default_factory=lambda: {d: [] for d in DIRECTIONS})
    h: dict[str, list[np.ndarray]] = field(default_factory=lambda: {d: [] for d in DIRECTIONS})
    s: list[np.ndarray] = field(default_factory=list)
    aggregate: np.ndarray | None = None


class DopamineModel:
    """Architecture descriptor plus float64 parameter arrays.

    Parameters are created zero-filled; use :func:`despeckle.train.he_init`
    for a trainable start.
    """

    def __init__(self, num_layers: int = 21, channels: int = 64):
        if num_layers < 1 or channels < 1:
            raise ValueError("num_layers and channels must be >= 1")
        self.num_layers = num_layers
        self.channels = channels
        self.specs = conv_specs(num_layers, channels)
        self.params: dict[str, np.ndarray] = {}
        for name, spec in self.specs.items():
            self.params[f"{name}.weight"] = np.zeros(spec.kernel_shape)
            self.params[f"{name}.bias"] = np.zeros(spec.out_ch)

    def copy(self) -> "DopamineModel":
        return copy.deepcopy(self)

    def set_kernel(self, name: str, mask, shift=(0, 0)) -> None:
        """Replace one convolution's geometry (used by mutation tests)."""
        old = self.specs[name]
        spec = replace(old, mask=np.asarray(mask, dtype=bool), shift=tuple(shift))
        self.specs[name] = spec
        w = np.zeros(spec.kernel_shape)
        prev = self.params[f"{name}.weight"]
        if prev.shape == w.shape:
            w[...] = prev
        self.params[f"{name}.weight"] = w

    def parameters(self) -> dict[str, Tensor]:
        """Fresh leaf tensors for one taped forward pass."""
        return {k: Tensor(v, requires_grad=True) for k, v in self.params.items()}

    def num_parameters(self) -> int:
        return sum(v.size for v in self.params.values())

    # ------------------------------------------------------------ forward

    def _conv(self, params, name: str, x: Tensor) -> Tensor:
        spec = self.specs[name]
        return T.conv2d(x, params[f"{name}.weight"], spec.mask, spec.shift, params[f"{name}.bias"])

    def stack(self, params, direction: str, z: Tensor, merge=T.scale_add, trace=None) -> list[Tensor]:
        """One causal LU-shaped tower; returns ``[H_1, ..., H_L]``."""
        conv = self._conv
        p = direction
        v = T.relu(conv(params, f"{p}.1.v", z))
        h = T.relu(merge([conv(params, f"{p}.1.hz", z), conv(params, f"{p}.1.hv", v)]))
        hs = [h]
        if trace is not None:
            trace.v[direction].append(v.data)
            trace.h[direction].append(h.data)
        for layer in range(2, self.num_layers + 1):
            v = T.relu(conv(params, f"{p}.{layer}.v", v))
            h = T.relu(merge([conv(params, f"{p}.{layer}.hh", h), conv(params, f"{p}.{layer}.hv", v)]))
            hs.append(h)
            if trace is not None:
                trace.v[direction].append(v.data)
                trace.h[direction].append(h.data)
        return hs

    def feature_maps(self, params, z: Tensor, merge=T.scale_add, trace=None) -> list[Tensor]:
        """Fused maps ``S_1 .. S_L`` for a ``[N, 1, H, W]`` input."""
        lu = self.stack(params, "lu", z, merge, trace)
        rd = self.stack(params, "rd", T.rotate180(z), merge, trace)
        if trace is not None:
            trace.v["rd"] = [m[..., ::-1, ::-1] for m in trace.v["rd"]]
            trace.h["rd"] = [m[..., ::-1, ::-1] for m in trace.h["rd"]]
        s = [merge([h_lu, T.rotate180(h_rd)]) for h_lu, h_rd in zip(lu, rd)]
        if trace is not None:
            trace.s = [t.data for t in s]
        return s

    def head(self, params, agg: Tensor, merge=T.scale_add) -> Tensor:
        r = T.relu(self._conv(params, "head.0", agg))
        r = T.relu(self._conv(params, "head.1", r))
        return self._conv(params, "out", merge([agg, r]))

    def graph(self, z, params=None, merge=T.scale_add, trace: StackTrace | None = None) -> AffineField:
        """Taped forward pass; ``z`` is ``[H, W]`` or ``[N, H, W]``.

        Returns an :class:`AffineField` of tensors shaped like ``z``.
        """
        zt = T.as_tensor(z)
        single = zt.ndim == 2
        if zt.ndim not in (2, 3):
            raise ValueError("input must be [H, W] or [N, H, W]")
        h, w = zt.shape[-2:]
        if h < 3 or w < 3:
            raise ValueError(f"image must be at least 3x3, got {h}x{w}")
        n = 1 if single else zt.shape[0]
        z4 = T.reshape(zt, (n, 1, h, w))
        if params is None:
            params = {k: Tensor(v) for k, v in self.params.items()}
        s = self.feature_maps(params, z4, merge, trace)
        agg = merge(s)
        if trace is not None:
            trace.aggregate = agg.data
        out = self.head(params, agg, merge)
        a, b = T.channel(out, 0), T.channel(out, 1)
        if single:
            a, b = T.reshape(a, (h, w)), T.reshape(b, (h, w))
        return AffineField(a, b)

    def forward(self, z, merge=T.scale_add, trace: StackTrace | None = None) -> AffineField:
        """Inference: affine field as plain arrays."""
        f = self.graph(np.asarray(z, dtype=np.float64), merge=merge, trace=trace)
        return AffineField(f.a.data, f.b.data)


def forward(model: DopamineModel, z) -> AffineField:
    return model.forward(z)


def despeckle(model: DopamineModel, z, clip: bool = False) -> np.ndarray:
    """``a * Z + b`` with the network's coefficients."""
    z = np.asarray(z, dtype=np.float64)
    f = model.forward(z)
    out = f.a * z + f.b
    return np.clip(out, 0.0, 1.0) if clip else out


# ---------------------------------------------------------------- checkpoint

MAGIC = b"DPMN"
VERSION = 1


class CheckpointError(ValueError):
    pass


def encode_checkpoint(model: DopamineModel) -> bytes:
    parts = [MAGIC, struct.pack("<IIII", VERSION, model.num_layers, model.channels, len(model.params))]
    for name, arr in model.params.items():
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def decode_checkpoint(raw: bytes) -> DopamineModel:
    if raw[:4] != MAGIC:
        raise CheckpointError("bad magic; not a DPMN checkpoint")
    if len(raw) < 20:
        raise CheckpointError("truncated header")
    version, num_layers, channels, count = struct.unpack_from("<IIII", raw, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    model = DopamineModel(num_layers, channels)
    pos = 20
    loaded = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", raw, pos)
            pos += 2
            name = raw[pos : pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<B", raw, pos)
            pos += 1
            dims = struct.unpack_from(f"<{rank}Q", raw, pos)
            pos += 8 * rank
            size = int(np.prod(dims)) * 4
            if pos + size > len(raw):
                raise CheckpointError(f"truncated payload for {name}")
            loaded[name] = np.frombuffer(raw[pos : pos + size], dtype="<f4").reshape(dims).astype(np.float64)
            pos += size
    except struct.error as exc:
        raise CheckpointError("truncated checkpoint") from exc
    if pos != len(raw):
        raise CheckpointError(f"{len(raw) - pos} trailing bytes")
    if set(loaded) != set(model.params):
        raise CheckpointError("tensor names do not match the architecture")
    for name, arr in loaded.items():
        if arr.shape != model.params[name].shape:
            raise CheckpointError(f"{name}: shape {arr.shape} != {model.params[name].shape}")
        model.params[name] = arr
    return model


def save_checkpoint(path, model: DopamineModel) -> None:
    Path(path).write_bytes(encode_checkpoint(model))


def load_checkpoint(path) -> DopamineModel:
    return decode_checkpoint(Path(path).read_bytes())
