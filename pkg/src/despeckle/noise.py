"""Multiplicative Gamma noise, image files, patches and the 8-fold augmentation."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


@dataclass(frozen=True)
class GammaNoiseModel:
    """Unit-mean Gamma speckle with ``L`` looks (variance ``1/L``)."""

    looks: float
    seed: int = 0

    def __post_init__(self):
        if not self.looks > 0:
            raise ValueError(f"number of looks must be positive, got {self.looks}")

    @property
    def variance(self) -> float:
        return 1.0 / self.looks


def sample_noise(model: GammaNoiseModel, shape, rng: np.random.Generator | None = None) -> np.ndarray:
    """I.i.d. Gamma(shape=L, rate=L) samples.

    Without an explicit generator the draw is reproducible from ``model.seed``.
    """
    if rng is None:
        rng = np.random.default_rng(model.seed)
    return rng.gamma(model.looks, 1.0 / model.looks, size=shape)


def sample_noise_looks(looks: np.ndarray, shape, rng: np.random.Generator) -> np.ndarray:
    """Gamma noise with a per-leading-index number of looks.

    ``looks`` has one entry per item along the first axis of ``shape``.
    """
    looks = np.asarray(looks, dtype=np.float64)
    if np.any(looks <= 0):
        raise ValueError("number of looks must be positive")
    bshape = looks.shape + (1,) * (len(shape) - 1)
    lk = looks.reshape(bshape)
    return rng.gamma(np.broadcast_to(lk, shape), np.broadcast_to(1.0 / lk, shape))


def apply_noise(clean: np.ndarray, noise: np.ndarray) -> np.ndarray:
    """Speckled observation ``Z = x * N``; never clipped."""
    clean = np.asarray(clean, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    if clean.shape != noise.shape:
        raise ValueError(f"shape mismatch: {clean.shape} vs {noise.shape}")
    return clean * noise


# ---------------------------------------------------------------- patches


@dataclass
class PatchSet:
    patches: np.ndarray  # [P, size, size]
    sources: list[tuple[int, int, int]] = field(default_factory=list)  # (image, row, col)

    def __len__(self) -> int:
        return len(self.patches)


def patch_count(height: int, width: int, size: int, stride: int) -> int:
    return ((height - size) // stride + 1) * ((width - size) // stride + 1)


def extract_patches(image: np.ndarray, size: int, stride: int, image_id: int = 0) -> PatchSet:
    image = np.asarray(image, dtype=np.float64)
    h, w = image.shape
    if size > min(h, w):
        raise ValueError(f"patch size {size} exceeds image extent {h}x{w}")
    if size < 1 or stride < 1:
        raise ValueError("patch size and stride must be >= 1")
    rows = range(0, h - size + 1, stride)
    cols = range(0, w - size + 1, stride)
    sources = [(image_id, r, c) for r in rows for c in cols]
    patches = np.stack([image[r : r + size, c : c + size] for _, r, c in sources])
    return PatchSet(patches, sources)


def extract_patches_many(images, size: int, stride: int) -> PatchSet:
    sets = [extract_patches(img, size, stride, image_id=i) for i, img in enumerate(images)]
    if not sets:
        raise ValueError("no images")
    return PatchSet(
        np.concatenate([s.patches for s in sets]),
        [src for s in sets for src in s.sources],
    )


# ---------------------------------------------------------------- augmentation
#
# Order: rot0, rot90, rot180, rot270, then the same four applied after a
# horizontal flip. Rotations are counter-clockwise.

AUGMENTATIONS = tuple((k, flip) for flip in (False, True) for k in range(4))


def augment(image: np.ndarray, k: int, flip: bool) -> np.ndarray:
    img = image[..., ::-1] if flip else image
    return np.ascontiguousarray(np.rot90(img, k, axes=(-2, -1)))


def unaugment(image: np.ndarray, k: int, flip: bool) -> np.ndarray:
    img = np.rot90(image, -k, axes=(-2, -1))
    if flip:
        img = img[..., ::-1]
    return np.ascontiguousarray(img)


def augment8(image: np.ndarray) -> list[np.ndarray]:
    image = np.asarray(image, dtype=np.float64)
    return [augment(image, k, flip) for k, flip in AUGMENTATIONS]


# ---------------------------------------------------------------- synthetic data


def synthetic_image(size: int, rng: np.random.Generator, *, low: float = 0.05) -> np.ndarray:
    """Piecewise smooth test scene in ``[low, 1]``: a ramp plus flat shapes."""
    yy, xx = np.mgrid[0:size, 0:size] / max(size - 1, 1)
    theta = rng.uniform(0, 2 * np.pi)
    img = 0.3 + 0.25 * (np.cos(theta) * xx + np.sin(theta) * yy)
    for _ in range(rng.integers(3, 7)):
        level = rng.uniform(0.1, 1.0)
        cy, cx = rng.uniform(0, 1, size=2)
        if rng.random() < 0.5:
            r = rng.uniform(0.08, 0.3)
            region = (yy - cy) ** 2 + (xx - cx) ** 2 < r * r
        else:
            hy, hx = rng.uniform(0.05, 0.25, size=2)
            region = (np.abs(yy - cy) < hy) & (np.abs(xx - cx) < hx)
        img = np.where(region, level, img)
    return np.clip(img, low, 1.0)


# ---------------------------------------------------------------- file formats


class ImageFormatError(ValueError):
    pass


def _read_pgm(raw: bytes) -> np.ndarray:
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if pos >= len(raw):
            raise ImageFormatError("truncated PGM header")
        if raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    pos += 1  # single whitespace before the raster
    if tokens[0] != b"P5":
        raise ImageFormatError("not a binary PGM (P5)")
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise ImageFormatError("malformed PGM header") from exc
    if not 0 < maxval < 256:
        raise ImageFormatError(f"unsupported PGM maxval {maxval}")
    body = raw[pos : pos + width * height]
    if len(body) != width * height:
        raise ImageFormatError("truncated PGM raster")
    return np.frombuffer(body, dtype=np.uint8).reshape(height, width).astype(np.float64) / 255.0


def _read_f32(raw: bytes) -> np.ndarray:
    nl = raw.find(b"\n")
    if nl < 0:
        raise ImageFormatError("missing F32 header line")
    parts = raw[:nl].split()
    if len(parts) != 3 or parts[0] != b"F32":
        raise ImageFormatError("malformed F32 header")
    try:
        width, height = int(parts[1]), int(parts[2])
    except ValueError as exc:
        raise ImageFormatError("malformed F32 header") from exc
    body = raw[nl + 1 :]
    if width <= 0 or height <= 0 or len(body) != 4 * width * height:
        raise ImageFormatError("F32 payload size does not match header")
    return np.frombuffer(body, dtype="<f4").reshape(height, width).astype(np.float64)


def load_image(path) -> np.ndarray:
    """Read a P5 PGM (scaled to [0, 1]) or an F32 raw image as float64."""
    raw = Path(path).read_bytes()
    if raw.startswith(b"P5"):
        return _read_pgm(raw)
    if raw.startswith(b"F32"):
        return _read_f32(raw)
    raise ImageFormatError(f"{path}: unsupported image format")


def encode_image(image: np.ndarray, fmt: str, clip: bool = False) -> bytes:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise ValueError("images are 2-D")
    if clip:
        image = np.clip(image, 0.0, 1.0)
    h, w = image.shape
    if fmt == "f32":
        return f"F32 {w} {h}\n".encode("ascii") + image.astype("<f4").tobytes()
    if fmt == "pgm":
        if not clip and (image.min() < 0 or image.max() > 1):
            raise ValueError("PGM needs values in [0, 1]; pass clip=True")
        q = np.round(255.0 * image).astype(np.uint8)
        return f"P5\n{w} {h}\n255\n".encode("ascii") + q.tobytes()
    raise ValueError(f"unknown image format {fmt!r}")


def save_image(path, image: np.ndarray, clip: bool = False) -> None:
    """Write by suffix: ``.pgm`` (8-bit) or anything else as F32."""
    path = Path(path)
    fmt = "pgm" if path.suffix.lower() == ".pgm" else "f32"
    path.write_bytes(encode_image(image, fmt, clip))
