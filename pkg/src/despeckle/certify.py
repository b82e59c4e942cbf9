"""Empirical certificates for the masked network.

* :func:`certify_independence` - perturbing ``Z_i`` must leave ``(a_i, b_i)``
  bitwise unchanged.
* :func:`receptive_field_map` - which input pixels can move one output pixel.
* :func:`gradient_field_map` - the same set from input gradients, cheap enough
  for the full-size model.
* :func:`variance_report` - per-layer activation variance at initialization,
  with scale-add or plain-add merging.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .model import DopamineModel, StackTrace
from .train import he_init

DELTAS = (-2.0, -0.5, 0.5, 2.0)


@dataclass
class Violation:
    trial: int
    pixel: tuple[int, int]
    delta: float
    stage: str  # "S_<l>", "aggregate" or "head"


@dataclass
class CertificationReport:
    trials: int
    passed: int
    violations: list[Violation] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return self.passed == self.trials


def _first_changed_stage(before: StackTrace, after: StackTrace, y: int, x: int) -> str:
    for layer, (s0, s1) in enumerate(zip(before.s, after.s), start=1):
        if not np.array_equal(s0[..., y, x], s1[..., y, x]):
            return f"S_{layer}"
    if not np.array_equal(before.aggregate[..., y, x], after.aggregate[..., y, x]):
        return "aggregate"
    return "head"


def certify_independence(
    model: DopamineModel,
    height: int = 64,
    width: int = 64,
    trials: int = 100,
    seed: int = 0,
    probe_layers: bool = False,
    use_model_weights: bool = False,
) -> CertificationReport:
    """Randomised bitwise check that ``(a_i, b_i)`` ignore ``Z_i``.

    Each trial draws He-initialised weights for ``model``'s architecture
    (or keeps the model's own weights when ``use_model_weights``), a random
    positive image, a pixel and a perturbation from ``DELTAS``. With
    ``probe_layers`` a failing trial is attributed to the first stage whose
    value at the pixel moved.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    rng = np.random.default_rng(seed)
    probe = model.copy()
    report = CertificationReport(trials, 0)
    for trial in range(trials):
        if not use_model_weights:
            he_init(probe, rng)
        z = rng.uniform(0.05, 1.0, size=(height, width)) * rng.gamma(4.0, 0.25, size=(height, width))
        y, x = int(rng.integers(height)), int(rng.integers(width))
        delta = float(rng.choice(DELTAS))
        z2 = z.copy()
        z2[y, x] += delta
        t0 = StackTrace() if probe_layers else None
        t1 = StackTrace() if probe_layers else None
        f0 = probe.forward(z, trace=t0)
        f1 = probe.forward(z2, trace=t1)
        same = f0.a[y, x] == f1.a[y, x] and f0.b[y, x] == f1.b[y, x]
        if same:
            report.passed += 1
        else:
            stage = _first_changed_stage(t0, t1, y, x) if probe_layers else "unknown"
            report.violations.append(Violation(trial, (y, x), delta, stage))
    return report


def _outputs_at(model, batch, y, x, layer):
    """Values that must not move: (a, b) at the pixel, or ``S_layer`` there."""
    if layer is None:
        f = model.forward(batch)
        return np.stack([f.a[:, y, x], f.b[:, y, x]], axis=1)
    params = {k: T.Tensor(v) for k, v in model.params.items()}
    s = model.feature_maps(params, T.Tensor(batch[:, None]))
    return s[layer - 1].data[:, :, y, x]


def receptive_field_map(
    model: DopamineModel,
    pixel: tuple[int, int] | None = None,
    shape: tuple[int, int] | None = None,
    layer: int | None = None,
    seed: int = 0,
    magnitude: float = 1.0,
    threshold: float = 1e-12,
    batch: int = 64,
) -> np.ndarray:
    """Boolean map of input pixels whose perturbation moves the output at ``pixel``.

    Uses the model's current weights. ``layer`` selects ``S_layer`` instead
    of the final ``(a, b)``. The default image is the smallest square that
    leaves one pixel of margin around the widest possible window.
    """
    if shape is None:
        side = 2 * model.num_layers + 3
        shape = (side, side)
    h, w = shape
    if pixel is None:
        pixel = (h // 2, w // 2)
    y, x = pixel
    rng = np.random.default_rng(seed)
    z = rng.uniform(0.05, 1.0, size=shape) * rng.gamma(4.0, 0.25, size=shape)
    base = _outputs_at(model, z[None], y, x, layer)[0]
    rf = np.zeros(shape, dtype=bool)
    coords = [(j, k) for j in range(h) for k in range(w)]
    for start in range(0, len(coords), batch):
        chunk = coords[start : start + batch]
        zs = np.repeat(z[None], len(chunk), axis=0)
        for n, (j, k) in enumerate(chunk):
            zs[n, j, k] += magnitude
        out = _outputs_at(model, zs, y, x, layer)
        moved = np.any(np.abs(out - base) > threshold, axis=1)
        for n, (j, k) in enumerate(chunk):
            rf[j, k] = moved[n]
    return rf


def gradient_field_map(
    model: DopamineModel,
    pixel: tuple[int, int] | None = None,
    shape: tuple[int, int] | None = None,
    seed: int = 0,
    draws: int = 1,
    reinit: bool = False,
) -> np.ndarray:
    """Input pixels with a nonzero derivative of a random mix of ``(a, b)`` at ``pixel``.

    One backward pass per draw instead of one forward per input pixel.
    Masked taps are never gathered, so a pixel without a path gets an exact
    zero. Dead ReLUs can hide a path for one input, hence the union over
    ``draws`` random images (and He weights when ``reinit``).
    """
    if shape is None:
        side = 2 * model.num_layers + 3
        shape = (side, side)
    h, w = shape
    if pixel is None:
        pixel = (h // 2, w // 2)
    rng = np.random.default_rng(seed)
    probe = model.copy() if reinit else model
    rf = np.zeros(shape, dtype=bool)
    for _ in range(draws):
        if reinit:
            he_init(probe, rng)
        z = T.Tensor(rng.uniform(0.05, 1.0, size=shape) * rng.gamma(4.0, 0.25, size=shape), requires_grad=True)
        f = probe.graph(z)
        pick_a = np.zeros(shape)
        pick_b = np.zeros(shape)
        pick_a[pixel] = rng.normal()
        pick_b[pixel] = rng.normal()
        T.backward(T.add(T.total(T.mul(f.a, T.Tensor(pick_a))), T.total(T.mul(f.b, T.Tensor(pick_b)))))
        rf |= z.grad != 0
    return rf


def window_minus_center(shape, pixel, radius: int) -> np.ndarray:
    """Expected receptive field: ``(2r+1)^2`` window around ``pixel`` without it."""
    y, x = pixel
    m = np.zeros(shape, dtype=bool)
    m[max(y - radius, 0) : y + radius + 1, max(x - radius, 0) : x + radius + 1] = True
    m[y, x] = False
    return m


def variance_report(
    num_layers: int = 21,
    channels: int = 64,
    mode: str = "sa",
    size: int = 64,
    seed: int = 0,
    repeats: int = 16,
) -> list[float]:
    """Sample variance of each fused map ``S_l`` at He initialization.

    Input is zero-mean unit-variance white Gaussian noise; the variances are
    averaged over ``repeats`` independent weight draws because a single draw
    wanders by a factor of two or more over 21 layers. ``mode="add"``
    replaces every scale-add with a plain sum.
    """
    merges = {"sa": T.scale_add, "add": T.plain_add}
    if mode not in merges:
        raise ValueError(f"mode must be 'sa' or 'add', got {mode!r}")
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    rng = np.random.default_rng(seed)
    model = DopamineModel(num_layers, channels)
    totals = np.zeros(num_layers)
    for _ in range(repeats):
        he_init(model, rng)
        z = rng.standard_normal((1, 1, size, size))
        params = {k: T.Tensor(v) for k, v in model.params.items()}
        s = model.feature_maps(params, T.Tensor(z), merge=merges[mode])
        totals += [np.var(m.data) for m in s]
    return [float(v) for v in totals / repeats]
