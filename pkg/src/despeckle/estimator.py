"""Pixelwise affine reconstruction and its risk estimates.

The multiplicative estimate uses ``E[Z_i] = x_i`` and
``E[Z_i^2] = x_i^2 (1 + s2)`` for unit-mean noise with variance ``s2``:
because ``(a_i, b_i)`` never see ``Z_i``, the expectation of
``(Z_i - xhat_i)^2 + Z_i^2 s2 / (1 + s2) (2 a_i - 1)`` equals the true
squared error ``(x_i - xhat_i)^2``.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .model import AffineField, DopamineModel
from .noise import augment8
from .tensor import Tensor


def _check_sigma2(sigma2: float) -> None:
    if not sigma2 > 0:
        raise ValueError(f"noise variance must be positive, got {sigma2}")


def apply_affine(z, field: AffineField):
    """``a * Z + b``. Returns a Tensor if any input is one, else an array."""
    if not any(isinstance(v, Tensor) for v in (z, field.a, field.b)):
        z = np.asarray(z, dtype=np.float64)
        a, b = np.asarray(field.a), np.asarray(field.b)
        if a.shape != z.shape:
            raise ValueError(f"shape mismatch: {a.shape} vs {z.shape}")
        return a * z + b
    zt = T.as_tensor(z)
    return T.mul(T.as_tensor(field.a), zt) + T.as_tensor(field.b)


def loss_mult(z, field: AffineField, sigma2: float) -> tuple[Tensor, Tensor]:
    """Per-pixel multiplicative risk estimate and its mean.

    ``(Z - xhat)^2 + Z^2 s2/(1+s2) (2a - 1)``; values may be negative.
    """
    _check_sigma2(sigma2)
    zt = T.as_tensor(z)
    a = T.as_tensor(field.a)
    resid = T.square(zt - apply_affine(zt, field))
    weight = Tensor(zt.data * zt.data * (sigma2 / (1.0 + sigma2)))
    per_pixel = resid + T.mul(T.scale(a, 2.0) - 1.0, weight)
    return per_pixel, T.mean(per_pixel)


def loss_add(z, field: AffineField, sigma2: float) -> tuple[Tensor, Tensor]:
    """Additive-noise counterpart ``(Z - xhat)^2 + s2 (2a - 1)``."""
    _check_sigma2(sigma2)
    zt = T.as_tensor(z)
    a = T.as_tensor(field.a)
    resid = T.square(zt - apply_affine(zt, field))
    per_pixel = resid + T.scale(T.scale(a, 2.0) - 1.0, sigma2)
    return per_pixel, T.mean(per_pixel)


def loss_supervised(xhat, x) -> Tensor:
    """Mean squared error against the clean image."""
    xhat, x = T.as_tensor(xhat), T.as_tensor(x)
    return T.mean(T.square(xhat - x))


def loss_ft(z, sigma2: float, model: DopamineModel, params=None) -> Tensor:
    """Mean multiplicative risk estimate of the network on one image."""
    field = model.graph(np.asarray(z, dtype=np.float64), params)
    return loss_mult(z, field, sigma2)[1]


def _tree_mean8(terms: list):
    # pairwise sums keep eight equal terms exact
    pairs = [terms[i] + terms[i + 1] for i in range(0, 8, 2)]
    return ((pairs[0] + pairs[1]) + (pairs[2] + pairs[3])) * 0.125


def loss_aft(z, sigma2: float, model: DopamineModel, params=None) -> Tensor:
    """Average of :func:`loss_ft` over the 8 flip/rotation variants of ``z``.

    One graph containing all eight forward passes.
    """
    _check_sigma2(sigma2)
    if params is None:
        params = model.parameters()
    return _tree_mean8([loss_ft(zj, sigma2, model, params) for zj in augment8(z)])


def loss_grad(loss_fn, model: DopamineModel, *args) -> tuple[float, dict[str, np.ndarray]]:
    """Value and parameter gradients of ``loss_fn(*args, model, params)``."""
    params = model.parameters()
    loss = loss_fn(*args, model, params)
    T.backward(loss)
    return loss.item(), {k: p.grad for k, p in params.items()}


def aft_value_and_grad(z, sigma2: float, model: DopamineModel):
    """AFT loss and gradient using one backward pass per augmentation.

    Returns ``(aft_loss, identity_term_loss, grads)``. Each per-augmentation
    graph is freed before the next is built; results are combined with the
    same pairwise mean as :func:`loss_aft`.
    """
    _check_sigma2(sigma2)
    values, grads = [], []
    for zj in augment8(z):
        v, g = loss_grad(loss_ft, model, zj, sigma2)
        values.append(v)
        grads.append(g)
    mean_grad = {k: _tree_mean8([g[k] for g in grads]) for k in grads[0]}
    return _tree_mean8(values), values[0], mean_grad
