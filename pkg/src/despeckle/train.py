"""Initialization, Adam, supervised/blind training and per-image fine-tuning."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .estimator import aft_value_and_grad, apply_affine, loss_ft, loss_grad, loss_supervised
from .model import DopamineModel
from .noise import sample_noise_looks


@dataclass
class TrainConfig:
    batch_size: int = 64
    initial_lr: float = 1e-3
    lr_halving_period_epochs: int = 10
    epochs: int = 30
    patch_size: int = 40
    stride: int = 10
    looks: float = 4.0
    blind_low: float = 0.5
    blind_high: float = 12.0
    group_size: int = 121
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        for name in ("batch_size", "initial_lr", "lr_halving_period_epochs", "epochs",
                     "patch_size", "stride", "looks", "blind_low", "blind_high", "group_size"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.blind_low > self.blind_high:
            raise ValueError("blind_low must not exceed blind_high")

    def lr_at(self, epoch: int) -> float:
        """Learning rate for 1-based ``epoch``."""
        return self.initial_lr * 0.5 ** ((epoch - 1) // self.lr_halving_period_epochs)


@dataclass
class FinetuneConfig:
    lr: float = 1.2e-5
    epochs: int = 10
    mode: str = "aft"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.mode not in ("ft", "aft"):
            raise ValueError(f"mode must be 'ft' or 'aft', got {self.mode!r}")


def he_init(model: DopamineModel, seed=0) -> DopamineModel:
    """Normal(0, 2/fan_in) on unmasked taps, zeros elsewhere and on biases.

    ``fan_in`` counts input channels times active taps. Modifies ``model``
    in place and returns it.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    for name, spec in model.specs.items():
        w = np.zeros(spec.kernel_shape)
        std = math.sqrt(2.0 / spec.fan_in)
        w[:, :, spec.mask] = rng.normal(0.0, std, size=(spec.out_ch, spec.in_ch, int(spec.mask.sum())))
        model.params[f"{name}.weight"] = w
        model.params[f"{name}.bias"] = np.zeros(spec.out_ch)
    return model


class Adam:
    """Adam with bias correction over a dict of arrays."""

    def __init__(self, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for k, g in grads.items():
            p = params[k]
            if g.shape != p.shape:
                raise ValueError(f"{k}: gradient shape {g.shape} != {p.shape}")
            m = self.m.get(k)
            if m is None:
                m = self.m[k] = np.zeros_like(p)
                self.v[k] = np.zeros_like(p)
            v = self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            params[k] = p - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class TrainResult:
    model: DopamineModel
    trace: list[tuple[int, float, float]]  # (epoch, mean loss, lr)
    looks_history: list[np.ndarray] = field(default_factory=list)


def _supervised_loss(z, x, model, params):
    f = model.graph(z, params)
    return loss_supervised(apply_affine(z, f), x)


def _fit(model, clean, config: TrainConfig, draw_looks) -> TrainResult:
    clean = np.asarray(clean, dtype=np.float64)
    if clean.ndim != 3 or len(clean) == 0:
        raise ValueError("need a non-empty [P, H, W] stack of clean patches")
    rng = np.random.default_rng(config.seed)
    opt = Adam(config.beta1, config.beta2, config.eps)
    trace, history = [], []
    n = len(clean)
    for epoch in range(1, config.epochs + 1):
        lr = config.lr_at(epoch)
        looks = draw_looks(rng)
        history.append(looks)
        noisy = clean * sample_noise_looks(looks, clean.shape, rng)
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            loss, grads = loss_grad(_supervised_loss, model, noisy[idx], clean[idx])
            opt.step(model.params, grads, lr)
            total += loss * len(idx)
        trace.append((epoch, total / n, lr))
    return TrainResult(model, trace, history)


def train_supervised(model: DopamineModel, clean_patches, config: TrainConfig) -> TrainResult:
    """Noise-augmented MSE training at a single number of looks.

    A fresh noise realisation is drawn for every patch in every epoch.
    """
    n = len(clean_patches)
    return _fit(model, clean_patches, config, lambda rng: np.full(n, float(config.looks)))


def group_looks(n: int, group_size: int, low: float, high: float, rng: np.random.Generator):
    """Per-patch looks where consecutive groups of ``group_size`` share one draw.

    Returns ``(per_patch, per_group)``; a trailing short group is kept.
    """
    groups = math.ceil(n / group_size)
    drawn = rng.uniform(low, high, size=groups)
    return np.repeat(drawn, group_size)[:n], drawn


def train_blind(model: DopamineModel, clean_patches, config: TrainConfig) -> TrainResult:
    """Training over a range of noise levels, one level per patch group per epoch."""
    n = len(clean_patches)

    def draw(rng):
        return group_looks(n, config.group_size, config.blind_low, config.blind_high, rng)[0]

    return _fit(model, clean_patches, config, draw)


def finetune(model: DopamineModel, z, sigma2: float, config: FinetuneConfig | None = None):
    """Adapt a copy of ``model`` to the noisy image ``z`` without clean data.

    One Adam step per epoch on the full image, from fresh optimizer state.
    Returns ``(adapted_model, trace)`` where ``trace`` holds the
    un-augmented risk estimate at the start of each epoch.
    """
    config = config or FinetuneConfig()
    if not sigma2 > 0:
        raise ValueError(f"noise variance must be positive, got {sigma2}")
    z = np.asarray(z, dtype=np.float64)
    model = model.copy()
    opt = Adam(config.beta1, config.beta2, config.eps)
    trace = []
    for epoch in range(1, config.epochs + 1):
        if config.mode == "aft":
            _, ft_value, grads = aft_value_and_grad(z, sigma2, model)
        else:
            ft_value, grads = loss_grad(loss_ft, model, z, sigma2)
        trace.append((epoch, ft_value, config.lr))
        opt.step(model.params, grads, config.lr)
    return model, trace


def check_finite(model: DopamineModel) -> bool:
    return all(np.all(np.isfinite(v)) for v in model.params.values())


__all__ = [
    "Adam",
    "FinetuneConfig",
    "TrainConfig",
    "TrainResult",
    "check_finite",
    "finetune",
    "group_looks",
    "he_init",
    "train_blind",
    "train_supervised",
]
