import numpy as np
import pytest

from despeckle.estimator import loss_ft
from despeckle.model import DopamineModel, encode_checkpoint
from despeckle.noise import extract_patches_many, synthetic_image
from despeckle.train import (
    Adam,
    FinetuneConfig,
    TrainConfig,
    check_finite,
    finetune,
    group_looks,
    he_init,
    train_blind,
    train_supervised,
)


def test_he_init_variance():
    m = he_init(DopamineModel(3, 64), 0)
    w = m.params["lu.2.v.weight"][:, :, :2, :]  # 64 channels x 6 active taps
    assert abs(w.var() / (2 / 384) - 1) < 0.05
    w1 = m.params["head.0.weight"]
    assert abs(w1.var() / (2 / 64) - 1) < 0.05
    assert np.all(m.params["lu.2.v.weight"][:, :, 2, :] == 0)
    assert all(np.all(v == 0) for k, v in m.params.items() if k.endswith("bias"))


def test_he_init_fan_in_three_by_three():
    # a plain 3x3 kernel on 64 channels has fan_in 576 -> 2/576
    m = DopamineModel(2, 64)
    m.set_kernel("head.1", np.ones((3, 3)))
    he_init(m, 1)
    assert abs(m.params["head.1.weight"].var() / (2 / 576) - 1) < 0.05


def test_he_init_deterministic():
    a = encode_checkpoint(he_init(DopamineModel(2, 4), 5))
    assert a == encode_checkpoint(he_init(DopamineModel(2, 4), 5))
    assert a != encode_checkpoint(he_init(DopamineModel(2, 4), 6))


def test_adam_examples():
    p = {"w": np.array([1.0])}
    Adam().step(p, {"w": np.array([0.0])}, 0.1)
    assert p["w"][0] == 1.0
    p = {"w": np.array([1.0])}
    Adam().step(p, {"w": np.array([1.0])}, 0.1)
    assert abs(p["w"][0] - 0.9) < 1e-6
    p = {"w": np.array([1.0])}
    opt = Adam()
    for _ in range(100):
        opt.step(p, {"w": 2 * p["w"]}, 0.1)
    assert abs(p["w"][0]) < 0.05
    with pytest.raises(ValueError):
        Adam().step({"w": np.ones(2)}, {"w": np.ones(3)}, 0.1)


def test_lr_schedule():
    c = TrainConfig()
    assert [c.lr_at(e) for e in (1, 10, 11, 21, 30)] == [1e-3, 1e-3, 5e-4, 2.5e-4, 2.5e-4]
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    with pytest.raises(ValueError):
        TrainConfig(blind_low=5, blind_high=1)
    with pytest.raises(ValueError):
        FinetuneConfig(mode="sgd")


def test_group_looks():
    rng = np.random.default_rng(0)
    per, groups = group_looks(242, 121, 0.5, 12.0, rng)
    assert len(groups) == 2 and per.shape == (242,)
    assert np.all(per[:121] == groups[0]) and np.all(per[121:] == groups[1])
    assert np.all((per >= 0.5) & (per < 12.0))
    per, groups = group_looks(130, 121, 2.0, 2.0, rng)
    assert len(groups) == 2 and np.all(per == 2.0)


@pytest.fixture(scope="module")
def toy_patches():
    rng = np.random.default_rng(0)
    imgs = [synthetic_image(24, rng) for _ in range(4)]
    return extract_patches_many(imgs, 16, 8).patches


def test_supervised_training_reduces_loss_and_is_reproducible(toy_patches):
    cfg = TrainConfig(epochs=15, batch_size=8, looks=4.0, seed=3)
    r1 = train_supervised(he_init(DopamineModel(2, 8), 0), toy_patches, cfg)
    r2 = train_supervised(he_init(DopamineModel(2, 8), 0), toy_patches, cfg)
    assert r1.trace[-1][1] < 0.3 * r1.trace[0][1]
    assert encode_checkpoint(r1.model) == encode_checkpoint(r2.model)
    assert check_finite(r1.model)


def test_blind_training_draws_group_looks(toy_patches):
    cfg = TrainConfig(epochs=2, batch_size=8, group_size=5, seed=1)
    r = train_blind(he_init(DopamineModel(1, 4), 0), toy_patches, cfg)
    looks = r.looks_history[0]
    assert len(np.unique(looks)) == int(np.ceil(len(toy_patches) / 5))
    assert np.all((looks >= 0.5) & (looks <= 12.0))
    assert not np.array_equal(r.looks_history[0], r.looks_history[1])


def test_training_rejects_bad_input():
    with pytest.raises(ValueError):
        train_supervised(DopamineModel(1, 2), np.ones((0, 8, 8)), TrainConfig(epochs=1))


@pytest.fixture(scope="module")
def trained_toy(toy_patches):
    return train_supervised(
        he_init(DopamineModel(2, 8), 0), toy_patches, TrainConfig(epochs=10, batch_size=8, seed=0)
    ).model


def test_finetune_trace_decreases_and_copies(trained_toy):
    rng = np.random.default_rng(4)
    x = synthetic_image(24, rng)
    z = x * rng.gamma(4.0, 0.25, size=x.shape)
    before = encode_checkpoint(trained_toy)
    tuned, trace = finetune(trained_toy, z, 0.25, FinetuneConfig(lr=1e-4, epochs=8, mode="ft"))
    values = [v for _, v, _ in trace]
    assert len(values) == 8
    assert np.all(np.diff(values) <= 1e-12)
    assert encode_checkpoint(trained_toy) == before
    assert loss_ft(z, 0.25, tuned).item() < values[0]


def test_aft_equals_ft_on_symmetric_image(trained_toy):
    n = 9
    c = (n - 1) / 2
    yy, xx = np.mgrid[0:n, 0:n]
    z = 0.3 + 0.4 * np.exp(-((yy - c) ** 2 + (xx - c) ** 2) / 8.0)
    a, ta = finetune(trained_toy, z, 0.25, FinetuneConfig(lr=1e-3, epochs=3, mode="aft"))
    f, tf = finetune(trained_toy, z, 0.25, FinetuneConfig(lr=1e-3, epochs=3, mode="ft"))
    assert ta == tf
    assert encode_checkpoint(a) == encode_checkpoint(f)


def test_finetune_rejects_bad_variance(trained_toy):
    with pytest.raises(ValueError):
        finetune(trained_toy, np.ones((5, 5)), 0.0)
