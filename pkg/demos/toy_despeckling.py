"""
Toy despeckling run
===================

Supervised training on synthetic scenes, then per-image fine-tuning on the
noisy test image alone. Takes a few minutes on one core; pass a smaller
epoch count as the first argument for a quick look.
"""

import sys

import numpy as np

from despeckle import (
    DopamineModel,
    FinetuneConfig,
    TrainConfig,
    finetune,
    he_init,
    psnr,
    ssim,
    synthetic_image,
    train_supervised,
)
from despeckle.noise import extract_patches_many

epochs = int(sys.argv[1]) if len(sys.argv) > 1 else 60
rng = np.random.default_rng(0)
clean = [synthetic_image(64, rng) for _ in range(16)]
x = synthetic_image(64, rng)

patches = extract_patches_many(clean, 40, 10).patches
print(len(patches), "training patches")

model = he_init(DopamineModel(num_layers=4, channels=16), seed=0)
config = TrainConfig(epochs=epochs, looks=4.0, batch_size=16, lr_halving_period_epochs=20)
result = train_supervised(model, patches, config)
for epoch, loss, lr in result.trace[:: max(1, epochs // 6)]:
    print(f"epoch {epoch:3d}  loss {loss:.5f}  lr {lr:.1e}")

z = x * np.random.default_rng(99).gamma(4.0, 0.25, size=x.shape)
f = model.forward(z)
supervised = f.a * z + f.b
tuned, trace = finetune(model, z, 0.25, FinetuneConfig())
g = tuned.forward(z)
adapted = g.a * z + g.b

for name, img in (("noisy", z), ("supervised", supervised), ("fine-tuned", adapted)):
    print(f"{name:>11}: PSNR {psnr(x, img):6.2f} dB  SSIM {ssim(x, img):.3f}")

# a smaller L in the fine-tuning loss shrinks the slopes
for looks in (0.5, 8.0):
    m, _ = finetune(model, z, 1 / looks, FinetuneConfig())
    print(f"fine-tuned with L={looks}: mean a {m.forward(z).a.mean():.4f}")
