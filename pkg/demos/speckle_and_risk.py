"""
Speckle and a risk estimate that never sees the clean image
===========================================================

Multiplicative speckle ``Z = x * N`` with unit-mean Gamma ``N``, and the
estimate of squared error used for per-image fine-tuning.
"""

import numpy as np

from despeckle import AffineField, GammaNoiseModel, loss_mult, sample_noise

# Gamma noise with L looks has mean 1 and variance 1/L
for looks in (1.0, 4.0):
    n = sample_noise(GammaNoiseModel(looks, seed=0), 10**6)
    print(f"L={looks}: mean {n.mean():.4f}  var {n.var():.4f}  (expected {1 / looks:.4f})")

# A constant affine rule x_hat = a Z + b on a flat patch of brightness x.
# The estimate averages to the true error without knowing x.
x, a, b, looks = 0.7, 0.5, 0.3, 4.0
z = x * sample_noise(GammaNoiseModel(looks, seed=1), 10**6)
est = loss_mult(z, AffineField(np.full(z.size, a), np.full(z.size, b)), 1 / looks)[0].data
true = (x - (a * z + b)) ** 2
print(f"estimated risk {est.mean():.5f}  true risk {true.mean():.5f}")

# The second term penalises the slope in proportion to Z^2. For a group of
# pixels sharing (a, b), b = (1 - a) mean(Z) and the best slope is
# 1 - c mean(Z^2) / var(Z) with c = s2 / (1 + s2): brighter groups with the
# same spread prefer a smaller slope.
s2 = 0.1
c = s2 / (1 + s2)
for level in (0.5, 0.75, 1.0):
    zz = level + np.linspace(-0.5, 0.5, 9)
    print(f"level {level}: best shared slope {1 - c * np.mean(zz**2) / zz.var():.3f}")
