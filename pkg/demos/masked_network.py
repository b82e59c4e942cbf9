"""
The double-sided masked network
===============================

Every output pair ``(a_i, b_i)`` sees the 43x43 window around pixel ``i``
but never the pixel itself. Checked here by brute force.
"""

import numpy as np

from despeckle import DopamineModel, certify_independence, gradient_field_map, he_init, variance_report
from despeckle.certify import window_minus_center

model = he_init(DopamineModel(num_layers=21, channels=64), seed=0)
print("parameters:", model.num_parameters())

# which input pixels move the output at the centre pixel?
rf = gradient_field_map(model)
print("field size:", rf.sum(), "expected", 43 * 43 - 1)
print("matches window minus centre:", np.array_equal(rf, window_minus_center(rf.shape, (22, 22), 21)))

# perturbing Z_i leaves (a_i, b_i) bitwise unchanged
report = certify_independence(model, 32, 32, trials=10)
print(f"independence: {report.passed}/{report.trials}")

# a 3x3 convolution in the head breaks it, and the probe says where
broken = model.copy()
broken.set_kernel("head.0", np.ones((3, 3)))
report = certify_independence(broken, 32, 32, trials=3, probe_layers=True)
print("broken head:", [v.stage for v in report.violations])

# plain sums let the activation variance grow with depth; scale-add keeps it flat
# (averaged over 16 weight draws; a single draw wanders)
sa = variance_report(21, 64, "sa")
add = variance_report(21, 64, "add")
for layer in (1, 5, 11, 21):
    print(f"layer {layer:2d}: scale-add {sa[layer - 1] / sa[0]:.2f}x  plain add {add[layer - 1] / add[0]:.2f}x")
