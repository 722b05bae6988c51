"""
Checking backpropagation through time
=====================================

Compares the analytic gradients of the stacked LSTM against central finite
differences, first in float64 and then with an extended-precision loss.
The float64 differences are limited by round-off on tiny entries; the
extended-precision loss removes that floor.
"""

import numpy as np

from lippass.seqmodel import bce_from_logits, forward, init_params, loss_and_grad

dims = (6, 5, 4, 3, 2)
params = init_params(dims, seed=0)
rng = np.random.default_rng(0)
x = rng.standard_normal((7, 6))
y = 1.0

loss, grads, _ = loss_and_grad(params, x, y)
print(f"{params.size} parameters, loss {loss:.6f}")

###############################################################################
# Central differences in float64, one parameter at a time.
step = 1e-5
worst = 0.0
for name, p, g in zip(params.names(), params.arrays(), grads.arrays()):
    num = np.empty_like(p)
    for idx in np.ndindex(p.shape):
        keep = p[idx]
        p[idx] = keep + step
        up = float(bce_from_logits(forward(params, x).z, y))
        p[idx] = keep - step
        down = float(bce_from_logits(forward(params, x).z, y))
        p[idx] = keep
        num[idx] = (up - down) / (2 * step)
    rel = np.abs(g - num) / np.maximum(np.maximum(np.abs(g), np.abs(num)), 1e-300)
    worst = max(worst, rel.max())
    print(f"{name:<10s} max |grad| {np.abs(g).max():.2e}  max rel err {rel.max():.2e}")

# Entries near 1e-8 carry about 1e-11 of round-off in the difference
# quotient, hence relative errors far above the bulk.  The test suite uses
# the same differences on a long-double loss (tests/oracles.py) instead.
print(f"worst relative error in float64: {worst:.2e}")
