"""
Stability and unrolling depth
=============================

A curve that is too steep makes the inverters fight each other. The loop gain
``||diag(alpha) X||`` decides it; the polytopic test bounds the gain using
linear inequalities only.
"""
import numpy as np

import voltvar as vv
from voltvar.stability import loop_gain

model = vv.build_radial_sensitivities(
    [("0", "1", 0.02, 0.05), ("1", "2", 0.02, 0.05)], root="0", qhat=[0.2, 0.2])
eps = 0.3

# the linear test is conservative: slope 2.5 is stable yet not certified
for slope in (2.0, 2.5, 4.0, 20.0):
    alpha = np.full(2, slope)
    cert = vv.spectral_check(model.X, alpha, eps)
    print(f"alpha={slope:5.1f}  gain={loop_gain(model.X, alpha):.3f}  "
          f"spectral={cert.spectral_pass}  polytopic={vv.polytopic_check(model, alpha, eps)}")

# A steep rule oscillates instead of settling.
steep = vv.RuleParams(vref=[1, 1], delta=[0, 0], sigma=[0.01, 0.01], qbar=[0.2, 0.2], qhat=[0.2, 0.2])
trace = vv.simulate(model, steep, [1.05, 1.06], T_max=50)
print("steep rule converged:", trace.converged, " last q:", trace.q[-2:].round(3).tolist())

# How many unrolled iterations bring the voltage within eps1 of equilibrium.
for eps1 in (1e-4, 1e-6):
    print(f"min depth for eps1={eps1:g}: {vv.min_depth(0.463, 0.1, 0.3, eps1)}")
