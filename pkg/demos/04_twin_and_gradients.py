"""
The digital twin and its gradient
=================================

Unrolling the dynamics gives a small ReLU network whose weights are the curve
parameters. Its forward pass reproduces the simulation exactly and its
backward pass gives the training gradient.
"""
import numpy as np

import voltvar as vv
from voltvar.synthetic import random_feasible_rule, random_radial_feeder
from voltvar.twin import pack

rng = np.random.default_rng(3)
model = random_radial_feeder(rng, 3)
rule = random_feasible_rule(rng, model, 0.5)
vt = rule.vref + rng.uniform(-0.1, 0.1, (4, 3))

T = 15
out = vv.forward(model, vv.TwinConfig(depth=T), rule, vt)
sim = vv.simulate(model, rule, vt[0], T_max=T, tol=-1.0)
print("twin vs simulation, max gap:", np.max(np.abs(out.v_out[0] - sim.v[T])))

z = pack(rule)
value, grad = vv.backward(model, vv.TwinConfig(depth=T), z, vt)
print(f"loss {value:.6e}")
print("gradient rows (vref, alpha, delta, sigma):\n", grad)

# Spot-check one entry with a central difference.
h = 1e-6
zp, zm = z.copy(), z.copy()
zp[0, 0] += h
zm[0, 0] -= h
cfg = vv.TwinConfig(depth=T)
fd = (vv.loss(vv.forward(model, cfg, zp, vt)) - vv.loss(vv.forward(model, cfg, zm, vt))) / (2 * h)
print(f"d loss / d vref_1: backprop {grad[0, 0]:.8e}, finite difference {fd:.8e}")
