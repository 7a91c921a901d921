"""
Feeders and Volt/VAR curves
===========================

Build the sensitivity matrices of a small radial feeder, then look at the
piecewise-linear curve an inverter follows.
"""
import numpy as np

import voltvar as vv

# Three buses on one line plus a lateral at bus 1. Each entry of X is twice the
# reactance the two buses share on their paths back to the substation.
lines = [("0", "1", 0.02, 0.01), ("1", "2", 0.02, 0.01), ("1", "3", 0.03, 0.02)]
model = vv.build_radial_sensitivities(lines, root="0", qhat=[0.0, 0.2, 0.2])
print("nodes:", model.nodes)
print("X =\n", model.X)

# The curve used by many utilities out of the box.
rule = vv.default_rule(model.qhat, model.qhat > 0)
print("default slope alpha:", rule.alpha)

for v in (0.90, 0.97, 0.99, 1.00, 1.03, 1.08):
    print(f"v = {v:.2f} pu  ->  q = {vv.eval_rule(rule, 1, v):+.4f}")

# Parameters outside the IEEE 1547 ranges come back as a list of violations.
bad = vv.RuleParams(vref=[1.0], delta=[0.05], sigma=[0.06], qbar=[0.1], qhat=[0.1])
for viol in vv.validate(bad):
    print("violation:", viol)
