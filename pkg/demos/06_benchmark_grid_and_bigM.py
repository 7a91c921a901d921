"""
Checking a design against exhaustive search
===========================================

With one or two inverters a grid over the curve parameters is affordable. The
trained design should come out no worse than the best grid point. The KKT
point of each equilibrium should also satisfy the big-M encoding used by
mixed-integer formulations.
"""
import numpy as np

import voltvar as vv
from voltvar.benchmark import (BigMSpec, calibrate_M1, check_bigM, export_minlp,
                               grid_search_ord, kkt_residual)
from voltvar.synthetic import random_radial_feeder, solar_scenarios

rng = np.random.default_rng(100)
qhat = np.array([0.0, 0.0, 0.2, 0.2])
model = random_radial_feeder(rng, 4, qhat=qhat)
scen = solar_scenarios(rng, model, 12, solar_nodes=np.flatnonzero(qhat > 0))

grid = grid_search_ord(model, scen, 0.5)
print(f"grid: {len(grid.objectives)} stable candidates, best objective {grid.objective:.4e}")

rep = vv.train(model, scen, vv.TrainConfig(lr=0.01, epochs=400, epsilon=0.5), qhat=qhat)
trained = vv.evaluate(model, rep.final_params, scen)
print(f"trained objective {trained:.4e}  ({trained / grid.objective:.3f} x grid)")

params = rep.final_params
M1 = calibrate_M1(model, params, scen)
spec = BigMSpec.from_params(params, M1)
ok = []
for vt in scen.vtilde:
    q = vv.equilibrium_fixed_point(model, params, vt).q_star
    _, point = kkt_residual(model, params, vt, q)
    ok.append(check_bigM(model, params, vt, point, spec)[0])
print(f"big-M constraints hold at {sum(ok)}/{len(ok)} equilibria with M1 = {M1:.3f}")

text = export_minlp(model, scen.vtilde[:2], 0.5, M1)
print("\n".join(text.splitlines()[:8]))
