"""
Designing curves for an overvoltage feeder
==========================================

Train curve parameters on the bundled eight-bus feeder with rooftop solar and
compare voltage deviation with no reactive support, the default curve and the
designed one.
"""
import numpy as np

import voltvar as vv
from voltvar.synthetic import bundled_feeder, bundled_scenarios
from voltvar.trainer import check_design

model = bundled_feeder()
scen = bundled_scenarios(model)
print(f"{len(scen)} scenarios, ungoverned voltages in "
      f"[{scen.vtilde.min():.3f}, {scen.vtilde.max():.3f}] pu")

report = vv.train(model, scen, vv.TrainConfig(lr=0.01, epochs=200, batch_size=5, epsilon=0.5))
print("loss every 40 epochs:", np.round(report.loss_per_epoch[::40], 6))

default = vv.default_rule(model.qhat, model.qhat > 0)
for name, params in (("none", None), ("default", default), ("designed", report.final_params)):
    print(f"{name:>9}: objective {vv.evaluate(model, params, scen):.4e}")

mask = model.qhat > 0
print("designed vref :", report.final_params.vref[mask].round(4))
print("designed slope:", report.final_params.alpha[mask].round(3))
print("compliance check:", check_design(model, report.final_params, 0.5)["violations"] or "clean")
