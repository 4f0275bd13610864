"""Quadrotor demo: learn the drag residual from DFBC flights, then fly the
Lissajous task with MPC under mass/inertia/drag/wind errors.

Short flight (10 s, one seed) to keep the run near a minute; the full
five-seed comparison is configs/quad_mpc_compare.json.

    python3 demos/quad_mpc.py
"""

import numpy as np

from fbnn.control import (
    TRAIN_NOISE,
    MpcConfig,
    PredictorModels,
    collect_quad_data,
    fly_mpc,
    node_validation_rmse,
    train_quad_node,
)
from fbnn.dynamics import QUAD_UNCERTAINTY_BUNDLE, QuadParams, UncertaintySpec, apply_uncertainty

params = QuadParams()
data = collect_quad_data(params)
net, run = train_quad_node(data, params)
print(f"neural ODE: loss {run.history[0]:.4f} -> {run.history[-1]:.4f}, "
      f"validation rollout RMSE {node_validation_rmse(net, data.val, params):.3f} m")

pert = apply_uncertainty(params, UncertaintySpec(**QUAD_UNCERTAINTY_BUNDLE))
predictors = ["nominal", "neural-ode", "nominal+feedback", "feedback-nn"]
fl = fly_mpc(pert.params, PredictorModels(params, net), MpcConfig(), predictors, [0], duration=10.0,
             force=pert.spec.force, noise_std=TRAIN_NOISE)
for p, r in zip(fl.predictors, fl.position_rmse()):
    print(f"{p:>18}: position RMSE {r:.3f} m")
print("max input", float(np.max(fl.inputs)), "min input", float(np.min(fl.inputs)))
