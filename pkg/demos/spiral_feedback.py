"""Spiral demo: a neural ODE trained on the nominal spiral, then used on a
shifted spiral with and without the feedback correction.

    python3 demos/spiral_feedback.py
"""

import numpy as np

from fbnn.dynamics import SpiralParams
from fbnn.observer import FeedbackGain, prediction_rmse, run_feedback
from fbnn.train import spiral_truth, train_spiral_node

Ts, N = 0.01, 50

net, run, _ = train_spiral_node(SpiralParams(), seed=0, iterations=400)
print(f"trained: loss {run.history[0]:.3f} -> {run.history[-1]:.5f}")

shifted = SpiralParams(omega=3.0, eta=-0.05, epsilon=10.0)
truth = spiral_truth(shifted, Ts, 1000).states
noisy = truth + 0.05 * np.random.default_rng(0).standard_normal(truth.shape)

print(f"\n{'gain':>6} {'beta':>6} {'clean':>9} {'noisy':>9}")
for gain, beta in [(0, 0), (5, 0), (10, 0), (10, 0.02), (20, 0.02)]:
    g = FeedbackGain(np.full(2, float(gain)), beta)
    clean = prediction_rmse(run_feedback(net, g, truth, Ts, N=N).predictions, truth)
    meas = prediction_rmse(run_feedback(net, g, noisy, Ts, N=N).predictions, truth)
    print(f"{gain:6.0f} {beta:6.2f} {clean:9.4f} {meas:9.4f}")
