"""Observer error under a bounded model residual.

The estimation error x~ obeys x~' = -L x~ + df(t) with |df| <= gamma, so after
the transient it stays inside gamma / lambda_min(L).

    python3 demos/error_bounds.py
"""

import numpy as np

from fbnn.observer import FeedbackGain, continuous_bounds, simulate_error_dynamics

gamma = 2.0


def residual(t):
    v = np.array([np.sin(1.3 * t), np.cos(0.7 * t), np.sin(2.1 * t + 1.0)])
    return gamma * v / max(np.linalg.norm(v), 1.0)


for lam in [1.0, 5.0, 10.0]:
    g = FeedbackGain(np.diag([lam, 1.5 * lam, 2.0 * lam]))
    t, xs, _ = simulate_error_dynamics(g, residual, np.array([3.0, -2.0, 1.0]), 30.0, 1e-3)
    band, _ = continuous_bounds(g, gamma)
    nx = np.linalg.norm(xs, axis=1)
    post = t >= 10.0 / lam
    print(f"L_min={lam:4.1f}  band={band:.3f}  max |x~| after transient={nx[post].max():.3f}")
