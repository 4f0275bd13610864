"""Fixed-step explicit integrators and trajectory rollout.

Derivative functions use the signature ``f(x, u, t) -> dx``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

DIVERGENCE_BOUND = 1e6


class DivergenceError(FloatingPointError):
    """A rollout left the admissible state region or produced non-finite values."""


def _checked(dx):
    dx = np.asarray(dx, dtype=float)
    if not np.all(np.isfinite(dx)):
        raise DivergenceError("non-finite derivative")
    return dx


def euler_step(f, x, u, t, Ts):
    if not Ts > 0:
        raise ValueError("step must be positive")
    x = np.asarray(x, dtype=float)
    return x + Ts * _checked(f(x, u, t))


def rk4_step(f, x, u, t, Ts):
    """Classical Runge-Kutta step; ``u`` is held constant over the step."""
    if not Ts > 0:
        raise ValueError("step must be positive")
    x = np.asarray(x, dtype=float)
    h = 0.5 * Ts
    k1 = _checked(f(x, u, t))
    k2 = _checked(f(x + h * k1, u, t + h))
    k3 = _checked(f(x + h * k2, u, t + h))
    k4 = _checked(f(x + Ts * k3, u, t + Ts))
    return x + (Ts / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


STEPPERS = {"euler": euler_step, "rk4": rk4_step}


@dataclass
class Trajectory:
    times: np.ndarray
    states: np.ndarray
    inputs: np.ndarray | None = None

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.states = np.asarray(self.states, dtype=float)
        if len(self.states) != len(self.times):
            raise ValueError("times and states differ in length")
        if len(self.times) > 1 and np.any(np.diff(self.times) <= 0):
            raise ValueError("times must be strictly increasing")
        if self.inputs is not None:
            self.inputs = np.asarray(self.inputs, dtype=float)
            if len(self.inputs) != len(self.times):
                raise ValueError("inputs must align with times")

    def __len__(self):
        return len(self.times)

    @property
    def Ts(self) -> float:
        return float(self.times[1] - self.times[0])

    def to_csv(self, path) -> None:
        n = self.states.shape[1]
        header = ["t"] + [f"x{i}" for i in range(n)]
        cols = [self.times[:, None], self.states]
        if self.inputs is not None:
            u = self.inputs.reshape(len(self.times), -1)
            header += [f"u{i}" for i in range(u.shape[1])]
            cols.append(u)
        data = np.hstack(cols)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for row in data:
                w.writerow([f"{v:.17g}" for v in row])

    @classmethod
    def from_csv(cls, path) -> Trajectory:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        header, body = rows[0], np.array(rows[1:], dtype=float).reshape(-1, len(rows[0]))
        xi = [i for i, h in enumerate(header) if h.startswith("x")]
        ui = [i for i, h in enumerate(header) if h.startswith("u")]
        return cls(body[:, 0], body[:, xi], body[:, ui] if ui else None)


def rollout(f, x0, input_fn, t0, Ts, n_steps, method="euler", bound=DIVERGENCE_BOUND) -> Trajectory:
    """Integrate ``f`` for ``n_steps`` fixed steps from ``x0``.

    ``input_fn(t)`` supplies the input held over each step; pass ``None`` for
    autonomous systems. Inputs are recorded when ``input_fn`` is given (the
    last row repeats the input at the final time).
    """
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    step = STEPPERS[method]
    x = np.array(x0, dtype=float)
    states = np.empty((n_steps + 1, x.size))
    states[0] = x
    times = t0 + Ts * np.arange(n_steps + 1)
    inputs = [] if input_fn is not None else None
    for k in range(n_steps):
        t = t0 + k * Ts
        u = input_fn(t) if input_fn is not None else None
        if inputs is not None:
            inputs.append(np.atleast_1d(np.asarray(u, dtype=float)))
        x = step(f, x, u, t, Ts)
        if not np.all(np.isfinite(x)) or np.linalg.norm(x) > bound:
            raise DivergenceError(f"state norm exceeded {bound:g} at step {k + 1} (t={t + Ts:.4g})")
        states[k + 1] = x
    if inputs is not None:
        inputs.append(np.atleast_1d(np.asarray(input_fn(times[-1]), dtype=float)))
        inputs = np.array(inputs)
    return Trajectory(times, states, inputs)
