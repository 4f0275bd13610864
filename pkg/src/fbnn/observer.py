"""Feedback correction of learned dynamics.

The observer keeps an estimate ``x_hat`` that is integrated with the
corrected field

    f_hat = f_neural(x) + L (x - x_hat)          (linear)
    f_hat = f_neural(x) + h(x - x_hat) - h(0)    (neural, anchored)
    f_hat = Xi(x) chi_hat + b + L (x - x_hat)    (adaptive last layer)

and multi-step prediction cascades one-step predictions with the deviation
``d = x - x_hat`` frozen at the measurement instant and the gain decayed as
``L * exp(-beta * i)`` along the horizon.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace

import numpy as np

from .nn import MlpNet, PenultimateFeatures, features_and_head, forward

MODES = ("linear", "neural", "adaptive", "off")


class UnstableGainError(ValueError):
    pass


def spectral_radius(M) -> float:
    return float(np.max(np.abs(np.linalg.eigvals(M))))


@dataclass
class FeedbackGain:
    L: np.ndarray
    beta: float = 0.0
    mode: str = "linear"

    def __post_init__(self):
        L = np.asarray(self.L, dtype=float)
        self.L = np.diag(L) if L.ndim == 1 else L
        if self.L.ndim != 2 or self.L.shape[0] != self.L.shape[1]:
            raise ValueError("gain must be a square matrix or a diagonal vector")
        if self.mode not in MODES:
            raise ValueError(f"unknown feedback mode {self.mode!r}")
        if self.beta < 0:
            raise ValueError("decay rate must be non-negative")

    @classmethod
    def scalar(cls, value, n, beta=0.0, mode="linear", Ts=None) -> FeedbackGain:
        g = cls(np.full(n, float(value)), beta, mode)
        if Ts is not None:
            g.check_stability(Ts)
        return g

    @property
    def n(self) -> int:
        return self.L.shape[0]

    def check_stability(self, Ts) -> float:
        r = spectral_radius(np.eye(self.n) - Ts * self.L)
        if not r < 1.0:
            raise UnstableGainError(f"rho(I - Ts L) = {r:.4g} >= 1 for Ts = {Ts}")
        return r

    def decay(self, i) -> float:
        return float(np.exp(-self.beta * i))

    def eig_range(self) -> tuple[float, float]:
        """(lambda_min, lambda_max) of the symmetric part of L."""
        ev = np.linalg.eigvalsh(0.5 * (self.L + self.L.T))
        return float(ev[0]), float(ev[-1])


@dataclass
class ObserverState:
    x_hat: np.ndarray
    t: float = 0.0
    chi_hat: np.ndarray | None = None
    Gamma: np.ndarray | None = None

    def __post_init__(self):
        self.x_hat = np.array(self.x_hat, dtype=float)
        if not np.all(np.isfinite(self.x_hat)):
            raise ValueError("observer estimate must be finite")
        if (self.chi_hat is None) != (self.Gamma is None):
            raise ValueError("adaptive weights and adaptation gain come together")


def init_observer(x_meas, t=0.0, net: MlpNet | None = None, Gamma=None) -> ObserverState:
    """Start the estimate at the first measurement; with ``Gamma`` the head of ``net`` seeds chi_hat."""
    if Gamma is None:
        return ObserverState(x_meas, t)
    chi = net.weights[-1].ravel().copy()
    G = np.asarray(Gamma, dtype=float)
    G = np.full(chi.size, float(G)) if G.ndim == 0 else G
    return ObserverState(x_meas, t, chi, G)


def anchored_feedback(h_net: MlpNet, d):
    d = np.asarray(d, dtype=float)
    # same-shaped anchor so that zero rows of d cancel bit-exactly under batched BLAS
    return forward(h_net, d) - forward(h_net, np.zeros_like(d))


def corrected_deriv(f_eval, gain: FeedbackGain, x, obs: ObserverState, h_net=None, features=None):
    """Corrected derivative f_hat for the current measurement ``x``.

    In adaptive mode ``features`` (at ``x``) replaces ``f_eval`` with the
    adapted head.
    """
    x = np.asarray(x, dtype=float)
    d = x - obs.x_hat
    if gain.mode == "off":
        return np.asarray(f_eval, dtype=float)
    if gain.mode == "linear":
        return f_eval + gain.L @ d
    if gain.mode == "neural":
        if h_net is None:
            raise ValueError("neural feedback needs a feedback network")
        return f_eval + anchored_feedback(h_net, d)
    if obs.chi_hat is None or features is None:
        raise ValueError("adaptive feedback needs features and adaptive weights")
    return features.recombine(obs.chi_hat) + gain.L @ d


def observer_advance(obs: ObserverState, f_hat, Ts) -> ObserverState:
    if not Ts > 0:
        raise ValueError("step must be positive")
    f_hat = np.asarray(f_hat, dtype=float)
    if not np.all(np.isfinite(f_hat)):
        raise FloatingPointError("non-finite corrected derivative")
    return replace(obs, x_hat=obs.x_hat + Ts * f_hat, t=obs.t + Ts)


def adaptive_update(obs: ObserverState, features: PenultimateFeatures, x_tilde, Ts) -> ObserverState:
    """Euler step of chi_hat' = Gamma Xi^T x_tilde."""
    if obs.chi_hat is None:
        raise ValueError("observer has no adaptive weights")
    x_tilde = np.asarray(x_tilde, dtype=float)
    if features.head.size != obs.chi_hat.size or x_tilde.size != features.n_out:
        raise ValueError("feature/weight shape mismatch")
    grad = np.outer(x_tilde, features.features).ravel()
    G = obs.Gamma
    step = G @ grad if G.ndim == 2 else G * grad
    return replace(obs, chi_hat=obs.chi_hat + Ts * step)


# models -----------------------------------------------------------------


def as_model(f):
    """Normalise a learned model to ``f(X, U) -> dX`` operating on batches.

    Nets are treated as autonomous (input = state) unless wrapped by the caller.
    """
    if isinstance(f, MlpNet):
        return lambda X, U=None: forward(f, X)
    return f


def _head_eval(net: MlpNet, X, heads):
    """Batched network output with a per-row output-layer weight vector."""
    a = np.asarray(X, dtype=float)
    for W, b in zip(net.weights[:-1], net.biases[:-1]):
        a = np.maximum(a @ W.T + b, 0.0)
    H = heads.reshape(len(heads), net.n_out, -1)
    return np.einsum("bij,bj->bi", H, a) + net.biases[-1]


def cascade(f, gain: FeedbackGain, X0, D, U_seq, Ts, N, h_net=None, heads=None, net=None):
    """Batched frozen-deviation cascade.

    ``X0``, ``D``: (B, n) start measurements and frozen deviations.
    ``U_seq``: None or (B, N, m) inputs. Returns predictions (B, N, n).
    """
    model = as_model(f)
    X0 = np.atleast_2d(np.asarray(X0, dtype=float))
    D = np.atleast_2d(np.asarray(D, dtype=float))
    B, n = X0.shape
    if gain.mode == "neural":
        if h_net is None:
            raise ValueError("neural feedback needs a feedback network")
        base = anchored_feedback(h_net, D)
    elif gain.mode == "off":
        base = np.zeros_like(D)
    else:
        base = D @ gain.L.T
    out = np.empty((B, N, n))
    p = X0
    for i in range(N):
        U = None if U_seq is None else U_seq[:, i]
        if gain.mode == "adaptive":
            fp = _head_eval(net, p, heads) if U is None else model(p, U, heads)
        else:
            fp = model(p) if U is None else model(p, U)
        p = p + Ts * (fp + gain.decay(i) * base)
        out[:, i] = p
    return out


def multistep_predict(f, gain: FeedbackGain, x_meas, obs: ObserverState, input_seq, Ts, N, h_net=None, net=None):
    """Predict ``N`` states ahead of the measurement ``x_meas``; returns (N, n)."""
    if N < 1:
        raise ValueError("N must be >= 1")
    if gain.mode in ("linear", "adaptive"):
        gain.check_stability(Ts)
    x_meas = np.asarray(x_meas, dtype=float)
    d = x_meas - obs.x_hat
    U = None if input_seq is None else np.asarray(input_seq, dtype=float)[None]
    heads = None if obs.chi_hat is None else obs.chi_hat[None]
    if gain.mode == "adaptive" and net is None:
        if not isinstance(f, MlpNet):
            raise ValueError("adaptive prediction needs the network")
        net = f
    return cascade(f, gain, x_meas[None], d[None], U, Ts, N, h_net, heads, net)[0]


@dataclass
class FeedbackRun:
    """Result of running the corrected predictor along a measured trajectory."""

    x_hat: np.ndarray  # (K, n) estimate at each measurement time, before the update
    f_hat: np.ndarray  # (K, n)
    predictions: np.ndarray | None  # (K - N, N, n)
    chi_hat: np.ndarray | None = None  # (K, l)


def run_feedback(f, gain: FeedbackGain, meas, Ts, N=0, inputs=None, h_net=None, Gamma=None, net=None) -> FeedbackRun:
    """Drive the observer with ``meas`` (K, n) and predict ``N`` steps from each time.

    Predictions are made from every time ``k`` with ``k + N < K`` using the
    deviation at ``k``.
    """
    meas = np.asarray(meas, dtype=float)
    K, n = meas.shape
    model = as_model(f)
    adaptive = gain.mode == "adaptive"
    if adaptive:
        net = net if net is not None else f
    if gain.mode in ("linear", "adaptive") and np.any(gain.L):
        gain.check_stability(Ts)
    obs = init_observer(meas[0], 0.0, net, Gamma if adaptive else None)
    x_hat = np.empty((K, n))
    f_hat = np.empty((K, n))
    chis = np.empty((K, obs.chi_hat.size)) if adaptive else None
    for k in range(K):
        x = meas[k]
        x_hat[k] = obs.x_hat
        if adaptive:
            chis[k] = obs.chi_hat
            feats = features_and_head(net, x if inputs is None else np.concatenate([x, inputs[k]]))
            fh = corrected_deriv(None, gain, x, obs, features=feats)
            obs = adaptive_update(obs, feats, x - obs.x_hat, Ts)
        else:
            fe = model(x) if inputs is None else model(x, inputs[k])
            fh = corrected_deriv(fe, gain, x, obs, h_net)
        f_hat[k] = fh
        obs = observer_advance(obs, fh, Ts)
    preds = None
    if N > 0 and K > N:
        starts = np.arange(K - N)
        U = None
        if inputs is not None:
            U = np.stack([inputs[s : s + N] for s in starts])
        preds = cascade(
            f, gain, meas[starts], meas[starts] - x_hat[starts], U, Ts, N, h_net,
            chis[starts] if adaptive else None, net,
        )
    return FeedbackRun(x_hat, f_hat, preds, chis)


def prediction_errors(preds, truth, N=None):
    """Per-start, per-step Euclidean errors (S, N) of predictions against truth (K, n)."""
    S, N_, _ = preds.shape
    N = N_ if N is None else N
    idx = np.arange(S)[:, None] + np.arange(1, N + 1)[None, :]
    return np.linalg.norm(preds[:, :N] - truth[idx], axis=-1)


def prediction_rmse(preds, truth, N=None) -> float:
    e = prediction_errors(preds, truth, N)
    return float(np.sqrt(np.mean(e**2)))


# bounds -----------------------------------------------------------------


def continuous_bounds(gain: FeedbackGain, gamma):
    """Limits of ||x_tilde|| and ||d x_tilde / dt|| for residuals bounded by ``gamma``."""
    lam_min, lam_max = gain.eig_range()
    if lam_min <= 0:
        raise ValueError("bounds need a positive definite gain")
    return gamma / lam_min, gamma * lam_max / lam_min + gamma


def iss_envelope(gain: FeedbackGain, Ts, gamma, x0_norm, k):
    """r^k |x0| + Ts gamma (1 - r^k) / (1 - r) with r = rho(I - Ts L)."""
    r = gain.check_stability(Ts)
    k = np.asarray(k, dtype=float)
    rk = r**k
    return rk * x0_norm + Ts * gamma * (1.0 - rk) / (1.0 - r)


def simulate_error_dynamics(gain: FeedbackGain, residual, x0, T, dt):
    """RK4 solution of x_tilde' = -L x_tilde + residual(t).

    ``residual`` may return a batch (B, n) for a batch of initial errors.
    Returns times, errors (steps+1, ..., n) and derivatives.
    """
    L = gain.L
    f = lambda x, t: -x @ L.T + residual(t)
    n_steps = int(round(T / dt))
    x = np.array(x0, dtype=float)
    xs = np.empty((n_steps + 1,) + x.shape)
    dxs = np.empty_like(xs)
    xs[0] = x
    dxs[0] = f(x, 0.0)
    for k in range(n_steps):
        t = k * dt
        k1 = dxs[k]
        k2 = f(x + 0.5 * dt * k1, t + 0.5 * dt)
        k3 = f(x + 0.5 * dt * k2, t + 0.5 * dt)
        k4 = f(x + dt * k3, t + dt)
        x = x + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        xs[k + 1] = x
        dxs[k + 1] = f(x, t + dt)
    return dt * np.arange(n_steps + 1), xs, dxs


def write_observer_trace(path, times, x, x_hat, bound) -> None:
    """CSV with columns t, x..., x_hat..., x_tilde_norm, bound."""
    x, x_hat = np.asarray(x), np.asarray(x_hat)
    n = x.shape[1]
    bound = np.broadcast_to(np.asarray(bound, dtype=float), (len(times),))
    norms = np.linalg.norm(x - x_hat, axis=1)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t"] + [f"x{i}" for i in range(n)] + [f"x_hat{i}" for i in range(n)] + ["x_tilde_norm", "bound"])
        for row in zip(times, x, x_hat, norms, bound):
            w.writerow([f"{row[0]:.17g}"] + [f"{v:.17g}" for v in row[1]] + [f"{v:.17g}" for v in row[2]]
                       + [f"{row[3]:.17g}", f"{row[4]:.17g}"])
