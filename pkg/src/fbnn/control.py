"""Quadrotor references, flatness-based control, and the closed-loop learning model.

Frames follow :mod:`fbnn.dynamics`: NED world, thrust along ``-Z_B``, ZYX Euler
angles. Yaw is held at zero. Controller functions are batched and
complex-safe so the closed loop can be differentiated by complex step.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .dynamics import GRAVITY, QuadParams, _cross, check_pitch, quad_deriv, rotation
from .nn import MlpNet, backward, forward
from .train import cs_jacobian

LISSAJOUS = (3.0, 3.0, 0.5, 6.0, 3.0, 3.0, 0.5)  # r_x, r_y, r_z, T_x, T_y, T_z, h


@dataclass
class FlatRef:
    """Flat outputs: position and its first four derivatives, each (..., 3)."""

    p: np.ndarray
    v: np.ndarray
    a: np.ndarray
    j: np.ndarray
    s: np.ndarray

    def vector(self) -> np.ndarray:
        """[p, v, a, j] as (..., 12)."""
        return np.concatenate([self.p, self.v, self.a, self.j], axis=-1)


def _harmonic(amp, omega, phase, t, kind):
    """Derivatives 0..4 of amp * sin(omega t + phase) (kind 'sin') or cos."""
    arg = omega * t + phase
    s, c = np.sin(arg), np.cos(arg)
    if kind == "sin":
        seq = [s, c, -s, -c, s]
    else:
        seq = [c, -s, -c, s, c]
    return [amp * omega**k * seq[k] for k in range(5)]


def lissajous_ref(t, params=LISSAJOUS) -> FlatRef:
    rx, ry, rz, Tx, Ty, Tz, h = params
    t = np.asarray(t, dtype=float)
    x = _harmonic(rx, 2 * np.pi / Tx, 0.0, t, "sin")
    y = _harmonic(ry, 2 * np.pi / Ty, 0.0, t, "sin")
    z = _harmonic(rz, 2 * np.pi / Tz, 0.0, t, "cos")
    z[0] = z[0] + h
    d = [np.stack([x[k], y[k], z[k]], axis=-1) for k in range(5)]
    return FlatRef(*d)


def circle_ref(t, radius=1.0, period=10.0, center=(0.0, 0.0, 0.0)) -> FlatRef:
    """Horizontal circle starting at ``center + [radius, 0, 0]``."""
    t = np.asarray(t, dtype=float)
    w = 2 * np.pi / period
    x = _harmonic(radius, w, 0.0, t, "cos")
    y = _harmonic(radius, w, 0.0, t, "sin")
    x[0] = x[0] + center[0]
    y[0] = y[0] + center[1]
    z = [np.zeros_like(t) for _ in range(5)]
    z[0] = z[0] + center[2]
    return FlatRef(*[np.stack([x[k], y[k], z[k]], axis=-1) for k in range(5)])


def hover_ref(t, position=(0.0, 0.0, 0.0)) -> FlatRef:
    t = np.asarray(t, dtype=float)
    p = np.broadcast_to(np.asarray(position, dtype=float), t.shape + (3,)).copy()
    zero = np.zeros_like(p)
    return FlatRef(p, zero, zero, zero, zero)


@dataclass(frozen=True)
class SmoothRef:
    """Seeded sum of sinusoids per axis; a smooth stand-in for polynomial waypoint paths."""

    amps: np.ndarray  # (3, k)
    omegas: np.ndarray
    phases: np.ndarray
    offset: np.ndarray

    def __call__(self, t) -> FlatRef:
        t = np.asarray(t, dtype=float)
        out = [np.zeros(t.shape + (3,)) for _ in range(5)]
        for ax in range(3):
            for A, w, ph in zip(self.amps[ax], self.omegas[ax], self.phases[ax]):
                # shift so that every term starts at zero position
                terms = _harmonic(A, w, ph, t, "sin")
                terms[0] = terms[0] - A * np.sin(ph)
                for k in range(5):
                    out[k][..., ax] += terms[k]
        out[0] = out[0] + self.offset
        return FlatRef(*out)


def random_smooth_ref(seed, n_terms=2, amp=(0.5, 1.5), omega=(0.6, 2.0), z_scale=0.3) -> SmoothRef:
    rng = np.random.default_rng(seed)
    amps = rng.uniform(*amp, size=(3, n_terms))
    amps[2] *= z_scale
    return SmoothRef(amps, rng.uniform(*omega, size=(3, n_terms)), rng.uniform(0, 2 * np.pi, size=(3, n_terms)),
                     np.zeros(3))


# flatness ---------------------------------------------------------------


def _sum3(a, b):
    return a[..., 0] * b[..., 0] + a[..., 1] * b[..., 1] + a[..., 2] * b[..., 2]


def _normalize(a):
    return a / np.sqrt(_sum3(a, a))[..., None]


def flat_attitude(a, j, gravity=GRAVITY):
    """Body axes, collective acceleration, and body rates for zero yaw.

    Returns (R, c, omega) with R = [X_B, Y_B, Z_B] as columns. Complex-safe.
    """
    e3 = np.array([0.0, 0.0, 1.0])
    e2 = np.array([0.0, 1.0, 0.0])
    f = gravity * e3 - a
    c = np.sqrt(_sum3(f, f))
    zb = f / c[..., None]
    xb = _normalize(_cross(np.broadcast_to(e2, zb.shape), zb))
    yb = _cross(zb, xb)
    zb_dot = -(j - _sum3(zb, j)[..., None] * zb) / c[..., None]
    wy = _sum3(xb, zb_dot)
    wx = -_sum3(yb, zb_dot)
    phi_t = yb[..., 2] / zb[..., 2]  # tan(roll)
    wz = -phi_t * wy
    R = np.stack([xb, yb, zb], axis=-1)
    return R, c, np.stack([wx, wy, wz], axis=-1)


def flat_to_state(ref_fn, t, params: QuadParams, h=1e-4):
    """Nominal state (..., 12) and motor thrusts (..., 4) along a flat reference."""
    t = np.asarray(t, dtype=float)
    ref = ref_fn(t)
    R, c, w = flat_attitude(ref.a, ref.j, params.gravity)
    pitch = np.arcsin(-R[..., 2, 0])
    roll = np.arctan2(R[..., 2, 1], R[..., 2, 2])
    euler = np.stack([roll, pitch, np.zeros_like(roll)], axis=-1)
    rp, rm = ref_fn(t + h), ref_fn(t - h)
    w_dot = (flat_attitude(rp.a, rp.j, params.gravity)[2] - flat_attitude(rm.a, rm.j, params.gravity)[2]) / (2 * h)
    J = np.asarray(params.inertia)
    tau = J * w_dot + _cross(w, J * w)
    wrench = np.concatenate([(params.mass * c)[..., None], tau], axis=-1)
    u = wrench @ params.C_inv.T
    x = np.concatenate([ref.p, ref.v, euler, w], axis=-1)
    return x, u


# DFBC -------------------------------------------------------------------


@dataclass(frozen=True)
class DfbcGains:
    kp: float = 6.0
    ki: float = 0.5
    kd: float = 4.0
    kR: float = 120.0
    kw: float = 16.0
    z_max: float = 2.0
    drag_comp: bool = True


def saturate(u, lo, hi):
    """Box clip that keeps complex perturbations of unsaturated entries."""
    r = np.real(u)
    return np.where(r < lo, lo, np.where(r > hi, hi, u))


def _vee_skew_error(Rd, R):
    """0.5 * vee(Rd^T R - R^T Rd)."""
    M = np.einsum("...ki,...kj->...ij", Rd, R)
    return 0.5 * np.stack([M[..., 2, 1] - M[..., 1, 2], M[..., 0, 2] - M[..., 2, 0], M[..., 1, 0] - M[..., 0, 1]], axis=-1)


def dfbc_control(x, z, ref_vec, params: QuadParams, gains: DfbcGains = DfbcGains(), Ts=0.02):
    """Flatness-based PID/PD controller; returns (motor thrusts, next integral state).

    ``ref_vec`` is (..., 12) = [p, v, a, j]. With ``drag_comp`` the controller
    feeds forward the drag of ``params`` at the current velocity.
    """
    x = np.asarray(x)
    check_pitch(x)
    p, v, euler, w = x[..., 0:3], x[..., 3:6], x[..., 6:9], x[..., 9:12]
    p_r, v_r, a_r, j_r = ref_vec[..., 0:3], ref_vec[..., 3:6], ref_vec[..., 6:9], ref_vec[..., 9:12]
    e_p = p - p_r
    a_cmd = a_r - gains.kp * e_p - gains.kd * (v - v_r) - gains.ki * z
    R = rotation(euler)
    if gains.drag_comp:
        D = np.asarray(params.drag)
        body_v = np.einsum("...ji,...j->...i", R, v)
        a_cmd = a_cmd + np.einsum("...ij,...j->...i", R, D * body_v) / params.mass
    Rd, _, _ = flat_attitude(a_cmd, np.zeros_like(a_cmd), params.gravity)
    f = params.gravity * np.array([0.0, 0.0, 1.0]) - a_cmd
    T = params.mass * _sum3(f, R[..., :, 2])
    _, _, w_ref = flat_attitude(a_r, j_r, params.gravity)
    Rd_ref = np.einsum("...ki,...kj->...ij", R, Rd)  # R^T Rd
    e_R = _vee_skew_error(Rd, R)
    e_w = w - np.einsum("...ij,...j->...i", Rd_ref, w_ref)
    J = np.asarray(params.inertia)
    tau = J * (-gains.kR * e_R - gains.kw * e_w) + _cross(w, J * w)
    wrench = np.concatenate([T[..., None], tau], axis=-1)
    u = saturate(wrench @ params.C_inv.T, params.u_min, params.u_max)
    z_next = saturate(z + Ts * e_p, -gains.z_max, gains.z_max)
    return u, z_next


def rk4_quad(params: QuadParams, x, u, Ts, force=None):
    f = lambda s: quad_deriv(params, s, u, force=force)
    k1 = f(x)
    k2 = f(x + 0.5 * Ts * k1)
    k3 = f(x + 0.5 * Ts * k2)
    k4 = f(x + Ts * k3)
    return x + Ts / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)


@dataclass
class FlightLog:
    times: np.ndarray
    states: np.ndarray  # true states (K, 12)
    meas: np.ndarray  # measured states
    z: np.ndarray  # controller integral states (K, 3)
    refs: np.ndarray  # (K, 12) flat reference vectors
    inputs: np.ndarray  # (K, 4), last row repeated


def fly_dfbc(plant: QuadParams, ctrl: QuadParams, ref_fn, n_steps, Ts=0.02, x0=None, gains=DfbcGains(),
             force=None, noise_std=0.0, seed=0) -> FlightLog:
    """Closed-loop DFBC flight with RK4 truth and zero-order-hold inputs."""
    rng = np.random.default_rng(seed)
    t = Ts * np.arange(n_steps + 1)
    refs = ref_fn(t).vector()
    x = flat_to_state(ref_fn, 0.0, ctrl)[0] if x0 is None else np.asarray(x0, dtype=float)
    z = np.zeros(3)
    std = np.asarray(noise_std, dtype=float)
    X, Y, Z, U = [], [], [], []
    for k in range(n_steps + 1):
        y = x + std * rng.standard_normal(12) if np.any(std) else x.copy()
        u, z_next = dfbc_control(y, z, refs[k], ctrl, gains, Ts)
        X.append(x)
        Y.append(y)
        Z.append(z)
        U.append(u)
        if k < n_steps:
            x = rk4_quad(plant, x, u, Ts, force)
            z = z_next
    return FlightLog(t, np.array(X), np.array(Y), np.array(Z), refs, np.array(U))


# closed-loop learning model ----------------------------------------------


class QuadClosedLoopModel:
    """Euler step of the DFBC closed loop with a learned acceleration residual.

    State ``[x(12), z(3)]``; external input is the flat reference vector.
    The network maps ``[v, euler]`` to an acceleration added to the
    drag-free nominal model.
    """

    n_in_net = 6

    def __init__(self, net: MlpNet, params: QuadParams, gains: DfbcGains = DfbcGains(), Ts=0.02, ctrl=None):
        if net.n_in != 6 or net.n_out != 3:
            raise ValueError("residual network must map 6 inputs to 3 outputs")
        self.net, self.Ts, self.gains = net, float(Ts), gains
        self.model_params = replace(params, drag=(0.0, 0.0, 0.0), force_disturbance=(0.0, 0.0, 0.0))
        self.ctrl = params if ctrl is None else ctrl

    @property
    def n_params(self):
        return self.net.n_params

    def get_params(self):
        return self.net.get_flat()

    def set_params(self, flat):
        self.net.set_flat(flat)

    def _analytic(self, S, A, I):
        x, z = S[:, :12], S[:, 12:15]
        u, z_next = dfbc_control(x, z, I, self.ctrl, self.gains, self.Ts)
        x_next = x + self.Ts * quad_deriv(self.model_params, x, u, extra_acc=A)
        return np.concatenate([x_next, z_next], axis=-1)

    def step(self, S, I, i):
        A = forward(self.net, S[:, 3:9])
        return self._analytic(S, A, I)

    def _jacobians(self, S, I):
        A = forward(self.net, S[:, 3:9])
        Z = np.hstack([S, A])
        k = Z.shape[1]
        return cs_jacobian(lambda P: self._analytic(P[:, :15], P[:, 15:], np.repeat(I, k, axis=0)), Z)

    def prepare(self, X, I):
        H, B, _ = X.shape
        Ii = np.transpose(I, (1, 0, 2)).reshape(H * B, -1)
        self._cache = (X, self._jacobians(X.reshape(H * B, -1), Ii).reshape(H, B, 15, 18))

    def vjp(self, S, I, i, Lam):
        cache = getattr(self, "_cache", None)
        if cache is not None and i < len(cache[0]) and np.array_equal(cache[0][i], S):
            Jac = cache[1][i]
        else:
            Jac = self._jacobians(S, I)
        lam_z = np.einsum("bqk,bq->bk", Jac, Lam)
        g, gin = backward(self.net, S[:, 3:9], lam_z[:, 15:])
        lam_s = lam_z[:, :15]
        lam_s[:, 3:9] += gin
        return lam_s, g.flat(), None


# MPC --------------------------------------------------------------------

PREDICTORS = ("nominal", "neural-ode", "mlp", "nominal+feedback", "adaptive-nn", "feedback-nn", "adaptive-fnn")

# predictor -> (base network, linear feedback, adaptation scheme)
_PREDICTOR_PARTS = {
    "nominal": (None, False, None),
    "neural-ode": ("neural", False, None),
    "mlp": ("mlp", False, None),
    "nominal+feedback": (None, True, None),
    "adaptive-nn": ("mlp", False, "one-step"),
    "feedback-nn": ("neural", True, None),
    "adaptive-fnn": ("neural", True, "observer"),
}


@dataclass
class MpcConfig:
    N: int = 10
    Q: tuple = (100.0,) * 3 + (50.0,) * 6 + (1.0,) * 3
    R: tuple = (1.0,) * 4
    u_min: float = 0.0
    u_max: float = 4.0
    att_limit: float = np.pi / 2
    att_weight: float = 1e3
    iterations: int = 30
    Ts: float = 0.02
    L: float = 3.0
    beta: float = 0.1
    gamma_nn: float = 0.5
    gamma_fnn: float = 0.05
    alpha0: float = 0.05
    n_candidates: int = 8
    armijo: float = 1e-4

    def __post_init__(self):
        if self.N < 1:
            raise ValueError("horizon must be >= 1")
        if np.any(np.asarray(self.Q) < 0) or np.any(np.asarray(self.R) < 0):
            raise ValueError("weights must be non-negative")
        if not self.u_min < self.u_max:
            raise ValueError("input box bounds out of order")
        if self.iterations < 1:
            raise ValueError("need at least one solver iteration")


@dataclass
class PredictorModels:
    """Nominal parameters (drag-free model) and the learned acceleration residuals."""

    params: QuadParams
    neural: MlpNet | None = None
    mlp: MlpNet | None = None

    @property
    def model_params(self) -> QuadParams:
        return replace(self.params, drag=(0.0, 0.0, 0.0), force_disturbance=(0.0, 0.0, 0.0))


def _hidden(net, X):
    acts = [X]
    for W, b in zip(net.weights[:-1], net.biases[:-1]):
        acts.append(np.maximum(acts[-1] @ W.T + b, 0.0))
    return acts


class _Residual:
    """Per-flight acceleration residual: head_f @ features_net(f)([v, euler]) + bias_f."""

    def __init__(self, nets, net_of_flight, heads, biases):
        self.nets, self.net_of_flight, self.heads, self.biases = nets, net_of_flight, heads, biases

    def eval(self, X, flights):
        A = np.zeros((len(X), 3))
        for key, net in self.nets.items():
            rows = np.flatnonzero(self.net_of_flight[flights] == key)
            if not len(rows):
                continue
            f = flights[rows]
            feat = _hidden(net, X[rows, 3:9])[-1]
            A[rows] = np.einsum("rij,rj->ri", self.heads[f], feat) + self.biases[f]
        return A

    def input_jacobian(self, X, flights):
        """d residual / d [v, euler] per row, (rows, 3, 6)."""
        out = np.zeros((len(X), 3, 6))
        for key, net in self.nets.items():
            rows = np.flatnonzero(self.net_of_flight[flights] == key)
            if not len(rows):
                continue
            acts = _hidden(net, X[rows, 3:9])
            r = len(rows)
            # layout (hidden, rows, 6) so each layer is a single matrix product
            M = (acts[1].T > 0.0)[:, :, None] * net.weights[0][:, None, :]
            for k in range(1, len(net.weights) - 1):
                M = (net.weights[k] @ M.reshape(M.shape[0], -1)).reshape(-1, r, 6)
                M = M * (acts[k + 1].T > 0.0)[:, :, None]
            out[rows] = np.einsum("rij,jrk->rik", self.heads[flights[rows]], M)
        return out


class _MpcStep:
    """Euler step of nominal + residual + per-flight correction, rows mapped to flights."""

    n_params = 0

    def __init__(self, mparams, residual, corr, flights, Ts):
        self.p, self.res, self.corr, self.flights, self.Ts = mparams, residual, corr, flights, Ts

    def deriv(self, X, U, i):
        A = self.res.eval(X, self.flights)
        return quad_deriv(self.p, X, U, extra_acc=A, check=False) + self.corr[self.flights, i]

    def step(self, X, U, i):
        return X + self.Ts * self.deriv(X, U, i)

    def prepare(self, X, U):
        H, B, n = X.shape
        Z = np.concatenate([X, np.transpose(U, (1, 0, 2))], axis=-1).reshape(H * B, -1)
        # the dynamics do not depend on position, so those columns stay zero
        Jac = np.zeros((H * B, 12, 16))
        Jac[:, :, 3:] = cs_jacobian(
            lambda P: quad_deriv(self.p, np.concatenate([np.zeros((len(P), 3)), P[:, :9]], axis=1), P[:, 9:], check=False),
            Z[:, 3:],
        )
        Jac[:, 3:6, 3:9] += self.res.input_jacobian(Z, np.tile(self.flights, H))
        self._jac = Jac.reshape(H, B, 12, 16)

    def vjp(self, X, U, i, Lam):
        g = np.einsum("bqk,bq->bk", self._jac[i], self.Ts * Lam)
        return Lam + g[:, :12], np.zeros(0), g[:, 12:]


def _att_penalty(cfg: MpcConfig):
    def pen(i, X):
        ex = np.abs(X[:, 6:9]) - cfg.att_limit
        act = np.maximum(ex, 0.0)
        g = np.zeros_like(X)
        g[:, 6:9] = 2 * cfg.att_weight * act * np.sign(X[:, 6:9])
        return cfg.att_weight * float(np.sum(act * act)), g

    return pen


def _row_costs(cfg, X, U, x_ref, u_ref):
    """Per-row cost for states X (N+1, B, n), inputs U (B, N, m)."""
    Q, R = np.asarray(cfg.Q), np.asarray(cfg.R)
    E = X[1:] - np.transpose(x_ref[:, 1:], (1, 0, 2))
    c = np.einsum("ibn,n->b", E * E, Q)
    dU = U - u_ref
    c = c + np.einsum("bim,m->b", dU * dU, R)
    ex = np.maximum(np.abs(X[1:, :, 6:9]) - cfg.att_limit, 0.0)
    c = c + cfg.att_weight * np.einsum("ibk->b", ex * ex)
    return np.where(np.isfinite(c), c, np.inf)


def projected_gradient_solve(make_model, cfg: MpcConfig, x0, x_ref, U0, u_ref, lo, hi, state_penalty=None):
    """Single-shooting projected gradient with Barzilai-Borwein steps and Armijo backtracking.

    ``make_model(flights)`` returns a step model whose rows belong to the given
    flight indices. Rows are solved independently. Returns (U, X, cost,
    initial cost); the returned cost never exceeds the initial cost.
    """
    from .integrate import DivergenceError
    from .train import AdjointProblem, adjoint_gradient, forward_rollout

    F, N, m = U0.shape
    flights = np.arange(F)
    model = make_model(flights)
    R = np.asarray(cfg.R)
    U = saturate(np.array(U0, dtype=float), lo, hi)
    prob = AdjointProblem(model, x0, x_ref, U, cfg.Q, extra_state_loss=state_penalty, bound=np.inf)
    K = cfg.n_candidates
    shrink = 0.5 ** np.arange(K)
    cand_model = make_model(np.tile(flights, K))
    alpha = np.full(F, cfg.alpha0)
    prev_U = prev_G = None
    X = forward_rollout(prob)
    cost = _row_costs(cfg, X, U, x_ref, u_ref)
    cost0 = cost.copy()
    for it in range(cfg.iterations):
        prob.inputs = U
        res = adjoint_gradient(prob, states=X)
        G = res.input_grad + 2.0 * R * (U - u_ref)
        if prev_U is not None:
            s = (U - prev_U).reshape(F, -1)
            y = (G - prev_G).reshape(F, -1)
            sy, ss = np.sum(s * y, axis=1), np.sum(s * s, axis=1)
            ok = sy > 1e-300
            alpha = np.where(ok, ss / np.where(ok, sy, 1.0), alpha)
        steps = alpha[None, :] * shrink[:, None]  # (K, F)
        cand = saturate(U[None] - steps[:, :, None, None] * G[None], lo, hi)  # (K, F, N, m)
        cprob = AdjointProblem(cand_model, np.tile(x0, (K, 1)), np.tile(x_ref, (K, 1, 1)),
                               cand.reshape(K * F, N, m), cfg.Q, bound=np.inf)
        with np.errstate(all="ignore"):
            try:
                Xc = forward_rollout(cprob)
            except DivergenceError:
                Xc = np.full((N + 1, K * F, x0.shape[1]), np.nan)
            costs = _row_costs(cfg, Xc, cand.reshape(K * F, N, m), np.tile(x_ref, (K, 1, 1)),
                               np.tile(u_ref, (K, 1, 1))).reshape(K, F)
        decrease = np.einsum("fnm,kfnm->kf", G, U[None] - cand)
        accept = costs <= cost[None] - cfg.armijo * decrease
        accept &= costs <= cost[None]
        first = np.argmax(accept, axis=0)
        any_ok = accept[first, flights]
        prev_U, prev_G = U.copy(), G
        newU = cand[first, flights]
        U = np.where(any_ok[:, None, None], newU, U)
        Xc = Xc.reshape(N + 1, K, F, -1)[:, first, flights]
        X = np.where(any_ok[None, :, None], Xc, X)
        cost = np.where(any_ok, costs[first, flights], cost)
        alpha = np.where(any_ok, alpha, alpha * shrink[-1])
        if not np.any(any_ok) and np.all(alpha < 1e-14):
            break
    return U, X, _row_costs(cfg, X, U, x_ref, u_ref), cost0


class MpcBank:
    """Receding-horizon MPC sessions for several flights solved in one batch.

    Each flight has its own predictor, warm start, observer and prediction buffer.
    """

    def __init__(self, cfg: MpcConfig, models: PredictorModels, predictors, u_init=None):
        self.cfg, self.models = cfg, models
        self.predictors = list(predictors)
        for p in self.predictors:
            if p not in _PREDICTOR_PARTS:
                raise ValueError(f"unknown predictor {p!r}")
        F, N = len(self.predictors), cfg.N
        nets = {}
        net_of = np.zeros(F, dtype=int)
        keys = {"neural": 1, "mlp": 2}
        l = None
        for f, p in enumerate(self.predictors):
            name = _PREDICTOR_PARTS[p][0]
            if name is None:
                continue
            net = getattr(models, name)
            if net is None:
                raise ValueError(f"predictor {p!r} needs the {name} network")
            nets[keys[name]] = net
            net_of[f] = keys[name]
            l = net.layer_sizes[-2]
        l = 1 if l is None else l
        heads, biases = np.zeros((F, 3, l)), np.zeros((F, 3))
        for f in range(F):
            if net_of[f]:
                net = nets[net_of[f]]
                heads[f], biases[f] = net.weights[-1], net.biases[-1]
        self.residual = _Residual(nets, net_of, heads, biases)
        self.feedback = np.array([_PREDICTOR_PARTS[p][1] for p in self.predictors])
        self.adapt = [_PREDICTOR_PARTS[p][2] for p in self.predictors]
        self.mparams = models.model_params
        hover = models.params.hover_thrusts()
        self.U = np.tile(hover if u_init is None else u_init, (F, N, 1)).astype(float)
        self.x_hat = None
        self.prev_meas = None
        self.prev_u = None
        self.buffer = None
        self.corr = np.zeros((F, N, 12))
        self.last_cost = np.full(F, np.nan)
        self.decay = np.exp(-cfg.beta * np.arange(N))

    @property
    def F(self):
        return len(self.predictors)

    def model_deriv(self, X, U, flights=None):
        flights = np.arange(self.F) if flights is None else flights
        A = self.residual.eval(X, flights)
        return quad_deriv(self.mparams, X, U, extra_acc=A, check=False)

    def _make_model(self, flights):
        return _MpcStep(self.mparams, self.residual, self.corr, flights, self.cfg.Ts)

    def update_observers(self, y):
        """Advance observers and adaptive heads with the previous measurement and input."""
        cfg, Ts = self.cfg, self.cfg.Ts
        y = np.asarray(y, dtype=float)
        if self.prev_meas is None:
            self.x_hat = y.copy()
        else:
            yp, up = self.prev_meas, self.prev_u
            f_prev = self.model_deriv(yp, up)
            x_tilde_prev = yp - self.x_hat
            x_hat_new = self.x_hat + Ts * (f_prev + cfg.L * x_tilde_prev * self.feedback[:, None])
            one_step = yp + Ts * f_prev
            for f, scheme in enumerate(self.adapt):
                if scheme is None:
                    continue
                net = self.residual.nets[self.residual.net_of_flight[f]]
                feat = _hidden(net, yp[f : f + 1, 3:9])[-1][0]
                if scheme == "observer":
                    err, gain = x_tilde_prev[f, 3:6], cfg.gamma_fnn
                else:
                    err, gain = (y[f] - one_step[f])[3:6] / Ts, cfg.gamma_nn
                self.residual.heads[f] += Ts * gain * np.outer(err, feat)
            # flights without feedback keep x_hat pinned to the measurement
            self.x_hat = np.where(self.feedback[:, None], x_hat_new, y)
        d = y - self.x_hat
        L = cfg.L * self.feedback[:, None, None]
        self.corr = L * self.decay[None, :, None] * d[:, None, :]
        return d

    def feedback_predict(self, y, U):
        """Corrected rollout (F, N, 12) from measurement ``y`` under inputs ``U`` (F, N, 4)."""
        model = self._make_model(np.arange(self.F))
        X, out = np.asarray(y, dtype=float), []
        for i in range(self.cfg.N):
            X = model.step(X, U[:, i], i)
            out.append(X)
        return np.stack(out, axis=1)

    def solve(self, y, x_ref, u_ref):
        """Optimise the warm-started input sequences; returns first inputs (F, 4)."""
        cfg = self.cfg
        U, X, cost, cost0 = projected_gradient_solve(
            self._make_model, cfg, np.asarray(y, dtype=float), x_ref, self.U, u_ref,
            cfg.u_min, cfg.u_max, _att_penalty(cfg),
        )
        self.U, self.last_cost, self.warm_cost = U, cost, cost0
        self.buffer = np.transpose(X[1:], (1, 0, 2))
        return U[:, 0].copy()

    def cycle(self, y, x_ref, u_ref):
        """One control cycle: observer update, solve, warm-start shift. Returns (u0, pred_err)."""
        pred_err = np.full(self.F, np.nan) if self.buffer is None else np.linalg.norm(y - self.buffer[:, 0], axis=1)
        self.update_observers(y)
        u0 = self.solve(y, x_ref, u_ref)
        self.prev_meas, self.prev_u = np.array(y, dtype=float), u0
        self.U = np.concatenate([self.U[:, 1:], self.U[:, -1:]], axis=1)
        return u0, pred_err


def mpc_solve(session: MpcBank, x0, x_ref, u_ref):
    """Single-flight convenience wrapper: returns (u0, predicted states, session)."""
    u0 = session.solve(np.atleast_2d(x0), x_ref[None], u_ref[None])
    return u0[0], session.buffer[0], session


def mpc_feedback_predict(session: MpcBank, x0, u_seq):
    """Update the session observers with ``x0`` and return corrected predictions (N, 12)."""
    U = np.asarray(u_seq, dtype=float)
    if session.F != 1:
        raise ValueError("single-flight wrapper needs a one-flight session")
    if U.shape != (session.cfg.N, 4):
        raise ValueError("input sequence must match the horizon")
    session.update_observers(np.atleast_2d(x0))
    preds = session.feedback_predict(np.atleast_2d(x0), U[None])[0]
    session.prev_meas, session.prev_u = np.atleast_2d(np.asarray(x0, dtype=float)), U[None, 0]
    return preds


# closed-loop MPC flights ------------------------------------------------


@dataclass
class MpcFlights:
    times: np.ndarray
    predictors: list
    seeds: list
    states: np.ndarray  # (F, K, 12)
    refs: np.ndarray  # (K, 12) reference states
    inputs: np.ndarray  # (F, K, 4)
    costs: np.ndarray  # (F, K)
    pred_err: np.ndarray  # (F, K)

    def position_rmse(self) -> np.ndarray:
        e = self.states[:, :, :3] - self.refs[None, :, :3]
        return np.sqrt(np.mean(np.sum(e * e, axis=-1), axis=1))

    def axis_rmse(self) -> np.ndarray:
        e = self.states[:, :, :3] - self.refs[None, :, :3]
        return np.sqrt(np.mean(e * e, axis=1))


def fly_mpc(plant: QuadParams, models: PredictorModels, cfg: MpcConfig, predictors, seeds, duration=30.0,
            ref_fn=lissajous_ref, force=None, noise_std=0.0, offset_std=0.05, u_init=None) -> MpcFlights:
    """Fly every (predictor, seed) pair on the same reference; all flights advance in lockstep."""
    Ts, N = cfg.Ts, cfg.N
    K = int(round(duration / Ts))
    pairs = [(p, s) for p in predictors for s in seeds]
    F = len(pairs)
    t = Ts * np.arange(K + N + 1)
    x_ref_all, u_ref_all = flat_to_state(ref_fn, t, models.params)
    std = np.asarray(noise_std, dtype=float)
    noise, x = {}, np.empty((F, 12))
    for s in seeds:
        rng = np.random.default_rng(s)
        off = np.zeros(12)
        off[:3] = offset_std * rng.standard_normal(3)
        noise[s] = (off, std * rng.standard_normal((K + 1, 12)))
    for f, (p, s) in enumerate(pairs):
        x[f] = x_ref_all[0] + noise[s][0]
    meas_noise = np.stack([noise[s][1] for p, s in pairs])
    bank = MpcBank(cfg, models, [p for p, _ in pairs], u_init)
    bank.U = np.array(u_ref_all[None, :N].repeat(F, 0)) if u_init is None else bank.U
    X, Ulog, C, E = [x.copy()], [], [], []
    for k in range(K):
        y = x + meas_noise[:, k]
        xr = np.repeat(x_ref_all[None, k : k + N + 1], F, 0)
        ur = np.repeat(u_ref_all[None, k : k + N], F, 0)
        u, pe = bank.cycle(y, xr, ur)
        Ulog.append(u)
        C.append(bank.last_cost)
        E.append(pe)
        x = rk4_quad(plant, x, u, Ts, force)
        check_pitch(x)
        X.append(x.copy())
    Ulog.append(Ulog[-1])
    C.append(C[-1])
    E.append(E[-1])
    return MpcFlights(
        t[: K + 1], [p for p, _ in pairs], [s for _, s in pairs], np.stack(X, 1), x_ref_all[: K + 1],
        np.stack(Ulog, 1), np.stack(C, 1), np.stack(E, 1),
    )


def write_flight_csv(path, flights: MpcFlights, f: int) -> None:
    import csv

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t"] + [f"x{i}" for i in range(12)] + [f"ref{i}" for i in range(12)]
                   + [f"u{i}" for i in range(4)] + ["cost", "pred_err_norm"])
        for k, t in enumerate(flights.times):
            row = [t, *flights.states[f, k], *flights.refs[k], *flights.inputs[f, k], flights.costs[f, k],
                   flights.pred_err[f, k]]
            w.writerow([f"{v:.17g}" for v in row])


def flight_summary(flights: MpcFlights) -> dict:
    rmse, axes = flights.position_rmse(), flights.axis_rmse()
    out = {}
    for f, (p, s) in enumerate(zip(flights.predictors, flights.seeds)):
        out.setdefault(p, {})[str(s)] = {"rmse": float(rmse[f]), "rmse_xyz": [float(v) for v in axes[f]]}
    for p in out:
        out[p]["median_rmse"] = float(np.median([v["rmse"] for v in out[p].values()]))
    return out


# learning the acceleration residual -------------------------------------

# measurement noise std per state block: position, velocity, attitude, body rate
TRAIN_NOISE = np.repeat([0.005, 0.02, 0.005, 0.02], 3)


@dataclass
class QuadData:
    train: list  # FlightLog
    val: list
    test: list


def collect_quad_data(params: QuadParams, n_train=8, n_val=2, n_test=2, n_nodes=200, Ts=0.02,
                      noise_std=TRAIN_NOISE, seed=0, gains=DfbcGains()) -> QuadData:
    """DFBC flights on the drag plant along seeded smooth references (no wind, nominal mass)."""
    ctrl = replace(params, drag=(0.0, 0.0, 0.0))
    logs = []
    for k in range(n_train + n_val + n_test):
        ref = random_smooth_ref(1000 * seed + k)
        logs.append(fly_dfbc(params, ctrl, ref, n_nodes - 1, Ts, gains=gains, noise_std=noise_std, seed=1000 * seed + k))
    return QuadData(logs[:n_train], logs[n_train : n_train + n_val], logs[n_train + n_val :])


def closed_loop_trajectories(logs):
    """Trajectories of ``[measured state, integrator]`` driven by the reference vectors."""
    from .integrate import Trajectory

    return [Trajectory(lg.times, np.hstack([lg.meas, lg.z]), lg.refs) for lg in logs]


def train_quad_node(data: QuadData, params: QuadParams, hidden=(32, 32), seed=0, iterations=400, seg_len=20,
                    batch_size=20, learning_rate=3e-3, gains=DfbcGains(), Ts=0.02):
    """Neural ODE residual trained end-to-end through the DFBC closed loop."""
    from .nn import OptimState
    from .train import train_node

    net = MlpNet.create([6, *hidden, 3], seed=seed)
    for W in net.weights[-1:]:
        W *= 0.1
    model = QuadClosedLoopModel(net, params, gains, Ts, ctrl=replace(params, drag=(0.0, 0.0, 0.0)))
    weights = np.concatenate([np.ones(12), np.zeros(3)])
    run = train_node(closed_loop_trajectories(data.train), model, OptimState.for_net(net, "adam", learning_rate),
                     seg_len, batch_size, iterations, seed, weights=weights)
    return net, run


def residual_targets(logs, params: QuadParams):
    """Single-step regression pairs: [v, euler] -> finite-difference acceleration minus the nominal one."""
    nominal = replace(params, drag=(0.0, 0.0, 0.0), force_disturbance=(0.0, 0.0, 0.0))
    X, Y = [], []
    for lg in logs:
        Ts = lg.times[1] - lg.times[0]
        acc = (lg.meas[1:, 3:6] - lg.meas[:-1, 3:6]) / Ts
        acc_nom = quad_deriv(nominal, lg.meas[:-1], lg.inputs[:-1], check=False)[:, 3:6]
        X.append(lg.meas[:-1, 3:9])
        Y.append(acc - acc_nom)
    return np.concatenate(X), np.concatenate(Y)


def train_quad_mlp(data: QuadData, params: QuadParams, hidden=(32, 32), seed=0, epochs=60, batch_size=64,
                   learning_rate=3e-3):
    """Feedforward residual trained on single-step targets."""
    from .nn import OptimState
    from .train import RegressionSplits, train_mlp_baseline

    splits = RegressionSplits(*(residual_targets(part, params) for part in (data.train, data.val, data.test)))
    net = MlpNet.create([6, *hidden, 3], seed=seed)
    run = train_mlp_baseline(net, splits, OptimState.for_net(net, "adam", learning_rate), epochs, batch_size, seed)
    return net, run


def node_validation_rmse(net: MlpNet, logs, params: QuadParams, gains=DfbcGains()):
    """Position RMSE of the learned closed loop replaying each log's references from its first measurement."""
    from .train import rollout_model

    Ts = logs[0].times[1] - logs[0].times[0]
    model = QuadClosedLoopModel(net, params, gains, Ts, ctrl=replace(params, drag=(0.0, 0.0, 0.0)))
    errs = []
    for tr in closed_loop_trajectories(logs):
        X = rollout_model(model, tr.states[0], len(tr) - 1, tr.inputs)
        errs.append(np.sum((X[:, :3] - tr.states[:, :3]) ** 2, axis=1))
    return float(np.sqrt(np.mean(np.concatenate(errs))))
