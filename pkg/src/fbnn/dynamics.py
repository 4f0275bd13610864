"""Benchmark systems and uncertainty injection.

Quadrotor conventions
---------------------
World frame is north-east-down: ``Z_E = [0, 0, 1]`` points down and gravity
enters as ``+g * Z_E``. The body frame is forward-right-down, rotor thrust acts
along ``-Z_B``. Attitude is ZYX Euler (roll, pitch, yaw) with
``R = Rz(yaw) @ Ry(pitch) @ Rx(roll)`` mapping body to world. The state is
``[p(3), v(3), euler(3), body_rates(3)]``.

The quadrotor functions accept leading batch dimensions and complex inputs so
that Jacobians can be taken by complex-step differentiation.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from functools import cached_property

import numpy as np

GRAVITY = 9.81
PITCH_GUARD = np.pi / 2 - 1e-3


class SingularityError(ValueError):
    """Pitch too close to +-pi/2 for the Euler-rate map."""


# spiral ---------------------------------------------------------------


@dataclass(frozen=True)
class SpiralParams:
    omega: float = 2.0
    eta: float = 0.1
    epsilon: float = 0.0

    def matrix(self) -> np.ndarray:
        return np.array([[-self.eta, self.omega], [-self.omega, -self.eta]])


SPIRAL_X0 = np.array([9.0, 0.0])


def spiral_deriv(params: SpiralParams, x):
    x = np.asarray(x)
    x1, x2 = x[..., 0], x[..., 1]
    eps = params.epsilon
    return np.stack(
        [-params.eta * x1 + params.omega * x2 + eps, -params.omega * x1 - params.eta * x2 + eps], axis=-1
    )


def spiral_solution(params: SpiralParams, x0, t):
    """Closed-form solution of the (linear, affine) spiral system."""
    from scipy.linalg import expm

    A = params.matrix()
    b = np.array([params.epsilon, params.epsilon])
    x_eq = -np.linalg.solve(A, b) if np.linalg.det(A) != 0 else np.zeros(2)
    return x_eq + expm(A * t) @ (np.asarray(x0, float) - x_eq)


def spiral_training_cases() -> list[SpiralParams]:
    """The 20 randomized spiral systems used to train the feedback network."""
    return [SpiralParams(0.8 + 0.12 * i, 0.04 + 0.005 * i, -24.0 + 2.4 * i) for i in range(20)]


def spiral_uncertainty_levels() -> list[SpiralParams]:
    """The 10 uncertainty levels of the gain ablation, paired by index (level 3 is nominal)."""
    return [SpiralParams(0.8 + 0.4 * i, 0.04 + 0.02 * i, -24.0 + 8.0 * i) for i in range(10)]


def spiral_holdout_cases(nominal: SpiralParams = SpiralParams()) -> list[SpiralParams]:
    """12 held-out residual levels added to the nominal parameters (index 6 is nominal)."""
    return [
        SpiralParams(nominal.omega - 0.72 + 0.12 * i, nominal.eta - 0.03 + 0.005 * i, nominal.epsilon - 14.4 + 2.4 * i)
        for i in range(12)
    ]


# ballistic ------------------------------------------------------------


@dataclass(frozen=True)
class BallisticParams:
    mass: float = 0.1
    drag_coeff: tuple = (0.01, 0.01, 0.01)
    gravity: float = GRAVITY

    def __post_init__(self):
        if not self.mass > 0:
            raise ValueError("mass must be positive")
        if np.any(np.asarray(self.drag_coeff) < 0):
            raise ValueError("drag coefficients must be non-negative")


def ballistic_deriv(params: BallisticParams, x):
    """Point mass with quadratic drag; z axis points up here."""
    x = np.asarray(x)
    v = x[..., 3:6]
    speed = np.sqrt(np.sum(v * v, axis=-1, keepdims=True))
    acc = -np.asarray(params.drag_coeff) * v * speed / params.mass
    acc = acc + np.array([0.0, 0.0, -params.gravity])
    return np.concatenate([v, acc], axis=-1)


# quadrotor ------------------------------------------------------------


def x_allocation(arm: float, yaw_coeff: float) -> np.ndarray:
    """Allocation matrix mapping motor thrusts to [T, tau_x, tau_y, tau_z].

    Motor order: front-right, rear-left, front-left, rear-right; the first two
    spin so their drag torque is +yaw_coeff * thrust.
    """
    d = arm / np.sqrt(2.0)
    pos = np.array([[d, d], [-d, -d], [d, -d], [-d, d]])
    spin = np.array([1.0, 1.0, -1.0, -1.0])
    # torque of force (0, 0, -T) at (rx, ry, 0) is (-ry T, rx T, 0)
    return np.vstack([np.ones(4), -pos[:, 1], pos[:, 0], yaw_coeff * spin])


@dataclass(frozen=True)
class QuadParams:
    mass: float = 0.5
    inertia: tuple = (0.005, 0.005, 0.009)
    arm: float = 0.15
    yaw_coeff: float = 0.01
    drag: tuple = (0.6, 0.6, 0.1)
    gravity: float = GRAVITY
    force_disturbance: tuple = (0.0, 0.0, 0.0)
    u_min: float = 0.0
    u_max: float = 4.0

    def __post_init__(self):
        if not self.mass > 0:
            raise ValueError("mass must be positive")
        if np.any(np.asarray(self.inertia) <= 0):
            raise ValueError("inertia must be positive")
        if np.any(np.asarray(self.drag) < 0):
            raise ValueError("drag coefficients must be non-negative")

    @cached_property
    def C(self) -> np.ndarray:
        return x_allocation(self.arm, self.yaw_coeff)

    @cached_property
    def C_inv(self) -> np.ndarray:
        return np.linalg.inv(self.C)

    @property
    def J(self) -> np.ndarray:
        return np.diag(self.inertia)

    def hover_thrusts(self) -> np.ndarray:
        return np.full(4, self.mass * self.gravity / 4.0)


def rotation(euler):
    """Body-to-world rotation, shape (..., 3, 3); complex-safe."""
    euler = np.asarray(euler)
    phi, th, psi = euler[..., 0], euler[..., 1], euler[..., 2]
    cf, sf, ct, st, cp, sp = np.cos(phi), np.sin(phi), np.cos(th), np.sin(th), np.cos(psi), np.sin(psi)
    R = np.empty(phi.shape + (3, 3), dtype=cf.dtype)
    R[..., 0, 0], R[..., 0, 1], R[..., 0, 2] = ct * cp, sf * st * cp - cf * sp, cf * st * cp + sf * sp
    R[..., 1, 0], R[..., 1, 1], R[..., 1, 2] = ct * sp, sf * st * sp + cf * cp, cf * st * sp - sf * cp
    R[..., 2, 0], R[..., 2, 1], R[..., 2, 2] = -st, sf * ct, cf * ct
    return R


def euler_rate_map(euler):
    """W(euler) with d(euler)/dt = W @ body_rates."""
    euler = np.asarray(euler)
    phi, th = euler[..., 0], euler[..., 1]
    cf, sf, ct, tt = np.cos(phi), np.sin(phi), np.cos(th), np.tan(th)
    W = np.zeros(phi.shape + (3, 3), dtype=np.result_type(cf, tt))
    W[..., 0, 0], W[..., 0, 1], W[..., 0, 2] = 1.0, sf * tt, cf * tt
    W[..., 1, 1], W[..., 1, 2] = cf, -sf
    W[..., 2, 1], W[..., 2, 2] = sf / ct, cf / ct
    return W


def _cross(a, b):
    return np.stack(
        [
            a[..., 1] * b[..., 2] - a[..., 2] * b[..., 1],
            a[..., 2] * b[..., 0] - a[..., 0] * b[..., 2],
            a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0],
        ],
        axis=-1,
    )


def _matvec(M, v):
    return np.einsum("...ij,...j->...i", M, v)


def check_pitch(x):
    pitch = np.real(np.asarray(x)[..., 7])
    if np.any(np.abs(pitch) >= PITCH_GUARD):
        raise SingularityError(f"pitch {np.max(np.abs(pitch)):.4f} rad at the Euler singularity guard")


def quad_deriv(params: QuadParams, x, u, force=None, extra_acc=None, check=True):
    """Rigid-body quadrotor dynamics.

    ``force`` overrides the constant external force in ``params``;
    ``extra_acc`` is added to the translational acceleration (learned residuals).
    ``check=False`` skips the pitch guard (optimizer trial rollouts).
    """
    x = np.asarray(x)
    u = np.asarray(u)
    if check:
        check_pitch(x)
    v, euler, w = x[..., 3:6], x[..., 6:9], x[..., 9:12]
    wrench = u @ params.C.T
    T, tau = wrench[..., 0], wrench[..., 1:]
    R = rotation(euler)
    m = params.mass
    D = np.asarray(params.drag)
    zb = R[..., :, 2]
    body_v = np.einsum("...ji,...j->...i", R, v)
    drag = _matvec(R, D * body_v)
    f_ext = np.asarray(params.force_disturbance if force is None else force, dtype=float)
    acc = -(T / m)[..., None] * zb - drag / m + f_ext / m
    acc = acc + np.array([0.0, 0.0, params.gravity])
    if extra_acc is not None:
        acc = acc + extra_acc
    J = np.asarray(params.inertia)
    euler_dot = _matvec(euler_rate_map(euler), w)
    w_dot = (-_cross(w, J * w) + tau) / J
    return np.concatenate([v, acc, euler_dot, w_dot], axis=-1)


def quad_hover_state(position=(0.0, 0.0, 0.0)) -> np.ndarray:
    x = np.zeros(12)
    x[:3] = position
    return x


# uncertainty ----------------------------------------------------------


@dataclass
class UncertaintySpec:
    """Relative/additive parameter changes, external force, and sensor noise.

    ``relative`` maps a parameter field to a relative change (scalar or per
    component): ``new = nominal * (1 + rel)``. ``absolute`` adds to a field.
    The external force is active from ``force_step_time`` on (always when None).
    """

    relative: dict = field(default_factory=dict)
    absolute: dict = field(default_factory=dict)
    force: tuple | None = None
    force_step_time: float | None = None
    noise_std: float | tuple = 0.0
    seed: int = 0

    def __post_init__(self):
        if np.any(np.asarray(self.noise_std) < 0):
            raise ValueError("noise std must be non-negative")


# the bundle from the quadrotor comparison
QUAD_UNCERTAINTY_BUNDLE = dict(
    relative={"mass": 0.376, "inertia": (0.40, 0.40, 0.0), "drag": (0.143, 0.143, 0.25)},
    force=(0.3, 0.3, 0.3),
)


@dataclass
class Perturbed:
    params: object
    spec: UncertaintySpec
    rng: np.random.Generator

    def disturbance(self, t):
        if self.spec.force is None:
            return np.zeros(3)
        if self.spec.force_step_time is not None and t < self.spec.force_step_time:
            return np.zeros(3)
        return np.asarray(self.spec.force, dtype=float)

    def measure(self, x):
        std = np.asarray(self.spec.noise_std, dtype=float)
        if not np.any(std):
            return np.array(x, dtype=float)
        return np.asarray(x, dtype=float) + std * self.rng.standard_normal(np.shape(x))


def _as_field_value(old, new):
    if isinstance(old, tuple):
        return tuple(float(v) for v in np.broadcast_to(new, (len(old),)))
    return float(new)


def apply_uncertainty(params, spec: UncertaintySpec) -> Perturbed:
    names = {f.name for f in fields(params)}
    changes = {}
    for key in set(spec.relative) | set(spec.absolute):
        if key not in names:
            raise ValueError(f"{type(params).__name__} has no parameter {key!r}")
        nominal = np.asarray(getattr(params, key), dtype=float)
        value = nominal * (1.0 + np.asarray(spec.relative.get(key, 0.0), dtype=float))
        value = value + np.asarray(spec.absolute.get(key, 0.0), dtype=float)
        changes[key] = _as_field_value(getattr(params, key), value)
    if "mass" in changes and changes["mass"] <= 0:
        raise ValueError("perturbation makes mass non-positive")
    new = replace(params, **changes) if changes else params
    return Perturbed(new, spec, np.random.default_rng(spec.seed))
