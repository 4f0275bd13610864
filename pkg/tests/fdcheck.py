"""Finite-difference oracle for rollout gradients."""

import numpy as np

from fbnn.train import adjoint_gradient


def directional_fd(loss_fn, theta, v, h):
    return (loss_fn(theta + h * v) - loss_fn(theta - h * v)) / (2 * h)


def check_direction(loss_fn, theta, grad, rng, h=1e-5, tries=6):
    """Relative error of grad . v against central differences along random unit v.

    A direction whose h and h/2 estimates disagree straddles a ReLU kink or a
    saturation switch; such directions are redrawn.
    """
    for _ in range(tries):
        v = rng.normal(size=theta.size)
        v /= np.linalg.norm(v)
        fd1 = directional_fd(loss_fn, theta, v, h)
        fd2 = directional_fd(loss_fn, theta, v, h / 2)
        if abs(fd1 - fd2) <= 1e-6 * max(abs(fd1), 1e-8):
            return abs(grad @ v - fd1) / max(abs(fd1), 1e-8)
    raise AssertionError("no kink-free direction found")


def adjoint_rel_error(problem, rng, which="params"):
    """Checks adjoint_gradient against finite differences in parameters or inputs."""
    model = problem.model
    if which == "params":
        theta = model.get_params().copy()
        res = adjoint_gradient(problem)

        def loss(th):
            model.set_params(th)
            out = adjoint_gradient(problem).loss
            model.set_params(theta)
            return out

        return check_direction(loss, theta, res.grad, rng)
    U0 = problem.inputs.copy()
    res = adjoint_gradient(problem)

    def loss_u(flat):
        problem.inputs = flat.reshape(U0.shape)
        out = adjoint_gradient(problem).loss
        problem.inputs = U0
        return out

    return check_direction(loss_u, U0.ravel(), res.input_grad.ravel(), rng)
