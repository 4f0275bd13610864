"""Training: exact rollout gradients, neural-ODE fitting, feedback learning.

Gradients are those of the Euler-discretized rollout (discretize, then
optimize). A step model maps a batch of states ``X`` (B, n) and inputs ``U``
(B, m) at step ``i`` to the next states and supplies the vector-Jacobian
product of that map. A model may define ``prepare(X, U)`` to receive all
visited states (H - 1, B, n) before the reverse sweep, e.g. to batch its
Jacobian evaluations.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .integrate import DIVERGENCE_BOUND, DivergenceError, Trajectory
from .nn import Grads, MlpNet, OptimState, backward, forward, opt_step
from .observer import anchored_feedback

CS_STEP = 1e-30


def cs_jacobian(fn, Z):
    """Complex-step Jacobian of a batched, complex-safe ``fn``: (B, k) -> (B, q).

    Returns (B, q, k). One vectorized call with B * k perturbed rows.
    """
    Z = np.asarray(Z, dtype=float)
    B, k = Z.shape
    P = np.repeat(Z[:, None, :], k, axis=1).astype(complex)
    P[:, np.arange(k), np.arange(k)] += 1j * CS_STEP
    out = fn(P.reshape(B * k, k))
    return np.imag(out).reshape(B, k, -1).transpose(0, 2, 1) / CS_STEP


def _unflatten(net: MlpNet, flat) -> Grads:
    ws, bs, i = [], [], 0
    for W, b in zip(net.weights, net.biases):
        ws.append(flat[i : i + W.size].reshape(W.shape))
        i += W.size
        bs.append(flat[i : i + b.size])
        i += b.size
    return Grads(ws, bs)


class NodeModel:
    """Euler step of ``prior(x, u) + S net([x[in_idx], u])``.

    ``S`` scatters the network output into ``out_idx`` (all states by default).
    ``prior`` must be batched and complex-safe; it is differentiated by
    complex step.
    """

    def __init__(self, net: MlpNet, Ts, n_state=None, in_idx=None, out_idx=None, prior=None, n_input=0):
        self.net, self.Ts, self.prior = net, float(Ts), prior
        self.n = n_state if n_state is not None else net.n_out
        self.in_idx = np.arange(self.n) if in_idx is None else np.asarray(in_idx)
        self.out_idx = np.arange(self.n) if out_idx is None else np.asarray(out_idx)
        self.m = n_input
        if len(self.in_idx) + n_input != net.n_in or len(self.out_idx) != net.n_out:
            raise ValueError("network size does not match the state/input selection")

    @property
    def n_params(self):
        return self.net.n_params

    def get_params(self):
        return self.net.get_flat()

    def set_params(self, flat):
        self.net.set_flat(flat)

    def _net_in(self, X, U):
        Z = X[:, self.in_idx]
        return Z if self.m == 0 else np.hstack([Z, U])

    def deriv(self, X, U=None):
        X = np.atleast_2d(X)
        d = np.zeros_like(X, dtype=float) if self.prior is None else self.prior(X, U)
        d = np.array(d, dtype=float)
        d[:, self.out_idx] += forward(self.net, self._net_in(X, U))
        return d

    def step(self, X, U, i):
        return X + self.Ts * self.deriv(X, U)

    def vjp(self, X, U, i, Lam):
        B = X.shape[0]
        g, gin = backward(self.net, self._net_in(X, U), self.Ts * Lam[:, self.out_idx])
        lam_x = Lam.copy()
        lam_x[:, self.in_idx] += gin[:, : len(self.in_idx)]
        lam_u = gin[:, len(self.in_idx) :] if self.m else None
        if self.prior is not None:
            k = self.n + self.m
            Z = X if self.m == 0 else np.hstack([X, U])
            Jp = cs_jacobian(lambda P: self.prior(P[:, : self.n], P[:, self.n :] if self.m else None), Z)
            add = self.Ts * np.einsum("bqk,bq->bk", Jp, Lam)
            lam_x += add[:, : self.n]
            if self.m:
                lam_u = lam_u + add[:, self.n : k]
        assert lam_x.shape == (B, self.n)
        return lam_x, g.flat(), lam_u


@dataclass
class AdjointProblem:
    """Rollout loss sum_i scale * (x_i - r_i)^T W_i (x_i - r_i) over i >= 1.

    ``x0`` (B, n); ``refs`` (B, H, n) where index 0 aligns with ``x0``;
    ``inputs`` (B, H - 1, m) or None; ``weights`` diagonal, (n,) or (H, n).
    ``extra_state_loss(i, X) -> (value, grad)`` adds a non-quadratic stage term.
    """

    model: object
    x0: np.ndarray
    refs: np.ndarray
    inputs: np.ndarray | None = None
    weights: np.ndarray | None = None
    scale: float = 1.0
    extra_state_loss: object = None
    bound: float = DIVERGENCE_BOUND
    label: str = ""

    def __post_init__(self):
        self.x0 = np.atleast_2d(np.asarray(self.x0, dtype=float))
        self.refs = np.asarray(self.refs, dtype=float)
        if self.refs.ndim == 2:
            self.refs = self.refs[None]
        if self.horizon < 2:
            raise ValueError("horizon must be >= 2")
        n = self.x0.shape[1]
        W = np.ones(n) if self.weights is None else np.asarray(self.weights, dtype=float)
        if np.any(W < 0):
            raise ValueError("loss weights must be non-negative")
        self.weights = np.broadcast_to(W, (self.horizon, n))

    @property
    def horizon(self):
        return self.refs.shape[1]


@dataclass
class AdjointResult:
    loss: float
    grad: np.ndarray
    input_grad: np.ndarray | None
    states: np.ndarray  # (H, B, n)


def forward_rollout(problem: AdjointProblem):
    model, H = problem.model, problem.horizon
    X = [problem.x0]
    for i in range(H - 1):
        U = None if problem.inputs is None else problem.inputs[:, i]
        Xn = model.step(X[i], U, i)
        norms = np.linalg.norm(Xn, axis=1)
        if not np.all(np.isfinite(Xn)) or np.any(norms > problem.bound):
            bad = int(np.argmax(~np.isfinite(norms) | (norms > problem.bound)))
            raise DivergenceError(f"rollout diverged at step {i + 1} in segment {bad}{problem.label}")
        X.append(Xn)
    return np.stack(X)


def adjoint_gradient(problem: AdjointProblem, theta=None, states=None) -> AdjointResult:
    """Loss and exact gradient by a reverse costate sweep.

    ``states`` (H, B, n) skips the forward pass when the caller already rolled out.
    """
    model = problem.model
    if theta is not None:
        model.set_params(theta)
    X = forward_rollout(problem) if states is None else states
    H = problem.horizon
    R = problem.refs.transpose(1, 0, 2)
    W, s = problem.weights, problem.scale
    E = X - R
    loss = s * float(np.sum(W[:, None, :] * E * E)) - s * float(np.sum(W[0] * E[0] * E[0]))
    dstage = 2.0 * s * W[:, None, :] * E
    if problem.extra_state_loss is not None:
        for i in range(1, H):
            v, g = problem.extra_state_loss(i, X[i])
            loss += v
            dstage[i] = dstage[i] + g
    if hasattr(model, "prepare"):
        model.prepare(X[:-1], problem.inputs)
    grad = np.zeros(model.n_params)
    input_grad = None if problem.inputs is None else np.zeros_like(problem.inputs)
    lam = dstage[H - 1]
    for i in range(H - 2, -1, -1):
        U = None if problem.inputs is None else problem.inputs[:, i]
        lam_x, g_th, lam_u = model.vjp(X[i], U, i, lam)
        grad += g_th
        if input_grad is not None and lam_u is not None:
            input_grad[:, i] = lam_u
        lam = lam_x + dstage[i] if i > 0 else lam_x
    return AdjointResult(loss, grad, input_grad, X)


# neural ODE training ------------------------------------------------------


def slice_segments(trajs, seg_len):
    """Contiguous non-overlapping segments of ``seg_len`` states: list of (traj, start)."""
    if seg_len < 2:
        raise ValueError("segments need at least 2 states")
    segs = [(k, s) for k, tr in enumerate(trajs) for s in range(0, len(tr) - seg_len + 1, seg_len - 1)]
    if not segs:
        raise ValueError("no trajectory is long enough for one segment")
    return segs


@dataclass
class TrainRun:
    net: MlpNet
    history: list = field(default_factory=list)  # per-epoch mean loss
    iter_losses: list = field(default_factory=list)
    val_history: list = field(default_factory=list)
    test_history: list = field(default_factory=list)


def train_node(
    trajs, model, opt: OptimState, seg_len=10, batch_size=20, iterations=400, seed=0,
    weights=None, make_refs=None, bound=DIVERGENCE_BOUND, tol=0.0,
) -> TrainRun:
    """Fit ``model`` to trajectories by multi-step rollout over shuffled segments.

    ``trajs`` are Trajectory objects; their inputs (if any) drive the model.
    ``make_refs(traj, start, seg_len)`` may override the target/input slicing
    (it returns x0, refs, inputs). The epoch history records the mean
    per-state loss over the iterations of that epoch.
    """
    segs = slice_segments(trajs, seg_len)
    rng = np.random.default_rng(seed)
    run = TrainRun(model.net)
    order, pos, epoch_losses = rng.permutation(len(segs)), 0, []
    for it in range(iterations):
        if pos >= len(order):
            run.history.append(float(np.mean(epoch_losses)))
            if run.history[-1] <= tol:
                epoch_losses = []
                break
            order, pos, epoch_losses = rng.permutation(len(segs)), 0, []
        batch = [segs[j] for j in order[pos : pos + batch_size]]
        pos += batch_size
        x0, refs, inputs = [], [], []
        for k, s in batch:
            if make_refs is not None:
                a, b, c = make_refs(trajs[k], s, seg_len)
            else:
                tr = trajs[k]
                a, b = tr.states[s], tr.states[s : s + seg_len]
                c = None if tr.inputs is None else tr.inputs[s : s + seg_len - 1]
            x0.append(a)
            refs.append(b)
            inputs.append(c)
        U = None if inputs[0] is None else np.stack(inputs)
        prob = AdjointProblem(
            model, np.stack(x0), np.stack(refs), U, weights,
            scale=1.0 / (len(batch) * (seg_len - 1)), bound=bound,
            label=" (" + ", ".join(f"traj {k} start {s}" for k, s in batch[:3]) + ")",
        )
        res = adjoint_gradient(prob)
        opt_step(model.net, opt, _unflatten(model.net, res.grad))
        run.iter_losses.append(res.loss)
        epoch_losses.append(res.loss)
    if epoch_losses:
        run.history.append(float(np.mean(epoch_losses)))
    return run


def rollout_model(model, x0, n_steps, inputs=None):
    """Plain Euler rollout of a step model from a single state; (n_steps + 1, n)."""
    X = [np.asarray(x0, dtype=float)[None]]
    for i in range(n_steps):
        U = None if inputs is None else np.asarray(inputs[i])[None]
        X.append(model.step(X[-1], U, i))
        if not np.all(np.isfinite(X[-1])) or np.linalg.norm(X[-1]) > DIVERGENCE_BOUND:
            raise DivergenceError(f"model rollout diverged at step {i + 1}")
    return np.concatenate(X)


# feedback training --------------------------------------------------------


@dataclass
class FeedbackTrainSet:
    """Measured trajectories of randomized systems sharing ``Ts``: array (n_case, K, n)."""

    states: np.ndarray
    Ts: float

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=float)
        if self.states.ndim != 3 or self.states.shape[1] < 2:
            raise ValueError("expected states of shape (n_case, K >= 2, n)")


def feedback_traces(f_net: MlpNet, h_net: MlpNet, cases: FeedbackTrainSet):
    """Run the neural-feedback observer over all cases at once; x_hat (n_case, K, n)."""
    X = cases.states
    C, K, n = X.shape
    x_hat = np.empty_like(X)
    xh = X[:, 0].copy()
    h0 = forward(h_net, np.zeros(n))
    for k in range(K):
        x_hat[:, k] = xh
        d = X[:, k] - xh
        xh = xh + cases.Ts * (forward(f_net, X[:, k]) + forward(h_net, d) - h0)
        if not np.all(np.isfinite(xh)) or np.any(np.linalg.norm(xh, axis=1) > DIVERGENCE_BOUND):
            bad = int(np.argmax(~np.all(np.isfinite(xh), axis=1) | (np.linalg.norm(xh, axis=1) > DIVERGENCE_BOUND)))
            raise DivergenceError(f"observer diverged in case {bad} at step {k + 1}")
    return x_hat


def feedback_loss_grad(f_net, h_net, x_prev, x_hat_prev, x_next, Ts):
    """Mean one-step Euler loss of the feedback model and its gradient in h."""
    D = x_prev - x_hat_prev
    pred = x_prev + Ts * (forward(f_net, x_prev) + forward(h_net, D) - forward(h_net, np.zeros(h_net.n_in)))
    E = pred - x_next
    B = len(E)
    loss = float(np.sum(E * E)) / B
    G = (2.0 * Ts / B) * E
    g1, _ = backward(h_net, D, G)
    g0, _ = backward(h_net, np.zeros(h_net.n_in), G.sum(axis=0))
    return loss, g1 + g0.scaled(-1.0)


def train_feedback(
    f_net: MlpNet, h_net: MlpNet, cases: FeedbackTrainSet, opt: OptimState,
    iterations=2000, batch_size=100, seed=0,
) -> TrainRun:
    """Learn the feedback network with the neural ODE frozen.

    Every epoch rebuilds the observer traces with the current feedback network
    and sweeps shuffled mini-batches of one-step samples. ``history[0]`` is the
    loss of the initial network over all samples.
    """
    frozen = f_net.get_flat().copy()
    rng = np.random.default_rng(seed)
    X = cases.states
    C, K, n = X.shape
    run = TrainRun(h_net)
    n_samples = C * (K - 1)
    it = 0
    while True:
        x_hat = feedback_traces(f_net, h_net, cases)
        xp, xh, xn = X[:, :-1].reshape(-1, n), x_hat[:, :-1].reshape(-1, n), X[:, 1:].reshape(-1, n)
        epoch_loss, _ = feedback_loss_grad(f_net, h_net, xp, xh, xn, cases.Ts)
        run.history.append(epoch_loss)
        if it >= iterations:
            break
        order = rng.permutation(n_samples)
        for start in range(0, n_samples, batch_size):
            if it >= iterations:
                break
            idx = order[start : start + batch_size]
            loss, g = feedback_loss_grad(f_net, h_net, xp[idx], xh[idx], xn[idx], cases.Ts)
            opt_step(h_net, opt, g)
            run.iter_losses.append(loss)
            it += 1
    if f_net.get_flat().tobytes() != frozen.tobytes():
        raise RuntimeError("frozen network changed during feedback training")
    return run


# single-step baseline -----------------------------------------------------


@dataclass
class RegressionSplits:
    train: tuple
    val: tuple
    test: tuple

    def __post_init__(self):
        for name in ("train", "val", "test"):
            X, Y = getattr(self, name)
            if len(X) == 0:
                raise ValueError(f"empty {name} split")
            if len(X) != len(Y):
                raise ValueError(f"{name} inputs and targets differ in length")


def mse(net, X, Y) -> float:
    E = forward(net, X) - Y
    return float(np.mean(np.sum(E * E, axis=1)))


def train_mlp_baseline(net: MlpNet, data: RegressionSplits, opt: OptimState, epochs=50, batch_size=64, seed=0) -> TrainRun:
    """Single-step supervised regression with per-epoch train/val/test losses."""
    rng = np.random.default_rng(seed)
    X, Y = (np.asarray(a, dtype=float) for a in data.train)
    run = TrainRun(net)
    for _ in range(epochs):
        order = rng.permutation(len(X))
        for start in range(0, len(X), batch_size):
            idx = order[start : start + batch_size]
            E = forward(net, X[idx]) - Y[idx]
            g, _ = backward(net, X[idx], 2.0 * E / len(idx))
            opt_step(net, opt, g)
        run.history.append(mse(net, X, Y))
        run.val_history.append(mse(net, *data.val))
        run.test_history.append(mse(net, *data.test))
    return run


def write_loss_csv(path, run: TrainRun) -> None:
    cols = ["epoch", "loss"]
    if run.val_history:
        cols += ["val_loss", "test_loss"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for e, loss in enumerate(run.history):
            row = [e, f"{loss:.17g}"]
            if run.val_history:
                row += [f"{run.val_history[e]:.17g}", f"{run.test_history[e]:.17g}"]
            w.writerow(row)


# spiral helpers -----------------------------------------------------------


def spiral_truth(params, Ts, n_steps, x0=None):
    """RK4 reference trajectory of a spiral system."""
    from .dynamics import SPIRAL_X0, spiral_deriv
    from .integrate import rollout

    x0 = SPIRAL_X0 if x0 is None else x0
    return rollout(lambda x, u, t: spiral_deriv(params, x), x0, None, 0.0, Ts, n_steps, "rk4")


def train_spiral_node(params=None, seed=0, iterations=400, Ts=0.01, n_samples=1000, hidden=(50, 50),
                      seg_len=20, batch_size=20, learning_rate=1e-3) -> tuple[MlpNet, TrainRun, Trajectory]:
    from .dynamics import SpiralParams

    params = SpiralParams() if params is None else params
    truth = spiral_truth(params, Ts, n_samples - 1)
    net = MlpNet.create([2, *hidden, 2], seed=seed)
    model = NodeModel(net, Ts)
    opt = OptimState.for_net(net, "rmsprop", learning_rate)
    run = train_node([truth], model, opt, seg_len, batch_size, iterations, seed)
    return net, run, truth


def spiral_feedback_cases(cases, Ts=0.02, n_samples=1000) -> FeedbackTrainSet:
    return FeedbackTrainSet(np.stack([spiral_truth(p, Ts, n_samples - 1).states for p in cases]), Ts)


def feedback_nominal_gap(f_net, h_net, traj_states, Ts):
    """Largest difference between feedback-net and frozen-net Euler rollouts with zero deviation."""
    a = b = np.asarray(traj_states[0], dtype=float)
    worst = 0.0
    n = len(a)
    for _ in range(len(traj_states) - 1):
        a = a + Ts * forward(f_net, a)
        b = b + Ts * (forward(f_net, b) + anchored_feedback(h_net, np.zeros(n)))
        worst = max(worst, float(np.max(np.abs(a - b))))
    return worst
