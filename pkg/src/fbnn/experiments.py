"""Declarative experiment runner.

An :class:`ExperimentSpec` names an experiment kind plus its settings; every
kind has a table of option defaults and unknown keys are rejected.
:func:`run_experiment` writes ``report.json`` (deterministic), ``plotdata.csv``
(long format), ``manifest.json`` (spec echo, hashes, wall time) and
kind-specific artifacts into the output directory.
"""

from __future__ import annotations

import csv
import hashlib
import json
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import __version__
from .dynamics import (
    QUAD_UNCERTAINTY_BUNDLE,
    SPIRAL_X0,
    BallisticParams,
    QuadParams,
    SpiralParams,
    UncertaintySpec,
    apply_uncertainty,
    ballistic_deriv,
    spiral_deriv,
    spiral_holdout_cases,
    spiral_training_cases,
    spiral_uncertainty_levels,
)
from .integrate import Trajectory, rk4_step, rollout
from .nn import MlpNet, OptimState, forward, load_net, save_net
from .observer import (
    FeedbackGain,
    continuous_bounds,
    iss_envelope,
    prediction_errors,
    prediction_rmse,
    run_feedback,
    simulate_error_dynamics,
    write_observer_trace,
)
from .train import (
    NodeModel,
    rollout_model,
    spiral_feedback_cases,
    spiral_truth,
    train_feedback,
    train_node,
    train_spiral_node,
    write_loss_csv,
)


class SpecError(ValueError):
    """Invalid experiment configuration or missing input file."""


_SPIRAL_NODE = dict(checkpoint=None, iterations=400, Ts=0.01, n_samples=1000, hidden=[50, 50], seg_len=20,
                    batch_size=20, learning_rate=1e-3)
_TEST_SPIRAL = dict(omega=3.0, eta=-0.05, epsilon=10.0)

OPTIONS = {
    "spiral-train": dict(_SPIRAL_NODE),
    "spiral-transfer": dict(_SPIRAL_NODE, n_steps=1000, N=50, gain=10.0, beta=0.02, noise_std=0.05),
    "gain-heatmap": dict(_SPIRAL_NODE, n_steps=1000, N=50, gains=[float(g) for g in range(0, 50, 5)],
                         noise_stds=[0.0, 0.05]),
    "decay-ablation": dict(_SPIRAL_NODE, n_steps=1000, N=50, gain=10.0, noise_std=0.05,
                           betas=[0.0, 0.01, 0.02, 0.03, 0.04, 0.05, 0.06]),
    "step-disturbance": dict(_SPIRAL_NODE, n_steps=1000, gain=10.0, step_time=7.0,
                             after=dict(omega=1.0, eta=-0.12, epsilon=5.0)),
    "bound-check": dict(n_cases=20, gains=[1.0, 5.0, 10.0], duration=30.0, dt=1e-3, dim=3, Ts=0.01,
                        iss_steps=3000),
    "feedback-train": dict(_SPIRAL_NODE, feedback_hidden=[50, 50], feedback_iterations=2000,
                           feedback_batch_size=100, feedback_learning_rate=0.01, case_Ts=0.02, case_samples=1000,
                           N=50, retrain_randomized=True),
    "ballistic-predict": dict(checkpoint=None, hidden=[32, 32], iterations=600, Ts=0.01, n_steps=150,
                              n_train=6, seg_len=15, batch_size=20, learning_rate=3e-3, N=30, gain=20.0,
                              beta=0.02, test_drag_scale=1.6, noise_std=0.0),
    "quad-train": dict(n_train=8, n_val=2, n_test=2, n_nodes=200, Ts=0.02, hidden=[32, 32], iterations=400,
                       seg_len=20, batch_size=20, learning_rate=3e-3, mlp_epochs=60),
    "quad-mpc-compare": dict(node_checkpoint=None, mlp_checkpoint=None, n_train=8, n_val=2, n_test=2,
                             n_nodes=200, hidden=[32, 32], iterations=400, seg_len=20, batch_size=20,
                             learning_rate=3e-3, mlp_epochs=60, duration=30.0, N=10, solver_iterations=30,
                             L=3.0, beta=0.1, noise=True, log_flights=True),
}
KINDS = tuple(OPTIONS)

_SYSTEMS = {
    "spiral-train": (SpiralParams, {}),
    "spiral-transfer": (SpiralParams, _TEST_SPIRAL),
    "decay-ablation": (SpiralParams, _TEST_SPIRAL),
    "step-disturbance": (SpiralParams, _TEST_SPIRAL),
    "feedback-train": (SpiralParams, {}),
    "gain-heatmap": (None, {}),
    "bound-check": (None, {}),
    "ballistic-predict": (BallisticParams, {}),
    "quad-train": (QuadParams, {}),
    "quad-mpc-compare": (QuadParams, {}),
}

_DEFAULT_PREDICTORS = ["nominal", "neural-ode", "mlp", "nominal+feedback", "adaptive-nn", "feedback-nn",
                       "adaptive-fnn"]


@dataclass
class ExperimentSpec:
    kind: str
    seed: int = 0
    system: dict = field(default_factory=dict)
    uncertainty: dict = field(default_factory=dict)
    predictors: list = field(default_factory=list)
    seeds: list = field(default_factory=list)
    options: dict = field(default_factory=dict)
    out_dir: str = "runs"

    def __post_init__(self):
        if self.kind not in OPTIONS:
            raise SpecError(f"unknown experiment kind {self.kind!r}; expected one of {', '.join(KINDS)}")
        bad = set(self.options) - set(OPTIONS[self.kind])
        if bad:
            raise SpecError(f"unknown option(s) for {self.kind}: {', '.join(sorted(bad))}")
        cls = _SYSTEMS[self.kind][0]
        names = set() if cls is None else {f.name for f in fields(cls)}
        bad = set(self.system) - names
        if bad:
            raise SpecError(f"unknown system parameter(s) for {self.kind}: {', '.join(sorted(bad))}")
        bad = set(self.uncertainty) - {f.name for f in fields(UncertaintySpec)}
        if bad:
            raise SpecError(f"unknown uncertainty field(s): {', '.join(sorted(bad))}")
        if not isinstance(self.seed, int) or isinstance(self.seed, bool):
            raise SpecError("seed must be an integer")

    @classmethod
    def from_dict(cls, d: dict) -> ExperimentSpec:
        if not isinstance(d, dict):
            raise SpecError("experiment spec must be a mapping")
        bad = set(d) - {f.name for f in fields(cls)}
        if bad:
            raise SpecError(f"unknown spec key(s): {', '.join(sorted(bad))}")
        if "kind" not in d:
            raise SpecError("spec needs a 'kind'")
        return cls(**d)

    @classmethod
    def load(cls, path) -> ExperimentSpec:
        try:
            text = Path(path).read_text()
        except OSError as e:
            raise SpecError(f"cannot read config {path}: {e.strerror}") from None
        try:
            return cls.from_dict(json.loads(text))
        except json.JSONDecodeError as e:
            raise SpecError(f"config {path} is not valid JSON: {e}") from None

    def to_dict(self) -> dict:
        return asdict(self)

    def opts(self) -> dict:
        return {**OPTIONS[self.kind], **self.options}

    def params(self):
        cls, defaults = _SYSTEMS[self.kind]
        return None if cls is None else cls(**{**defaults, **self.system})

    def spec_hash(self) -> str:
        """Hash of the configuration; the output directory does not take part."""
        d = self.to_dict()
        d.pop("out_dir")
        return hashlib.sha256(_canonical(d).encode()).hexdigest()


def _canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


@dataclass
class MetricsReport:
    kind: str
    spec_hash: str
    seed: int
    metrics: dict = field(default_factory=dict)
    grids: dict = field(default_factory=dict)  # name -> {"rows", "cols", "row_label", "col_label", "values"}
    series: dict = field(default_factory=dict)  # name -> {"x": [...], "y": [...]}
    wall_time: float = 0.0

    def body(self) -> dict:
        d = asdict(self)
        d.pop("wall_time")
        return d

    def to_json(self) -> str:
        return json.dumps(self.body(), indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text) -> MetricsReport:
        return cls(**json.loads(text))


def _grid(values, rows, cols, row_label, col_label) -> dict:
    return dict(rows=[float(r) for r in rows], cols=[float(c) for c in cols], row_label=row_label,
                col_label=col_label, values=np.asarray(values, dtype=float).tolist())


def _series(x, y) -> dict:
    return dict(x=np.asarray(x, dtype=float).tolist(), y=np.asarray(y, dtype=float).tolist())


# plot data -------------------------------------------------------------


def export_plotdata(report: MetricsReport, path) -> None:
    """Long-format CSV ``series,x,y``.

    A grid ``g`` becomes one series ``g@<row index>`` per row, x being the
    column coordinate; its row coordinates are stored as series ``g#rows``.
    """
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["series", "x", "y"])
        for name in sorted(report.series):
            s = report.series[name]
            for x, y in zip(s["x"], s["y"]):
                w.writerow([name, repr(float(x)), repr(float(y))])
        for name in sorted(report.grids):
            g = report.grids[name]
            for i, r in enumerate(g["rows"]):
                w.writerow([f"{name}#rows", repr(float(i)), repr(float(r))])
            for i, row in enumerate(g["values"]):
                for c, v in zip(g["cols"], row):
                    w.writerow([f"{name}@{i}", repr(float(c)), repr(float(v))])


def read_plotdata(path) -> dict:
    """Series name -> (x array, y array)."""
    out: dict = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            xs, ys = out.setdefault(row["series"], ([], []))
            xs.append(float(row["x"]))
            ys.append(float(row["y"]))
    return {k: (np.array(x), np.array(y)) for k, (x, y) in out.items()}


def grid_from_plotdata(data: dict, name: str):
    """Rebuild (rows, cols, values) of grid ``name`` from :func:`read_plotdata` output."""
    rows = data[f"{name}#rows"][1]
    cols = data[f"{name}@0"][0]
    values = np.stack([data[f"{name}@{i}"][1] for i in range(len(rows))])
    return rows, cols, values


# shared pieces -----------------------------------------------------------


def _spiral_node(spec: ExperimentSpec, o: dict, out: Path, inputs: dict):
    """Nominal-task neural ODE: loaded from ``checkpoint`` or trained with the experiment seed."""
    if o["checkpoint"]:
        path = Path(o["checkpoint"])
        if not path.is_file():
            raise SpecError(f"missing checkpoint {path}")
        inputs[str(path)] = _file_hash(path)
        return load_net(path), None
    net, run, _ = train_spiral_node(
        SpiralParams(), spec.seed, o["iterations"], o["Ts"], o["n_samples"], tuple(o["hidden"]), o["seg_len"],
        o["batch_size"], o["learning_rate"],
    )
    save_net(net, out / "node.json")
    write_loss_csv(out / "node_loss.csv", run)
    return net, run


def _measure(states, std, seed):
    if not std:
        return states
    return states + std * np.random.default_rng(seed).standard_normal(states.shape)


def _feedback_rmse(net, truth, meas, gain, beta, Ts, N):
    g = FeedbackGain(np.full(truth.shape[1], float(gain)), beta)
    return prediction_rmse(run_feedback(net, g, meas, Ts, N=N).predictions, truth)


def _mean_error(net, truth, meas, gain, Ts, N):
    g = FeedbackGain(np.full(truth.shape[1], float(gain)))
    return float(np.mean(prediction_errors(run_feedback(net, g, meas, Ts, N=N).predictions, truth)))


# kinds -----------------------------------------------------------------


def _spiral_train(spec, o, out, inputs):
    net, run = _spiral_node(spec, o, out, inputs)
    truth = spiral_truth(spec.params(), o["Ts"], o["n_samples"] - 1)
    X = rollout_model(NodeModel(net, o["Ts"]), truth.states[0], len(truth) - 1)
    Trajectory(truth.times, X).to_csv(out / "rollout.csv")
    err = np.linalg.norm(X - truth.states, axis=1)
    m = dict(rollout_rmse=float(np.sqrt(np.mean(err**2))))
    series = dict(rollout_error=_series(truth.times, err))
    if run is not None:
        m.update(initial_loss=run.history[0], final_loss=run.history[-1], epochs=len(run.history))
        series["loss"] = _series(np.arange(len(run.history)), run.history)
    return m, {}, series


def _spiral_transfer(spec, o, out, inputs):
    net, _ = _spiral_node(spec, o, out, inputs)
    Ts, N = o["Ts"], o["N"]
    truth = spiral_truth(spec.params(), Ts, o["n_steps"]).states
    plain = run_feedback(net, FeedbackGain(np.zeros(2)), truth, Ts, N=N)
    fb = run_feedback(net, FeedbackGain(np.full(2, o["gain"]), o["beta"]), truth, Ts, N=N)
    noisy = _measure(truth, o["noise_std"], spec.seed)
    m = dict(
        rmse_open=prediction_rmse(plain.predictions, truth),
        rmse_feedback=prediction_rmse(fb.predictions, truth),
        rmse_noisy_beta0=_feedback_rmse(net, truth, noisy, o["gain"], 0.0, Ts, N),
        rmse_noisy_beta=_feedback_rmse(net, truth, noisy, o["gain"], o["beta"], Ts, N),
        one_step_open=prediction_rmse(plain.predictions, truth, 1),
        one_step_feedback=prediction_rmse(fb.predictions, truth, 1),
    )
    m["ratio"] = m["rmse_feedback"] / m["rmse_open"]
    steps = np.arange(1, N + 1)
    series = {
        "horizon_error_open": _series(steps, np.sqrt(np.mean(prediction_errors(plain.predictions, truth) ** 2, 0))),
        "horizon_error_feedback": _series(steps, np.sqrt(np.mean(prediction_errors(fb.predictions, truth) ** 2, 0))),
    }
    t = Ts * np.arange(len(truth))
    write_observer_trace(out / "observer_trace.csv", t, truth, fb.x_hat, np.nan)
    return m, {}, series


def _gain_heatmap(spec, o, out, inputs):
    net, _ = _spiral_node(spec, o, out, inputs)
    Ts, N, gains = o["Ts"], o["N"], o["gains"]
    levels = spiral_uncertainty_levels()
    truths = [spiral_truth(p, Ts, o["n_steps"]).states for p in levels]
    grids, m = {}, {}
    for std in o["noise_stds"]:
        vals = np.array([[_mean_error(net, tr, _measure(tr, std, spec.seed + i), g, Ts, N) for g in gains]
                         for i, tr in enumerate(truths)])
        name = f"error_noise_{std:g}"
        grids[name] = _grid(vals, range(len(levels)), gains, "uncertainty_level", "gain")
        diffs = np.diff(vals, axis=1)
        m[f"{name}/non_increasing_rows"] = int(np.sum(np.all(diffs <= 0, axis=1)))
        m[f"{name}/rows_last_gain_above_min"] = int(np.sum(vals[:, -1] > vals.min(axis=1)))
    m["levels"] = [dict(omega=p.omega, eta=p.eta, epsilon=p.epsilon) for p in levels]
    return m, grids, {}


def _decay_ablation(spec, o, out, inputs):
    net, _ = _spiral_node(spec, o, out, inputs)
    Ts, N = o["Ts"], o["N"]
    truth = spiral_truth(spec.params(), Ts, o["n_steps"]).states
    noisy = _measure(truth, o["noise_std"], spec.seed)
    rmse = [_feedback_rmse(net, truth, noisy, o["gain"], b, Ts, N) for b in o["betas"]]
    k = int(np.argmin(rmse))
    d = np.diff(rmse)
    u_shaped = 0 < k < len(rmse) - 1 and bool(np.all(d[:k] < 0) and np.all(d[k:] > 0))
    m = dict(rmse=rmse, best_beta=o["betas"][k], u_shaped=u_shaped)
    return m, {}, dict(rmse_vs_beta=_series(o["betas"], rmse))


def _step_disturbance(spec, o, out, inputs):
    net, _ = _spiral_node(spec, o, out, inputs)
    Ts, L = o["Ts"], o["gain"]
    before = spec.params()
    after = SpiralParams(**{**_TEST_SPIRAL, **o["after"]})
    k_step = int(round(o["step_time"] / Ts))
    x = [np.asarray(SPIRAL_X0, dtype=float)]
    for k in range(o["n_steps"]):
        p = before if k < k_step else after
        x.append(rk4_step(lambda s, u, t: spiral_deriv(p, s), x[-1], None, 0.0, Ts))
    x = np.array(x)
    gain = FeedbackGain(np.full(2, L))
    run = run_feedback(net, gain, x, Ts)
    x_tilde = np.linalg.norm(x - run.x_hat, axis=1)
    residual = np.linalg.norm(spiral_deriv(after, x[k_step:]) - forward(net, x[k_step:]), axis=1)
    gamma = float(residual.max())
    band = continuous_bounds(gain, gamma)[0]
    k_settle = k_step + int(np.ceil(5.0 / gain.eig_range()[0] / Ts))
    after_err = x_tilde[k_step:]
    outside = np.flatnonzero(after_err > band)
    reentry = 0.0 if not len(outside) else (outside[-1] + 1) * Ts
    t = Ts * np.arange(len(x))
    write_observer_trace(out / "observer_trace.csv", t, x, run.x_hat, band)
    m = dict(gamma=gamma, band=band, reentry_time=float(reentry), settle_window=5.0 / L,
             max_error_after_settle=float(x_tilde[k_settle:].max()),
             violations_after_settle=int(np.sum(x_tilde[k_settle:] > band)))
    return m, {}, dict(x_tilde_norm=_series(t, x_tilde))


def _bounded_residual(rng, gamma, dim):
    freqs = rng.uniform(0.1, 3.0, size=(4, dim))
    amps = rng.normal(size=(4, dim))
    phase = rng.uniform(0, 2 * np.pi, size=(4, dim))

    def residual(t):
        v = np.sum(amps * np.sin(freqs * t + phase), axis=0) + 0.5
        return gamma * v / max(np.sqrt(np.sum(v * v)), 1.0)

    return residual


def _bound_check(spec, o, out, inputs):
    rng = np.random.default_rng(spec.seed)
    gains, dim, dt = o["gains"], o["dim"], o["dt"]
    if o["duration"] <= 10.0 / min(gains):
        raise SpecError("duration must exceed the transient 10/lambda_min for every gain")
    viol_x = viol_dx = viol_iss = 0
    worst = 0.0
    for case in range(o["n_cases"]):
        lam = gains[case % len(gains)]
        gamma = rng.uniform(0.1, 3.0)
        g = FeedbackGain(np.diag(lam * rng.uniform(1.0, 2.0, size=dim)))
        residual = _bounded_residual(rng, gamma, dim)
        x0 = rng.normal(size=dim)
        t, xs, dxs = simulate_error_dynamics(g, residual, x0, o["duration"], dt)
        b1, b2 = continuous_bounds(g, gamma)
        post = t >= 10.0 / g.eig_range()[0]
        nx, ndx = np.linalg.norm(xs, axis=1), np.linalg.norm(dxs, axis=1)
        viol_x += int(np.sum(nx[post] > b1 * (1 + 1e-6)))
        viol_dx += int(np.sum(ndx[post] > b2 * (1 + 1e-6)))
        worst = max(worst, float(np.max(nx[post]) / b1))
        if case == 0:
            write_observer_trace(out / "bound_trace.csv", t, xs, np.zeros_like(xs), b1)
            series = dict(x_tilde_norm=_series(t[::10], nx[::10]))
        # discrete ISS envelope on the Euler error map
        Ts = o["Ts"]
        A = np.eye(dim) - Ts * g.L
        e = x0.copy()
        e0 = float(np.linalg.norm(e))
        for k in range(1, o["iss_steps"] + 1):
            d = rng.normal(size=dim)
            d *= gamma * rng.uniform() / np.linalg.norm(d)
            e = A @ e + Ts * d
            viol_iss += int(np.linalg.norm(e) > iss_envelope(g, Ts, gamma, e0, k))
    m = dict(cases=o["n_cases"], violations_x=viol_x, violations_dx=viol_dx, violations_iss=viol_iss,
             worst_ratio=worst)
    return m, {}, series


def _feedback_train(spec, o, out, inputs):
    net, node_run = _spiral_node(spec, o, out, inputs)
    frozen = net.get_flat().copy()
    cases = spiral_feedback_cases(spiral_training_cases(), o["case_Ts"], o["case_samples"])
    h = MlpNet.create([2, *o["feedback_hidden"], 2], seed=spec.seed + 1)
    run = train_feedback(net, h, cases, OptimState.for_net(h, "rmsprop", o["feedback_learning_rate"]),
                         o["feedback_iterations"], o["feedback_batch_size"], spec.seed)
    save_net(h, out / "feedback.json")
    write_loss_csv(out / "feedback_loss.csv", run)
    Ts, N = o["case_Ts"], o["N"]
    off, neural = FeedbackGain(np.zeros(2), mode="off"), FeedbackGain(np.zeros(2), mode="neural")
    rows = []
    for p in spiral_holdout_cases():
        tr = spiral_truth(p, Ts, o["case_samples"] - 1).states
        a = run_feedback(net, off, tr, Ts, N=N).predictions
        b = run_feedback(net, neural, tr, Ts, N=N, h_net=h).predictions
        rows.append([prediction_rmse(a, tr, 1), prediction_rmse(b, tr, 1), prediction_rmse(a, tr),
                     prediction_rmse(b, tr)])
    rows = np.array(rows)
    m = dict(
        feedback_initial_loss=run.history[0], feedback_final_loss=run.history[-1],
        frozen_unchanged=bool(net.get_flat().tobytes() == frozen.tobytes()),
        wins_one_step=int(np.sum(rows[:, 1] < rows[:, 0])), wins_multi_step=int(np.sum(rows[:, 3] < rows[:, 2])),
    )
    grids = dict(holdout=_grid(rows, range(len(rows)), range(4), "case",
                               "one_step_open|one_step_feedback|multi_open|multi_feedback"))
    if o["retrain_randomized"]:
        nominal = spiral_truth(SpiralParams(), o["Ts"], o["n_samples"] - 1).states
        dr = MlpNet.create([2, *o["hidden"], 2], seed=spec.seed)
        trajs = [spiral_truth(p, o["Ts"], o["n_samples"] - 1) for p in spiral_training_cases()]
        train_node(trajs, NodeModel(dr, o["Ts"]), OptimState.for_net(dr, "rmsprop", o["learning_rate"]),
                   o["seg_len"], o["batch_size"], o["iterations"], spec.seed)
        save_net(dr, out / "randomized_node.json")
        dr_pred = run_feedback(dr, off, nominal, o["Ts"], N=N).predictions
        two = run_feedback(net, neural, nominal, o["Ts"], N=N, h_net=h).predictions
        m.update(nominal_rmse_randomized=prediction_rmse(dr_pred, nominal),
                 nominal_rmse_two_dof=prediction_rmse(two, nominal))
    return m, grids, dict(feedback_loss=_series(np.arange(len(run.history)), run.history))


def _ballistic_prior(gravity):
    """Drag-free kinematics; the network learns the drag acceleration."""

    def prior(X, U=None):
        out = np.zeros_like(X)
        out[:, :3] = X[:, 3:6]
        out[:, 5] = -gravity
        return out

    return prior


def _ballistic_launches(rng, n):
    return [np.concatenate([np.zeros(3), rng.uniform([2.0, -2.0, 6.0], [6.0, 2.0, 10.0])]) for _ in range(n)]


def _ballistic_predict(spec, o, out, inputs):
    base = spec.params()
    Ts = o["Ts"]
    rng = np.random.default_rng(spec.seed)

    def fly(p, x0):
        return rollout(lambda x, u, t: ballistic_deriv(p, x), x0, None, 0.0, Ts, o["n_steps"], "rk4")

    if o["checkpoint"]:
        path = Path(o["checkpoint"])
        if not path.is_file():
            raise SpecError(f"missing checkpoint {path}")
        inputs[str(path)] = _file_hash(path)
        net, run = load_net(path), None
    else:
        trajs = [fly(base, x0) for x0 in _ballistic_launches(rng, o["n_train"])]
        net = MlpNet.create([3, *o["hidden"], 3], seed=spec.seed)
        model = NodeModel(net, Ts, 6, in_idx=[3, 4, 5], out_idx=[3, 4, 5], prior=_ballistic_prior(base.gravity))
        run = train_node(trajs, model, OptimState.for_net(net, "adam", o["learning_rate"]), o["seg_len"],
                         o["batch_size"], o["iterations"], spec.seed)
        save_net(net, out / "ballistic_node.json")
        write_loss_csv(out / "ballistic_loss.csv", run)
    model = NodeModel(net, Ts, 6, in_idx=[3, 4, 5], out_idx=[3, 4, 5], prior=_ballistic_prior(base.gravity))

    def f(X):
        X = np.asarray(X, dtype=float)
        return model.deriv(X) if X.ndim == 2 else model.deriv(X)[0]

    test = BallisticParams(base.mass, tuple(o["test_drag_scale"] * np.asarray(base.drag_coeff)), base.gravity)
    x0 = _ballistic_launches(np.random.default_rng(spec.seed + 1), 1)[0]
    truth = fly(test, x0).states
    meas = _measure(truth, o["noise_std"], spec.seed)
    N = o["N"]
    res = {}
    for name, gain in (("open", 0.0), ("feedback", o["gain"])):
        fr = run_feedback(f, FeedbackGain(np.full(6, gain), o["beta"]), meas, Ts, N=N)
        e = prediction_errors(fr.predictions[:, :, :3], truth[:, :3])
        res[name] = float(np.mean(e))
    m = dict(position_error_open=res["open"], position_error_feedback=res["feedback"])
    if run is not None:
        m["final_loss"] = run.history[-1]
    return m, {}, {}


def _quad_models(spec, o, out, inputs):
    from .control import collect_quad_data, node_validation_rmse, train_quad_mlp, train_quad_node

    params = spec.params()
    data = collect_quad_data(params, o["n_train"], o["n_val"], o["n_test"], o["n_nodes"], seed=spec.seed)
    m = {}
    loaded = {}
    for key in ("node", "mlp"):
        ck = o.get(f"{key}_checkpoint")
        if ck:
            path = Path(ck)
            if not path.is_file():
                raise SpecError(f"missing checkpoint {path}")
            inputs[str(path)] = _file_hash(path)
            loaded[key] = load_net(path)
    if "node" in loaded:
        node = loaded["node"]
    else:
        node, run = train_quad_node(data, params, tuple(o["hidden"]), spec.seed, o["iterations"], o["seg_len"],
                                    o["batch_size"], o["learning_rate"])
        save_net(node, out / "quad_node.json")
        write_loss_csv(out / "quad_node_loss.csv", run)
        m.update(node_initial_loss=run.history[0], node_final_loss=run.history[-1])
    if "mlp" in loaded:
        mlp = loaded["mlp"]
    else:
        mlp, mrun = train_quad_mlp(data, params, tuple(o["hidden"]), spec.seed, o["mlp_epochs"])
        save_net(mlp, out / "quad_mlp.json")
        write_loss_csv(out / "quad_mlp_loss.csv", mrun)
        m.update(mlp_final_loss=mrun.history[-1], mlp_val_loss=mrun.val_history[-1])
    zero = MlpNet.create([6, *o["hidden"], 3])
    for W in zero.weights[-1:]:
        W[...] = 0.0
    for key, net in (("nominal", zero), ("node", node), ("mlp", mlp)):
        m[f"val_rollout_rmse/{key}"] = node_validation_rmse(net, data.val, params)
    return params, node, mlp, m


def _quad_train(spec, o, out, inputs):
    return _quad_models(spec, dict(o, node_checkpoint=None, mlp_checkpoint=None), out, inputs)[3], {}, {}


def _quad_mpc_compare(spec, o, out, inputs):
    from .control import TRAIN_NOISE, MpcConfig, PredictorModels, flight_summary, fly_mpc, write_flight_csv

    params, node, mlp, m = _quad_models(spec, o, out, inputs)
    unc = dict(QUAD_UNCERTAINTY_BUNDLE) if not spec.uncertainty else dict(spec.uncertainty)
    pert = apply_uncertainty(params, UncertaintySpec(**unc))
    predictors = spec.predictors or list(_DEFAULT_PREDICTORS)
    seeds = spec.seeds or list(range(5))
    cfg = MpcConfig(N=o["N"], iterations=o["solver_iterations"], L=o["L"], beta=o["beta"])
    fl = fly_mpc(pert.params, PredictorModels(params, node, mlp), cfg, predictors, seeds, o["duration"],
                 force=pert.spec.force, noise_std=TRAIN_NOISE if o["noise"] else 0.0)
    summary = flight_summary(fl)
    (out / "flight_summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
    if o["log_flights"]:
        for f, (p, s) in enumerate(zip(fl.predictors, fl.seeds)):
            if s == seeds[0]:
                write_flight_csv(out / f"flight_{p.replace('+', '_')}_{s}.csv", fl, f)
    for p in predictors:
        m[f"median_rmse/{p}"] = summary[p]["median_rmse"]
    grids = dict(rmse=_grid([[summary[p][str(s)]["rmse"] for s in seeds] for p in predictors],
                            range(len(predictors)), seeds, "predictor", "seed"))
    m["predictors"] = predictors
    return m, grids, {}


_RUNNERS = {
    "spiral-train": _spiral_train,
    "spiral-transfer": _spiral_transfer,
    "gain-heatmap": _gain_heatmap,
    "decay-ablation": _decay_ablation,
    "step-disturbance": _step_disturbance,
    "bound-check": _bound_check,
    "feedback-train": _feedback_train,
    "ballistic-predict": _ballistic_predict,
    "quad-train": _quad_train,
    "quad-mpc-compare": _quad_mpc_compare,
}


def _file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def run_experiment(spec: ExperimentSpec, out_dir=None) -> MetricsReport:
    """Run one experiment; deterministic given the experiment config (wall time aside)."""
    out = Path(spec.out_dir if out_dir is None else out_dir)
    out.mkdir(parents=True, exist_ok=True)
    inputs: dict = {}
    t0 = time.perf_counter()
    metrics, grids, series = _RUNNERS[spec.kind](spec, spec.opts(), out, inputs)
    report = MetricsReport(spec.kind, spec.spec_hash(), spec.seed, _plain(metrics), grids, series,
                           time.perf_counter() - t0)
    (out / "report.json").write_text(report.to_json())
    export_plotdata(report, out / "plotdata.csv")
    artifacts = {p.name: _file_hash(p) for p in sorted(out.iterdir())
                 if p.is_file() and p.name != "manifest.json"}
    manifest = dict(spec=spec.to_dict(), spec_hash=report.spec_hash, seed=spec.seed, seeds=spec.seeds,
                    inputs=inputs, artifacts=artifacts, version=__version__, wall_time=report.wall_time)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return report


def _plain(obj):
    """numpy scalars and arrays to JSON-native values."""
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    return obj
