"""Acceptance suite, one test per criterion.

Each test prints a ``criterion N: PASS|FAIL ...`` line; the lines are also
collected into the pytest terminal summary (see conftest.py).  The whole
module takes roughly 15 minutes, most of it in the quadrotor MPC comparison
(criteria 10 and 11).  Run it alone with

    pytest tests/test_acceptance.py -v -s
"""

import json
import time
from pathlib import Path

import numpy as np
import pytest
from fdcheck import adjoint_rel_error, check_direction

from fbnn.control import DfbcGains, QuadClosedLoopModel, closed_loop_trajectories, fly_dfbc, random_smooth_ref
from fbnn.dynamics import BallisticParams, QuadParams, SpiralParams, ballistic_deriv
from fbnn.experiments import ExperimentSpec, run_experiment
from fbnn.integrate import rollout
from fbnn.nn import MlpNet, backward, forward, load_net
from fbnn.observer import FeedbackGain, run_feedback
from fbnn.train import AdjointProblem, NodeModel, spiral_truth

REGRESSION = json.loads((Path(__file__).parent / "regression_values.json").read_text())
RESULTS: dict = {}


def _record(n, ok, detail):
    line = f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    RESULTS[n] = line
    print("\n" + line)
    assert ok, line


@pytest.fixture(scope="module")
def runs(tmp_path_factory):
    """Runs experiments on demand and remembers each spec for the determinism rerun."""
    root = tmp_path_factory.mktemp("acceptance")
    cache = {}

    def run(name, kind, **options):
        if name not in cache:
            spec = ExperimentSpec(kind, seed=0, options=options)
            t0 = time.perf_counter()
            rep = run_experiment(spec, root / "a" / name)
            cache[name] = (spec, rep, time.perf_counter() - t0)
        return cache[name]

    run.root = root
    run.cache = cache
    return run


@pytest.fixture(scope="module")
def spiral_ckpt(runs):
    _, _, secs = runs("spiral-train", "spiral-train")
    return str(runs.root / "a" / "spiral-train" / "node.json"), secs


# 1 ----------------------------------------------------------------------


def _spiral_problem(seed, horizon, batch):
    rng = np.random.default_rng(seed)
    net = MlpNet.create([2, 12, 12, 2], seed=seed)
    for b in net.biases:
        b[:] = rng.normal(size=b.size) * 0.2
    p = SpiralParams(rng.uniform(1, 3), rng.uniform(-0.1, 0.2), rng.uniform(-5, 5))
    truth = spiral_truth(p, 0.01, horizon - 1).states
    x0 = truth[0] + rng.normal(size=(batch, 2)) * 0.1
    return AdjointProblem(NodeModel(net, 0.01), x0, np.repeat(truth[None], batch, 0))


def _ballistic_prior(X, U):
    out = np.zeros_like(X)
    out[:, :3] = X[:, 3:6]
    out[:, 5] = -9.81
    return out


def _ballistic_problem(seed, horizon):
    rng = np.random.default_rng(seed)
    net = MlpNet.create([3, 10, 3], seed=seed)
    model = NodeModel(net, 0.01, 6, in_idx=[3, 4, 5], out_idx=[3, 4, 5], prior=_ballistic_prior)
    x0 = np.concatenate([np.zeros(3), rng.uniform(2, 8, 3)])
    bp = BallisticParams()
    tr = rollout(lambda x, u, t: ballistic_deriv(bp, x), x0, None, 0.0, 0.01, horizon - 1, "rk4")
    return AdjointProblem(model, x0, tr.states, weights=rng.uniform(0.5, 2.0, 6))


def _quad_problem(seed, horizon):
    params = QuadParams()
    ctrl = QuadParams(drag=(0.0, 0.0, 0.0))
    log = fly_dfbc(params, ctrl, random_smooth_ref(seed), horizon + 5, noise_std=0.01, seed=seed)
    tr = closed_loop_trajectories([log])[0]
    net = MlpNet.create([6, 10, 3], seed=seed)
    model = QuadClosedLoopModel(net, params, Ts=0.02, ctrl=ctrl, gains=DfbcGains())
    return AdjointProblem(model, tr.states[None, 0], tr.states[None, :horizon], tr.inputs[None, : horizon - 1])


def _backward_error(seed, rng):
    net = MlpNet.create([3, 16, 16, 2], seed=seed)
    for b in net.biases:
        b[:] = rng.normal(size=b.size) * 0.3
    x = rng.normal(size=(4, 3))
    g = rng.normal(size=(4, 2))
    theta = net.get_flat().copy()

    def loss(th):
        net.set_flat(th)
        out = float(np.sum(g * forward(net, x)))
        net.set_flat(theta)
        return out

    grads, gx = backward(net, x, g)
    err_p = check_direction(loss, theta, grads.flat(), rng)
    err_x = check_direction(lambda xx: float(np.sum(g * forward(net, xx.reshape(x.shape)))), x.ravel(), gx.ravel(), rng)
    return max(err_p, err_x)


def test_criterion_01_gradient_oracle():
    t0 = time.perf_counter()
    errs = []
    for s in range(40):
        errs.append(adjoint_rel_error(_spiral_problem(s, 2 + s % 29, 1 + s % 3), np.random.default_rng(s)))
    for s in range(40):
        errs.append(adjoint_rel_error(_ballistic_problem(s, 2 + s % 29), np.random.default_rng(1000 + s)))
    for s in range(40):
        errs.append(adjoint_rel_error(_quad_problem(s, 5 + s % 26), np.random.default_rng(2000 + s)))
    for s in range(30):
        errs.append(_backward_error(s, np.random.default_rng(3000 + s)))
    secs = time.perf_counter() - t0
    worst = max(errs)
    _record(1, len(errs) == 150 and worst < 1e-4 and secs < 120,
            f"{len(errs)} cases, worst relative error {worst:.2e} (< 1e-4), {secs:.0f} s (< 120 s)")


# 2, 3 -------------------------------------------------------------------


def test_criterion_02_error_band(runs):
    _, rep, secs = runs("bound-check", "bound-check")
    m = rep.metrics
    ok = m["cases"] == 20 and m["violations_x"] == 0 and m["violations_dx"] == 0 and secs < 60
    _record(2, ok, f"{m['cases']} residuals, band violations x={m['violations_x']} dx={m['violations_dx']}, "
                   f"worst |x~|/band {m['worst_ratio']:.4f}, {secs:.0f} s (< 60 s, includes the ISS sweep)")


def test_criterion_03_iss_envelope(runs):
    spec, rep, _ = runs("bound-check", "bound-check")
    m = rep.metrics
    _record(3, m["cases"] == 20 and m["violations_iss"] == 0,
            f"{m['cases']} seeded cases x {spec.opts()['iss_steps']} steps, envelope violations {m['violations_iss']}")


# 4 ----------------------------------------------------------------------


def test_criterion_04_spiral_transfer(runs, spiral_ckpt):
    ckpt, train_secs = spiral_ckpt
    _, rep, secs = runs("spiral-transfer", "spiral-transfer", checkpoint=ckpt)
    m = rep.metrics
    frozen = REGRESSION["spiral-transfer"]
    drift = max(abs(m[k] - v) / abs(v) for k, v in frozen.items())
    halves = m["rmse_feedback"] <= 0.5 * m["rmse_open"]
    decay_helps = m["rmse_noisy_beta"] < m["rmse_noisy_beta0"]
    total = train_secs + secs
    ok = halves and decay_helps and drift < 1e-6 and total < 300
    _record(4, ok, f"feedback/open RMSE {m['rmse_feedback']:.4f}/{m['rmse_open']:.4f} = {m['ratio']:.3f} "
                   f"(need <= 0.5: {'ok' if halves else 'NO'}); noisy beta=0.02 {m['rmse_noisy_beta']:.4f} vs "
                   f"beta=0 {m['rmse_noisy_beta0']:.4f} ({'ok' if decay_helps else 'NO'}); "
                   f"regression drift {drift:.1e}; {total:.0f} s")


# 5, 6 -------------------------------------------------------------------


def test_criterion_05_gain_heatmap(runs, spiral_ckpt):
    spec, rep, secs = runs("gain-heatmap", "gain-heatmap", checkpoint=spiral_ckpt[0])
    gains = spec.opts()["gains"]
    clean = np.array(rep.grids["error_noise_0"]["values"])
    noisy = np.array(rep.grids["error_noise_0.05"]["values"])
    up = [(i, int(j)) for i, row in enumerate(np.diff(clean, axis=1)) for j in np.flatnonzero(row > 0)]
    mono = not up
    k45 = gains.index(45.0)
    ushape = bool(np.all(noisy[:, k45] > noisy.min(axis=1)))
    detail = (f"noise-free non-increasing rows {10 - len({i for i, _ in up})}/10"
              + (f" (increases at (level, gain step) {up}, max +{np.diff(clean, axis=1).max():.1e})" if up else "")
              + f"; noisy rows with error(45) > min {int(np.sum(noisy[:, k45] > noisy.min(axis=1)))}/10; {secs:.0f} s")
    _record(5, mono and ushape and secs + spiral_ckpt[1] < 300, detail)


def test_criterion_06_decay_ablation(runs, spiral_ckpt):
    spec, rep, _ = runs("decay-ablation", "decay-ablation", checkpoint=spiral_ckpt[0])
    rmse = np.array(rep.metrics["rmse"])
    k = int(np.argmin(rmse))
    d = np.diff(rmse)
    ok = 0 < k < len(rmse) - 1 and np.all(d[:k] < 0) and np.all(d[k:] > 0)
    _record(6, bool(ok), f"RMSE over beta {spec.opts()['betas']}: {np.round(rmse, 4).tolist()}, "
                         f"minimum at beta={spec.opts()['betas'][k]}")


# 7, 8 -------------------------------------------------------------------


def test_criterion_07_two_dof_exactness(runs, spiral_ckpt):
    _, rep, _ = runs("feedback-train", "feedback-train", checkpoint=spiral_ckpt[0])
    out = runs.root / "a" / "feedback-train"
    net, h = load_net(spiral_ckpt[0]), load_net(out / "feedback.json")
    rng = np.random.default_rng(7)
    exact = []
    for x0 in rng.uniform(-9, 9, size=(3, 2)):
        # the frozen model's own Euler trajectory: every deviation is exactly zero
        xs = [x0]
        for _ in range(1000):
            xs.append(xs[-1] + 0.01 * forward(net, xs[-1]))
        xs = np.array(xs)
        plain = run_feedback(net, FeedbackGain(np.zeros(2), mode="off"), xs, 0.01, N=50)
        fb = run_feedback(net, FeedbackGain(np.zeros(2), mode="neural"), xs, 0.01, N=50, h_net=h)
        exact.append(fb.predictions.tobytes() == plain.predictions.tobytes()
                     and fb.x_hat.tobytes() == plain.x_hat.tobytes())
    ok = all(exact) and rep.metrics["frozen_unchanged"]
    _record(7, ok, f"bit-exact on {sum(exact)}/3 1000-step rollouts; f_neural unchanged by train_feedback: "
                   f"{rep.metrics['frozen_unchanged']}")


def test_criterion_08_randomization_orderings(runs, spiral_ckpt):
    _, rep, _ = runs("feedback-train", "feedback-train", checkpoint=spiral_ckpt[0])
    m = rep.metrics
    ok = (m["wins_one_step"] >= 10 and m["wins_multi_step"] >= 10
          and m["nominal_rmse_randomized"] > m["nominal_rmse_two_dof"])
    _record(8, ok, f"feedback wins one-step {m['wins_one_step']}/12, N=50 {m['wins_multi_step']}/12; nominal RMSE "
                   f"randomized ODE {m['nominal_rmse_randomized']:.4f} vs two-DOF {m['nominal_rmse_two_dof']:.4f}")


# 9 ----------------------------------------------------------------------


def test_criterion_09_step_disturbance(runs, spiral_ckpt):
    _, rep, _ = runs("step-disturbance", "step-disturbance", checkpoint=spiral_ckpt[0])
    m = rep.metrics
    ok = m["reentry_time"] <= m["settle_window"] and m["violations_after_settle"] == 0
    _record(9, ok, f"re-entry {m['reentry_time']:.2f} s after the step (window {m['settle_window']:.2f} s); "
                   f"max |x~| after window {m['max_error_after_settle']:.3f} <= band {m['band']:.3f}")


# 10 ---------------------------------------------------------------------


def test_criterion_10_quad_mpc_ordering(runs):
    _, rep, secs = runs("quad-mpc-compare", "quad-mpc-compare")
    r = {p: rep.metrics[f"median_rmse/{p}"] for p in rep.metrics["predictors"]}
    fnn, neural, nom, mlp, adap = r["feedback-nn"], r["neural-ode"], r["nominal"], r["mlp"], r["adaptive-fnn"]
    ok = fnn < neural < nom and neural < mlp and adap <= 1.5 * fnn and secs < 1200
    table = ", ".join(f"{p} {v:.3f}" for p, v in r.items())
    _record(10, ok, f"median RMSE [{table}]; AdapFNN/FNN {adap / fnn:.2f} (<= 1.5); {secs:.0f} s (< 1200 s)")


# 11 ---------------------------------------------------------------------


def test_criterion_11_determinism(runs):
    assert runs.cache, "run the other criteria first"
    same = []
    for name, (spec, _, _) in sorted(runs.cache.items()):
        run_experiment(spec, runs.root / "b" / name)
        a = json.loads((runs.root / "a" / name / "manifest.json").read_text())["artifacts"]
        b = json.loads((runs.root / "b" / name / "manifest.json").read_text())["artifacts"]
        same.append((name, a == b))
    bad = [n for n, s in same if not s]
    _record(11, not bad, f"{len(same) - len(bad)}/{len(same)} experiment reruns byte-identical in every artifact"
                         + (f" (differ: {bad})" if bad else ""))
