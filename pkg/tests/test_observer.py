import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fbnn.dynamics import SpiralParams, spiral_deriv
from fbnn.nn import MlpNet, features_and_head, forward
from fbnn.observer import (
    FeedbackGain,
    ObserverState,
    UnstableGainError,
    adaptive_update,
    anchored_feedback,
    continuous_bounds,
    corrected_deriv,
    init_observer,
    iss_envelope,
    multistep_predict,
    observer_advance,
    prediction_rmse,
    run_feedback,
    simulate_error_dynamics,
    write_observer_trace,
)


def _lin(L, beta=0.0):
    return FeedbackGain(np.atleast_1d(np.asarray(L, float)), beta, "linear")


def test_corrected_deriv_zero_deviation_exact():
    f = np.array([0.3, -1.7])
    obs = ObserverState([1.0, 2.0])
    assert corrected_deriv(f, _lin([5, 5]), [1.0, 2.0], obs).tobytes() == f.tobytes()


def test_corrected_deriv_scalar_hand_value():
    assert corrected_deriv(np.zeros(1), _lin([2.0]), [1.0], ObserverState([0.0])).tolist() == [2.0]


def test_corrected_deriv_neural_anchor_zero():
    h = MlpNet.create([2, 8, 2], seed=1)
    h.biases[0][:] = 0.3
    h.biases[1][:] = -0.2
    f = np.array([1.0, 2.0])
    g = FeedbackGain(np.zeros(2), mode="neural")
    out = corrected_deriv(f, g, [0.5, 0.5], ObserverState([0.5, 0.5]), h_net=h)
    assert out.tobytes() == f.tobytes()
    with pytest.raises(ValueError):
        corrected_deriv(f, g, [0.5, 0.5], ObserverState([0.5, 0.5]))


def test_anchored_feedback_zero_rows_in_batch():
    # batched BLAS may round differently from a single-vector product
    h = MlpNet.create([2, 50, 50, 2], seed=2)
    for b in h.biases:
        b[:] = np.random.default_rng(0).normal(size=b.size)
    D = np.random.default_rng(1).normal(size=(300, 2))
    D[::3] = 0.0
    out = anchored_feedback(h, D)
    assert np.all(out[::3] == 0.0) and np.all(out[1::3] != 0.0)


def test_corrected_deriv_off_and_adaptive():
    f = np.array([1.0, -1.0])
    g = FeedbackGain(np.ones(2), mode="off")
    assert corrected_deriv(f, g, [3.0, 3.0], ObserverState([0.0, 0.0])).tolist() == [1.0, -1.0]
    net = MlpNet.create([2, 5, 2], seed=0)
    x = np.array([0.2, 0.7])
    obs = init_observer(x, net=net, Gamma=0.1)
    out = corrected_deriv(None, FeedbackGain(np.full(2, 2.0), mode="adaptive"), x, obs, features=features_and_head(net, x))
    assert out.tobytes() == forward(net, x).tobytes()


def test_gain_validation():
    with pytest.raises(ValueError):
        FeedbackGain(np.ones(2), mode="kalman")
    with pytest.raises(ValueError):
        FeedbackGain(np.ones(2), beta=-1.0)
    with pytest.raises(UnstableGainError):
        FeedbackGain.scalar(150.0, 2, Ts=0.02)
    assert FeedbackGain.scalar(45.0, 2, Ts=0.02).check_stability(0.02) == pytest.approx(0.1)


def test_observer_advance_cases():
    obs = ObserverState([1.0, -1.0], t=0.5)
    same = observer_advance(obs, np.zeros(2), 0.1)
    assert same.x_hat.tolist() == [1.0, -1.0] and same.t == pytest.approx(0.6)
    assert observer_advance(ObserverState([0.0]), [2.0], 0.1).x_hat.tolist() == [pytest.approx(0.2)]
    with pytest.raises(FloatingPointError):
        observer_advance(obs, [np.nan, 0.0], 0.1)
    with pytest.raises(ValueError):
        observer_advance(obs, np.zeros(2), 0.0)


def test_observer_steady_state_constant_residual():
    # truth = nominal + constant residual; fixed point of the discrete error map is delta / l
    p = SpiralParams()
    delta = np.array([1.5, -2.0])
    l, Ts = 4.0, 0.01
    g = _lin([l, l])
    x = np.array([9.0, 0.0])
    obs = init_observer(x)
    for _ in range(int(10 / (l * Ts))):
        fe = spiral_deriv(p, x)
        obs = observer_advance(obs, corrected_deriv(fe, g, x, obs), Ts)
        x = x + Ts * (fe + delta)
    err = np.linalg.norm(x - obs.x_hat)
    gamma = np.linalg.norm(delta)
    assert abs(err - gamma / l) <= 0.05 * gamma / l


def test_adaptive_update_hand_cases():
    pf = features_and_head(MlpNet([1, 1, 1], [np.ones((1, 1)), np.ones((1, 1))], [np.zeros(1), np.zeros(1)]), [1.0])
    obs = ObserverState([0.0], chi_hat=np.array([1.0]), Gamma=np.array([1.0]))
    assert adaptive_update(obs, pf, [0.0], 0.1).chi_hat.tolist() == [1.0]
    zero_gain = ObserverState([0.0], chi_hat=np.array([1.0]), Gamma=np.array([0.0]))
    assert adaptive_update(zero_gain, pf, [0.5], 0.1).chi_hat.tolist() == [1.0]
    for k in range(1, 4):
        obs = adaptive_update(obs, pf, [0.5], 0.1)
        assert obs.chi_hat[0] == pytest.approx(1.0 + 0.05 * k)
    with pytest.raises(ValueError):
        adaptive_update(obs, pf, [0.5, 0.5], 0.1)


def test_adaptive_update_changes_forward():
    net = MlpNet.create([2, 6, 2], seed=2)
    x = np.array([0.3, -0.4])
    obs = init_observer(x, net=net, Gamma=np.full(12, 2.0))
    pf = features_and_head(net, x)
    obs = adaptive_update(obs, pf, [0.2, -0.1], 0.05)
    net.weights[-1][...] = obs.chi_hat.reshape(2, 6)
    assert forward(net, x).tobytes() == pf.recombine(obs.chi_hat).tobytes()


def _spiral_net(seed=0):
    return MlpNet.create([2, 16, 2], seed=seed)


def test_multistep_zero_deviation_is_plain_rollout():
    net = _spiral_net()
    x = np.array([1.0, 0.5])
    preds = multistep_predict(net, _lin([10, 10], 0.02), x, ObserverState(x), None, 0.01, 20)
    p = x.copy()
    for i in range(20):
        p = p + 0.01 * forward(net, p)
        assert preds[i].tobytes() == p.tobytes()


def test_multistep_large_beta_corrects_only_first_step():
    net = _spiral_net()
    x = np.array([1.0, 0.5])
    obs = ObserverState([0.8, 0.7])
    preds = multistep_predict(net, _lin([10, 10], 1e6), x, obs, None, 0.01, 10)
    p = x + 0.01 * (forward(net, x) + 10 * (x - obs.x_hat))
    assert np.allclose(preds[0], p, rtol=0, atol=1e-15)
    for i in range(1, 10):
        p = p + 0.01 * forward(net, p)
        assert np.allclose(preds[i], p, rtol=0, atol=1e-14)


def test_multistep_layer_locality():
    net = _spiral_net(3)
    x, obs = np.array([1.0, 0.5]), ObserverState([0.9, 0.4])
    a = multistep_predict(net, _lin([10, 10], 0.0), x, obs, None, 0.01, 8)
    b = multistep_predict(net, _lin([10, 10], 0.5), x, obs, None, 0.01, 8)
    # the two gain schedules agree only at i=0, so only p_1 coincides
    assert a[0].tobytes() == b[0].tobytes()
    assert not np.array_equal(a[1], b[1])


def test_multistep_errors():
    net = _spiral_net()
    with pytest.raises(ValueError):
        multistep_predict(net, _lin([1, 1]), [0.0, 0.0], ObserverState([0.0, 0.0]), None, 0.01, 0)
    with pytest.raises(UnstableGainError):
        multistep_predict(net, _lin([300, 300]), [0.0, 0.0], ObserverState([0.0, 0.0]), None, 0.01, 5)


def test_run_feedback_predictions_match_single_calls():
    net = _spiral_net(4)
    rng = np.random.default_rng(0)
    meas = rng.normal(size=(30, 2))
    g = _lin([5, 5], 0.1)
    run = run_feedback(net, g, meas, 0.02, N=6)
    obs = init_observer(meas[0])
    for k in range(12):
        assert np.array_equal(obs.x_hat, run.x_hat[k])
        single = multistep_predict(net, g, meas[k], obs, None, 0.02, 6)
        np.testing.assert_allclose(run.predictions[k], single, rtol=1e-14, atol=1e-14)
        obs = observer_advance(obs, corrected_deriv(forward(net, meas[k]), g, meas[k], obs), 0.02)


def test_two_dof_neural_anchor_bit_exact():
    net = _spiral_net(5)
    h = MlpNet.create([2, 10, 2], seed=6)
    h.biases[0][:] = 0.1
    truth = [np.array([9.0, 0.0])]
    for _ in range(200):
        truth.append(truth[-1] + 0.01 * forward(net, truth[-1]))
    truth = np.array(truth)
    plain = run_feedback(net, FeedbackGain(np.zeros(2), mode="off"), truth, 0.01, N=10)
    neural = run_feedback(net, FeedbackGain(np.zeros(2), mode="neural"), truth, 0.01, N=10, h_net=h)
    assert neural.predictions.tobytes() == plain.predictions.tobytes()


def test_prediction_rmse_zero_on_truth():
    truth = np.cumsum(np.ones((20, 2)), axis=0)
    preds = np.stack([truth[k + 1 : k + 4] for k in range(17)])
    assert prediction_rmse(preds, truth) == 0.0


def test_continuous_bounds_values():
    g = _lin([2.0, 5.0])
    b1, b2 = continuous_bounds(g, 3.0)
    assert b1 == pytest.approx(1.5) and b2 == pytest.approx(3.0 * 5.0 / 2.0 + 3.0)
    with pytest.raises(ValueError):
        continuous_bounds(_lin([0.0, 1.0]), 1.0)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), lam=st.sampled_from([1.0, 5.0, 10.0]))
def test_error_band_property(seed, lam):
    rng = np.random.default_rng(seed)
    gamma = rng.uniform(0.1, 3.0)
    g = _lin(lam * rng.uniform(1.0, 2.0, size=3))
    freqs = rng.uniform(0.1, 3.0, size=(4, 3))
    amps = rng.normal(size=(4, 3))
    phase = rng.uniform(0, 2 * np.pi, size=(4, 3))

    def residual(t):
        v = np.sum(amps * np.sin(freqs * t + phase), axis=0) + 0.5
        return gamma * v / max(np.linalg.norm(v), 1.0)

    lam_min = g.eig_range()[0]
    _, xs, dxs = simulate_error_dynamics(g, residual, np.zeros(3), 12.0 / lam_min, 1e-3)
    b1, b2 = continuous_bounds(g, gamma)
    start = int(np.ceil(10.0 / lam_min / 1e-3))
    assert np.all(np.linalg.norm(xs[start:], axis=1) <= b1 * (1 + 1e-6))
    assert np.all(np.linalg.norm(dxs[start:], axis=1) <= b2 * (1 + 1e-6))


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_discrete_iss_envelope_property(seed):
    rng = np.random.default_rng(seed)
    Ts = 0.01
    g = _lin(rng.uniform(1.0, 50.0, size=2))
    gamma = rng.uniform(0.1, 5.0)
    x_tilde = rng.normal(size=2)
    x0 = np.linalg.norm(x_tilde)
    A = np.eye(2) - Ts * g.L
    for k in range(1, 500):
        d = rng.normal(size=2)
        d *= gamma * rng.uniform() / np.linalg.norm(d)
        x_tilde = A @ x_tilde + Ts * d
        assert np.linalg.norm(x_tilde) <= iss_envelope(g, Ts, gamma, x0, k)


def test_observer_trace_csv(tmp_path):
    t = np.arange(3) * 0.1
    x = np.ones((3, 2))
    path = tmp_path / "trace.csv"
    write_observer_trace(path, t, x, np.zeros((3, 2)), 2.0)
    lines = path.read_text().splitlines()
    assert lines[0] == "t,x0,x1,x_hat0,x_hat1,x_tilde_norm,bound"
    assert float(lines[1].split(",")[-2]) == pytest.approx(np.sqrt(2))
