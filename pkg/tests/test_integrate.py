import numpy as np
import pytest

from fbnn.dynamics import SPIRAL_X0, SpiralParams, spiral_deriv, spiral_solution
from fbnn.integrate import DivergenceError, Trajectory, euler_step, rk4_step, rollout

NOMINAL = SpiralParams()


def spiral_f(params=NOMINAL):
    return lambda x, u, t: spiral_deriv(params, x)


def test_euler_zero_dynamics():
    assert euler_step(lambda x, u, t: np.zeros(2), [1.0, 2.0], None, 0.0, 0.01).tolist() == [1.0, 2.0]


def test_euler_constant_field():
    assert euler_step(lambda x, u, t: np.array([1.0, 0.0]), [0.0, 0.0], None, 0.0, 0.5).tolist() == [0.5, 0.0]


def test_euler_spiral_hand_value():
    np.testing.assert_allclose(euler_step(spiral_f(), SPIRAL_X0, None, 0.0, 0.01), [8.991, -0.18], rtol=0, atol=1e-14)


def test_step_rejects_bad_step_and_nan():
    with pytest.raises(ValueError):
        euler_step(spiral_f(), SPIRAL_X0, None, 0.0, 0.0)
    with pytest.raises(DivergenceError):
        rk4_step(lambda x, u, t: np.array([np.nan]), [0.0], None, 0.0, 0.1)


def test_rk4_constant_field_exact():
    c = np.array([0.3, -1.7])
    out = rk4_step(lambda x, u, t: c, [1.0, 1.0], None, 0.0, 0.25)
    np.testing.assert_allclose(out, np.array([1.0, 1.0]) + 0.25 * c, rtol=2e-16, atol=4e-16)


def test_rk4_scalar_decay():
    x1 = rk4_step(lambda x, u, t: -x, np.array([1.0]), None, 0.0, 0.1)
    assert abs(x1[0] - np.exp(-0.1)) < 1e-7
    assert abs(x1[0] - 0.9048375) < 1e-7


def test_rk4_spiral_matches_closed_form():
    traj = rollout(spiral_f(), SPIRAL_X0, None, 0.0, 0.01, 1000, method="rk4")
    np.testing.assert_allclose(traj.states[-1], spiral_solution(NOMINAL, SPIRAL_X0, 10.0), atol=1e-5)


def test_rollout_single_step_reduces_to_step():
    for method, step in (("euler", euler_step), ("rk4", rk4_step)):
        traj = rollout(spiral_f(), SPIRAL_X0, None, 0.0, 0.01, 1, method=method)
        assert len(traj) == 2 and np.array_equal(traj.states[0], SPIRAL_X0)
        assert np.array_equal(traj.states[1], step(spiral_f(), SPIRAL_X0, None, 0.0, 0.01))


def test_rollout_zero_dynamics_constant():
    traj = rollout(lambda x, u, t: np.zeros(3), [1.0, 2.0, 3.0], None, 0.0, 0.1, 20)
    assert np.all(traj.states == [1.0, 2.0, 3.0])
    assert np.max(np.abs(np.diff(traj.times) - 0.1)) < 1e-12


def test_rollout_spiral_training_set_against_closed_form():
    # 1000 samples over 10 s; Euler drifts O(Ts), RK4 stays on the closed form
    truth = np.array([spiral_solution(NOMINAL, SPIRAL_X0, t) for t in 0.01 * np.arange(1001)])
    eul = rollout(spiral_f(), SPIRAL_X0, None, 0.0, 0.01, 1000, method="euler")
    rk = rollout(spiral_f(), SPIRAL_X0, None, 0.0, 0.01, 1000, method="rk4")
    assert np.max(np.abs(rk.states - truth)) < 1e-5
    assert np.max(np.abs(eul.states - truth)) < 0.8  # observed 0.729
    assert eul.states.shape == (1001, 2)


def test_rollout_euler_bit_identical_to_iterated_steps():
    f = spiral_f(SpiralParams(3.0, -0.05, 10.0))
    traj = rollout(f, SPIRAL_X0, None, 0.0, 0.01, 200)
    x = SPIRAL_X0.copy()
    for k in range(200):
        x = euler_step(f, x, None, 0.01 * k, 0.01)
    assert traj.states[-1].tobytes() == x.tobytes()


@pytest.mark.parametrize("method,ratio", [("euler", 2.0), ("rk4", 16.0)])
def test_order_of_accuracy(method, ratio):
    T = 2.0
    truth = spiral_solution(NOMINAL, SPIRAL_X0, T)
    errs = []
    for Ts in (0.02, 0.01):
        traj = rollout(spiral_f(), SPIRAL_X0, None, 0.0, Ts, int(round(T / Ts)), method=method)
        errs.append(np.linalg.norm(traj.states[-1] - truth))
    assert ratio / 1.5 <= errs[0] / errs[1] <= ratio * 1.5


def test_divergence_guard():
    with pytest.raises(DivergenceError, match="exceeded"):
        rollout(lambda x, u, t: 10.0 * x, [1.0], None, 0.0, 0.1, 1000)


def test_rollout_records_inputs():
    traj = rollout(lambda x, u, t: u, [0.0], lambda t: np.array([2.0]), 0.0, 0.5, 4)
    assert traj.inputs.shape == (5, 1)
    assert traj.states[-1, 0] == 4.0


def test_trajectory_csv_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    traj = Trajectory(np.arange(5) * 0.1, rng.normal(size=(5, 3)), rng.normal(size=(5, 2)))
    path = tmp_path / "traj.csv"
    traj.to_csv(path)
    assert path.read_text().splitlines()[0] == "t,x0,x1,x2,u0,u1"
    back = Trajectory.from_csv(path)
    assert back.states.tobytes() == traj.states.tobytes()
    assert back.inputs.tobytes() == traj.inputs.tobytes()


def test_trajectory_rejects_misaligned():
    with pytest.raises(ValueError):
        Trajectory([0.0, 0.1], np.zeros((3, 2)))
    with pytest.raises(ValueError):
        Trajectory([0.0, 0.0], np.zeros((2, 2)))
