"""Unrolled, truncated and finite-difference gradient oracles."""

import numpy as np
import pytest

from rtrl.architectures import ElmanRnn, LinearRnn, TheoryRnn
from rtrl.errors import InvalidConfigError, NonFiniteError
from rtrl.model import ModelDims, SquasherSpec, scaled_tanh
from rtrl.oracles import (
    Trajectory,
    finite_difference_gradient,
    full_bptt_gradient,
    long_memory_fixture,
    resimulation_sensitivity,
    rtrl_average_gradient,
    simulate_states,
    tbptt_gradient,
    trajectory_loss,
)

# Truncation error at window 1 on the long-memory fixture; measured 0.313,
# frozen as a floor so regressions that shrink the bias are caught.
LONG_MEMORY_TAU1_ERROR_FLOOR = 0.1


def _random_traj(rng, model, horizon):
    return Trajectory(inputs=rng.uniform(-1.0, 1.0, (horizon, model.input_dim)),
                      targets=rng.standard_normal(horizon),
                      s0=np.zeros(model.state_dim))


class TestTrajectory:
    def test_misaligned_lengths_rejected(self):
        with pytest.raises(InvalidConfigError):
            Trajectory(inputs=np.zeros((3, 1)), targets=np.zeros(4), s0=np.zeros(2))

    def test_nonfinite_entries_rejected(self):
        with pytest.raises(InvalidConfigError):
            Trajectory(inputs=np.array([[np.inf]]), targets=np.zeros(1), s0=np.zeros(1))

    def test_nonfinite_state_aborts_with_index(self):
        model = LinearRnn(1, 1, delta=1.0)
        theta = model.pack({"W": np.array([[40.0]]), "B": np.array([[1e300]]),
                            "A": np.array([[1.0]])})
        traj = Trajectory(inputs=np.full((10, 1), 1e9), targets=np.zeros(10), s0=np.ones(1))
        with pytest.raises(NonFiniteError) as err, np.errstate(over="ignore"):
            simulate_states(model, theta, traj)
        assert 0 <= err.value.step < 10


class TestFullBptt:
    def test_single_step_gradient_matches_hand_formula(self):
        rng = np.random.default_rng(0)
        spec = SquasherSpec(phi=scaled_tanh(0.5), lam=scaled_tanh(1.0))
        model = TheoryRnn(ModelDims(3, 2), spec)
        theta = model.init_params(rng, 0.5)
        traj = _random_traj(rng, model, 1)
        got = full_bptt_gradient(model, theta, traj)
        # single step: gradient = -(y - f(s1)) * (df/ds js0-free path + readout terms)
        s1, js, jp = model.step_with_jacobians(theta, traj.s0, traj.inputs[0])
        f, dfs, dfp = model.readout(theta, s1)
        resid = f[0] - traj.targets[0]
        want = resid * (dfs[0] @ jp + dfp[0])
        np.testing.assert_allclose(got, want, atol=1e-15)

    def test_matches_finite_difference(self):
        rng = np.random.default_rng(1)
        model = ElmanRnn(3, 2, "tanh")
        theta = model.init_params(rng, 0.6)
        traj = _random_traj(rng, model, 15)
        g = full_bptt_gradient(model, theta, traj)
        fd = finite_difference_gradient(model, theta, traj, h=1e-5)
        assert np.abs(g - fd).max() / np.abs(g).max() <= 1e-6

    def test_matches_streaming_average(self):
        rng = np.random.default_rng(2)
        model = LinearRnn(5, 2, 1e-2)
        theta = model.init_params(rng, 0.4)
        traj = _random_traj(rng, model, 50)
        diff = np.abs(full_bptt_gradient(model, theta, traj)
                      - rtrl_average_gradient(model, theta, traj)).max()
        assert diff <= 1e-10


class TestTbptt:
    def test_full_window_degenerates_to_bptt(self):
        rng = np.random.default_rng(3)
        model = ElmanRnn(4, 2, "tanh")
        theta = model.init_params(rng, 0.5)
        traj = _random_traj(rng, model, 25)
        full = full_bptt_gradient(model, theta, traj)
        for tau in (25, 40):
            assert np.abs(tbptt_gradient(model, theta, traj, tau) - full).max() <= 1e-12

    def test_memoryless_model_needs_window_one(self):
        rng = np.random.default_rng(4)
        model = ElmanRnn(3, 2, "tanh")
        mats = {"W": np.zeros((3, 3)), "B": rng.standard_normal((3, 2)),
                "A": rng.standard_normal((1, 3))}
        theta = model.pack(mats)
        traj = _random_traj(rng, model, 20)
        full = full_bptt_gradient(model, theta, traj)
        assert np.abs(tbptt_gradient(model, theta, traj, 1) - full).max() <= 1e-12

    def test_long_memory_fixture_bias_profile(self):
        model, theta, traj = long_memory_fixture(seed=0)
        full = full_bptt_gradient(model, theta, traj)
        errs = [float(np.linalg.norm(tbptt_gradient(model, theta, traj, tau) - full))
                for tau in (1, 2, 5, 10, 25, 50)]
        assert errs[0] > LONG_MEMORY_TAU1_ERROR_FLOOR
        for a, b in zip(errs, errs[1:]):
            assert b <= a * (1 + 1e-12)
        assert errs[-1] <= 1e-12

    def test_chunked_mode_respects_boundaries(self):
        rng = np.random.default_rng(5)
        model = LinearRnn(3, 2, 1e-2)
        theta = model.init_params(rng, 0.4)
        traj = _random_traj(rng, model, 12)
        # chunk length equal to horizon recovers the full gradient
        full = full_bptt_gradient(model, theta, traj)
        assert np.abs(tbptt_gradient(model, theta, traj, 12, window_mode="chunked")
                      - full).max() <= 1e-12
        # chunk length 1 equals sliding window 1
        a = tbptt_gradient(model, theta, traj, 1, window_mode="chunked")
        b = tbptt_gradient(model, theta, traj, 1, window_mode="sliding")
        np.testing.assert_allclose(a, b, atol=1e-15)

    def test_invalid_window_rejected(self):
        model = LinearRnn(2, 1, 1e-2)
        traj = Trajectory(inputs=np.zeros((3, 1)), targets=np.zeros(3), s0=np.zeros(2))
        with pytest.raises(InvalidConfigError):
            tbptt_gradient(model, np.zeros(model.n_params), traj, 0)
        with pytest.raises(InvalidConfigError):
            tbptt_gradient(model, np.zeros(model.n_params), traj, 2, window_mode="bogus")


class TestFiniteDifference:
    def test_quadratic_per_coordinate_loss_is_exact(self):
        # one linear step: the loss restricted to any single coordinate is
        # quadratic, so central differences carry no truncation error
        rng = np.random.default_rng(6)
        model = LinearRnn(3, 2, 1e-2)
        theta = model.init_params(rng, 0.5)
        traj = _random_traj(rng, model, 1)
        fd = finite_difference_gradient(model, theta, traj, h=1e-3)
        g = full_bptt_gradient(model, theta, traj)
        assert np.abs(fd - g).max() <= 1e-10 * max(np.abs(g).max(), 1.0)

    def test_second_order_convergence_rate(self):
        rng = np.random.default_rng(7)
        model = ElmanRnn(3, 2, "tanh")
        theta = model.init_params(rng, 0.8)
        traj = _random_traj(rng, model, 12)
        g = full_bptt_gradient(model, theta, traj)
        err_2h = np.linalg.norm(finite_difference_gradient(model, theta, traj, 8e-3) - g)
        err_h = np.linalg.norm(finite_difference_gradient(model, theta, traj, 4e-3) - g)
        assert 3.0 <= err_2h / err_h <= 5.0

    def test_nonpositive_step_rejected(self):
        model = LinearRnn(2, 1, 1e-2)
        traj = Trajectory(inputs=np.zeros((3, 1)), targets=np.zeros(3), s0=np.zeros(2))
        with pytest.raises(InvalidConfigError):
            finite_difference_gradient(model, np.zeros(model.n_params), traj, h=0.0)


class TestResimulationSensitivity:
    def test_matches_forward_recursion(self):
        rng = np.random.default_rng(8)
        spec = SquasherSpec(phi=scaled_tanh(0.5), lam=scaled_tanh(1.0))
        model = TheoryRnn(ModelDims(3, 2), spec)
        theta = model.init_params(rng, 0.5)
        traj = _random_traj(rng, model, 15)
        sens = np.zeros((3, model.n_params))
        s = traj.s0.copy()
        for t in range(15):
            s, js, jp = model.step_with_jacobians(theta, s, traj.inputs[t])
            sens = js @ sens + jp
        fd = resimulation_sensitivity(model, theta, traj, t=15, h=1e-6)
        assert np.abs(fd - sens).max() <= 1e-6 * max(np.abs(fd).max(), 1e-4)

    def test_index_validation(self):
        model = LinearRnn(2, 1, 1e-2)
        traj = Trajectory(inputs=np.zeros((3, 1)), targets=np.zeros(3), s0=np.zeros(2))
        with pytest.raises(InvalidConfigError):
            resimulation_sensitivity(model, np.zeros(model.n_params), traj, t=4)


class TestTrajectoryLoss:
    def test_matches_manual_accumulation(self):
        rng = np.random.default_rng(9)
        model = ElmanRnn(3, 2, "tanh")
        theta = model.init_params(rng, 0.5)
        traj = _random_traj(rng, model, 8)
        states = simulate_states(model, theta, traj)
        want = np.mean([0.5 * (traj.targets[t] - model.readout(theta, states[t + 1])[0][0]) ** 2
                        for t in range(8)])
        assert abs(trajectory_loss(model, theta, traj) - want) <= 1e-14
