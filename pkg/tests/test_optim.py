"""Step-size schedules and the two update rules."""

import numpy as np
import pytest

from rtrl.errors import DimensionMismatchError, InvalidConfigError
from rtrl.optim import RmspropState, Schedule, rmsprop_apply, schedule_rate, sgd_apply


class TestSchedule:
    def test_harmonic_schedule(self):
        sched = Schedule(alpha0=1.0, gamma=1.0, offset=1.0)
        for t in (0, 1, 9, 99):
            assert schedule_rate(sched, t) == 1.0 / (1 + t)
        assert sched.robbins_monro

    def test_summability_flag_threshold(self):
        assert Schedule(alpha0=1.0, gamma=0.7).robbins_monro
        with pytest.warns(UserWarning):
            flagged = Schedule(alpha0=1.0, gamma=0.4)
        assert not flagged.robbins_monro

    def test_monotone_decreasing(self):
        sched = Schedule(alpha0=0.3, gamma=0.6, offset=2.0)
        rates = [sched.rate(t) for t in range(200)]
        assert all(b < a for a, b in zip(rates, rates[1:]))

    def test_invalid_parameters_rejected(self):
        with pytest.raises(InvalidConfigError):
            Schedule(alpha0=0.0, gamma=0.7)
        with pytest.raises(InvalidConfigError):
            Schedule(alpha0=1.0, gamma=0.0)
        with pytest.raises(InvalidConfigError):
            Schedule(alpha0=1.0, gamma=1.5)
        with pytest.raises(InvalidConfigError):
            Schedule(alpha0=1.0, gamma=0.7, offset=0.0)


class TestSgd:
    def test_zero_gradient_or_rate(self):
        theta = np.array([1.0, -2.0])
        assert np.array_equal(sgd_apply(theta, np.zeros(2), 0.5), theta)
        assert np.array_equal(sgd_apply(theta, np.ones(2), 0.0), theta)

    def test_random_case_against_arithmetic(self):
        rng = np.random.default_rng(0)
        theta = rng.standard_normal(7)
        g = rng.standard_normal(7)
        got = sgd_apply(theta, g, 0.37)
        for i in range(7):
            assert got[i] == theta[i] - 0.37 * g[i]

    def test_dim_mismatch(self):
        with pytest.raises(DimensionMismatchError):
            sgd_apply(np.zeros(3), np.zeros(4), 0.1)


class TestRmsprop:
    def test_zero_gradient_keeps_parameters(self):
        state = RmspropState.zeros(3)
        theta, new = rmsprop_apply(np.ones(3), np.zeros(3), 0.1, state)
        assert np.array_equal(theta, np.ones(3))
        assert np.array_equal(new.v, np.zeros(3))

    def test_constant_gradient_limit(self):
        # v converges to g^2, so the step approaches alpha * g / (|g| + eps)
        g = np.array([0.5, -2.0])
        state = RmspropState.zeros(2)
        theta = np.zeros(2)
        for _ in range(800):
            theta, state = rmsprop_apply(theta, g, 0.0, state)  # only update v
        step_theta, _ = rmsprop_apply(np.zeros(2), g, 1.0, state)
        want = -g / (np.abs(g) + state.eps)
        np.testing.assert_allclose(step_theta, want, rtol=1e-10)

    def test_random_trace_against_scripted_recurrence(self):
        rng = np.random.default_rng(1)
        theta = rng.standard_normal(4)
        state = RmspropState.zeros(4, rho=0.85, eps=1e-7)
        v = np.zeros(4)
        mirror = theta.copy()
        for t in range(50):
            g = rng.standard_normal(4)
            theta, state = rmsprop_apply(theta, g, 0.01, state)
            v = 0.85 * v + 0.15 * g * g
            mirror = mirror - 0.01 * g / (np.sqrt(v) + 1e-7)
            np.testing.assert_allclose(theta, mirror, atol=1e-15)
            assert np.all(state.v >= 0.0)

    def test_dim_mismatch(self):
        with pytest.raises(DimensionMismatchError):
            rmsprop_apply(np.zeros(3), np.zeros(3), 0.1, RmspropState.zeros(4))


class TestUpdateMagnitude:
    def test_bounded_architecture_step_sizes(self):
        """SGD displacement stays within alpha_t times the uniform gradient bound."""
        from rtrl.analysis import gradient_max_bound
        from rtrl.datagen import chain_step, make_chain, make_output_map, split_observed
        from rtrl.model import (ModelDims, SquasherSpec, flatten_params, random_params,
                                scaled_tanh)
        from rtrl.sensitivity import RtrlState, rtrl_train_step

        rng = np.random.default_rng(2)
        dims = ModelDims(3, 2, n_latent=1)
        spec = SquasherSpec(phi=scaled_tanh(0.1), lam=scaled_tanh(1.0))
        chain = make_chain("scaled-tanh", 2, 1, 0.5, rng)
        omap = make_output_map(3, rng, gain=0.5, noise_scale=0.1)
        g_bound = gradient_max_bound(spec, dims, target_bound=omap.gain,
                                     eta_bound=omap.noise_scale / 2.0)
        sched = Schedule(alpha0=0.2, gamma=0.7)
        state = RtrlState.fresh(random_params(ModelDims(3, 2), rng), spec)
        xz = chain.init.copy()
        for t in range(10_000):
            xz = chain_step(chain, xz, rng)
            y = omap.observe(xz, omap.noise(rng))
            x, _ = split_observed(chain, xz)
            before = flatten_params(state.params)
            rtrl_train_step(state, x, y, sched.rate(t))
            moved = np.abs(flatten_params(state.params) - before).max()
            assert moved <= sched.rate(t) * g_bound + 1e-15
            assert np.abs(state.last_grad).max() <= g_bound
