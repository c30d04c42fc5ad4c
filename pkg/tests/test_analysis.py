"""Contraction constants, coupled-chain rate estimation, training diagnostics."""

import copy

import numpy as np
import pytest

from rtrl.analysis import (
    JointProcessConfig,
    assumption_constants,
    contraction_estimate,
    convergence_diagnostics,
    coupled_distance_trace,
    gradient_max_bound,
    hyper_rectangle,
    initial_joint_state,
    joint_distance,
    joint_step,
    sample_joint_state,
)
from rtrl.datagen import chain_noise, make_chain
from rtrl.errors import DegenerateFitError, InvalidConfigError
from rtrl.model import ModelDims, SquasherSpec, custom_squasher, random_params, scaled_tanh
from rtrl.verify import reference_assumption_constants


def _const_spec(c0, c1, c2):
    zero = lambda y: np.zeros_like(np.asarray(y, dtype=float))
    return SquasherSpec(phi=custom_squasher(zero, zero, zero, c0, c1, c2),
                        lam=scaled_tanh(1.0))


class TestAssumptionConstants:
    def test_vanishing_squasher_returns_chain_rate(self):
        got = assumption_constants(_const_spec(0.0, 0.0, 0.0), ModelDims(4, 4), 0.5)
        assert got.l == 0.0
        assert got.q == 0.5
        assert got.compliant

    def test_reference_configuration(self):
        got = assumption_constants(_const_spec(0.1, 0.1, 0.1), ModelDims(4, 4), 0.5)
        assert got.compliant
        assert abs(got.q - 0.5099019513592785) < 1e-15

    def test_monotone_in_chain_rate(self):
        spec = _const_spec(0.1, 0.1, 0.1)
        dims = ModelDims(4, 4)
        qs = [assumption_constants(spec, dims, lw).q for lw in (0.0, 0.3, 0.6, 0.9)]
        assert all(b > a for a, b in zip(qs, qs[1:]))

    def test_two_codings_agree_on_random_configs(self):
        rng = np.random.default_rng(0)
        done = 0
        while done < 50:
            c0, c1, c2 = rng.uniform(0.0, 0.3, 3)
            n, d = rng.integers(1, 9, 2)
            l_wp = float(rng.uniform(0.0, 0.9))
            got = assumption_constants(_const_spec(c0, c1, c2), ModelDims(int(n), int(d)), l_wp)
            if not got.compliant:
                continue
            done += 1
            ref = reference_assumption_constants(c0, c1, c2, int(n), int(d), l_wp)
            for a, b in zip((got.l0, got.l1, got.l2, got.l, got.q), ref):
                assert abs(a - b) <= 1e-12

    def test_invalid_inputs_rejected(self):
        with pytest.raises(InvalidConfigError):
            assumption_constants(_const_spec(4.0, 0.1, 0.1), ModelDims(2, 2), 0.5)
        with pytest.raises(InvalidConfigError):
            assumption_constants(_const_spec(0.1, 0.1, 0.1), ModelDims(2, 2), 1.0)

    def test_gradient_bound_positive_and_monotone(self):
        spec = SquasherSpec(phi=scaled_tanh(0.1), lam=scaled_tanh(1.0))
        dims = ModelDims(3, 2)
        lo = gradient_max_bound(spec, dims, target_bound=0.5)
        hi = gradient_max_bound(spec, dims, target_bound=1.5)
        assert 0.0 < lo < hi


def _joint_cfg(seed=0, lip=0.5):
    rng = np.random.default_rng(seed)
    chain = make_chain("scaled-tanh", 2, 1, lip, rng)
    params = random_params(ModelDims(3, 2), rng)
    spec = SquasherSpec(phi=scaled_tanh(0.1), lam=scaled_tanh(1.0))
    return JointProcessConfig(chain=chain, params=params, squash=spec, eta_scale=0.1), rng


class TestJointProcess:
    def test_identical_starts_stay_identical(self):
        cfg, rng = _joint_cfg()
        h0 = initial_joint_state(cfg)
        trace = coupled_distance_trace(cfg, h0, copy.deepcopy(h0), 40, rng)
        assert trace.max() == 0.0

    def test_degenerate_fit_raises(self):
        cfg, rng = _joint_cfg()
        h0 = initial_joint_state(cfg)
        with pytest.raises(DegenerateFitError):
            contraction_estimate(cfg, h0, copy.deepcopy(h0), 40, rng)

    def test_start_outside_rectangle_rejected(self):
        cfg, rng = _joint_cfg()
        bad = initial_joint_state(cfg)
        bad.s = bad.s + 5.0
        with pytest.raises(InvalidConfigError):
            contraction_estimate(cfg, bad, initial_joint_state(cfg), 40, rng)

    def test_fitted_rate_within_theory(self):
        spec = SquasherSpec(phi=scaled_tanh(0.1), lam=scaled_tanh(1.0))
        consts = assumption_constants(spec, ModelDims(3, 2), 0.5)
        for seed in range(5):
            cfg, rng = _joint_cfg(seed)
            rep = contraction_estimate(cfg, sample_joint_state(cfg, rng),
                                       sample_joint_state(cfg, rng), 120, rng,
                                       q_theoretical=consts.q)
            assert rep.r_hat <= consts.q + 0.05
            assert rep.r_hat > 0.0
            assert rep.n_fit >= 2

    def test_per_step_ratio_never_exceeds_q(self):
        spec = SquasherSpec(phi=scaled_tanh(0.1), lam=scaled_tanh(1.0))
        consts = assumption_constants(spec, ModelDims(3, 2), 0.5)
        cfg, rng = _joint_cfg(7)
        rep = contraction_estimate(cfg, sample_joint_state(cfg, rng),
                                   sample_joint_state(cfg, rng), 100, rng)
        assert rep.ratios.max() <= consts.q + 1e-9

    def test_constant_chain_zero_squasher_collapse_after_one_step(self):
        # contraction rate 0 plus a vanishing weight squasher: one step suffices
        rng = np.random.default_rng(3)
        chain = make_chain("affine-clamp", 2, 1, 0.0, rng)
        chain = type(chain)(kind=chain.kind, weights=np.zeros((3, 3)),
                            offset=chain.offset, lip=0.0, noise_scale=1.0,
                            n_obs=2, n_latent=1, init=chain.init)
        zero = lambda y: np.zeros_like(np.asarray(y, dtype=float))
        spec = SquasherSpec(phi=custom_squasher(zero, zero, zero, 0.0, 0.0, 0.0),
                            lam=scaled_tanh(1.0))
        cfg = JointProcessConfig(chain=chain, params=random_params(ModelDims(3, 2), rng),
                                 squash=spec)
        a = sample_joint_state(cfg, rng)
        b = sample_joint_state(cfg, rng)
        trace = coupled_distance_trace(cfg, a, b, 10, rng)
        assert trace[0] > 0.0
        assert np.all(trace[1:] == 0.0)

    def test_joint_step_state_block_is_deterministic(self):
        cfg, rng = _joint_cfg(4)
        h = sample_joint_state(cfg, rng)
        eps = chain_noise(cfg.chain, rng)
        a = joint_step(cfg, copy.deepcopy(h), eps, 0.05)
        b = joint_step(cfg, copy.deepcopy(h), eps, 0.05)
        assert joint_distance(a, b) == 0.0

    def test_rectangle_containment_along_trajectory(self):
        cfg, rng = _joint_cfg(5)
        rect = hyper_rectangle(cfg.squash, cfg.params.dims)
        h = initial_joint_state(cfg)
        for _ in range(10_000):
            h = joint_step(cfg, h, chain_noise(cfg.chain, rng), 0.0)
            assert rect.contains(h)


class TestConvergenceDiagnostics:
    def test_zero_gradient_log(self):
        diag = convergence_diagnostics(np.zeros(1000), np.ones(1000))
        assert np.all(diag.gradnorm_decile_means == 0.0)
        assert diag.gradnorm_final_decile == 0.0

    def test_decaying_trace_detected(self):
        t = np.arange(10_000)
        grads = 1.0 / (1.0 + t) ** 0.5
        losses = 0.1 + grads
        diag = convergence_diagnostics(grads, losses)
        assert diag.gradnorm_final_decile < diag.gradnorm_first_decile
        assert diag.decreasing_fraction == 1.0
        # converged loss: last two decile means within ten percent
        last, prev = diag.loss_decile_means[-1], diag.loss_decile_means[-2]
        assert abs(last - prev) / prev < 0.1

    def test_empty_log_rejected(self):
        with pytest.raises(InvalidConfigError):
            convergence_diagnostics([], [])
