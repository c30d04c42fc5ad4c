"""Per-architecture Jacobian checks and the generic streaming trainer."""

import numpy as np
import pytest

from rtrl.architectures import (
    ElmanRnn,
    GenericRtrlState,
    Gru,
    LinearRnn,
    NeuralSde,
    TheoryRnn,
    elman_step,
    generic_rtrl_step,
    gru_step,
    linear_step,
    neural_sde_step,
    sde_decay_matrix,
    sde_decay_matrix_dw_apply,
    softmax_xent,
)
from rtrl.model import (
    ModelDims,
    SquasherSpec,
    flatten_params,
    random_params,
    scaled_tanh,
)
from rtrl.sensitivity import RtrlState, rtrl_train_step


def _fd_errors(model, theta, s, x, h=1e-6):
    """Max relative errors of (jac_state, jac_params) against central differences."""
    n, p = model.state_dim, model.n_params
    s_next, js, jp = model.step_with_jacobians(theta, s, x)
    fd_js = np.zeros((n, n))
    for j in range(n):
        e = np.zeros(n)
        e[j] = h
        fd_js[:, j] = (model.step(theta, s + e, x) - model.step(theta, s - e, x)) / (2 * h)
    fd_jp = np.zeros((n, p))
    for c in range(p):
        e = np.zeros(p)
        e[c] = h
        fd_jp[:, c] = (model.step(theta + e, s, x) - model.step(theta - e, s, x)) / (2 * h)
    err_js = np.abs(fd_js - np.broadcast_to(js, (n, n))).max() / max(np.abs(fd_js).max(), 1e-9)
    err_jp = np.abs(fd_jp - jp).max() / max(np.abs(fd_jp).max(), 1e-9)
    return err_js, err_jp


def _kink_free(model, theta, s, x, margin=1e-5):
    mats = model.unpack(theta)
    pre = mats["W"] @ s + mats["B"] @ x
    return np.abs(pre).min() > margin


CASES = [
    ("linear", lambda: LinearRnn(4, 2, 1e-2), 1e-7, None),
    ("elman-tanh", lambda: ElmanRnn(4, 2, "tanh"), 1e-7, None),
    ("elman-relu", lambda: ElmanRnn(4, 2, "relu"), 1e-7, _kink_free),
    ("elman-elu", lambda: ElmanRnn(4, 2, "elu"), 1e-7, _kink_free),
    ("neural-sde", lambda: NeuralSde(4, 2, 1e-2), 1e-5, None),
    ("gru", lambda: Gru(4, 2, n_output=3), 1e-6, None),
]


class TestJacobians:
    @pytest.mark.parametrize("name,make,tol,guard", CASES, ids=[c[0] for c in CASES])
    def test_twenty_random_points(self, name, make, tol, guard):
        model = make()
        rng = np.random.default_rng(hash(name) % 2**32)
        checked = 0
        while checked < 20:
            theta = model.init_params(rng, 0.5)
            s = rng.uniform(0.05, 0.95, model.state_dim)
            x = rng.uniform(-1.0, 1.0, model.input_dim)
            if guard is not None and not guard(model, theta, s, x):
                continue
            err_js, err_jp = _fd_errors(model, theta, s, x)
            assert err_js <= tol, f"{name} state jacobian rel err {err_js}"
            assert err_jp <= tol, f"{name} parameter jacobian rel err {err_jp}"
            checked += 1

    def test_theory_model_jacobians(self):
        spec = SquasherSpec(phi=scaled_tanh(0.5), lam=scaled_tanh(1.0))
        model = TheoryRnn(ModelDims(4, 2), spec)
        rng = np.random.default_rng(0)
        for _ in range(5):
            theta = model.init_params(rng, 0.5)
            s = rng.uniform(0.05, 0.95, 4)
            x = rng.uniform(-1.0, 1.0, 2)
            err_js, err_jp = _fd_errors(model, theta, s, x)
            assert max(err_js, err_jp) <= 1e-7


class TestLinear:
    def test_zero_weights_identity_jacobian(self):
        model = LinearRnn(3, 2, 1e-2)
        theta = np.zeros(model.n_params)
        s = np.array([0.1, -0.4, 0.7])
        s_next, js, jp = model.step_with_jacobians(theta, s, np.zeros(2))
        assert np.array_equal(s_next, s)
        assert np.array_equal(js, np.eye(3))
        assert np.all(jp[:, -3:] == 0.0)

    def test_reference_time_step_supported(self):
        model = LinearRnn(10, 2, delta=1e-2)
        assert model.delta == 1e-2

    def test_spec_surface_function(self):
        rng = np.random.default_rng(1)
        model = LinearRnn(3, 2, 1e-2)
        theta = model.init_params(rng)
        s = rng.uniform(size=3)
        x = rng.uniform(size=2)
        got = linear_step(theta, 1e-2, s, x)
        want = model.step_with_jacobians(theta, s, x)
        for a, b in zip(got, want):
            np.testing.assert_array_equal(a, b)


class TestElman:
    def test_tanh_zero_weights(self):
        model = ElmanRnn(3, 2, "tanh")
        out = model.step(np.zeros(model.n_params), np.full(3, 0.5), np.ones(2))
        assert np.array_equal(out, np.zeros(3))

    def test_relu_subgradient_zero_at_kink(self):
        model = ElmanRnn(2, 1, "relu")
        # W = 0, B = 0: every pre-activation is exactly 0
        theta = np.zeros(model.n_params)
        _, js, jp = model.step_with_jacobians(theta, np.array([0.5, 0.5]), np.array([1.0]))
        assert np.all(js == 0.0)
        assert np.all(jp == 0.0)

    def test_spec_surface_function(self):
        rng = np.random.default_rng(2)
        model = ElmanRnn(3, 2, "elu")
        theta = model.init_params(rng)
        got = elman_step(theta, "elu", rng.uniform(size=3), rng.uniform(size=2))
        assert got[0].shape == (3,)


class TestNeuralSde:
    def test_zero_weight_decay_matrix_is_identity(self):
        assert np.array_equal(sde_decay_matrix(np.zeros((3, 3))), np.exp(0) * np.eye(3))

    def test_decay_matrix_symmetric_with_unit_floor(self):
        rng = np.random.default_rng(3)
        for _ in range(10):
            c = sde_decay_matrix(rng.standard_normal((4, 4)))
            assert np.array_equal(c, c.T)
            assert np.linalg.eigvalsh(c).min() >= 1.0 - 1e-10

    def test_frechet_derivative_matches_fd(self):
        rng = np.random.default_rng(4)
        for _ in range(5):
            w = rng.standard_normal((3, 3)) * 0.7
            v = rng.standard_normal(3)
            got = sde_decay_matrix_dw_apply(w, v)
            h = 1e-6
            for i in range(3):
                for j in range(3):
                    e = np.zeros((3, 3))
                    e[i, j] = h
                    fd = (sde_decay_matrix(w + e) @ v - sde_decay_matrix(w - e) @ v) / (2 * h)
                    assert np.abs(fd - got[i, j]).max() <= 1e-5 * max(np.abs(fd).max(), 1e-6)

    def test_repeated_eigenvalues_handled(self):
        # W with orthogonal columns of equal norm gives a degenerate Gram spectrum
        w = np.eye(3) * 0.8
        v = np.array([0.3, -0.2, 0.9])
        got = sde_decay_matrix_dw_apply(w, v)
        h = 1e-6
        for i in range(3):
            for j in range(3):
                e = np.zeros((3, 3))
                e[i, j] = h
                fd = (sde_decay_matrix(w + e) @ v - sde_decay_matrix(w - e) @ v) / (2 * h)
                assert np.abs(fd - got[i, j]).max() <= 1e-5

    def test_frozen_readout_blocks_gradient(self):
        model = NeuralSde(3, 2, 1e-2, freeze_readout=True)
        rng = np.random.default_rng(5)
        theta = model.init_params(rng)
        _, _, dfp = model.readout(theta, rng.uniform(size=3))
        assert np.all(dfp[..., -3:] == 0.0)

    def test_spec_surface_function(self):
        rng = np.random.default_rng(6)
        got = neural_sde_step(NeuralSde(3, 2, 1e-2).init_params(rng), 1e-2,
                              rng.uniform(size=3), rng.uniform(size=2))
        assert got[0].shape == (3,)


class TestGru:
    def test_zero_weights_halve_state(self):
        model = Gru(4, 2)
        s = np.array([0.2, -0.6, 1.0, 0.0])
        out = model.step(np.zeros(model.n_params), s, np.ones(2))
        np.testing.assert_allclose(out, s / 2.0, atol=1e-15)

    @pytest.mark.parametrize("units", [10, 20])
    def test_reference_sizes_construct(self, units):
        model = Gru(units, 30, n_output=30)
        assert model.state_dim == units

    def test_spec_surface_function(self):
        rng = np.random.default_rng(7)
        model = Gru(3, 2)
        got = gru_step(model.init_params(rng), rng.uniform(size=3), rng.uniform(size=2))
        assert got[0].shape == (3,)


class TestSoftmaxXent:
    def test_uniform_logits_log_k(self):
        for k in (2, 5, 11):
            loss, _ = softmax_xent(np.zeros(k), 0)
            assert abs(loss - np.log(k)) < 1e-12

    def test_gradient_sums_to_zero(self):
        rng = np.random.default_rng(8)
        logits = rng.standard_normal(7) * 5
        _, grad = softmax_xent(logits, 3)
        assert abs(grad.sum()) <= 1e-12

    def test_gradient_matches_fd(self):
        rng = np.random.default_rng(9)
        logits = rng.standard_normal(5)
        label = 2
        _, grad = softmax_xent(logits, label)
        h = 1e-6
        for j in range(5):
            e = np.zeros(5)
            e[j] = h
            fd = (softmax_xent(logits + e, label)[0] - softmax_xent(logits - e, label)[0]) / (2 * h)
            assert abs(fd - grad[j]) <= 1e-7 * max(abs(fd), 1e-3)

    def test_large_logits_stable(self):
        loss, grad = softmax_xent(np.array([1000.0, 0.0, -1000.0]), 0)
        assert loss == 0.0
        assert np.isfinite(grad).all()

    def test_label_out_of_range(self):
        with pytest.raises(IndexError):
            softmax_xent(np.zeros(3), 3)


class TestGenericTrainer:
    def test_matches_specialised_theory_trainer(self):
        rng = np.random.default_rng(10)
        dims = ModelDims(4, 2)
        spec = SquasherSpec(phi=scaled_tanh(0.5), lam=scaled_tanh(1.0))
        params = random_params(dims, rng, 0.5)
        model = TheoryRnn(dims, spec)
        gen = GenericRtrlState.fresh(model, flatten_params(params))
        special = RtrlState.fresh(params, spec)
        for t in range(30):
            x = rng.uniform(-1.0, 1.0, 2)
            y = rng.standard_normal()
            loss_g = generic_rtrl_step(gen, x, y, alpha=0.05)
            loss_s = rtrl_train_step(special, x, y, alpha=0.05)
            assert abs(loss_g - loss_s) <= 1e-12
            assert np.abs(gen.theta - flatten_params(special.params)).max() <= 1e-12

    def test_zero_rate_freezes_parameters(self):
        rng = np.random.default_rng(11)
        model = ElmanRnn(3, 2, "tanh")
        state = GenericRtrlState.fresh(model, model.init_params(rng))
        before = state.theta.copy()
        for _ in range(5):
            generic_rtrl_step(state, rng.uniform(size=2), 0.3, alpha=0.0)
        assert np.array_equal(state.theta, before)

    def test_linear_accumulation_equals_unrolled(self):
        from rtrl.oracles import Trajectory, full_bptt_gradient

        rng = np.random.default_rng(12)
        model = LinearRnn(4, 2, 1e-2)
        theta = model.init_params(rng, 0.4)
        horizon = 40
        xs = rng.uniform(-1, 1, (horizon, 2))
        ys = rng.standard_normal(horizon)
        state = GenericRtrlState.fresh(model, theta)
        total = np.zeros(model.n_params)
        for t in range(horizon):
            generic_rtrl_step(state, xs[t], ys[t], alpha=0.0)
            total += state.last_grad
        want = full_bptt_gradient(model, theta,
                                  Trajectory(inputs=xs, targets=ys, s0=np.zeros(4)))
        assert np.abs(total / horizon - want).max() <= 1e-10

    def test_minibatch_gradient_is_member_mean(self):
        rng = np.random.default_rng(13)
        model = ElmanRnn(3, 2, "tanh")
        theta = model.init_params(rng, 0.5)
        xs = rng.uniform(-1, 1, (4, 2))
        ys = rng.standard_normal(4)
        batch_state = GenericRtrlState.fresh(model, theta, batch=(4,))
        generic_rtrl_step(batch_state, xs, ys, alpha=0.0)
        member_grads = []
        for b in range(4):
            solo = GenericRtrlState.fresh(model, theta)
            generic_rtrl_step(solo, xs[b], ys[b], alpha=0.0)
            member_grads.append(solo.last_grad)
        np.testing.assert_allclose(batch_state.last_grad, np.mean(member_grads, axis=0),
                                   atol=1e-15)
