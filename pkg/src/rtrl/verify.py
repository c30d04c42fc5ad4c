"""Numerical verification suites.

Each suite re-checks a family of guarantees at production scale: oracle
agreement between the streaming gradient and the unrolled gradient,
containment of the sensitivity processes in their closed-form bounds,
two-way agreement of the contraction-constant formulas, and the geometric
decay of coupled-chain distances.  The command-line ``verify`` subcommand
drives these and exits nonzero on any failure.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .analysis import (
    JointProcessConfig,
    assumption_constants,
    contraction_estimate,
    coupled_distance_trace,
    hyper_rectangle,
    initial_joint_state,
    sample_joint_state,
)
from .architectures import ElmanRnn, Gru, LinearRnn, NeuralSde, TheoryRnn
from .datagen import chain_noise, chain_step_given, make_chain, split_observed
from .errors import InvalidConfigError
from .model import (
    ModelDims,
    SquasherSpec,
    custom_squasher,
    preactivations,
    random_params,
    rnn_step,
    scaled_tanh,
)
from .oracles import (
    Trajectory,
    full_bptt_gradient,
    long_memory_fixture,
    rtrl_average_gradient,
    tbptt_gradient,
)
from .second_order import SecondOrderSensitivity, hessian_step
from .sensitivity import FirstOrderSensitivity, sensitivity_step


@dataclass(frozen=True)
class CheckResult:
    """Outcome of one verification check."""

    name: str
    passed: bool
    value: float
    bound: float
    detail: str = ""

    def line(self) -> str:
        tag = "PASS" if self.passed else "FAIL"
        extra = f" ({self.detail})" if self.detail else ""
        return f"{tag} {self.name}: value={self.value:.6g} bound={self.bound:.6g}{extra}"


def constant_bound_squashers(c0: float, c1: float, c2: float) -> SquasherSpec:
    """Squasher pair whose declared bounds are set directly (for formula checks)."""
    zero = lambda y: np.zeros_like(np.asarray(y, dtype=float))
    return SquasherSpec(phi=custom_squasher(zero, zero, zero, c0, c1, c2),
                        lam=scaled_tanh(1.0))


def reference_assumption_constants(c0, c1, c2, n: int, d: int, l_wp: float):
    """Independent transcription of the contraction-constant formulas.

    Written in exact rational arithmetic with a different factoring, as a
    guard against transcription slips in the float implementation.
    Returns (l0, l1, l2, l, q) as floats.
    """
    c0, c1, c2 = Fraction(c0), Fraction(c1), Fraction(c2)  # exact binary values
    m = min(n, d)
    m_phi = Fraction(4, 1) / (4 - c0)  # 1 + c0/(4-c0) == 4/(4-c0)
    l0 = max(Fraction(3, 1) * c1 / m * (c0 * m_phi / 10 + Fraction(1, 4)),
             Fraction(3, 4) * c0)
    l2 = max(c2 / m, c1 * c1 / (Fraction(n * d) * (4 - c0)))
    inner = c0 * c0 * m_phi * m_phi / (10 * m * m) + l2 / 4
    amplifier = c0 / (1 - c0 / 4)
    term_a = (m_phi * c0 * c0 / (5 * m * m)
              + c0 * m_phi * m_phi * c1 * c1 / (8 * m * m)
              + c2 / (4 * m)
              + c0 / 10 * (l2 + amplifier * inner))
    term_b = c0 * m_phi * c1 / (5 * m) + c1 / (4 * n)
    l1 = max(4 * max(term_a, term_b), c0)
    l = max(l0, l1)
    q = float(np.sqrt(float(l * l) + l_wp * l_wp))
    return float(l0), float(l1), float(l2), float(l), q


def verify_constants(seed: int = 0, n_configs: int = 50) -> list[CheckResult]:
    """Two-implementation agreement plus the vanishing-squasher limit."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    produced = 0
    while produced < n_configs:
        c0 = float(rng.uniform(0.0, 0.3))
        c1 = float(rng.uniform(0.0, 0.3))
        c2 = float(rng.uniform(0.0, 0.3))
        n = int(rng.integers(1, 9))
        d = int(rng.integers(1, 9))
        l_wp = float(rng.uniform(0.0, 0.9))
        spec = constant_bound_squashers(c0, c1, c2)
        got = assumption_constants(spec, ModelDims(n, d), l_wp)
        if not got.compliant:
            continue
        produced += 1
        ref = reference_assumption_constants(c0, c1, c2, n, d, l_wp)
        for a, b in zip((got.l0, got.l1, got.l2, got.l, got.q), ref):
            worst = max(worst, abs(a - b))
    checks = [CheckResult("constants-two-codings-agree", worst <= 1e-12, worst, 1e-12,
                          f"{n_configs} compliant configs")]
    vanish = assumption_constants(constant_bound_squashers(0.0, 0.0, 0.0),
                                  ModelDims(4, 4), 0.37)
    checks.append(CheckResult("constants-vanishing-limit", vanish.q == 0.37,
                              vanish.q, 0.37, "q == l_wp exactly"))
    example = assumption_constants(constant_bound_squashers(0.1, 0.1, 0.1),
                                   ModelDims(4, 4), 0.5)
    checks.append(CheckResult("constants-compliant-example",
                              example.compliant and abs(example.q - 0.51) < 0.005,
                              example.q, 0.51, "q of the reference configuration"))
    return checks


def verify_oracles(seed: int = 0, horizon: int = 50) -> list[CheckResult]:
    """Streaming-vs-unrolled agreement for every architecture, plus truncation facts."""
    rng = np.random.default_rng(seed)
    theory_spec = SquasherSpec(phi=scaled_tanh(0.5), lam=scaled_tanh(1.0))
    cases = [
        ("theory", TheoryRnn(ModelDims(8, 4), theory_spec), "squared", 0.4),
        ("linear", LinearRnn(10, 2, 1e-2), "squared", 0.4),
        ("elman-tanh", ElmanRnn(10, 2, "tanh"), "squared", 0.4),
        # Unbounded activations need a contracting recurrent scale over T=50.
        ("elman-relu", ElmanRnn(10, 2, "relu"), "squared", 0.15),
        ("elman-elu", ElmanRnn(10, 2, "elu"), "squared", 0.15),
        ("neural-sde", NeuralSde(6, 2, 1e-2), "squared", 0.4),
        ("gru", Gru(6, 3, n_output=4), "cross-entropy-softmax", 0.4),
    ]
    checks = []
    for name, model, head, scale in cases:
        theta = model.init_params(rng, scale)
        inputs = rng.uniform(-1.0, 1.0, (horizon, model.input_dim))
        if head == "squared":
            targets = rng.standard_normal(horizon)
        else:
            targets = rng.integers(0, model.output_dim, horizon)
        traj = Trajectory(inputs=inputs, targets=targets,
                          s0=rng.uniform(0.1, 0.9, model.state_dim))
        diff = float(np.max(np.abs(rtrl_average_gradient(model, theta, traj, head)
                                   - full_bptt_gradient(model, theta, traj, head))))
        checks.append(CheckResult(f"rtrl-equals-bptt-{name}", diff <= 1e-10, diff, 1e-10))

    model, theta, traj = long_memory_fixture(seed=seed)
    g_full = full_bptt_gradient(model, theta, traj)
    degen = float(np.max(np.abs(tbptt_gradient(model, theta, traj, traj.horizon) - g_full)))
    checks.append(CheckResult("tbptt-full-window-degenerates", degen <= 1e-12, degen, 1e-12))
    errs = [float(np.linalg.norm(tbptt_gradient(model, theta, traj, tau) - g_full))
            for tau in (1, 2, 5, 10, 25, 50)]
    mono = all(errs[i + 1] <= errs[i] * (1.0 + 1e-12) for i in range(len(errs) - 1))
    checks.append(CheckResult("tbptt-error-nonincreasing", mono and errs[0] > 0.0,
                              errs[0], 0.0, f"errors {['%.3e' % e for e in errs]}"))
    return checks


def _batched_first_order_sweep(squash: SquasherSpec, dims: ModelDims, n_seeds: int,
                               steps: int, seed: int, chain_lip: float = 0.5):
    """Propagate (state, first-order sensitivities) for a batch of independent
    parameter draws on independent bounded chains; return running maxima."""
    rng = np.random.default_rng(seed)
    chain = make_chain("scaled-tanh", dims.n_input, dims.n_latent, chain_lip, rng)
    params = random_params(dims, rng, batch=(n_seeds,))
    xz = np.broadcast_to(chain.init, (n_seeds, chain.dim)).copy()
    s = np.zeros((n_seeds, dims.n_hidden))
    sens = FirstOrderSensitivity.zeros(dims, batch=(n_seeds,))
    max_sa = 0.0
    max_sw = 0.0
    for _ in range(steps):
        x, _ = split_observed(chain, xz)
        z = preactivations(params, squash, s, x)
        sens = sensitivity_step(params, squash, s, x, sens, pre=z)
        s = rnn_step(params, squash, s, x, pre=z)
        xz = chain_step_given(chain, xz, chain_noise(chain, rng, batch=(n_seeds,)))
        max_sa = max(max_sa, float(np.max(np.abs(sens.sa))))
        max_sw = max(max_sw, float(np.max(np.abs(sens.sw))))
    return max_sa, max_sw


def verify_bounds(seed: int = 0, first_order_seeds: int = 100, first_order_steps: int = 10_000,
                  second_order_seeds: int = 20, second_order_steps: int = 10_000
                  ) -> list[CheckResult]:
    """Containment of the sensitivity processes in their closed-form boxes."""
    checks = []
    squash = SquasherSpec(phi=scaled_tanh(0.1), lam=scaled_tanh(1.0))

    if first_order_seeds and first_order_steps:
        dims1 = ModelDims(4, 4, n_latent=1)
        rect1 = hyper_rectangle(squash, dims1)
        max_sa, max_sw = _batched_first_order_sweep(squash, dims1, first_order_seeds,
                                                    first_order_steps, seed)
        checks.append(CheckResult("first-order-bound-input-block", max_sa <= rect1.sa + 1e-12,
                                  max_sa, rect1.sa,
                                  f"{first_order_seeds} seeds x {first_order_steps} steps"))
        checks.append(CheckResult("first-order-bound-recurrent-block",
                                  max_sw <= rect1.sw + 1e-12, max_sw, rect1.sw,
                                  f"{first_order_seeds} seeds x {first_order_steps} steps"))
    if not (second_order_seeds and second_order_steps):
        return checks

    # Second order: batched parameter draws through the library kernels.
    dims2 = ModelDims(3, 2, n_latent=1)
    rng = np.random.default_rng(seed + 1)
    chain = make_chain("scaled-tanh", dims2.n_input, dims2.n_latent, 0.5, rng)
    params = random_params(dims2, rng, batch=(second_order_seeds,))
    rect2 = hyper_rectangle(squash, dims2)
    xz = np.broadcast_to(chain.init, (second_order_seeds, chain.dim)).copy()
    s = np.zeros((second_order_seeds, dims2.n_hidden))
    sens = FirstOrderSensitivity.zeros(dims2, batch=(second_order_seeds,))
    sens2 = SecondOrderSensitivity.zeros(dims2, batch=(second_order_seeds,))
    max_aa = max_wa = max_ww = 0.0
    max_asym = 0.0
    for _ in range(second_order_steps):
        x, _ = split_observed(chain, xz)
        z = preactivations(params, squash, s, x)
        sens2 = hessian_step(params, squash, s, x, sens, sens2, pre=z)
        sens = sensitivity_step(params, squash, s, x, sens, pre=z)
        s = 1.0 / (1.0 + np.exp(-z))
        xz = chain_step_given(chain, xz, chain_noise(chain, rng, batch=(second_order_seeds,)))
        max_aa = max(max_aa, float(np.max(np.abs(sens2.aa))))
        max_wa = max(max_wa, float(np.max(np.abs(sens2.wa))))
        max_ww = max(max_ww, float(np.max(np.abs(sens2.ww))))
        asym = max(float(np.max(np.abs(sens2.aa - sens2.aa.swapaxes(-1, -2)))),
                   float(np.max(np.abs(sens2.ww - sens2.ww.swapaxes(-1, -2)))))
        max_asym = max(max_asym, asym)
    detail = f"{second_order_seeds} seeds x {second_order_steps} steps"
    checks.append(CheckResult("second-order-bound-aa", max_aa <= rect2.aa + 1e-12,
                              max_aa, rect2.aa, detail))
    checks.append(CheckResult("second-order-bound-wa", max_wa <= rect2.wa + 1e-12,
                              max_wa, rect2.wa, detail))
    checks.append(CheckResult("second-order-bound-ww", max_ww <= rect2.ww + 1e-12,
                              max_ww, rect2.ww, detail))
    checks.append(CheckResult("second-order-slice-symmetry", max_asym <= 1e-12,
                              max_asym, 1e-12, detail))
    return checks


def verify_contraction(seed: int = 0, n_seeds: int = 20, horizon: int = 120
                       ) -> list[CheckResult]:
    """Coupled-chain geometric rate against the closed-form q, per seed."""
    squash = SquasherSpec(phi=scaled_tanh(0.1), lam=scaled_tanh(1.0))
    dims = ModelDims(3, 2, n_latent=1)
    consts = assumption_constants(squash, dims, 0.5)
    worst = 0.0
    for k in range(n_seeds):
        rng = np.random.default_rng((seed + 1) * 1000 + k)
        chain = make_chain("scaled-tanh", dims.n_input, dims.n_latent, 0.5, rng)
        params = random_params(ModelDims(dims.n_hidden, dims.n_input), rng)
        cfg = JointProcessConfig(chain=chain, params=params, squash=squash, eta_scale=0.1)
        rep = contraction_estimate(cfg, sample_joint_state(cfg, rng),
                                   sample_joint_state(cfg, rng), horizon, rng,
                                   q_theoretical=consts.q)
        worst = max(worst, rep.r_hat)
    checks = [CheckResult("contraction-rate-within-q", worst <= consts.q + 0.05,
                          worst, consts.q + 0.05, f"worst fitted rate over {n_seeds} seeds")]
    rng = np.random.default_rng(seed)
    chain = make_chain("scaled-tanh", dims.n_input, dims.n_latent, 0.5, rng)
    params = random_params(ModelDims(dims.n_hidden, dims.n_input), rng)
    cfg = JointProcessConfig(chain=chain, params=params, squash=squash)
    h0 = initial_joint_state(cfg)
    trace = coupled_distance_trace(cfg, h0, initial_joint_state(cfg), 50, rng)
    checks.append(CheckResult("contraction-identical-starts", float(trace.max()) == 0.0,
                              float(trace.max()), 0.0, "coupled copies stay identical"))
    return checks


SUITES = {
    "oracles": verify_oracles,
    "bounds": verify_bounds,
    "constants": verify_constants,
    "contraction": verify_contraction,
}


def run_suite(name: str, seed: int = 0) -> list[CheckResult]:
    """Run one named suite, or all of them."""
    if name == "all":
        out = []
        for fn in SUITES.values():
            out.extend(fn(seed=seed))
        return out
    if name not in SUITES:
        raise InvalidConfigError(f"unknown suite {name!r}; choose from "
                                 f"{sorted(SUITES) + ['all']}")
    return SUITES[name](seed=seed)
