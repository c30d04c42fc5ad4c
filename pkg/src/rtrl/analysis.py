"""Numerical embodiment of the stability theory.

Closed-form contraction constants, the invariant hyper-rectangle for the
joint data/state/sensitivity process, common-noise coupled simulation with a
geometric-rate fit, and convergence diagnostics over training logs.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .datagen import ChainConfig, chain_noise, chain_step_given, split_observed
from .errors import DegenerateFitError, DimensionMismatchError, InvalidConfigError
from .model import ModelDims, RnnParams, SquasherSpec, preactivations, sigmoid
from .second_order import SecondOrderSensitivity, apriori_second_bounds, hessian_step
from .sensitivity import FirstOrderSensitivity, sensitivity_step


# --- closed-form contraction constants -----------------------------------------


@dataclass(frozen=True)
class AssumptionConstants:
    """Lipschitz constants of the joint one-step map and the contraction rate q."""

    l0: float
    l1: float
    l2: float
    l: float
    m_phi: float
    q: float
    compliant: bool


def assumption_constants(squash: SquasherSpec, dims: ModelDims,
                         l_wp: float) -> AssumptionConstants:
    """Evaluate the printed closed forms for L0, L1, L2, L and q = sqrt(L^2 + lip^2)."""
    c0, c1, c2 = squash.phi.require_bounds()
    if c0 >= 4.0:
        raise InvalidConfigError(f"amplitude bound must satisfy c_phi < 4, got {c0}")
    if not 0.0 <= l_wp < 1.0:
        raise InvalidConfigError(f"chain contraction rate must lie in [0, 1), got {l_wp}")
    n, d = dims.n_hidden, dims.n_input
    m = min(n, d)
    m_phi = 1.0 + c0 / (4.0 - c0)

    l0 = max(3.0 * c1 / m * (c0 * m_phi / 10.0 + 0.25), 3.0 * c0 / 4.0)
    l2 = max(c2 / m, c1 * c1 / (n * d * (4.0 - c0)))
    term_a = (m_phi * c0 * c0 / (5.0 * m * m)
              + c0 * m_phi * m_phi * c1 * c1 / (8.0 * m * m)
              + c2 / (4.0 * m)
              + c0 / 10.0 * (l2 + c0 / (1.0 - c0 / 4.0)
                             * (c0 * c0 * m_phi * m_phi / (10.0 * m * m) + l2 / 4.0)))
    term_b = c0 * m_phi * c1 / (5.0 * m) + c1 / (4.0 * n)
    l1 = max(4.0 * max(term_a, term_b), c0)
    l = max(l0, l1)
    q = float(np.hypot(l, l_wp))
    return AssumptionConstants(l0=l0, l1=l1, l2=l2, l=l, m_phi=m_phi, q=q,
                               compliant=q < 1.0)


def gradient_max_bound(squash: SquasherSpec, dims: ModelDims, target_bound: float,
                       eta_bound: float = 0.0) -> float:
    """Uniform bound on |G_t| entries for the bounded architecture.

    Needs a bounded readout squasher; combines the residual bound with the
    per-block bounds on the readout gradient.
    """
    c0, c1, _ = squash.phi.require_bounds()
    cl, cl1, _ = squash.lam.require_bounds()
    n, d = dims.n_hidden, dims.n_input
    resid = target_bound + eta_bound + (n + 1.0) * cl
    block_a = n * cl * c1 / (d * (4.0 - c0))
    block_w = n * cl * c1 / (n * (4.0 - c0))
    return resid * max(block_a, block_w, cl1)


# --- invariant hyper-rectangle ---------------------------------------------------


@dataclass(frozen=True)
class HyperRectangle:
    """Componentwise bounds the joint process provably never leaves."""

    sa: float
    sw: float
    aa: float
    wa: float
    ww: float

    def contains(self, state: "JointState", slack: float = 1e-12) -> bool:
        def inside(arr, hw):
            return bool(np.max(np.abs(arr)) <= hw + slack) if np.asarray(arr).size else True

        return (
            inside(state.xz, 1.0)
            and bool(np.min(state.s) >= -slack and np.max(state.s) <= 1.0 + slack)
            and inside(state.sens.sa, self.sa)
            and inside(state.sens.sw, self.sw)
            and inside(state.sens2.aa, self.aa)
            and inside(state.sens2.wa, self.wa)
            and inside(state.sens2.ww, self.ww)
        )


def hyper_rectangle(squash: SquasherSpec, dims: ModelDims) -> HyperRectangle:
    c0, c1, _ = squash.phi.require_bounds()
    if c0 >= 4.0:
        raise InvalidConfigError(f"amplitude bound must satisfy c_phi < 4, got {c0}")
    n, d = dims.n_hidden, dims.n_input
    second = apriori_second_bounds(squash, dims)
    aa, wa, ww = second.rectangle_half_widths(c0)
    return HyperRectangle(
        sa=c1 / (d * (4.0 - c0)),
        sw=c1 / (n * (4.0 - c0)),
        aa=aa,
        wa=wa,
        ww=ww,
    )


# --- the joint process ------------------------------------------------------------


@dataclass
class JointState:
    """One time step of the joint chain/state/sensitivity process."""

    xz: np.ndarray
    s: np.ndarray
    sens: FirstOrderSensitivity
    sens2: SecondOrderSensitivity
    eta: float = 0.0


@dataclass(frozen=True)
class JointProcessConfig:
    """Fixed ingredients of the joint evolution: data chain, weights, squashers."""

    chain: ChainConfig
    params: RnnParams
    squash: SquasherSpec
    eta_scale: float = 0.0

    def __post_init__(self):
        if self.chain.n_obs != self.params.dims.n_input:
            raise DimensionMismatchError("chain observed block", self.params.dims.n_input,
                                         self.chain.n_obs)


def initial_joint_state(cfg: JointProcessConfig) -> JointState:
    dims = cfg.params.dims
    return JointState(
        xz=cfg.chain.init.copy(),
        s=np.zeros(dims.n_hidden),
        sens=FirstOrderSensitivity.zeros(dims),
        sens2=SecondOrderSensitivity.zeros(dims),
        eta=0.0,
    )


def sample_joint_state(cfg: JointProcessConfig, rng: np.random.Generator) -> JointState:
    """Uniform draw inside the invariant hyper-rectangle."""
    dims = cfg.params.dims
    rect = hyper_rectangle(cfg.squash, dims)
    n, d = dims.n_hidden, dims.n_input
    return JointState(
        xz=rng.uniform(-1.0, 1.0, cfg.chain.dim),
        s=rng.uniform(0.0, 1.0, n),
        sens=FirstOrderSensitivity(
            sa=rng.uniform(-rect.sa, rect.sa, (n, n * d)),
            sw=rng.uniform(-rect.sw, rect.sw, (n, n * n)),
        ),
        sens2=SecondOrderSensitivity(
            aa=rng.uniform(-rect.aa, rect.aa, (n, n * d, n * d)),
            wa=rng.uniform(-rect.wa, rect.wa, (n, n * n, n * d)),
            ww=rng.uniform(-rect.ww, rect.ww, (n, n * n, n * n)),
        ),
        eta=float(rng.uniform(-cfg.eta_scale / 2.0, cfg.eta_scale / 2.0)) if cfg.eta_scale else 0.0,
    )


def joint_step(cfg: JointProcessConfig, state: JointState, eps: np.ndarray,
               eta_next: float) -> JointState:
    """Advance the joint process one step under explicit noise draws.

    The state/sensitivity block is a deterministic function of the current
    joint coordinates; the chain advances under its map plus the shared
    noise draw.  Sharing (eps, eta) between two copies realises the coupling
    whose distance certifies the contraction rate.
    """
    x, _ = split_observed(cfg.chain, state.xz)
    z = preactivations(cfg.params, cfg.squash, state.s, x)
    sens2_next = hessian_step(cfg.params, cfg.squash, state.s, x, state.sens, state.sens2,
                              pre=z)
    sens_next = sensitivity_step(cfg.params, cfg.squash, state.s, x, state.sens, pre=z)
    s_next = sigmoid(z)
    xz_next = chain_step_given(cfg.chain, state.xz, eps)
    return JointState(xz=xz_next, s=s_next, sens=sens_next, sens2=sens2_next, eta=eta_next)


def joint_distance(a: JointState, b: JointState) -> float:
    """Max-norm distance across every coordinate block of the joint state."""
    return max(
        float(np.max(np.abs(a.xz - b.xz))),
        float(np.max(np.abs(a.s - b.s))),
        float(np.max(np.abs(a.sens.sa - b.sens.sa))),
        float(np.max(np.abs(a.sens.sw - b.sens.sw))),
        float(np.max(np.abs(a.sens2.aa - b.sens2.aa))),
        float(np.max(np.abs(a.sens2.wa - b.sens2.wa))),
        float(np.max(np.abs(a.sens2.ww - b.sens2.ww))),
        abs(a.eta - b.eta),
    )


def coupled_distance_trace(cfg: JointProcessConfig, h0: JointState, h0_other: JointState,
                           horizon: int, rng: np.random.Generator) -> np.ndarray:
    """Distances D_t between two copies driven by common noise draws."""
    a, b = h0, h0_other
    dist = np.empty(horizon + 1)
    dist[0] = joint_distance(a, b)
    for t in range(horizon):
        eps = chain_noise(cfg.chain, rng)
        eta = float(rng.uniform(-cfg.eta_scale / 2.0, cfg.eta_scale / 2.0)) if cfg.eta_scale else 0.0
        a = joint_step(cfg, a, eps, eta)
        b = joint_step(cfg, b, eps, eta)
        dist[t + 1] = joint_distance(a, b)
    return dist


@dataclass(frozen=True)
class ContractionReport:
    """Geometric-rate fit of a coupled distance trace against the theory rate."""

    distances: np.ndarray
    ratios: np.ndarray
    r_hat: float
    q_theoretical: Optional[float]
    horizon: int
    n_fit: int


NOISE_FLOOR = 1e-14


def contraction_estimate(cfg: JointProcessConfig, h0: JointState, h0_other: JointState,
                         horizon: int, rng: np.random.Generator,
                         q_theoretical: Optional[float] = None) -> ContractionReport:
    """Fit log D_t ~ a + t log(r) over the steps before the noise floor.

    Raises DegenerateFitError when the copies coincide at t = 0 or fewer
    than two usable points remain.
    """
    rect = hyper_rectangle(cfg.squash, cfg.params.dims)
    for name, h in (("first", h0), ("second", h0_other)):
        if not rect.contains(h):
            raise InvalidConfigError(f"{name} start lies outside the invariant rectangle")
    dist = coupled_distance_trace(cfg, h0, h0_other, horizon, rng)
    if dist[0] <= NOISE_FLOOR:
        raise DegenerateFitError("coupled copies coincide at t = 0; no rate to fit")
    above = np.nonzero(dist <= NOISE_FLOOR)[0]
    cut = int(above[0]) if above.size else len(dist)
    usable = dist[:cut]
    if len(usable) < 2:
        raise DegenerateFitError("distance trace hits the noise floor immediately")
    t = np.arange(len(usable), dtype=float)
    slope, _ = np.polyfit(t, np.log(usable), 1)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratios = dist[1:cut] / dist[:cut - 1]
    return ContractionReport(
        distances=dist,
        ratios=ratios,
        r_hat=float(np.exp(slope)),
        q_theoretical=q_theoretical,
        horizon=horizon,
        n_fit=len(usable),
    )


# --- training-log diagnostics ------------------------------------------------------


@dataclass(frozen=True)
class ConvergenceDiagnostics:
    """Windowed summaries of a training log.

    Per-step gradient norms are a noisy single-sample stand-in for the
    population gradient magnitude; the decile means average that noise out.
    """

    gradnorm_decile_means: np.ndarray
    loss_decile_means: np.ndarray
    gradnorm_dyadic_means: np.ndarray
    loss_dyadic_means: np.ndarray
    decreasing_fraction: float

    @property
    def gradnorm_first_decile(self) -> float:
        return float(self.gradnorm_decile_means[0])

    @property
    def gradnorm_final_decile(self) -> float:
        return float(self.gradnorm_decile_means[-1])


def _decile_means(values: np.ndarray) -> np.ndarray:
    edges = np.linspace(0, len(values), 11).astype(int)
    return np.array([values[a:b].mean() if b > a else np.nan
                     for a, b in zip(edges[:-1], edges[1:])])


def _dyadic_means(values: np.ndarray) -> np.ndarray:
    """Means over [T/2, T), [T/4, T/2), ... reported oldest window first."""
    out = []
    hi = len(values)
    while hi > 1:
        lo = hi // 2
        out.append(values[lo:hi].mean())
        hi = lo
    out.append(values[:hi].mean())
    return np.array(out[::-1])


def convergence_diagnostics(gradnorms, losses) -> ConvergenceDiagnostics:
    gradnorms = np.asarray(gradnorms, dtype=float)
    losses = np.asarray(losses, dtype=float)
    if gradnorms.size == 0 or losses.size == 0:
        raise InvalidConfigError("empty training log")
    g_dy = _dyadic_means(gradnorms)
    drops = np.diff(g_dy) <= 0.0
    return ConvergenceDiagnostics(
        gradnorm_decile_means=_decile_means(gradnorms),
        loss_decile_means=_decile_means(losses),
        gradnorm_dyadic_means=g_dy,
        loss_dyadic_means=_dyadic_means(losses),
        decreasing_fraction=float(drops.mean()) if drops.size else 1.0,
    )
