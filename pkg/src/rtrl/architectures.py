"""Recurrent architectures with hand-derived state and parameter Jacobians.

Every model satisfies one contract: ``step`` advances the state,
``step_with_jacobians`` additionally returns d(next state)/d(state) and
d(next state)/d(theta), and ``readout`` returns the output with its
gradients.  The shared forward-sensitivity recursion
``sens' = jac_state @ sens + jac_params`` then drives online training for
all of them, and the unrolled oracles consume the same contract.

Parameters are flat vectors; each model documents its block layout.  All
matrices flatten column-major, matching the library-wide convention.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import DimensionMismatchError, InvalidConfigError, NonFiniteError
from .model import (
    ModelDims,
    RnnParams,
    SquasherSpec,
    preactivations,
    sigmoid,
    sigmoid_d1,
    unflatten_params,
)
from .optim import RmspropState, rmsprop_apply
from .sensitivity import _weight_source


def activation_pair(kind: str):
    """Return (fn, derivative) for the supported activations.

    The relu derivative at exactly zero is defined as 0; elu uses unit scale.
    """
    if kind == "tanh":
        return np.tanh, lambda v: 1.0 - np.tanh(v) ** 2
    if kind == "relu":
        return (lambda v: np.maximum(v, 0.0)), (lambda v: (v > 0.0).astype(float))
    if kind == "elu":
        return (
            lambda v: np.where(v > 0.0, v, np.expm1(np.minimum(v, 0.0))),
            lambda v: np.where(v > 0.0, 1.0, np.exp(np.minimum(v, 0.0))),
        )
    if kind == "identity":
        return (lambda v: np.asarray(v, dtype=float)), (lambda v: np.ones_like(np.asarray(v, dtype=float)))
    raise InvalidConfigError(f"unknown activation {kind!r}")


class RecurrentModel:
    """Base for the flat-parameter models; subclasses define ``blocks``."""

    state_dim: int
    input_dim: int
    output_dim: int
    blocks: list  # [(name, shape)] in flat order

    @property
    def n_params(self) -> int:
        cached = getattr(self, "_n_params", None)
        if cached is None:
            cached = sum(int(np.prod(shape)) for _, shape in self.blocks)
            self._n_params = cached
        return cached

    def block_slices(self) -> dict:
        out, start = {}, 0
        for name, shape in self.blocks:
            size = int(np.prod(shape))
            out[name] = slice(start, start + size)
            start += size
        return out

    def unpack(self, theta: np.ndarray) -> dict:
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.n_params,):
            raise DimensionMismatchError("theta", (self.n_params,), theta.shape)
        out = {}
        for name, sl in self.block_slices().items():
            shape = dict(self.blocks)[name]
            out[name] = theta[sl].reshape(shape, order="F")
        return out

    def pack(self, mats: dict) -> np.ndarray:
        return np.concatenate([np.asarray(mats[name], dtype=float).flatten(order="F")
                               for name, _ in self.blocks])

    def init_params(self, rng: np.random.Generator, scale: float = 0.1) -> np.ndarray:
        return scale * rng.standard_normal(self.n_params)

    def check_state_input(self, s, x):
        s = np.asarray(s, dtype=float)
        x = np.asarray(x, dtype=float)
        if s.shape[-1] != self.state_dim:
            raise DimensionMismatchError("state", self.state_dim, s.shape[-1])
        if x.shape[-1] != self.input_dim:
            raise DimensionMismatchError("input", self.input_dim, x.shape[-1])
        return s, x

    # subclasses implement:
    def step(self, theta, s, x):
        raise NotImplementedError

    def step_with_jacobians(self, theta, s, x):
        raise NotImplementedError

    def readout(self, theta, s):
        raise NotImplementedError


def _zeros_block(batch_shape, n, size):
    return np.zeros(batch_shape + (n, size))


class LinearRnn(RecurrentModel):
    """Euler-discretised linear state recursion s' = s + W s dt + B x sqrt(dt).

    Blocks: W (N, N), B (N, d), A (1, N) readout.
    """

    def __init__(self, n_state: int, n_input: int, delta: float = 1e-2):
        if delta <= 0.0:
            raise InvalidConfigError(f"delta must be positive, got {delta}")
        self.state_dim = n_state
        self.input_dim = n_input
        self.output_dim = 1
        self.delta = delta
        self.blocks = [("W", (n_state, n_state)), ("B", (n_state, n_input)),
                       ("A", (1, n_state))]

    def step(self, theta, s, x):
        s, x = self.check_state_input(s, x)
        m = self.unpack(theta)
        return s + (s @ m["W"].T) * self.delta + (x @ m["B"].T) * np.sqrt(self.delta)

    def step_with_jacobians(self, theta, s, x):
        s, x = self.check_state_input(s, x)
        m = self.unpack(theta)
        n = self.state_dim
        s_next = s + (s @ m["W"].T) * self.delta + (x @ m["B"].T) * np.sqrt(self.delta)
        js = np.eye(n) + m["W"] * self.delta
        batch = s_next.shape[:-1]
        jp_w = _weight_source(np.full((n, n), self.delta), s, 1)
        jp_b = _weight_source(np.full((n, self.input_dim), np.sqrt(self.delta)), x, 1)
        jp_a = _zeros_block(batch, n, n)
        jp_w, jp_b = (np.broadcast_to(a, batch + a.shape[-2:]) for a in (jp_w, jp_b))
        return s_next, js, np.concatenate([jp_w, jp_b, jp_a], axis=-1)

    def readout(self, theta, s):
        s = np.asarray(s, dtype=float)
        m = self.unpack(theta)
        f = s @ m["A"].T
        dfs = np.broadcast_to(m["A"], s.shape[:-1] + m["A"].shape)
        batch = s.shape[:-1]
        n = self.state_dim
        dfp = _zeros_block(batch, 1, self.n_params)
        dfp[..., :, -n:] = s[..., None, :]
        return f, dfs, dfp


class ElmanRnn(RecurrentModel):
    """Single-layer recursion s' = act(W s + B x); blocks W, B, A."""

    def __init__(self, n_state: int, n_input: int, activation: str = "tanh",
                 n_output: int = 1):
        self.state_dim = n_state
        self.input_dim = n_input
        self.output_dim = n_output
        self.activation = activation
        self.act, self.act_d1 = activation_pair(activation)
        self.blocks = [("W", (n_state, n_state)), ("B", (n_state, n_input)),
                       ("A", (n_output, n_state))]

    def _pre(self, m, s, x):
        return s @ m["W"].T + x @ m["B"].T

    def step(self, theta, s, x):
        s, x = self.check_state_input(s, x)
        return self.act(self._pre(self.unpack(theta), s, x))

    def step_with_jacobians(self, theta, s, x):
        s, x = self.check_state_input(s, x)
        m = self.unpack(theta)
        n, k = self.state_dim, self.output_dim
        pre = self._pre(m, s, x)
        s_next = self.act(pre)
        g = self.act_d1(pre)
        js = g[..., :, None] * m["W"]
        jp_w = g[..., :, None] * _weight_source(np.ones((n, n)), s, 1)
        jp_b = g[..., :, None] * _weight_source(np.ones((n, self.input_dim)), x, 1)
        batch = s_next.shape[:-1]
        jp = np.concatenate([jp_w, jp_b, _zeros_block(batch, n, k * n)], axis=-1)
        return s_next, js, jp

    def readout(self, theta, s):
        s = np.asarray(s, dtype=float)
        m = self.unpack(theta)
        n, k = self.state_dim, self.output_dim
        f = s @ m["A"].T
        dfs = np.broadcast_to(m["A"], s.shape[:-1] + m["A"].shape)
        batch = s.shape[:-1]
        dfp = _zeros_block(batch, k, self.n_params)
        dfp[..., :, -k * n:] = _weight_source(np.ones((k, n)), s, 1)
        return f, dfs, dfp


def _exp_divided_differences(eigs: np.ndarray) -> np.ndarray:
    """Matrix of (exp(a) - exp(b)) / (a - b) with the analytic diagonal limit."""
    a = eigs[:, None]
    b = eigs[None, :]
    half = 0.5 * (a - b)
    ratio = np.where(np.abs(half) < 1e-7, 1.0 + half * half / 6.0,
                     np.sinh(np.where(np.abs(half) < 1e-7, 1.0, half))
                     / np.where(np.abs(half) < 1e-7, 1.0, half))
    return np.exp(0.5 * (a + b)) * ratio


def sde_decay_matrix(w: np.ndarray) -> np.ndarray:
    """exp(W^T W) via symmetric eigendecomposition; symmetric positive definite."""
    m = np.asarray(w, dtype=float)
    if not np.isfinite(m).all():
        finite = m[np.isfinite(m)]
        raise NonFiniteError("decay-matrix weights", -1,
                             float(np.max(np.abs(finite))) if finite.size else float("nan"))
    eigs, q = np.linalg.eigh(m.T @ m)
    c = (q * np.exp(eigs)) @ q.T
    return 0.5 * (c + c.T)


def sde_decay_matrix_dw_apply(w: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Directional derivatives D[i, j, :] = (d exp(W^T W) / d W_{ij}) v.

    Uses the divided-difference (Daleckii-Krein) form of the exponential's
    Frechet derivative in the eigenbasis of W^T W.
    """
    w = np.asarray(w, dtype=float)
    v = np.asarray(v, dtype=float)
    n = w.shape[0]
    eigs, q = np.linalg.eigh(w.T @ w)
    gamma = _exp_divided_differences(eigs)
    u = v @ q  # components of v in the eigenbasis
    a_rows = w @ q  # row i: coefficients of W[i, :] in the eigenbasis
    au = a_rows * u  # (i, b) -> a_i[b] * u[b]
    qu = q * u  # (j, b) -> q_j[b] * u[b]
    g1 = np.einsum("pb,ib->ip", gamma, au)
    g2 = np.einsum("pb,jb->jp", gamma, qu)
    inner = np.einsum("jp,ip->ijp", q, g1) + np.einsum("ip,jp->ijp", a_rows, g2)
    return np.einsum("kp,ijp->ijk", q, inner)


class NeuralSde(RecurrentModel):
    """Discretised drift-decay recursion s' = s - act(U s + B x) dt - C s dt.

    C = exp(W^T W) is symmetric positive definite.  Blocks: U (N, N),
    B (N, d), W (N, N), A (1, N) readout; set ``freeze_readout`` to exclude
    the readout from training (its parameter gradient is reported as zero).
    """

    def __init__(self, n_state: int, n_input: int, delta: float = 1e-2,
                 activation: str = "tanh", freeze_readout: bool = False):
        if delta <= 0.0:
            raise InvalidConfigError(f"delta must be positive, got {delta}")
        self.state_dim = n_state
        self.input_dim = n_input
        self.output_dim = 1
        self.delta = delta
        self.activation = activation
        self.freeze_readout = freeze_readout
        self.act, self.act_d1 = activation_pair(activation)
        self.blocks = [("U", (n_state, n_state)), ("B", (n_state, n_input)),
                       ("W", (n_state, n_state)), ("A", (1, n_state))]

    def _pre(self, m, s, x):
        return (np.einsum("ij,...j->...i", m["U"], s)
                + np.einsum("ij,...j->...i", m["B"], x))

    def step(self, theta, s, x):
        s, x = self.check_state_input(s, x)
        m = self.unpack(theta)
        c = sde_decay_matrix(m["W"])
        return (s - self.act(self._pre(m, s, x)) * self.delta
                - np.einsum("ij,...j->...i", c, s) * self.delta)

    def step_with_jacobians(self, theta, s, x):
        s, x = self.check_state_input(s, x)
        m = self.unpack(theta)
        n = self.state_dim
        dt = self.delta
        c = sde_decay_matrix(m["W"])
        pre = self._pre(m, s, x)
        drift = self.act(pre)
        g = self.act_d1(pre)
        s_next = s - drift * dt - np.einsum("ij,...j->...i", c, s) * dt
        js = np.eye(n) - g[..., :, None] * m["U"] * dt - c * dt
        jp_u = -dt * g[..., :, None] * _weight_source(np.ones((n, n)), s, 1)
        jp_b = -dt * g[..., :, None] * _weight_source(np.ones((n, self.input_dim)), x, 1)
        jp_w = -dt * self._decay_dw_apply_batched(m["W"], s)
        batch = s_next.shape[:-1]
        jp_a = _zeros_block(batch, n, n)
        return s_next, js, np.concatenate([jp_u, jp_b, jp_w, jp_a], axis=-1)

    def _decay_dw_apply_batched(self, w, s):
        """(..., N, N*N) array: column (i, j) holds (dC/dW_{ij}) s."""
        n = self.state_dim
        eigs, q = np.linalg.eigh(w.T @ w)
        gamma = _exp_divided_differences(eigs)
        u = np.einsum("...b,bp->...p", s, q)
        a_rows = w @ q
        au = a_rows * u[..., None, :]
        qu = q * u[..., None, :]
        g1 = np.einsum("pb,...ib->...ip", gamma, au)
        g2 = np.einsum("pb,...jb->...jp", gamma, qu)
        inner = np.einsum("jp,...ip->...ijp", q, g1) + np.einsum("ip,...jp->...ijp", a_rows, g2)
        out = np.einsum("kp,...ijp->...kji", q, inner)
        return out.reshape(out.shape[:-3] + (n, n * n))

    def readout(self, theta, s):
        s = np.asarray(s, dtype=float)
        m = self.unpack(theta)
        n = self.state_dim
        f = np.einsum("kj,...j->...k", m["A"], s)
        dfs = np.broadcast_to(m["A"], s.shape[:-1] + m["A"].shape)
        batch = s.shape[:-1]
        if self.freeze_readout:
            dfp_a = _zeros_block(batch, 1, n)
        else:
            dfp_a = np.broadcast_to(_weight_source(np.ones((1, n)), s, 1), batch + (1, n))
        dfp = np.concatenate(
            [_zeros_block(batch, 1, n * n), _zeros_block(batch, 1, n * self.input_dim),
             _zeros_block(batch, 1, n * n), dfp_a],
            axis=-1)
        return f, dfs, dfp


class Gru(RecurrentModel):
    """Gated recurrent unit with the reset gate inside the candidate.

    r = sig(Wr s + Br x), z = sig(Wz s + Bz x), h = tanh(Wh (r*s) + Bh x),
    s' = (1 - z)*h + z*s.  Blocks: Wr, Br, Wz, Bz, Wh, Bh, A (K, N readout).
    """

    def __init__(self, n_state: int, n_input: int, n_output: int = 1):
        self.state_dim = n_state
        self.input_dim = n_input
        self.output_dim = n_output
        n, d, k = n_state, n_input, n_output
        self.blocks = [("Wr", (n, n)), ("Br", (n, d)), ("Wz", (n, n)), ("Bz", (n, d)),
                       ("Wh", (n, n)), ("Bh", (n, d)), ("A", (k, n))]

    def _gates(self, m, s, x):
        pr = np.einsum("ij,...j->...i", m["Wr"], s) + np.einsum("ij,...j->...i", m["Br"], x)
        pz = np.einsum("ij,...j->...i", m["Wz"], s) + np.einsum("ij,...j->...i", m["Bz"], x)
        r = sigmoid(pr)
        z = sigmoid(pz)
        a = r * s
        ph = np.einsum("ij,...j->...i", m["Wh"], a) + np.einsum("ij,...j->...i", m["Bh"], x)
        h = np.tanh(ph)
        return pr, pz, ph, r, z, a, h

    def step(self, theta, s, x):
        s, x = self.check_state_input(s, x)
        _, _, _, _, z, _, h = self._gates(self.unpack(theta), s, x)
        return (1.0 - z) * h + z * s

    def step_with_jacobians(self, theta, s, x):
        s, x = self.check_state_input(s, x)
        m = self.unpack(theta)
        n, d, k = self.state_dim, self.input_dim, self.output_dim
        pr, pz, ph, r, z, a, h = self._gates(m, s, x)
        s_next = (1.0 - z) * h + z * s

        gr = sigmoid_d1(pr)
        gz = sigmoid_d1(pz)
        gh = 1.0 - h * h
        drds = gr[..., :, None] * m["Wr"]
        dzds = gz[..., :, None] * m["Wz"]
        dads = r[..., :, None] * np.eye(n) + s[..., :, None] * drds
        dhds = gh[..., :, None] * np.einsum("kl,...lm->...km", m["Wh"], dads)
        js = (z[..., :, None] * np.eye(n)
              + (1.0 - z)[..., :, None] * dhds
              + (s - h)[..., :, None] * dzds)

        # Diagonal-row blocks: coefficient per row times the driving vector.
        cz = (s - h) * gz
        ch = (1.0 - z) * gh
        jp_wz = _weight_source(cz[..., :, None] * np.ones(n), s, 1)
        jp_bz = _weight_source(cz[..., :, None] * np.ones(d), x, 1)
        jp_wh = _weight_source(ch[..., :, None] * np.ones(n), a, 1)
        jp_bh = _weight_source(ch[..., :, None] * np.ones(d), x, 1)
        # Reset-gate blocks act through the candidate's recurrent term.
        gsr = s * gr
        jp_wr = np.einsum("...k,ki,...i,...j->...kji", ch, m["Wh"], gsr, s)
        jp_wr = jp_wr.reshape(jp_wr.shape[:-3] + (n, n * n))
        gr_only = gr
        jp_br = np.einsum("...k,ki,...i,...j->...kji", ch, m["Wh"], s * gr_only, x)
        jp_br = jp_br.reshape(jp_br.shape[:-3] + (n, n * d))

        batch = s_next.shape[:-1]
        jp = np.concatenate(
            [jp_wr, jp_br, jp_wz, jp_bz, jp_wh, jp_bh, _zeros_block(batch, n, k * n)],
            axis=-1)
        return s_next, js, jp

    def readout(self, theta, s):
        s = np.asarray(s, dtype=float)
        m = self.unpack(theta)
        n, d, k = self.state_dim, self.input_dim, self.output_dim
        f = np.einsum("kj,...j->...k", m["A"], s)
        dfs = np.broadcast_to(m["A"], s.shape[:-1] + m["A"].shape)
        batch = s.shape[:-1]
        dfp_a = np.broadcast_to(_weight_source(np.ones((k, n)), s, 1), batch + (k, k * n))
        zero_cols = self.n_params - k * n
        dfp = np.concatenate([_zeros_block(batch, k, zero_cols), dfp_a], axis=-1)
        return f, dfs, dfp


class TheoryRnn(RecurrentModel):
    """The bounded sigmoid architecture expressed through the generic contract.

    Theta is the column-major flattening [vec(A); vec(W); B; c].
    """

    def __init__(self, dims: ModelDims, squash: SquasherSpec):
        self.dims = dims
        self.squash = squash
        self.state_dim = dims.n_hidden
        self.input_dim = dims.n_input
        self.output_dim = 1
        n, d = dims.n_hidden, dims.n_input
        self.blocks = [("A", (n, d)), ("W", (n, n)), ("B", (n,)), ("c", ())]

    def _params(self, theta) -> RnnParams:
        return unflatten_params(self.dims, theta)

    def step(self, theta, s, x):
        s, x = self.check_state_input(s, x)
        return sigmoid(preactivations(self._params(theta), self.squash, s, x))

    def step_with_jacobians(self, theta, s, x):
        s, x = self.check_state_input(s, x)
        p = self._params(theta)
        n, d = self.dims.n_hidden, self.dims.n_input
        phi = self.squash.phi
        z = preactivations(p, self.squash, s, x)
        s_next = sigmoid(z)
        g = sigmoid_d1(z)
        js = g[..., :, None] * phi(p.W) / n
        jp_a = g[..., :, None] * _weight_source(phi.d1(p.A), x, d)
        jp_w = g[..., :, None] * _weight_source(phi.d1(p.W), s, n)
        batch = s_next.shape[:-1]
        jp = np.concatenate([jp_a, jp_w, _zeros_block(batch, n, n + 1)], axis=-1)
        return s_next, js, jp

    def readout(self, theta, s):
        s = np.asarray(s, dtype=float)
        p = self._params(theta)
        lam = self.squash.lam
        f = (np.einsum("i,...i->...", lam(p.B), s) + lam(p.c))[..., None]
        dfs = np.broadcast_to(lam(p.B), s.shape[:-1] + (1, self.state_dim)).copy()
        batch = s.shape[:-1]
        n, d = self.dims.n_hidden, self.dims.n_input
        dfp_b = (lam.d1(p.B) * s)[..., None, :]
        dfp_c = np.broadcast_to(np.asarray(lam.d1(p.c), dtype=float), batch + (1, 1))
        dfp = np.concatenate(
            [_zeros_block(batch, 1, n * d + n * n), dfp_b, dfp_c], axis=-1)
        return f, dfs, dfp


# --- spec-surface step functions -------------------------------------------------


def linear_step(theta, delta, s, x, n_state=None, n_input=None):
    """Linear recursion step returning (s_next, jac_state, jac_params)."""
    n = n_state if n_state is not None else np.asarray(s).shape[-1]
    d = n_input if n_input is not None else np.asarray(x).shape[-1]
    return LinearRnn(n, d, delta).step_with_jacobians(theta, s, x)


def elman_step(theta, activation, s, x, n_state=None, n_input=None, n_output=1):
    n = n_state if n_state is not None else np.asarray(s).shape[-1]
    d = n_input if n_input is not None else np.asarray(x).shape[-1]
    return ElmanRnn(n, d, activation, n_output).step_with_jacobians(theta, s, x)


def neural_sde_step(theta, delta, s, x, activation="tanh", n_state=None, n_input=None):
    n = n_state if n_state is not None else np.asarray(s).shape[-1]
    d = n_input if n_input is not None else np.asarray(x).shape[-1]
    return NeuralSde(n, d, delta, activation).step_with_jacobians(theta, s, x)


def gru_step(theta, s, x, n_state=None, n_input=None, n_output=1):
    n = n_state if n_state is not None else np.asarray(s).shape[-1]
    d = n_input if n_input is not None else np.asarray(x).shape[-1]
    return Gru(n, d, n_output).step_with_jacobians(theta, s, x)


# --- loss heads -----------------------------------------------------------------


def softmax_xent(logits, label):
    """Cross-entropy of a max-shifted softmax; returns (loss, dloss/dlogits)."""
    logits = np.asarray(logits, dtype=float)
    k = logits.shape[-1]
    label = np.asarray(label)
    if np.any(label < 0) or np.any(label >= k):
        raise IndexError(f"label out of range for {k} classes")
    shifted = logits - logits.max(axis=-1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    logp = shifted - logz
    p = np.exp(logp)
    picked = np.take_along_axis(logp, label[..., None].astype(np.int64), axis=-1)[..., 0]
    grad = p.copy()
    np.put_along_axis(grad, label[..., None].astype(np.int64),
                      np.take_along_axis(grad, label[..., None].astype(np.int64), axis=-1) - 1.0,
                      axis=-1)
    loss = -picked
    return (loss if loss.ndim else float(loss)), grad


class SquaredLossHead:
    """Half squared error on a one-dimensional readout."""

    kind = "squared"

    def loss_and_grad(self, y, f):
        f = np.asarray(f, dtype=float)
        resid = f[..., 0] - np.asarray(y, dtype=float)
        loss = 0.5 * resid * resid
        return (loss if loss.ndim else float(loss)), resid[..., None]


class SoftmaxXentHead:
    """Cross-entropy over class logits; targets are integer labels."""

    kind = "cross-entropy-softmax"

    def loss_and_grad(self, y, f):
        return softmax_xent(f, y)


def loss_head(kind: str):
    if kind == "squared":
        return SquaredLossHead()
    if kind == "cross-entropy-softmax":
        return SoftmaxXentHead()
    raise InvalidConfigError(f"unknown loss head {kind!r}")


# --- generic online trainer ---------------------------------------------------


@dataclass
class GenericRtrlState:
    """Streaming state for the generic forward-sensitivity trainer."""

    model: RecurrentModel
    theta: np.ndarray
    s: np.ndarray
    sens: np.ndarray  # (..., N, P)
    head: object
    opt: Optional[RmspropState] = None
    t: int = 0
    last_grad: Optional[np.ndarray] = None  # batch-averaged gradient of the latest step

    @classmethod
    def fresh(cls, model: RecurrentModel, theta: np.ndarray, head_kind: str = "squared",
              batch: tuple = (), **kwargs) -> "GenericRtrlState":
        return cls(
            model=model,
            theta=np.asarray(theta, dtype=float).copy(),
            s=np.zeros(batch + (model.state_dim,)),
            sens=np.zeros(batch + (model.state_dim, model.n_params)),
            head=loss_head(head_kind),
            **kwargs,
        )


def generic_rtrl_step(state: GenericRtrlState, x, y, alpha: float):
    """One fused step of the generic trainer; returns the per-sample loss.

    The sensitivity recursion and gradient use the pre-update parameters;
    mini-batch gradients are averaged over leading axes in fixed order.
    """
    model = state.model
    s_next, js, jp = model.step_with_jacobians(state.theta, state.s, x)
    sens_next = np.matmul(js, state.sens) + jp
    f, dfs, dfp = model.readout(state.theta, s_next)
    loss, dldf = state.head.loss_and_grad(y, f)
    g = np.matmul(dldf[..., None, :], np.matmul(dfs, sens_next) + dfp)[..., 0, :]
    if g.ndim > 1:
        g = g.mean(axis=tuple(range(g.ndim - 1)))
    if not np.isfinite(g).all():
        finite = g[np.isfinite(g)]
        raise NonFiniteError("gradient", state.t,
                             float(np.max(np.abs(finite))) if finite.size else float("nan"))
    state.last_grad = g
    if alpha != 0.0 or state.opt is not None:
        if state.opt is None:
            state.theta = state.theta - alpha * g
        else:
            state.theta, state.opt = rmsprop_apply(state.theta, g, alpha, state.opt)
    state.s = s_next
    state.sens = sens_next
    state.t += 1
    return loss
