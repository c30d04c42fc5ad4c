"""Forward propagation of first-order state sensitivities and online training.

The sensitivity of each hidden unit with respect to every entry of the input
and recurrent weight matrices is carried forward in time, giving an exact
streaming gradient estimate for the squared-error readout.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from .errors import DimensionMismatchError, NonFiniteError
from .model import (
    ModelDims,
    RnnParams,
    SquasherSpec,
    predict,
    preactivations,
    sigmoid,
    sigmoid_d1,
    squared_loss,
)
from .optim import RmspropState, rmsprop_delta


@dataclass(frozen=True)
class FirstOrderSensitivity:
    """Jacobians of the hidden state with respect to the weight matrices.

    ``sa``: trailing shape (N, N*d), row k holds d(state_k)/d(vec(A));
    ``sw``: trailing shape (N, N*N), likewise for vec(W).  Columns follow the
    column-major flattening shared with ``flatten_params``.
    """

    sa: np.ndarray
    sw: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "sa", np.asarray(self.sa, dtype=float))
        object.__setattr__(self, "sw", np.asarray(self.sw, dtype=float))

    @classmethod
    def zeros(cls, dims: ModelDims, batch: tuple = ()) -> "FirstOrderSensitivity":
        n, d = dims.n_hidden, dims.n_input
        return cls(sa=np.zeros(batch + (n, n * d)), sw=np.zeros(batch + (n, n * n)))


_SOURCE_INDEX_CACHE: dict = {}


def _source_indices(n: int, m: int):
    key = (n, m)
    hit = _SOURCE_INDEX_CACHE.get(key)
    if hit is None:
        rows = np.arange(n)[:, None]
        cols = np.arange(m)[None, :] * n + rows
        hit = (rows, cols)
        _SOURCE_INDEX_CACHE[key] = hit
    return hit


def _weight_source(deriv_weights: np.ndarray, driver: np.ndarray, scale: int) -> np.ndarray:
    """Diagonal source term: out[..., k, j*N+i] = delta_{ik} f'(M_{ij}) driver_j / scale.

    ``deriv_weights`` has trailing shape (N, m) and ``driver`` trailing shape
    (m,); the result has trailing shape (N, m*N).
    """
    dw = np.asarray(deriv_weights, dtype=float)
    driver = np.asarray(driver, dtype=float)
    n, m = dw.shape[-2:]
    prod = dw * driver[..., None, :] / scale
    batch = np.broadcast_shapes(dw.shape[:-2], driver.shape[:-1])
    out = np.zeros(batch + (n, m * n))
    rows, cols = _source_indices(n, m)
    out[..., rows, cols] = prod
    return out


def sensitivity_propagators(params: RnnParams, squash: SquasherSpec, s, x,
                            sens: FirstOrderSensitivity):
    """Pre-multiplier brackets shared by the first- and second-order updates.

    Returns (p_a, p_w): the next sensitivities divided by sigmoid'(z), i.e.
    p_a = phi(W) sa / N + source_A and likewise for W.
    """
    n, d = params.A.shape[-2:]
    phi = squash.phi
    phi_w = phi(params.W)
    src_a = _weight_source(phi.d1(params.A), np.asarray(x, dtype=float), d)
    src_w = _weight_source(phi.d1(params.W), np.asarray(s, dtype=float), n)
    p_a = np.matmul(phi_w, sens.sa) / n + src_a
    p_w = np.matmul(phi_w, sens.sw) / n + src_w
    return p_a, p_w


def sensitivity_step(params: RnnParams, squash: SquasherSpec, s, x,
                     sens: FirstOrderSensitivity, pre=None) -> FirstOrderSensitivity:
    """Advance the weight-Jacobians one step, sharing pre-activations with rnn_step."""
    n, d = params.A.shape[-2:]
    if sens.sa.shape[-2:] != (n, n * d):
        raise DimensionMismatchError("sa", (n, n * d), sens.sa.shape[-2:])
    if sens.sw.shape[-2:] != (n, n * n):
        raise DimensionMismatchError("sw", (n, n * n), sens.sw.shape[-2:])
    z = preactivations(params, squash, s, x) if pre is None else pre
    d1 = sigmoid_d1(z)[..., :, None]
    p_a, p_w = sensitivity_propagators(params, squash, s, x, sens)
    return FirstOrderSensitivity(sa=d1 * p_a, sw=d1 * p_w)


def grad_f(params: RnnParams, squash: SquasherSpec, s,
           sens: FirstOrderSensitivity) -> np.ndarray:
    """Gradient of the readout with respect to the flattened parameters.

    Blocks: [lam(B) . sa; lam(B) . sw; lam'(B) * s; lam'(c)].
    """
    lam = squash.lam
    lam_b = lam(params.B)
    g_a = np.matmul(lam_b[..., None, :], sens.sa)[..., 0, :]
    g_w = np.matmul(lam_b[..., None, :], sens.sw)[..., 0, :]
    g_b = lam.d1(params.B) * np.asarray(s, dtype=float)
    g_c = np.asarray(lam.d1(params.c), dtype=float)[..., None]
    if g_c.ndim < g_b.ndim:  # scalar c against batched states
        g_c = np.broadcast_to(g_c, g_b.shape[:-1] + (1,))
    return np.concatenate([g_a, g_w, g_b, g_c], axis=-1)


def gradient_estimate(params: RnnParams, squash: SquasherSpec, s,
                      sens: FirstOrderSensitivity, y, yhat) -> np.ndarray:
    """Online gradient -(y - yhat) * grad_f, aligned with flatten_params."""
    resid = np.asarray(y, dtype=float) - np.asarray(yhat, dtype=float)
    return -resid[..., None] * grad_f(params, squash, s, sens)


def apply_flat_update(params: RnnParams, delta: np.ndarray) -> RnnParams:
    """Add a flat-vector increment to the parameter blocks (batch-aware)."""
    n, d = params.A.shape[-2:]
    a_end, w_end = n * d, n * d + n * n
    d_a = delta[..., :a_end].reshape(delta.shape[:-1] + (d, n)).swapaxes(-1, -2)
    d_w = delta[..., a_end:w_end].reshape(delta.shape[:-1] + (n, n)).swapaxes(-1, -2)
    d_b = delta[..., w_end:w_end + n]
    d_c = delta[..., -1]
    new_c = params.c + (d_c if d_c.ndim else float(d_c))
    return RnnParams(A=params.A + d_a, W=params.W + d_w, B=params.B + d_b, c=new_c)


@dataclass
class RtrlState:
    """Single-owner streaming state for online training.

    ``predict_pre_update`` selects which state the prediction is paired with:
    False (default) predicts from the state produced after consuming the
    current input; True predicts from the state before consuming it.
    """

    params: RnnParams
    squash: SquasherSpec
    s: np.ndarray
    sens: FirstOrderSensitivity
    opt: Optional[RmspropState] = None
    predict_pre_update: bool = False
    t: int = 0
    last_grad: Optional[np.ndarray] = None  # gradient estimate of the latest step

    @classmethod
    def fresh(cls, params: RnnParams, squash: SquasherSpec, batch: tuple = (),
              **kwargs) -> "RtrlState":
        dims = params.dims
        return cls(
            params=params,
            squash=squash,
            s=np.zeros(batch + (dims.n_hidden,)),
            sens=FirstOrderSensitivity.zeros(dims, batch=batch),
            **kwargs,
        )


def _require_finite(what: str, arr: np.ndarray, step: int) -> None:
    arr = np.asarray(arr)
    if not np.isfinite(arr).all():
        finite = arr[np.isfinite(arr)]
        max_abs = float(np.max(np.abs(finite))) if finite.size else float("nan")
        raise NonFiniteError(what, step, max_abs)


def rtrl_train_step(state: RtrlState, x, y, alpha: float) -> Union[float, np.ndarray]:
    """One fused online step: advance (s, sens) under the current parameters,
    form the gradient estimate, then apply the optimizer update.

    Returns the per-sample loss (mean over any leading batch axis of the
    parameters is NOT taken: batched parameters train independently).
    Mutates ``state`` in place.
    """
    params, squash = state.params, state.squash
    z = preactivations(params, squash, state.s, x)
    s_next = sigmoid(z)
    sens_next = sensitivity_step(params, squash, state.s, x, state.sens, pre=z)

    if state.predict_pre_update:
        s_for_pred, sens_for_pred = state.s, state.sens
    else:
        s_for_pred, sens_for_pred = s_next, sens_next
    yhat = predict(params, squash, s_for_pred)
    loss = squared_loss(y, yhat)
    g = gradient_estimate(params, squash, s_for_pred, sens_for_pred, y, yhat)
    _require_finite("gradient", g, state.t)
    state.last_grad = g

    if alpha != 0.0 or state.opt is not None:
        if state.opt is None:
            delta = -alpha * g
        else:
            delta, state.opt = rmsprop_delta(g, alpha, state.opt)
        state.params = apply_flat_update(params, delta)

    state.s = s_next
    state.sens = sens_next
    state.t += 1
    return loss
