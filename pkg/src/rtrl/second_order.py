"""Forward propagation of second-order state sensitivities.

Carries the Hessian tensors of the hidden state with respect to pairs of
weight-matrix entries, assembles the readout Hessian, and evaluates the
closed-form a-priori bounds on the tensor entries.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatchError, InvalidConfigError
from .model import ModelDims, RnnParams, SquasherSpec, preactivations, sigmoid_d1, sigmoid_d2
from .sensitivity import FirstOrderSensitivity, _weight_source, sensitivity_propagators


@dataclass(frozen=True)
class SecondOrderSensitivity:
    """Second derivatives of the hidden state, one frontal slice per unit.

    ``aa``: trailing shape (N, N*d, N*d); ``wa``: (N, N*N, N*d);
    ``ww``: (N, N*N, N*N).  Rows/columns follow the column-major weight
    flattening.  The aa and ww slices are symmetric; the A-major/W-major
    cross tensor is the slice-wise transpose of ``wa``.
    """

    aa: np.ndarray
    wa: np.ndarray
    ww: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "aa", np.asarray(self.aa, dtype=float))
        object.__setattr__(self, "wa", np.asarray(self.wa, dtype=float))
        object.__setattr__(self, "ww", np.asarray(self.ww, dtype=float))

    @classmethod
    def zeros(cls, dims: ModelDims, batch: tuple = ()) -> "SecondOrderSensitivity":
        n, d = dims.n_hidden, dims.n_input
        return cls(
            aa=np.zeros(batch + (n, n * d, n * d)),
            wa=np.zeros(batch + (n, n * n, n * d)),
            ww=np.zeros(batch + (n, n * n, n * n)),
        )

    @property
    def aw(self) -> np.ndarray:
        """A-major/W-major cross slices, obtained by transposing ``wa``."""
        return self.wa.swapaxes(-1, -2)


def _embed_diagonal(entries: np.ndarray) -> np.ndarray:
    """Turn per-slice diagonal entries (..., N, m) into (..., N, m, m) matrices."""
    m = entries.shape[-1]
    return entries[..., :, None] * np.eye(m)


def _recurrent_cross(phi1_w: np.ndarray, mat: np.ndarray, n: int) -> np.ndarray:
    """Cross-coupling block: out[..., k, m*n+k, :] = phi'(W)[..., k, m] mat[..., m, :] / n."""
    c = mat.shape[-1]
    batch = np.broadcast_shapes(phi1_w.shape[:-2], mat.shape[:-2])
    out = np.zeros(batch + (n, n * n, c))
    vals = phi1_w[..., :, :, None] * mat[..., None, :, :] / n
    k_idx = np.arange(n)[:, None]
    r_idx = np.arange(n)[None, :] * n + k_idx
    out[..., k_idx, r_idx, :] = vals
    return out


def hessian_step(params: RnnParams, squash: SquasherSpec, s, x,
                 sens: FirstOrderSensitivity, sens2: SecondOrderSensitivity,
                 pre=None) -> SecondOrderSensitivity:
    """Advance the second-derivative tensors one step.

    Uses the shared pre-activations, the first-order propagator brackets, and
    the chain-rule recursion for each block; the W-W block includes the two
    symmetric cross terms coupling it to the first-order W sensitivities.
    """
    n, d = params.A.shape[-2:]
    if sens2.aa.shape[-2:] != (n * d, n * d):
        raise DimensionMismatchError("aa", (n * d, n * d), sens2.aa.shape[-2:])
    if sens2.wa.shape[-2:] != (n * n, n * d):
        raise DimensionMismatchError("wa", (n * n, n * d), sens2.wa.shape[-2:])
    if sens2.ww.shape[-2:] != (n * n, n * n):
        raise DimensionMismatchError("ww", (n * n, n * n), sens2.ww.shape[-2:])

    phi = squash.phi
    x = np.asarray(x, dtype=float)
    s = np.asarray(s, dtype=float)
    z = preactivations(params, squash, s, x) if pre is None else pre
    d1 = sigmoid_d1(z)[..., :, None, None]
    d2 = sigmoid_d2(z)[..., :, None, None]

    phi_w = phi(params.W)
    phi1_w = phi.d1(params.W)
    p_a, p_w = sensitivity_propagators(params, squash, s, x, sens)

    # Curvature terms: sigmoid''(z_k) x (bracket outer products).
    aa_curv = d2 * np.einsum("...kp,...kq->...kpq", p_a, p_a)
    wa_curv = d2 * np.einsum("...kr,...kq->...krq", p_w, p_a)
    ww_curv = d2 * np.einsum("...kr,...kq->...krq", p_w, p_w)

    # Diagonal second-derivative sources from phi''.
    aa_diag = _embed_diagonal(_weight_source(phi.d2(params.A), x, d))
    ww_diag = _embed_diagonal(_weight_source(phi.d2(params.W), s, n))

    # W-row/A-column cross source: delta_{kn} phi'(W_{nm}) sa[m, :] / N.
    wa_cross = _recurrent_cross(phi1_w, sens.sa, n)

    # W-W cross terms: delta_{ik} phi'(W_{ij}) sw[j, r] / N, plus its transpose.
    ww_half = _recurrent_cross(phi1_w, sens.sw, n).swapaxes(-1, -2)
    ww_cross = ww_half + ww_half.swapaxes(-1, -2)

    # Propagated terms: (1/N) sum_l phi(W_{kl}) T[l], as one matmul per tensor.
    def propagate(tensor):
        flat = tensor.reshape(tensor.shape[:-2] + (-1,))
        return np.matmul(phi_w, flat).reshape(tensor.shape) / n

    aa_prop = propagate(sens2.aa)
    wa_prop = propagate(sens2.wa)
    ww_prop = propagate(sens2.ww)

    return SecondOrderSensitivity(
        aa=aa_curv + d1 * (aa_diag + aa_prop),
        wa=wa_curv + d1 * (wa_cross + wa_prop),
        ww=ww_curv + d1 * (ww_diag + ww_cross + ww_prop),
    )


def hessian_of_f(params: RnnParams, squash: SquasherSpec, s,
                 sens: FirstOrderSensitivity, sens2: SecondOrderSensitivity) -> np.ndarray:
    """Full readout Hessian with respect to the flattened parameters (symmetric)."""
    if params.batch_shape != ():
        raise DimensionMismatchError("batch", (), params.batch_shape)
    n, d = params.A.shape[-2:]
    lam = squash.lam
    lam_b = lam(params.B)
    lam1_b = lam.d1(params.B)
    lam2_b = lam.d2(params.B)
    s = np.asarray(s, dtype=float)

    na, nw = n * d, n * n
    p = na + nw + n + 1
    hess = np.zeros((p, p))
    sl_a = slice(0, na)
    sl_w = slice(na, na + nw)
    sl_b = slice(na + nw, na + nw + n)

    hess[sl_a, sl_a] = np.einsum("k,kpq->pq", lam_b, sens2.aa)
    hess[sl_w, sl_w] = np.einsum("k,krq->rq", lam_b, sens2.ww)
    haw = np.einsum("k,krp->pr", lam_b, sens2.wa)  # A rows, W columns
    hess[sl_a, sl_w] = haw
    hess[sl_w, sl_a] = haw.T
    hba = lam1_b[:, None] * sens.sa
    hbw = lam1_b[:, None] * sens.sw
    hess[sl_b, sl_a] = hba
    hess[sl_a, sl_b] = hba.T
    hess[sl_b, sl_w] = hbw
    hess[sl_w, sl_b] = hbw.T
    hess[sl_b, sl_b] = np.diag(lam2_b * s)
    hess[-1, -1] = float(lam.d2(params.c))
    return hess


@dataclass(frozen=True)
class SecondOrderBounds:
    """Closed-form uniform bounds for the second-derivative tensors."""

    a_aa_max: float
    a_wa_max: float
    a_ww_max: float
    m_phi: float

    def rectangle_half_widths(self, c_phi: float) -> tuple[float, float, float]:
        """Half-widths a_max / (1 - c_phi/4) of the invariant hyper-rectangle."""
        denom = 1.0 - c_phi / 4.0
        return (self.a_aa_max / denom, self.a_wa_max / denom, self.a_ww_max / denom)


def apriori_second_bounds(squash: SquasherSpec, dims: ModelDims) -> SecondOrderBounds:
    """Evaluate the uniform source constants and the amplification factor m_phi."""
    c0, c1, c2 = squash.phi.require_bounds()
    if c0 >= 4.0:
        raise InvalidConfigError(f"amplitude bound must satisfy c_phi < 4, got {c0}")
    n, d = dims.n_hidden, dims.n_input
    m_phi = 1.0 + c0 / (4.0 - c0)
    a_aa = c1 * c1 * m_phi * m_phi / (10.0 * d * d) + c2 / (4.0 * d)
    a_wa = c1 * c1 * m_phi * m_phi / (10.0 * n * d) + c1 * c1 / (4.0 * n * d * (4.0 - c0))
    a_ww = c1 * c1 * m_phi * m_phi / (10.0 * n * n) + c2 / (4.0 * n)
    return SecondOrderBounds(a_aa_max=a_aa, a_wa_max=a_wa, a_ww_max=a_ww, m_phi=m_phi)
