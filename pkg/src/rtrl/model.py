"""Bounded recurrent network core.

Parameter container, squashing functions with certified derivative bounds,
the sigmoid hidden-state update, scalar prediction, squared loss, and the
column-major flattening conventions every other module shares.

All step operations accept arrays with extra leading batch dimensions and
broadcast over them; the trailing axes must match the declared model sizes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Union

import numpy as np

from .errors import DimensionMismatchError, InvalidConfigError

# Global bounds on the sigmoid derivatives (attained values, not estimates).
SIGMOID_D1_MAX = 0.25
SIGMOID_D2_MAX = math.sqrt(3.0) / 18.0
SIGMOID_D3_MAX = 0.125
# |sigmoid''| peaks where sigmoid(y) = 1/2 +- sqrt(3)/6, i.e. at y = +-D2_ARGMAX.
SIGMOID_D2_ARGMAX = math.log((0.5 + math.sqrt(3.0) / 6.0) / (0.5 - math.sqrt(3.0) / 6.0))


def sigmoid(y):
    """Logistic function 1 / (1 + exp(-y)), overflow-safe for any finite y."""
    y = np.asarray(y, dtype=float)
    out = np.empty_like(y)
    pos = y >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-y[pos]))
    ey = np.exp(y[~pos])
    out[~pos] = ey / (1.0 + ey)
    return out if out.ndim else float(out)


def sigmoid_d1(y):
    """First derivative: s(1 - s) with s = sigmoid(y); bounded by 1/4."""
    s = np.asarray(sigmoid(y))
    out = s * (1.0 - s)
    return out if out.ndim else float(out)


def sigmoid_d2(y):
    """Second derivative: 2s^3 - 3s^2 + s; bounded by sqrt(3)/18."""
    s = np.asarray(sigmoid(y))
    out = s * (1.0 - s) * (1.0 - 2.0 * s)
    return out if out.ndim else float(out)


def sigmoid_d3(y):
    """Third derivative: -6s^4 + 12s^3 - 7s^2 + s; bounded by 1/8."""
    s = np.asarray(sigmoid(y))
    out = ((-6.0 * s + 12.0) * s - 7.0) * s * s + s
    return out if out.ndim else float(out)


# Largest |f''| of tanh is 4 / (3 sqrt(3)), attained at tanh(y) = 1/sqrt(3).
TANH_D2_MAX = 4.0 / (3.0 * math.sqrt(3.0))


@dataclass(frozen=True)
class Squasher:
    """A smooth elementwise map with declared amplitude/derivative bounds.

    ``bound`` / ``bound_d1`` / ``bound_d2`` are the declared sup-norms of the
    function and its first two derivatives.  ``None`` means the quantity is
    unbounded (the identity map); operations that need a bound reject it.
    """

    kind: str  # "scaled-tanh" | "identity" | "custom"
    scale: float = 1.0
    bound: Optional[float] = None
    bound_d1: Optional[float] = None
    bound_d2: Optional[float] = None
    fn: Optional[Callable] = field(default=None, repr=False)
    fn_d1: Optional[Callable] = field(default=None, repr=False)
    fn_d2: Optional[Callable] = field(default=None, repr=False)

    def __post_init__(self):
        for name in ("bound", "bound_d1", "bound_d2"):
            b = getattr(self, name)
            if b is not None and not (math.isfinite(b) and b >= 0.0):
                raise InvalidConfigError(f"declared {name} must be finite and nonnegative, got {b}")
        if self.kind not in ("scaled-tanh", "identity", "custom"):
            raise InvalidConfigError(f"unknown squasher kind {self.kind!r}")
        if self.kind == "custom" and not (self.fn and self.fn_d1 and self.fn_d2):
            raise InvalidConfigError("custom squasher needs fn, fn_d1 and fn_d2")

    def __call__(self, y):
        if self.kind == "scaled-tanh":
            return self.scale * np.tanh(y)
        if self.kind == "identity":
            return np.asarray(y, dtype=float)
        return self.fn(y)

    def d1(self, y):
        if self.kind == "scaled-tanh":
            t = np.tanh(y)
            return self.scale * (1.0 - t * t)
        if self.kind == "identity":
            return np.ones_like(np.asarray(y, dtype=float))
        return self.fn_d1(y)

    def d2(self, y):
        if self.kind == "scaled-tanh":
            t = np.tanh(y)
            return -2.0 * self.scale * t * (1.0 - t * t)
        if self.kind == "identity":
            return np.zeros_like(np.asarray(y, dtype=float))
        return self.fn_d2(y)

    def require_bounds(self) -> tuple[float, float, float]:
        """Return (bound, bound_d1, bound_d2), rejecting unbounded maps."""
        if self.bound is None or self.bound_d1 is None or self.bound_d2 is None:
            raise InvalidConfigError(f"squasher kind {self.kind!r} declares no usable bounds")
        return self.bound, self.bound_d1, self.bound_d2


def scaled_tanh(scale: float) -> Squasher:
    """a * tanh(y): amplitude a, slope bound a, curvature bound 4a/(3*sqrt(3))."""
    if not (math.isfinite(scale) and scale >= 0.0):
        raise InvalidConfigError(f"scaled-tanh scale must be finite and nonnegative, got {scale}")
    return Squasher(
        kind="scaled-tanh",
        scale=scale,
        bound=scale,
        bound_d1=scale,
        bound_d2=scale * TANH_D2_MAX,
    )


def identity_squasher() -> Squasher:
    """The identity map; unbounded amplitude, unit slope, zero curvature."""
    return Squasher(kind="identity", bound=None, bound_d1=1.0, bound_d2=0.0)


def custom_squasher(fn, fn_d1, fn_d2, bound, bound_d1, bound_d2) -> Squasher:
    return Squasher(
        kind="custom",
        bound=bound,
        bound_d1=bound_d1,
        bound_d2=bound_d2,
        fn=fn,
        fn_d1=fn_d1,
        fn_d2=fn_d2,
    )


def check_squasher_grid(sq: Squasher, lo=-30.0, hi=30.0, step=1e-3, slack=1e-12) -> bool:
    """Grid-check that |f|, |f'|, |f''| never exceed the declared bounds."""
    y = np.arange(lo, hi + step / 2, step)
    checks = []
    if sq.bound is not None:
        checks.append(np.max(np.abs(sq(y))) <= sq.bound + slack)
    if sq.bound_d1 is not None:
        checks.append(np.max(np.abs(sq.d1(y))) <= sq.bound_d1 + slack)
    if sq.bound_d2 is not None:
        checks.append(np.max(np.abs(sq.d2(y))) <= sq.bound_d2 + slack)
    return all(checks)


@dataclass(frozen=True)
class SquasherSpec:
    """The pair of squashing maps: ``phi`` on weights, ``lam`` on the readout."""

    phi: Squasher
    lam: Squasher

    # Declared-bound accessors used by the theory modules.
    @property
    def c_phi(self) -> float:
        return self.phi.require_bounds()[0]

    @property
    def c_phi1(self) -> float:
        return self.phi.require_bounds()[1]

    @property
    def c_phi2(self) -> float:
        return self.phi.require_bounds()[2]


def default_theory_squashers(phi_scale: float = 0.1, lam_scale: float = 1.0) -> SquasherSpec:
    """Bounded pair used by the stability/verification suites."""
    return SquasherSpec(phi=scaled_tanh(phi_scale), lam=scaled_tanh(lam_scale))


def experiment_squashers(phi_scale: float = 0.1) -> SquasherSpec:
    """Bounded weights, raw (identity) readout: the convention of the demos."""
    return SquasherSpec(phi=scaled_tanh(phi_scale), lam=identity_squasher())


@dataclass(frozen=True)
class ModelDims:
    """Sizes of the bounded architecture: hidden units, input and chain-latent dims."""

    n_hidden: int
    n_input: int
    n_latent: int = 0

    def __post_init__(self):
        if self.n_hidden < 1:
            raise InvalidConfigError(f"n_hidden must be >= 1, got {self.n_hidden}")
        if self.n_input < 1:
            raise InvalidConfigError(f"n_input must be >= 1, got {self.n_input}")
        if self.n_latent < 0:
            raise InvalidConfigError(f"n_latent must be >= 0, got {self.n_latent}")

    @property
    def n_params(self) -> int:
        n, d = self.n_hidden, self.n_input
        return n * d + n * n + n + 1


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class RnnParams:
    """Trainable weights (A, W, B, c).

    ``A``: input weights, trailing shape (N, d); ``W``: recurrent weights,
    trailing shape (N, N); ``B``: readout weights, trailing shape (N,);
    ``c``: readout offset (scalar, or an array for batched parameter sets).
    Leading batch dimensions are allowed and must agree across fields.
    """

    A: np.ndarray
    W: np.ndarray
    B: np.ndarray
    c: Union[float, np.ndarray]

    def __post_init__(self):
        object.__setattr__(self, "A", _readonly(self.A))
        object.__setattr__(self, "W", _readonly(self.W))
        object.__setattr__(self, "B", _readonly(self.B))
        if isinstance(self.c, np.ndarray):
            object.__setattr__(self, "c", _readonly(self.c))
        else:
            object.__setattr__(self, "c", float(self.c))
        n, d = self.A.shape[-2:]
        if self.W.shape[-2:] != (n, n):
            raise DimensionMismatchError("W", (n, n), self.W.shape[-2:])
        if self.B.shape[-1] != n:
            raise DimensionMismatchError("B", n, self.B.shape[-1])

    @property
    def dims(self) -> ModelDims:
        n, d = self.A.shape[-2:]
        return ModelDims(n_hidden=n, n_input=d)

    @property
    def batch_shape(self) -> tuple:
        return self.A.shape[:-2]


def random_params(dims: ModelDims, rng: np.random.Generator, scale: float = 1.0,
                  batch: tuple = ()) -> RnnParams:
    n, d = dims.n_hidden, dims.n_input
    return RnnParams(
        A=scale * rng.standard_normal(batch + (n, d)),
        W=scale * rng.standard_normal(batch + (n, n)),
        B=scale * rng.standard_normal(batch + (n,)),
        c=scale * rng.standard_normal(batch) if batch else scale * rng.standard_normal(),
    )


def zero_params(dims: ModelDims) -> RnnParams:
    n, d = dims.n_hidden, dims.n_input
    return RnnParams(A=np.zeros((n, d)), W=np.zeros((n, n)), B=np.zeros(n), c=0.0)


# --- flattening conventions -------------------------------------------------
#
# theta = [vec(A); vec(W); B; c], where vec() stacks columns.  The flat index
# of A^{ij} (zero-based i, j) is j*N + i; the W block follows, then B, then c.


def flatten_params(params: RnnParams) -> np.ndarray:
    """Flatten a single (unbatched) parameter set into a vector of length n_params."""
    if params.batch_shape != ():
        raise DimensionMismatchError("batch", (), params.batch_shape)
    return np.concatenate([
        params.A.flatten(order="F"),
        params.W.flatten(order="F"),
        params.B,
        [params.c],
    ])


def unflatten_params(dims: ModelDims, theta: np.ndarray) -> RnnParams:
    theta = np.asarray(theta, dtype=float)
    n, d = dims.n_hidden, dims.n_input
    if theta.shape != (dims.n_params,):
        raise DimensionMismatchError("theta", (dims.n_params,), theta.shape)
    a_end = n * d
    w_end = a_end + n * n
    return RnnParams(
        A=theta[:a_end].reshape((n, d), order="F"),
        W=theta[a_end:w_end].reshape((n, n), order="F"),
        B=theta[w_end:w_end + n],
        c=float(theta[-1]),
    )


def flatten_index(dims: ModelDims, kind: str, i: int = 0, j: int = 0) -> int:
    """Flat offset of one labelled parameter entry (zero-based indices).

    ``kind`` is one of "A", "W", "B", "c".
    """
    n, d = dims.n_hidden, dims.n_input
    if kind == "A":
        if not (0 <= i < n and 0 <= j < d):
            raise IndexError(f"A index ({i},{j}) out of range for ({n},{d})")
        return j * n + i
    if kind == "W":
        if not (0 <= i < n and 0 <= j < n):
            raise IndexError(f"W index ({i},{j}) out of range for ({n},{n})")
        return n * d + j * n + i
    if kind == "B":
        if not 0 <= i < n:
            raise IndexError(f"B index {i} out of range for {n}")
        return n * d + n * n + i
    if kind == "c":
        return n * d + n * n + n
    raise IndexError(f"unknown parameter kind {kind!r}")


def index_label(dims: ModelDims, offset: int) -> tuple[str, int, int]:
    """Inverse of flatten_index: offset -> (kind, i, j); j is 0 for B and c."""
    n, d = dims.n_hidden, dims.n_input
    if not 0 <= offset < dims.n_params:
        raise IndexError(f"offset {offset} out of range for n_params={dims.n_params}")
    if offset < n * d:
        return ("A", offset % n, offset // n)
    offset -= n * d
    if offset < n * n:
        return ("W", offset % n, offset // n)
    offset -= n * n
    if offset < n:
        return ("B", offset, 0)
    return ("c", 0, 0)


# --- state update and prediction ---------------------------------------------


def _check_last(name: str, arr: np.ndarray, expected: int) -> np.ndarray:
    arr = np.asarray(arr, dtype=float)
    if arr.shape[-1] != expected:
        raise DimensionMismatchError(name, expected, arr.shape[-1])
    return arr


def preactivations(params: RnnParams, squash: SquasherSpec, s, x) -> np.ndarray:
    """Shared pre-activation vector: phi(A) x / d + phi(W) s / N."""
    n, d = params.A.shape[-2:]
    s = _check_last("hidden state", s, n)
    x = _check_last("input", x, d)
    phi = squash.phi
    zin = np.matmul(phi(params.A), x[..., None])[..., 0] / d
    zrec = np.matmul(phi(params.W), s[..., None])[..., 0] / n
    return zin + zrec


def rnn_step(params: RnnParams, squash: SquasherSpec, s, x, pre=None) -> np.ndarray:
    """One hidden-state update; every output component lies in (0, 1)."""
    z = preactivations(params, squash, s, x) if pre is None else pre
    return sigmoid(z)


def predict(params: RnnParams, squash: SquasherSpec, s) -> Union[float, np.ndarray]:
    """Scalar readout <lam(B), s> + lam(c)."""
    n = params.A.shape[-2]
    s = _check_last("hidden state", s, n)
    lam = squash.lam
    out = np.einsum("...i,...i->...", lam(params.B), s) + lam(params.c)
    return out if np.ndim(out) else float(out)


def squared_loss(y, yhat):
    """Half squared error."""
    r = np.asarray(y, dtype=float) - np.asarray(yhat, dtype=float)
    out = 0.5 * r * r
    return out if np.ndim(out) else float(out)
