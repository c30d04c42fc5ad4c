"""Streaming data sources.

Bounded contractive Markov chains with a Lipschitz observation map, the
synthetic teacher processes used by the demo experiments, Wishart matrix
sampling, and character-stream ingestion for next-character prediction.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional, Union

import numpy as np

from .errors import DimensionMismatchError, InvalidConfigError
from .model import _readonly


# --- bounded contractive chain ------------------------------------------------


@dataclass(frozen=True)
class ChainConfig:
    """A max-norm contractive map plus bounded i.i.d. noise.

    The map keeps values inside [-1/2, 1/2] and has max-norm Lipschitz
    constant at most ``lip``; the noise is uniform on
    [-noise_scale/2, noise_scale/2] per component.  Every iterate then stays
    inside the unit max-norm ball.
    """

    kind: str  # "affine-clamp" | "scaled-tanh"
    weights: np.ndarray  # (m, m)
    offset: np.ndarray  # (m,)
    lip: float
    noise_scale: float
    n_obs: int
    n_latent: int
    init: np.ndarray

    def __post_init__(self):
        m = self.n_obs + self.n_latent
        object.__setattr__(self, "weights", _readonly(self.weights))
        object.__setattr__(self, "offset", _readonly(self.offset))
        object.__setattr__(self, "init", _readonly(self.init))
        if self.kind not in ("affine-clamp", "scaled-tanh"):
            raise InvalidConfigError(f"unknown chain kind {self.kind!r}")
        if not 0.0 <= self.lip < 1.0:
            raise InvalidConfigError(f"contraction rate must lie in [0, 1), got {self.lip}")
        if not 0.0 <= self.noise_scale <= 1.0:
            raise InvalidConfigError(f"noise_scale must lie in [0, 1], got {self.noise_scale}")
        if self.weights.shape != (m, m):
            raise DimensionMismatchError("chain weights", (m, m), self.weights.shape)
        if self.offset.shape != (m,):
            raise DimensionMismatchError("chain offset", (m,), self.offset.shape)
        if self.init.shape != (m,):
            raise DimensionMismatchError("chain init", (m,), self.init.shape)
        if np.max(np.abs(self.init)) > 1.0:
            raise InvalidConfigError("chain init must lie in the unit max-norm ball")
        # Row L1 norms bound the max-norm Lipschitz constant of the map.
        row_l1 = np.abs(self.weights).sum(axis=1)
        amp = 0.5 if self.kind == "scaled-tanh" else 1.0
        if np.any(amp * row_l1 > self.lip + 1e-12):
            raise InvalidConfigError("map weights exceed the declared contraction rate")
        if self.kind == "affine-clamp" and np.max(np.abs(self.offset)) > 0.5:
            raise InvalidConfigError("affine offset must keep |g| <= 1/2")

    @property
    def dim(self) -> int:
        return self.n_obs + self.n_latent


def make_chain(kind: str, n_obs: int, n_latent: int, lip: float,
               rng: np.random.Generator, noise_scale: float = 1.0) -> ChainConfig:
    """Draw a random map of the requested family with contraction rate ``lip``."""
    m = n_obs + n_latent
    raw = rng.standard_normal((m, m))
    row_l1 = np.abs(raw).sum(axis=1, keepdims=True)
    if kind == "scaled-tanh":
        # g(u) = (1/2) tanh(M u) with rows scaled so (1/2) ||M_i||_1 = lip.
        weights = raw / row_l1 * (2.0 * lip)
        offset = np.zeros(m)
    elif kind == "affine-clamp":
        weights = raw / row_l1 * lip
        offset = rng.uniform(-0.25, 0.25, size=m)
    else:
        raise InvalidConfigError(f"unknown chain kind {kind!r}")
    init = rng.uniform(-1.0, 1.0, size=m)
    return ChainConfig(
        kind=kind,
        weights=weights,
        offset=offset,
        lip=lip,
        noise_scale=noise_scale,
        n_obs=n_obs,
        n_latent=n_latent,
        init=init,
    )


def chain_map(cfg: ChainConfig, state: np.ndarray) -> np.ndarray:
    """The deterministic part g of the transition; |g| <= 1/2 componentwise."""
    state = np.asarray(state, dtype=float)
    if state.shape[-1] != cfg.dim:
        raise DimensionMismatchError("chain state", cfg.dim, state.shape[-1])
    pre = np.einsum("ij,...j->...i", cfg.weights, state)
    if cfg.kind == "scaled-tanh":
        return 0.5 * np.tanh(pre)
    return np.clip(pre + cfg.offset, -0.5, 0.5)


def chain_noise(cfg: ChainConfig, rng: np.random.Generator, batch: tuple = ()) -> np.ndarray:
    return rng.uniform(-cfg.noise_scale / 2.0, cfg.noise_scale / 2.0, size=batch + (cfg.dim,))


def chain_step_given(cfg: ChainConfig, state: np.ndarray, eps: np.ndarray) -> np.ndarray:
    """Deterministic transition given an explicit noise draw (coupling-friendly)."""
    return chain_map(cfg, state) + eps


def chain_step(cfg: ChainConfig, state: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """One random transition; output stays inside the unit max-norm ball."""
    state = np.asarray(state, dtype=float)
    return chain_step_given(cfg, state, chain_noise(cfg, rng, batch=state.shape[:-1]))


def split_observed(cfg: ChainConfig, state: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Split a chain state into its observed and latent blocks."""
    return state[..., :cfg.n_obs], state[..., cfg.n_obs:]


@dataclass(frozen=True)
class OutputMap:
    """Bounded Lipschitz observation y = gain * tanh(<w, (x, z)>) + offset + eta."""

    w: np.ndarray
    gain: float
    noise_scale: float = 0.0
    offset: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "w", _readonly(self.w))

    def noise(self, rng: np.random.Generator, batch: tuple = ()):
        if self.noise_scale == 0.0:
            return np.zeros(batch) if batch else 0.0
        return rng.uniform(-self.noise_scale / 2.0, self.noise_scale / 2.0, size=batch or None)

    def observe(self, xz: np.ndarray, eta) -> np.ndarray:
        return self.gain * np.tanh(np.einsum("j,...j->...", self.w, xz)) + self.offset + eta


def make_output_map(dim: int, rng: np.random.Generator, gain: float = 0.5,
                    noise_scale: float = 0.1, offset: float = 0.0) -> OutputMap:
    w = rng.standard_normal(dim)
    w /= max(np.abs(w).sum(), 1e-12)
    return OutputMap(w=w, gain=gain, noise_scale=noise_scale, offset=offset)


# --- Wishart sampling ----------------------------------------------------------


def sample_wishart(dim: int, degree: int, rng: np.random.Generator) -> np.ndarray:
    """Sum of ``degree`` outer products of i.i.d. standard normal vectors.

    Exactly symmetric by construction; eigenvalues are nonnegative.
    """
    if degree < 1:
        raise InvalidConfigError(f"degree must be >= 1, got {degree}")
    g = rng.standard_normal((dim, degree))
    return np.einsum("ik,jk->ij", g, g)


# --- synthetic teachers ---------------------------------------------------------


def _activation(kind: str):
    if kind == "tanh":
        return np.tanh
    if kind == "relu":
        return lambda v: np.maximum(v, 0.0)
    if kind == "elu":
        return lambda v: np.where(v > 0.0, v, np.expm1(v))
    if kind == "identity":
        return lambda v: np.asarray(v, dtype=float)
    raise InvalidConfigError(f"unknown activation {kind!r}")


@dataclass(frozen=True)
class TeacherSpec:
    """Ground-truth generator for one of the demo experiments.

    ``w_rec`` is the effective recurrent matrix: the drift matrix for the
    linear kind, the full recurrent weight for the elman kind, and the
    positive-definite decay matrix for the neural-sde kind (whose drift
    weights live in ``w_drift``).
    """

    kind: str  # "linear-rnn" | "elman" | "neural-sde"
    w_rec: np.ndarray  # (N, N)
    w_in: np.ndarray  # (N, d)
    w_out: np.ndarray  # (k, N) readout
    w_drift: Optional[np.ndarray] = None  # (N, N), neural-sde only
    delta: float = 1e-2
    activation: str = "tanh"
    input_std: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "w_rec", _readonly(self.w_rec))
        object.__setattr__(self, "w_in", _readonly(self.w_in))
        object.__setattr__(self, "w_out", _readonly(self.w_out))
        if self.w_drift is not None:
            object.__setattr__(self, "w_drift", _readonly(self.w_drift))
        if self.kind not in ("linear-rnn", "elman", "neural-sde"):
            raise InvalidConfigError(f"unknown teacher kind {self.kind!r}")
        if self.kind == "neural-sde" and self.w_drift is None:
            raise InvalidConfigError("neural-sde teacher needs w_drift")
        if self.kind in ("linear-rnn", "neural-sde") and not self.delta > 0.0:
            raise InvalidConfigError(f"delta must be positive, got {self.delta}")

    @property
    def n_state(self) -> int:
        return self.w_rec.shape[-1]

    @property
    def n_input(self) -> int:
        return self.w_in.shape[-1]


def teacher_step(spec: TeacherSpec, s: np.ndarray, x: np.ndarray):
    """Advance the teacher one step and emit the target.

    Returns (s_next, y) where y has the readout's leading dimension (squeezed
    to a scalar array when the readout is a single row).
    """
    s = np.asarray(s, dtype=float)
    x = np.asarray(x, dtype=float)
    if s.shape[-1] != spec.n_state:
        raise DimensionMismatchError("teacher state", spec.n_state, s.shape[-1])
    if x.shape[-1] != spec.n_input:
        raise DimensionMismatchError("teacher input", spec.n_input, x.shape[-1])
    rec = np.einsum("ij,...j->...i", spec.w_rec, s)
    inp = np.einsum("ij,...j->...i", spec.w_in, x)
    if spec.kind == "linear-rnn":
        s_next = s + rec * spec.delta + inp * np.sqrt(spec.delta)
    elif spec.kind == "elman":
        act = _activation(spec.activation)
        s_next = act(rec + inp)
    else:  # neural-sde
        act = _activation(spec.activation)
        drift = act(np.einsum("ij,...j->...i", spec.w_drift, s) + inp)
        s_next = s - drift * spec.delta - rec * spec.delta
    y = np.einsum("kj,...j->...k", spec.w_out, s_next)
    if spec.w_out.shape[0] == 1:
        y = y[..., 0]
    return s_next, y


def sample_teacher(kind: str, n_state: int, n_input: int, rng: np.random.Generator, *,
                   delta: float = 1e-2, activation: str = "tanh", elman_c: float = 1e-3,
                   w_in_std: float = 1.0, input_std: float = 1.0,
                   wishart_degree: int = 20) -> TeacherSpec:
    """Draw teacher weights following the demo conventions.

    ``w_in_std`` scales the input-weight entries; ``input_std`` is the
    standard deviation of the Gaussian inputs fed to the teacher.  The
    Wishart draw is negated for the linear kind (and enters elman as
    I - c * draw) so the teacher state recursion is stable.
    """
    wish = sample_wishart(n_state, wishart_degree, rng)
    w_in = w_in_std * rng.standard_normal((n_state, n_input))
    w_out = rng.standard_normal((1, n_state))
    if kind == "linear-rnn":
        return TeacherSpec(kind=kind, w_rec=-wish, w_in=w_in, w_out=w_out,
                           delta=delta, activation="identity", input_std=input_std)
    if kind == "elman":
        w_rec = np.eye(n_state) - elman_c * wish
        return TeacherSpec(kind=kind, w_rec=w_rec, w_in=w_in, w_out=w_out,
                           delta=delta, activation=activation, input_std=input_std)
    if kind == "neural-sde":
        w_drift = rng.standard_normal((n_state, n_state))
        return TeacherSpec(kind=kind, w_rec=wish, w_in=w_in, w_out=w_out,
                           w_drift=w_drift, delta=delta, activation=activation,
                           input_std=input_std)
    raise InvalidConfigError(f"unknown teacher kind {kind!r}")


# --- character streams ----------------------------------------------------------


@dataclass(frozen=True)
class CharVocab:
    chars: tuple[str, ...]

    @property
    def size(self) -> int:
        return len(self.chars)

    def index(self, ch: str) -> int:
        try:
            return self._lookup[ch]
        except KeyError:
            raise InvalidConfigError(f"character {ch!r} outside the fixed vocabulary") from None

    def __post_init__(self):
        object.__setattr__(self, "_lookup", {c: i for i, c in enumerate(self.chars)})


def build_vocab(text: str) -> CharVocab:
    """Deterministic vocabulary: sorted unique characters."""
    if not text:
        raise InvalidConfigError("cannot build a vocabulary from empty text")
    return CharVocab(chars=tuple(sorted(set(text))))


def encode_text(text: str, vocab: CharVocab) -> np.ndarray:
    return np.array([vocab.index(c) for c in text], dtype=np.int64)


def char_stream(path: Union[str, Path], vocab: Optional[CharVocab] = None
                ) -> Iterator[tuple[np.ndarray, int]]:
    """Yield (one-hot current char, next-char class) pairs from a text file.

    The stream has length len(text) - 1.  With a supplied vocabulary, any
    character outside it is an error.
    """
    text = Path(path).read_text(encoding="utf-8")
    if not text:
        raise InvalidConfigError(f"empty corpus file: {path}")
    if vocab is None:
        vocab = build_vocab(text)
    codes = encode_text(text, vocab)
    eye = np.eye(vocab.size)
    for t in range(len(codes) - 1):
        yield eye[codes[t]], int(codes[t + 1])


# --- batched streams for the trainers --------------------------------------------


class TeacherStream:
    """Mini-batch of independent teacher sequences with Gaussian inputs.

    One generator drives the whole batch; distinct stream ids derive distinct
    generators (seed xor id) so parallel streams never share draws.  The
    teacher state is burnt in so emissions start near stationarity.
    """

    def __init__(self, spec: TeacherSpec, batch: int, seed: int, stream_id: int = 0,
                 burn_in: int = 1000):
        self.spec = spec
        self.batch = batch
        self.rng = np.random.default_rng(seed ^ (0x9E3779B9 * (stream_id + 1)))
        self.state = np.zeros((batch, spec.n_state))
        for _ in range(burn_in):
            x = spec.input_std * self.rng.standard_normal((batch, spec.n_input))
            self.state, _ = teacher_step(spec, self.state, x)

    def next(self) -> tuple[np.ndarray, np.ndarray]:
        x = self.spec.input_std * self.rng.standard_normal((self.batch, self.spec.n_input))
        self.state, y = teacher_step(self.spec, self.state, x)
        return x, y


class ChainStream:
    """Mini-batch of independent bounded chains plus the observation map."""

    def __init__(self, chain: ChainConfig, out_map: OutputMap, batch: int, seed: int,
                 stream_id: int = 0, burn_in: int = 100):
        self.chain = chain
        self.out_map = out_map
        self.batch = batch
        self.rng = np.random.default_rng(seed ^ (0x9E3779B9 * (stream_id + 1)))
        self.state = np.broadcast_to(chain.init, (batch, chain.dim)).copy()
        for _ in range(burn_in):
            self.state = chain_step(self.chain, self.state, self.rng)

    def next(self) -> tuple[np.ndarray, np.ndarray]:
        self.state = chain_step(self.chain, self.state, self.rng)
        eta = self.out_map.noise(self.rng, batch=(self.batch,))
        y = self.out_map.observe(self.state, eta)
        x, _ = split_observed(self.chain, self.state)
        return x.copy(), y


class CharCursorStream:
    """Mini-batch of evenly spaced wrapping cursors over an encoded corpus."""

    def __init__(self, codes: np.ndarray, vocab_size: int, batch: int):
        if len(codes) < 2:
            raise InvalidConfigError("corpus must contain at least two characters")
        self.codes = np.asarray(codes, dtype=np.int64)
        self.vocab_size = vocab_size
        self.batch = batch
        span = len(codes) - 1
        self.cursors = (np.arange(batch) * (span // max(batch, 1))) % span
        self._eye = np.eye(vocab_size)

    def next(self) -> tuple[np.ndarray, np.ndarray]:
        x = self._eye[self.codes[self.cursors]]
        y = self.codes[self.cursors + 1]
        self.cursors = (self.cursors + 1) % (len(self.codes) - 1)
        return x, y
