"""Streaming trainers and metric recording.

One loop drives the forward-sensitivity trainer or the truncated
backpropagation trainer over a batched sample stream, recording per-step
loss, gradient norm and step size.  Metric files are plain CSV with a fixed
header and repr-formatted floats, so identical configurations produce
byte-identical files.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .architectures import GenericRtrlState, RecurrentModel, generic_rtrl_step, loss_head
from .errors import InvalidConfigError, NonFiniteError
from .optim import RmspropState, Schedule, rmsprop_apply


@dataclass
class TbpttState:
    """Streaming truncated-backpropagation trainer state.

    ``sliding`` mode keeps the last ``tau`` transition Jacobians and
    backpropagates every step's loss through them (cost and memory grow
    linearly with ``tau``).  ``chunked`` mode accumulates ``tau`` steps and
    performs one update per chunk, never crossing chunk boundaries.
    """

    model: RecurrentModel
    theta: np.ndarray
    s: np.ndarray
    head: object
    tau: int
    window_mode: str = "sliding"
    opt: Optional[RmspropState] = None
    t: int = 0
    last_grad: Optional[np.ndarray] = None
    _buffer: deque = field(default_factory=deque)
    _chunk: list = field(default_factory=list)

    @classmethod
    def fresh(cls, model: RecurrentModel, theta: np.ndarray, tau: int,
              head_kind: str = "squared", batch: tuple = (), **kwargs) -> "TbpttState":
        if tau < 1:
            raise InvalidConfigError(f"truncation window must be >= 1, got {tau}")
        return cls(
            model=model,
            theta=np.asarray(theta, dtype=float).copy(),
            s=np.zeros(batch + (model.state_dim,)),
            head=loss_head(head_kind),
            tau=tau,
            **kwargs,
        )


def _batch_mean(g: np.ndarray) -> np.ndarray:
    return g.mean(axis=tuple(range(g.ndim - 1))) if g.ndim > 1 else g


def _check_finite(g: np.ndarray, what: str, t: int) -> None:
    if not np.isfinite(g).all():
        finite = g[np.isfinite(g)]
        raise NonFiniteError(what, t, float(np.max(np.abs(finite))) if finite.size else float("nan"))


def _apply_update(state, g: np.ndarray, alpha: float) -> None:
    if state.opt is None:
        state.theta = state.theta - alpha * g
    else:
        state.theta, state.opt = rmsprop_apply(state.theta, g, alpha, state.opt)


def tbptt_train_step(state: TbpttState, x, y, alpha: float):
    """One streaming truncated-backpropagation step; returns per-sample loss.

    In chunked mode the parameter update fires once every ``tau`` steps with
    the averaged chunk gradient; other steps only advance the state.
    """
    model = state.model
    s_next, js, jp = model.step_with_jacobians(state.theta, state.s, x)
    f, dfs, dfp = model.readout(state.theta, s_next)
    loss, dldf = state.head.loss_and_grad(y, f)

    g = np.einsum("...k,...kp->...p", dldf, dfp)
    adj = np.einsum("...k,...kn->...n", dldf, dfs)
    if state.window_mode == "sliding":
        state._buffer.append((js, jp))
        if len(state._buffer) > state.tau:
            state._buffer.popleft()
        for js_k, jp_k in reversed(state._buffer):
            g = g + np.einsum("...n,...np->...p", adj, jp_k)
            adj = np.einsum("...n,...nm->...m", adj, js_k)
        g = _batch_mean(g)
        _check_finite(g, "gradient", state.t)
        state.last_grad = g
        _apply_update(state, g, alpha)
    elif state.window_mode == "chunked":
        state._chunk.append((js, jp, g, adj))
        if len(state._chunk) == state.tau:
            total = np.zeros(model.n_params)
            carry = None
            for js_k, jp_k, g_k, adj_k in reversed(state._chunk):
                total += _batch_mean(g_k)
                adj_total = adj_k if carry is None else adj_k + carry
                total += _batch_mean(np.einsum("...n,...np->...p", adj_total, jp_k))
                carry = np.einsum("...n,...nm->...m", adj_total, js_k)
            total /= state.tau
            _check_finite(total, "gradient", state.t)
            state.last_grad = total
            _apply_update(state, total, alpha)
            state._chunk.clear()
    else:
        raise InvalidConfigError(f"unknown window_mode {state.window_mode!r}")

    state.s = s_next
    state.t += 1
    return loss


@dataclass
class TrainLog:
    """Per-step traces plus the termination status."""

    losses: np.ndarray
    gradnorms: np.ndarray
    alphas: np.ndarray
    status: str  # "ok" | "nonfinite"
    steps_done: int


def run_training(state, stream, schedule: Schedule, steps: int) -> TrainLog:
    """Drive a trainer state over a stream for a fixed number of steps.

    ``state`` is a GenericRtrlState or TbpttState.  Stops early (with status
    "nonfinite") if a step aborts on a non-finite gradient or loss.
    """
    losses = np.empty(steps)
    gradnorms = np.empty(steps)
    alphas = np.empty(steps)
    step_fn = generic_rtrl_step if isinstance(state, GenericRtrlState) else tbptt_train_step
    done = 0
    status = "ok"
    for t in range(steps):
        x, y = stream.next()
        alpha = schedule.rate(t)
        try:
            loss = step_fn(state, x, y, alpha)
        except NonFiniteError:
            status = "nonfinite"
            break
        mean_loss = float(np.mean(loss))
        if not np.isfinite(mean_loss):
            status = "nonfinite"
            break
        losses[t] = mean_loss
        gradnorms[t] = float(np.linalg.norm(state.last_grad)) if state.last_grad is not None else 0.0
        alphas[t] = alpha
        done = t + 1
    return TrainLog(losses=losses[:done], gradnorms=gradnorms[:done], alphas=alphas[:done],
                    status=status, steps_done=done)


METRIC_HEADER = "step,loss,log10_loss,gradnorm,alpha"


def write_metrics(path, log: TrainLog, flush_interval: int = 100) -> None:
    """Write interval-averaged metric rows; floats use repr for determinism."""
    if flush_interval < 1:
        raise InvalidConfigError(f"flush_interval must be >= 1, got {flush_interval}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [METRIC_HEADER]
    n = log.steps_done
    for start in range(0, n, flush_interval):
        stop = min(start + flush_interval, n)
        loss = float(np.mean(log.losses[start:stop]))
        grad = float(np.mean(log.gradnorms[start:stop]))
        alpha = float(log.alphas[stop - 1])
        log10_loss = float(np.log10(loss)) if loss > 0.0 else float("-inf")
        lines.append(f"{stop},{loss!r},{log10_loss!r},{grad!r},{alpha!r}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_metrics(path) -> dict:
    """Parse a metric file back into named float arrays."""
    try:
        text = Path(path).read_text(encoding="utf-8").strip().splitlines()
    except FileNotFoundError:
        raise InvalidConfigError(f"metrics file not found: {path}") from None
    if not text or text[0] != METRIC_HEADER:
        raise InvalidConfigError(f"not a metrics file: {path}")
    cols = {name: [] for name in METRIC_HEADER.split(",")}
    for line in text[1:]:
        for name, value in zip(cols, line.split(",")):
            cols[name].append(float(value))
    return {name: np.array(vals) for name, vals in cols.items()}
