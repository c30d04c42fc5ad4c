"""Ground-truth gradient computations for fixed parameters.

Full reverse accumulation through the unrolled recursion, per-step truncated
backpropagation, central finite differences, and re-simulation estimates of
the forward sensitivities.  These define correctness for the streaming
trainer: at fixed parameters the time-averaged online gradient must equal
the fully unrolled gradient to near machine precision.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .architectures import RecurrentModel, loss_head
from .errors import InvalidConfigError, NonFiniteError


@dataclass(frozen=True)
class Trajectory:
    """A finite observation window.

    ``inputs`` has shape (T, d); ``targets`` has length T and pairs with the
    state reached after consuming the input of the same index; ``s0`` is the
    initial state.
    """

    inputs: np.ndarray
    targets: np.ndarray
    s0: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "inputs", np.asarray(self.inputs, dtype=float))
        object.__setattr__(self, "s0", np.asarray(self.s0, dtype=float))
        targets = np.asarray(self.targets)
        if not np.issubdtype(targets.dtype, np.integer):
            targets = targets.astype(float)
        object.__setattr__(self, "targets", targets)
        if len(self.inputs) != len(self.targets):
            raise InvalidConfigError(
                f"inputs ({len(self.inputs)}) and targets ({len(self.targets)}) must align")
        if len(self.inputs) < 1:
            raise InvalidConfigError("trajectory must contain at least one observation")
        if not np.isfinite(self.inputs).all() or not np.isfinite(self.s0).all():
            raise InvalidConfigError("trajectory entries must be finite")
        if targets.dtype.kind == "f" and not np.isfinite(targets).all():
            raise InvalidConfigError("trajectory targets must be finite")

    @property
    def horizon(self) -> int:
        return len(self.inputs)


def simulate_states(model: RecurrentModel, theta: np.ndarray, traj: Trajectory) -> np.ndarray:
    """States s_0 .. s_T; aborts with the step index on a non-finite state."""
    t_len = traj.horizon
    states = np.empty((t_len + 1, model.state_dim))
    states[0] = traj.s0
    for t in range(t_len):
        states[t + 1] = model.step(theta, states[t], traj.inputs[t])
        if not np.isfinite(states[t + 1]).all():
            finite = states[t + 1][np.isfinite(states[t + 1])]
            raise NonFiniteError("state", t,
                                 float(np.max(np.abs(finite))) if finite.size else float("nan"))
    return states


def trajectory_loss(model: RecurrentModel, theta: np.ndarray, traj: Trajectory,
                    head_kind: str = "squared") -> float:
    """Average per-step loss (1/T) sum_t loss(y_t, f(s_t))."""
    head = loss_head(head_kind)
    states = simulate_states(model, theta, traj)
    total = 0.0
    for t in range(traj.horizon):
        f, _, _ = model.readout(theta, states[t + 1])
        loss, _ = head.loss_and_grad(traj.targets[t], f)
        total += float(loss)
    return total / traj.horizon


def full_bptt_gradient(model: RecurrentModel, theta: np.ndarray, traj: Trajectory,
                       head_kind: str = "squared") -> np.ndarray:
    """Exact gradient of the average loss by reverse accumulation.

    The whole recursion is unrolled; the per-step Jacobians come from the
    model's hand-derived contract, not an autodiff framework.
    """
    head = loss_head(head_kind)
    t_len = traj.horizon
    theta = np.asarray(theta, dtype=float)
    states = np.empty((t_len + 1, model.state_dim))
    states[0] = traj.s0
    js_list, jp_list = [], []
    for t in range(t_len):
        s_next, js, jp = model.step_with_jacobians(theta, states[t], traj.inputs[t])
        if not np.isfinite(s_next).all():
            finite = s_next[np.isfinite(s_next)]
            raise NonFiniteError("state", t,
                                 float(np.max(np.abs(finite))) if finite.size else float("nan"))
        states[t + 1] = s_next
        js_list.append(np.broadcast_to(js, (model.state_dim, model.state_dim)))
        jp_list.append(jp)

    grad = np.zeros(model.n_params)
    adj = np.zeros(model.state_dim)  # d(total loss)/d(s_{t+1}), built backwards
    for t in range(t_len - 1, -1, -1):
        f, dfs, dfp = model.readout(theta, states[t + 1])
        _, dldf = head.loss_and_grad(traj.targets[t], f)
        adj = adj + dldf @ dfs
        grad += dldf @ dfp
        grad += adj @ jp_list[t]
        adj = adj @ js_list[t]
    return grad / t_len


def tbptt_gradient(model: RecurrentModel, theta: np.ndarray, traj: Trajectory,
                   tau: int, head_kind: str = "squared",
                   window_mode: str = "sliding") -> np.ndarray:
    """Truncated-backpropagation gradient.

    ``sliding`` (default): every loss term backpropagates through at most
    ``tau`` state transitions, the state beyond the window treated as
    constant.  ``chunked``: the horizon is cut into consecutive blocks of
    ``tau`` steps and gradients never cross a block boundary.
    """
    if tau < 1:
        raise InvalidConfigError(f"truncation window must be >= 1, got {tau}")
    if window_mode not in ("sliding", "chunked"):
        raise InvalidConfigError(f"unknown window_mode {window_mode!r}")
    head = loss_head(head_kind)
    t_len = traj.horizon
    theta = np.asarray(theta, dtype=float)
    states = np.empty((t_len + 1, model.state_dim))
    states[0] = traj.s0
    js_list, jp_list = [], []
    for t in range(t_len):
        s_next, js, jp = model.step_with_jacobians(theta, states[t], traj.inputs[t])
        states[t + 1] = s_next
        js_list.append(np.broadcast_to(js, (model.state_dim, model.state_dim)))
        jp_list.append(jp)

    grad = np.zeros(model.n_params)
    for t in range(t_len):
        f, dfs, dfp = model.readout(theta, states[t + 1])
        _, dldf = head.loss_and_grad(traj.targets[t], f)
        grad += dldf @ dfp
        adj = dldf @ dfs
        if window_mode == "sliding":
            back_limit = max(t - tau + 1, 0)
        else:
            back_limit = (t // tau) * tau
        for k in range(t, back_limit - 1, -1):
            grad += adj @ jp_list[k]
            adj = adj @ js_list[k]
    return grad / t_len


def finite_difference_gradient(model: RecurrentModel, theta: np.ndarray, traj: Trajectory,
                               h: float = 1e-5, head_kind: str = "squared") -> np.ndarray:
    """Central differences of the average loss, one full re-simulation per side."""
    if h <= 0.0:
        raise InvalidConfigError(f"finite-difference step must be positive, got {h}")
    theta = np.asarray(theta, dtype=float)
    grad = np.empty(model.n_params)
    for c in range(model.n_params):
        e = np.zeros(model.n_params)
        e[c] = h
        up = trajectory_loss(model, theta + e, traj, head_kind)
        dn = trajectory_loss(model, theta - e, traj, head_kind)
        grad[c] = (up - dn) / (2.0 * h)
    return grad


def resimulation_sensitivity(model: RecurrentModel, theta: np.ndarray, traj: Trajectory,
                             t: int, h: float = 1e-5) -> np.ndarray:
    """Finite-difference estimate of d(s_t)/d(theta) by re-running the recursion."""
    if not 0 <= t <= traj.horizon:
        raise InvalidConfigError(f"step index {t} outside [0, {traj.horizon}]")
    theta = np.asarray(theta, dtype=float)
    out = np.empty((model.state_dim, model.n_params))
    for c in range(model.n_params):
        e = np.zeros(model.n_params)
        e[c] = h
        up = simulate_states(model, theta + e, traj)[t]
        dn = simulate_states(model, theta - e, traj)[t]
        out[:, c] = (up - dn) / (2.0 * h)
    return out


def long_memory_fixture(seed: int = 0, n_state: int = 4, n_input: int = 2,
                        horizon: int = 50, w_scale: float = 5.0):
    """Linear model plus teacher-generated targets with slowly decaying memory.

    Returns (model, theta, trajectory).  The teacher drift keeps the
    one-step state multiplier close to the identity, so truncated
    backpropagation is visibly biased at small windows and its error
    decreases as the window grows.
    """
    from .architectures import LinearRnn
    from .datagen import TeacherSpec, teacher_step

    rng = np.random.default_rng(seed)
    model = LinearRnn(n_state, n_input, delta=1e-2)
    w_star = -w_scale * (np.eye(n_state) + 0.1 * rng.standard_normal((n_state, n_state)))
    spec = TeacherSpec(kind="linear-rnn", w_rec=w_star,
                       w_in=rng.standard_normal((n_state, n_input)),
                       w_out=rng.standard_normal((1, n_state)),
                       delta=1e-2, activation="identity")
    s = np.zeros(n_state)
    xs = np.empty((horizon, n_input))
    ys = np.empty(horizon)
    for t in range(horizon):
        xs[t] = rng.standard_normal(n_input)
        s, ys[t] = teacher_step(spec, s, xs[t])
    traj = Trajectory(inputs=xs, targets=ys, s0=np.zeros(n_state))
    theta = model.pack({
        "W": -1.5 * w_scale * np.eye(n_state) + 0.05 * rng.standard_normal((n_state, n_state)),
        "B": rng.standard_normal((n_state, n_input)),
        "A": rng.standard_normal((1, n_state)),
    })
    return model, theta, traj


def rtrl_average_gradient(model: RecurrentModel, theta: np.ndarray, traj: Trajectory,
                          head_kind: str = "squared") -> np.ndarray:
    """Time-averaged online gradient at fixed parameters.

    Runs the forward-sensitivity recursion along the trajectory and averages
    the per-step gradient estimates; equals the fully unrolled gradient.
    """
    head = loss_head(head_kind)
    theta = np.asarray(theta, dtype=float)
    s = traj.s0.copy()
    sens = np.zeros((model.state_dim, model.n_params))
    grad = np.zeros(model.n_params)
    for t in range(traj.horizon):
        s, js, jp = model.step_with_jacobians(theta, s, traj.inputs[t])
        sens = js @ sens + jp
        f, dfs, dfp = model.readout(theta, s)
        _, dldf = head.loss_and_grad(traj.targets[t], f)
        grad += dldf @ (dfs @ sens + dfp)
    return grad / traj.horizon
