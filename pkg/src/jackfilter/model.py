"""Continuous-discrete stochastic models.

A model couples a deterministic drift ``dx = f(t, x; p) dt`` on ``n`` state
components with ``p`` constant parameters and a measurement map ``h``.
Parameters are carried as extra state components with zero drift, so the
augmented vector is ``(x, p)`` of length ``n + p``. Process noise enters at
measurement times only::

    x(t_k) = F(t_k, x(t_{k-1})) + sqrt(Q * dt_k) * N(0, 1)
    y_k    = h(x(t_k)) + sqrt(R) * N(0, 1)
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import NonFiniteState, NotPSD
from .numkit import RngHandle, as_sym, is_psd, matrix_sqrt

DEFAULT_H_MAX = 0.05


@dataclass(frozen=True)
class ModelSpec:
    """Deterministic structure of a model.

    ``drift(t, x, params)`` returns dx/dt for the ``state_dim`` state
    components. ``observe(X)`` maps a ``(k, state_dim)`` array of states to a
    ``(k, output_dim)`` array of outputs; wrap scalar functions with
    :func:`rowwise`. ``closed_form(times, t0, x0, params)`` is optional and
    returns the exact flow as a ``(len(times), state_dim)`` array.
    ``batch_flow(tau, X, P)`` is an optional vectorised closed form that
    carries many states ``X`` with parameters ``P`` (one row each) forward
    by ``tau``.
    """

    name: str
    state_dim: int
    param_dim: int
    output_dim: int
    drift: Callable
    observe: Callable
    closed_form: Optional[Callable] = None
    batch_flow: Optional[Callable] = None
    initial_guess: Optional[Callable] = None
    bounds: Optional[tuple] = None
    h_max: float = DEFAULT_H_MAX
    param_names: tuple = field(default_factory=tuple)

    @property
    def dim(self) -> int:
        return self.state_dim + self.param_dim

    def split(self, values):
        values = np.asarray(values, dtype=float)
        return values[: self.state_dim], values[self.state_dim:]


@dataclass(frozen=True)
class ThetaVector:
    """Augmented state ``(x(T), params)`` anchored at time ``anchor_time``."""

    anchor_time: float
    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "values", np.asarray(self.values, dtype=float).ravel())


@dataclass(frozen=True)
class Measurement:
    t: float
    y: np.ndarray


class MeasurementLog:
    """Measurements with strictly increasing times, stored as arrays."""

    def __init__(self, times, ys):
        self.times = np.asarray(times, dtype=float).ravel()
        ys = np.asarray(ys, dtype=float)
        if ys.ndim == 1:
            ys = ys[:, None]
        self.ys = ys
        if self.ys.shape[0] != self.times.shape[0]:
            raise ValueError("times and outputs differ in length")
        if np.any(np.diff(self.times) <= 0):
            bad = int(np.argmax(np.diff(self.times) <= 0)) + 2
            raise ValueError(f"times must be strictly increasing (row {bad})")

    def __len__(self):
        return self.times.shape[0]

    def __getitem__(self, i) -> Measurement:
        return Measurement(float(self.times[i]), self.ys[i].copy())

    def head(self, n: int) -> "MeasurementLog":
        return MeasurementLog(self.times[:n], self.ys[:n])

    @property
    def output_dim(self) -> int:
        return self.ys.shape[1]


def rowwise(h: Callable) -> Callable:
    """Lift a single-state measurement function to the vectorised form."""

    def observe(states):
        states = np.atleast_2d(states)
        return np.array([np.atleast_1d(h(s)) for s in states], dtype=float)

    return observe


def _rk4(model: ModelSpec, x, params, t0: float, times, h_max: float) -> np.ndarray:
    out = np.empty((len(times), model.state_dim))
    x = np.array(x, dtype=float)
    t = t0
    for i, target in enumerate(times):
        span = target - t
        if span != 0.0:
            steps = max(1, math.ceil(abs(span) / h_max))
            h = span / steps
            for _ in range(steps):
                k1 = model.drift(t, x, params)
                k2 = model.drift(t + h / 2, x + h / 2 * k1, params)
                k3 = model.drift(t + h / 2, x + h / 2 * k2, params)
                k4 = model.drift(t + h, x + h * k3, params)
                x = x + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
                t = t + h
            t = target
        out[i] = x
    return out


def evolve_many(model: ModelSpec, theta: ThetaVector, times, *, h_max=None,
                use_closed_form: bool = True) -> np.ndarray:
    """Deterministic flow of ``theta``'s state part to each of ``times``.

    Returns a ``(len(times), state_dim)`` array. Times at the anchor return
    the anchor state exactly. Without a closed form, fixed-step RK4 is run
    separately forward and backward from the anchor.
    """
    times = np.atleast_1d(np.asarray(times, dtype=float))
    x0, params = model.split(theta.values)
    T = float(theta.anchor_time)
    if model.closed_form is not None and use_closed_form:
        with np.errstate(all="ignore"):
            out = np.asarray(model.closed_form(times, T, x0, params), dtype=float)
        out = out.reshape(len(times), model.state_dim)
        out[times == T] = x0
    else:
        h_max = model.h_max if h_max is None else h_max
        out = np.empty((len(times), model.state_dim))
        fwd = np.flatnonzero(times >= T)
        bwd = np.flatnonzero(times < T)
        with np.errstate(all="ignore"):
            if fwd.size:
                order = fwd[np.argsort(times[fwd], kind="stable")]
                out[order] = _rk4(model, x0, params, T, times[order], h_max)
            if bwd.size:
                order = bwd[np.argsort(-times[bwd], kind="stable")]
                out[order] = _rk4(model, x0, params, T, times[order], h_max)
    if not np.all(np.isfinite(out)):
        raise NonFiniteState(f"non-finite state evolving {model.name} from t={T}")
    return out


def evolve(model: ModelSpec, theta: ThetaVector, t_target: float, **kw) -> np.ndarray:
    """State part of ``theta`` carried to ``t_target`` (parameters held fixed)."""
    return evolve_many(model, theta, [t_target], **kw)[0]


def evolve_augmented(model: ModelSpec, theta: ThetaVector, t_target: float, **kw) -> np.ndarray:
    """Like :func:`evolve` but returns the full ``(x, params)`` vector."""
    _, params = model.split(theta.values)
    return np.concatenate([evolve(model, theta, t_target, **kw), params])


def predict_outputs(model: ModelSpec, theta: ThetaVector, times, **kw) -> np.ndarray:
    """``h(F(t, x(T)))`` for each time; shape ``(len(times), output_dim)``."""
    states = evolve_many(model, theta, times, **kw)
    return np.asarray(model.observe(states), dtype=float).reshape(len(states), model.output_dim)


def predict_output(model: ModelSpec, theta: ThetaVector, t: float, **kw) -> np.ndarray:
    return predict_outputs(model, theta, [t], **kw)[0]


def observe_augmented(model: ModelSpec, aug) -> np.ndarray:
    """Apply ``h`` to the state part of augmented vectors (rows)."""
    aug = np.atleast_2d(np.asarray(aug, dtype=float))
    return np.asarray(model.observe(aug[:, : model.state_dim]), dtype=float).reshape(
        aug.shape[0], model.output_dim)


def flow_jacobian(model: ModelSpec, theta: ThetaVector, t_target: float) -> np.ndarray:
    """Central-difference Jacobian of ``theta -> (F(t_target, x), params)``."""
    k = model.dim
    jac = np.empty((k, k))
    for i in range(k):
        step = 1e-6 * (1.0 + abs(theta.values[i]))
        up = theta.values.copy()
        dn = theta.values.copy()
        up[i] += step
        dn[i] -= step
        f_up = evolve_augmented(model, ThetaVector(theta.anchor_time, up), t_target)
        f_dn = evolve_augmented(model, ThetaVector(theta.anchor_time, dn), t_target)
        jac[:, i] = (f_up - f_dn) / (2 * step)
    return jac


def simulate(model: ModelSpec, theta0: ThetaVector, times, Q, R, rng: RngHandle):
    """Draw a truth trajectory and noisy measurements.

    Process noise ``sqrt(Q dt)`` is added to the augmented state at every
    measurement time (Ito convention, ``g(x) = I``), then
    ``y = h(x) + sqrt(R) N(0, 1)``. The process and measurement draws come
    from separate child streams of ``rng``.

    Returns ``(truth, log)`` where ``truth`` is an ``(len(times), n + p)``
    array of augmented states.
    """
    times = np.asarray(times, dtype=float).ravel()
    if times.size and np.any(np.diff(times) <= 0):
        raise ValueError("times must be strictly increasing")
    Q = as_sym(Q)
    R = as_sym(R)
    if Q.shape[0] != model.dim:
        raise ValueError(f"Q must be {model.dim}x{model.dim}")
    if R.shape[0] != model.output_dim:
        raise ValueError(f"R must be {model.output_dim}x{model.output_dim}")
    for name, mat in (("Q", Q), ("R", R)):
        if not is_psd(mat):
            raise NotPSD(f"{name} is not positive semidefinite")
    sq = matrix_sqrt(Q)
    sr = matrix_sqrt(R)
    proc = rng.child("process").generator()
    meas = rng.child("measurement").generator()

    truth = np.empty((times.size, model.dim))
    # Deterministic stretches are evolved from the last noisy state so that a
    # noiseless run is bitwise the direct flow from theta0.
    anchor = ThetaVector(theta0.anchor_time, theta0.values)
    t_prev = float(theta0.anchor_time)
    for k, t in enumerate(times):
        dt = t - t_prev
        state = evolve_augmented(model, anchor, t)
        noise = proc.standard_normal(model.dim)
        if dt > 0 and np.any(sq):
            state = state + math.sqrt(dt) * (sq @ noise)
            anchor = ThetaVector(t, state)
        if not np.all(np.isfinite(state)):
            raise NonFiniteState(f"non-finite truth state at t={t}")
        truth[k] = state
        t_prev = t
    ys = observe_augmented(model, truth) if times.size else np.empty((0, model.output_dim))
    if np.any(sr):
        ys = ys + meas.standard_normal(ys.shape) @ sr.T
    return truth, MeasurementLog(times, ys)


# --- built-in models -------------------------------------------------------

def _logistic_drift(t, x, p):
    beta, cap = p
    return np.array([beta * x[0] * (1.0 - x[0] / cap)])


def _logistic_x(tau, x0, beta, cap):
    """Elementwise logistic flow; NaN once the solution has blown up."""
    with np.errstate(divide="ignore", invalid="ignore"):
        denom = 1.0 + (cap / x0 - 1.0) * np.exp(-beta * tau)
    # denom is monotone in tau and equals N / x(T) at the anchor; a sign change
    # means the solution blew up on the way (x(T) < 0 forward, x(T) > N backward)
    alive = denom * np.sign(x0) > 0
    x = np.where(alive, cap / np.where(alive, denom, 1.0), np.nan)
    return np.where(x0 == 0.0, 0.0, x)


def _logistic_closed_form(times, t0, x0, p):
    tau = np.asarray(times, dtype=float) - t0
    return _logistic_x(tau, x0[0], p[0], p[1])[:, None]


def _logistic_batch_flow(tau, X, P):
    return _logistic_x(tau, X[:, 0], P[:, 0], P[:, 1])[:, None]


def _identity_observe(states):
    return np.asarray(states, dtype=float)[:, :1]


def _logistic_guess(times, ys, anchor):
    """Heuristic start: x(T) from the first points, N from the data range,
    growth rate from a log-linear fit of the rising part."""
    y = np.asarray(ys, dtype=float)[:, 0]
    t = np.asarray(times, dtype=float)
    top = max(float(np.max(y)), 1e-2)
    x0 = float(np.clip(np.median(y[: max(3, len(y) // 20)]), 1e-2, top))
    rising = y > 0.05 * top
    beta = 0.1
    if rising.sum() >= 3:
        slope = np.polyfit(t[rising], np.log(y[rising]), 1)[0]
        if np.isfinite(slope) and slope > 0:
            beta = float(np.clip(slope, 1e-3, 5.0))
    cap = 2.0 * top
    return np.array([x0, beta, cap])


LOGISTIC_BOUNDS = (np.array([1e-3, 1e-4, 1.0]), np.array([1e5, 5.0, 1e5]))

LOGISTIC = ModelSpec(
    name="logistic",
    state_dim=1,
    param_dim=2,
    output_dim=1,
    drift=_logistic_drift,
    observe=_identity_observe,
    closed_form=_logistic_closed_form,
    batch_flow=_logistic_batch_flow,
    initial_guess=_logistic_guess,
    bounds=LOGISTIC_BOUNDS,
    param_names=("beta", "N"),
)


def _linear_drift(t, x, p):
    return np.array([p[0]])


def _linear_closed_form(times, t0, x0, p):
    return (x0[0] + p[0] * (np.asarray(times, dtype=float) - t0))[:, None]


def _linear_batch_flow(tau, X, P):
    return (X[:, 0] + P[:, 0] * tau)[:, None]


def _linear_guess(times, ys, anchor):
    slope, icpt = np.polyfit(np.asarray(times) - anchor, np.asarray(ys)[:, 0], 1)
    return np.array([icpt, slope])


LINEAR = ModelSpec(
    name="linear",
    state_dim=1,
    param_dim=1,
    output_dim=1,
    drift=_linear_drift,
    observe=_identity_observe,
    closed_form=_linear_closed_form,
    batch_flow=_linear_batch_flow,
    initial_guess=_linear_guess,
    param_names=("slope",),
)

MODELS = {"logistic": LOGISTIC, "linear": LINEAR}


def register_model(model: ModelSpec) -> None:
    """Make a custom model selectable by name from run configs."""
    MODELS[model.name] = model


def get_model(name: str) -> ModelSpec:
    try:
        return MODELS[name]
    except KeyError:
        raise KeyError(f"unknown model {name!r}; known: {sorted(MODELS)}") from None
