"""Ensemble Kalman core, noise identification and the adaptive loop.

During the jackknife phase each new measurement triggers a batch of
least-squares fits on subsets containing it. Out-of-sample residuals of
those fits give the measurement-noise estimate; the jackknife variance,
compared with the spread of the previous ensemble pushed forward to the new
time, gives the process-noise estimate. Once both estimates stop moving the
loop hands over to a plain stochastic ensemble Kalman filter with the noise
levels frozen.
"""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import jackknife as jk
from .errors import (InsufficientHoldout, InvalidSizes, JackfilterError, NonFiniteState,
                     SingularInnovation, StepError, TooFewPoints)
from .lsq import LsqProblem, fit, multistart_fit
from .model import (MeasurementLog, ModelSpec, ThetaVector, evolve_many, flow_jacobian,
                    observe_augmented, predict_output, predict_outputs)
from .numkit import (RngHandle, as_sym, cross_covariance, matrix_sqrt, psd_project,
                     sample_moments, solve_sym)

log = logging.getLogger(__name__)

MODES = ("burnin", "jackknife", "enkf")


@dataclass
class EnsembleMoments:
    Px: np.ndarray
    Py: np.ndarray
    Pxy: np.ndarray
    Qy: np.ndarray
    x_mean: np.ndarray
    y_mean: np.ndarray
    states: np.ndarray
    outputs: np.ndarray


@dataclass
class Posterior:
    mean: np.ndarray
    cov: np.ndarray
    gain: np.ndarray


@dataclass
class ResidualStats:
    bias: np.ndarray
    sigma2: np.ndarray


@dataclass
class QEstimate:
    Q: np.ndarray
    raw: np.ndarray
    clipped: bool


@dataclass
class FilterConfig:
    """Settings of :func:`run_adaptive`.

    ``mu=None`` validates on the whole complement (``mu = d``) at every
    step. ``q_denominator`` picks ``sigma2 + Qy`` ("derivation") or
    ``sigma2 - Qy`` ("paper") inside the process-noise solve.
    ``residual_scaling="literal"`` keeps the literal ``d/(r mu)`` and ``1/m**2``
    factors of the residual statistics; "average" uses plain averages.
    """

    r: int = 45
    m: int = 25
    n0: int = 50
    mu: Optional[int] = None
    handoff: bool = True
    handoff_window: int = 10
    handoff_tol: float = 0.05
    omit_Qy: bool = False
    omit_Px_minus: bool = False
    bias_correction: bool = True
    q_denominator: str = "derivation"
    residual_scaling: str = "average"
    center: str = "updated"
    center_on_full_fit: bool = False
    starts: int = 8
    init: Optional[np.ndarray] = None
    seed: int = 0
    workers: Optional[int] = None

    def validate(self):
        if not 1 <= self.r < self.n0:
            raise InvalidSizes(f"need 1 <= r < n0 (r={self.r}, n0={self.n0})")
        if self.m < 2:
            raise InvalidSizes("m must be at least 2")
        if self.mu is not None and not 1 <= self.mu <= self.n0 - self.r:
            raise InvalidSizes(f"mu={self.mu} must lie in 1..{self.n0 - self.r}")
        if self.q_denominator not in ("paper", "derivation"):
            raise ValueError(f"unknown q_denominator {self.q_denominator!r}")
        if self.residual_scaling not in ("literal", "average"):
            raise ValueError(f"unknown residual_scaling {self.residual_scaling!r}")
        if self.handoff_window < 1 or self.handoff_tol < 0:
            raise InvalidSizes("handoff window must be >= 1 and tolerance >= 0")


@dataclass
class StepRecord:
    n: int
    t: float
    mode: str
    state: np.ndarray
    cov: np.ndarray
    Q: np.ndarray
    R: np.ndarray
    bias: np.ndarray
    clip_q: bool = False
    clip_r: bool = False
    err: Optional[float] = None


# --- moments and update ----------------------------------------------------

def _observation_jacobians(model: ModelSpec, states: np.ndarray) -> np.ndarray:
    """Central-difference ``Dh`` at every member, shape ``(N, m, n + p)``.

    Parameter columns are zero since ``h`` only sees the state part.
    """
    N = states.shape[0]
    jac = np.zeros((N, model.output_dim, model.dim))
    for j in range(model.state_dim):
        step = 1e-6 * (1.0 + np.abs(states[:, j]))
        up = states.copy()
        dn = states.copy()
        up[:, j] += step
        dn[:, j] -= step
        jac[:, :, j] = (observe_augmented(model, up) - observe_augmented(model, dn)) / (2 * step[:, None])
    return jac


def moments_from_states(model: ModelSpec, states, Q_prev=None, dt: float = 0.0,
                        omit_Qy: bool = False) -> EnsembleMoments:
    """Sample moments of an ensemble of augmented states at one time.

    ``Qy = mean_i Dh_i (Q_prev dt) Dh_i^T`` is the linearised output
    contribution of process noise still to be added to ``states``.
    """
    states = np.atleast_2d(np.asarray(states, dtype=float))
    if states.shape[0] < 2:
        raise TooFewPoints(f"ensemble moments need N >= 2, got {states.shape[0]}")
    outputs = observe_augmented(model, states)
    x_mean, Px = sample_moments(states, ddof=1)
    y_mean, Py = sample_moments(outputs, ddof=1)
    Pxy = cross_covariance(states, outputs, ddof=1)
    m = model.output_dim
    if omit_Qy or Q_prev is None or dt == 0.0:
        Qy = np.zeros((m, m))
    else:
        Dh = _observation_jacobians(model, states)
        Qdt = as_sym(Q_prev) * dt
        Qy = as_sym(np.einsum("nij,jk,nlk->il", Dh, Qdt, Dh) / states.shape[0])
    return EnsembleMoments(Px, Py, Pxy, Qy, x_mean, y_mean, states, outputs)


def propagate(model: ModelSpec, thetas, anchor_time: float, t_k: float) -> np.ndarray:
    """Push augmented vectors anchored at ``anchor_time`` to ``t_k``."""
    thetas = np.atleast_2d(thetas)
    out = thetas.copy()
    if model.batch_flow is not None:
        k = model.state_dim
        with np.errstate(all="ignore"):
            moved = model.batch_flow(t_k - anchor_time, thetas[:, :k], thetas[:, k:])
        if t_k != anchor_time:
            out[:, :k] = moved
        if not np.all(np.isfinite(out)):
            raise NonFiniteState(f"non-finite state evolving {model.name} from t={anchor_time}")
        return out
    for i, v in enumerate(thetas):
        out[i, : model.state_dim] = evolve_many(model, ThetaVector(anchor_time, v), [t_k])[0]
    return out


def ensemble_moments(model: ModelSpec, batch: jk.EnsembleBatch, t_k: float, Q_prev,
                     omit_Qy: bool = False, dt: float = 0.0) -> EnsembleMoments:
    """Moments of the batch members evolved deterministically to ``t_k``."""
    states = propagate(model, batch.thetas, batch.anchor_time, t_k)
    return moments_from_states(model, states, Q_prev, dt, omit_Qy)


def kalman_update(moments: EnsembleMoments, y, R, bias, prior_mean, prior_cov) -> Posterior:
    """Bias-corrected ensemble Kalman update.

    ``K = Pxy (Py + Qy + R)^-1``, ``mean = prior_mean + K (y - ybar - bias)``,
    ``cov = prior_cov - K (Py + Qy + R) K^T`` (projected to PSD).
    """
    S = as_sym(moments.Py + moments.Qy + as_sym(R))
    gain = solve_sym(S, moments.Pxy)
    if gain is None:
        raise SingularInnovation("innovation covariance cannot be inverted")
    innov = np.atleast_1d(y) - moments.y_mean - np.atleast_1d(bias)
    mean = np.asarray(prior_mean, dtype=float) + gain @ innov
    cov = psd_project(as_sym(prior_cov) - gain @ S @ gain.T)
    return Posterior(mean, cov, gain)


# --- noise identification --------------------------------------------------

def residual_stats(batch: jk.EnsembleBatch, data: MeasurementLog, mu: int, model: ModelSpec,
                   scaling: str = "average") -> ResidualStats:
    """Out-of-sample residuals of every member on held-out points.

    Member ``s`` is validated on the ``mu`` smallest indices of its
    complement within ``1..batch.n``. ``scaling="literal"`` applies the
    ``d/(r mu)`` member factor and ``1/m**2`` aggregation; ``"average"``
    uses ``1/mu`` and ``1/m``.
    """
    n, r, d, m = batch.n, batch.r, batch.d, batch.m
    if mu < 1:
        raise InsufficientHoldout("mu must be at least 1")
    sum_bias = np.zeros(data.output_dim)
    sum_sigma = np.zeros((data.output_dim, data.output_dim))
    for subset, theta in zip(batch.subsets, batch.thetas):
        inside = set(subset)
        held = [j for j in range(1, n + 1) if j not in inside][:mu]
        if len(held) < mu:
            raise InsufficientHoldout(f"subset leaves {len(held)} held-out points, need {mu}")
        idx = np.array(held) - 1
        pred = predict_outputs(model, ThetaVector(batch.anchor_time, theta), data.times[idx])
        res = data.ys[idx] - pred
        sum_bias += res.mean(axis=0)
        pref = d / (r * mu) if scaling == "literal" else 1.0 / mu
        sum_sigma += pref * (res.T @ res)
    agg = 1.0 / m**2 if scaling == "literal" else 1.0 / m
    return ResidualStats(sum_bias / m, psd_project(agg * sum_sigma))


def adaptive_residuals(prev: ResidualStats, new: ResidualStats, n: int, r: int) -> ResidualStats:
    a1, a2 = jk.adaptive_weights(n, r)
    bias = a1 * new.bias + a2 * prev.bias
    sigma2 = psd_project(a1**2 * new.sigma2 + a2**2 * prev.sigma2)
    return ResidualStats(bias, sigma2)


def prediction_spread(batch: jk.EnsembleBatch, model: ModelSpec, t: float) -> np.ndarray:
    """Jackknife spread ``r/(d m) sum (H_s - Hbar)(H_s - Hbar)^T`` at time ``t``."""
    preds = np.array([predict_output(model, ThetaVector(batch.anchor_time, th), t)
                      for th in batch.thetas])
    dev = preds - preds.mean(axis=0)
    if batch.d == 0:
        return np.zeros((preds.shape[1], preds.shape[1]))
    return as_sym(batch.r / (batch.d * batch.m) * dev.T @ dev)


def estimate_R(residuals: ResidualStats, batch: jk.EnsembleBatch, data: MeasurementLog,
               model: ModelSpec):
    """``R = sigma2 - Py`` with ``Py`` the member prediction spread at the
    latest measurement time. Returns ``(R, clipped)``."""
    Py = prediction_spread(batch, model, float(data.times[batch.n - 1]))
    return psd_project(residuals.sigma2 - Py, report=True)


def estimate_Q(v_n, Px_minus, Pxy, sigma2, Qy, dt: float, *, omit_Qy: bool = False,
               omit_Px_minus: bool = False, denominator: str = "derivation") -> QEstimate:
    """Process noise from the posterior/prior covariance balance::

        Q = (v_n - Px_minus + Pxy (sigma2 +/- Qy)^-1 Pxy^T) / dt

    Either subtracted term can be dropped for a larger (pessimistic) answer.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    sigma2 = as_sym(sigma2)
    Qy = np.zeros_like(sigma2) if omit_Qy else as_sym(Qy)
    denom = sigma2 - Qy if denominator == "paper" else sigma2 + Qy
    Pxy = np.atleast_2d(Pxy)
    left = solve_sym(denom, Pxy)
    if left is None:
        raise SingularInnovation("cannot invert the residual covariance in the Q solve")
    prior = np.zeros_like(as_sym(v_n)) if omit_Px_minus else as_sym(Px_minus)
    raw = as_sym((as_sym(v_n) - prior + left @ Pxy.T) / dt)
    Q, clipped = psd_project(raw, report=True)
    return QEstimate(Q, raw, clipped)


# --- ensemble filter after hand-off ----------------------------------------

def enkf_step(model: ModelSpec, members, t_prev: float, t_k: float, y, Q, R, bias,
              rng: RngHandle):
    """One stochastic ensemble Kalman step with fixed noise levels.

    Members are carried deterministically to ``t_k``, perturbed by
    ``sqrt(Q dt)`` draws, and updated with perturbed observations. Because
    the forcing is sampled, the moments already contain it and ``Qy`` is
    zero. Returns ``(members, posterior)``.
    """
    gen = rng.generator()
    dt = t_k - t_prev
    states = propagate(model, members, t_prev, t_k)
    N = states.shape[0]
    if dt > 0:
        states = states + np.sqrt(dt) * gen.standard_normal(states.shape) @ matrix_sqrt(Q).T
    moments = moments_from_states(model, states, omit_Qy=True)
    post = kalman_update(moments, y, R, bias, moments.x_mean, moments.Px)
    perturbed = np.atleast_1d(y) + gen.standard_normal((N, model.output_dim)) @ matrix_sqrt(R).T
    updated = states + (perturbed - moments.outputs - np.atleast_1d(bias)) @ post.gain.T
    return updated, post


# --- adaptive loop -----------------------------------------------------------

def _relative_change(new, old) -> float:
    scale = np.linalg.norm(old)
    diff = np.linalg.norm(new - old)
    if diff <= 1e-12:
        return 0.0
    return diff / scale if scale > 0 else np.inf


def _subset_fitter(model, data: MeasurementLog, init, anchor):
    def run(subset):
        idx = np.asarray(subset) - 1
        return fit(LsqProblem(model, MeasurementLog(data.times[idx], data.ys[idx]), init, anchor))
    return run


def run_adaptive(model: ModelSpec, data: MeasurementLog, cfg: FilterConfig,
                 truth: Optional[np.ndarray] = None) -> list:
    """Run the adaptive jackknife filter over ``data``.

    The first ``cfg.n0`` measurements form the burn-in batch (``m0 = n0``
    subsets); every later measurement yields one :class:`StepRecord`.
    ``truth`` (rows aligned with ``data``) fills the ``err`` field.
    """
    cfg.validate()
    total = len(data)
    if total <= cfg.n0:
        raise InvalidSizes(f"need more than n0={cfg.n0} measurements, got {total}")
    r, m, n0 = cfg.r, cfg.m, cfg.n0
    T = float(data.times[0])
    rng = RngHandle(cfg.seed, "filter")
    k = model.dim

    head = data.head(n0)
    if cfg.init is not None:
        init = np.asarray(cfg.init, dtype=float)
    elif model.initial_guess is not None:
        init = model.initial_guess(head.times, head.ys, T)
    else:
        init = np.zeros(k)
    try:
        full = multistart_fit(LsqProblem(model, head, init, T), cfg.starts, rng.child("starts"))
        subsets = jk.sample_subsets(n0, r, n0, rng=rng.child("subsets", n0))
        batch = jk.build_batch(subsets, _subset_fitter(model, head, full.theta.values, T),
                               n0, r, T, cfg.workers)
        center = full.theta.values if cfg.center_on_full_fit else None
        stats = jk.batch_jsve(batch, center)
        res = residual_stats(batch, head, cfg.mu or n0 - r, model, cfg.residual_scaling)
        R_hat, clip_r = estimate_R(res, batch, head, model)
    except JackfilterError as exc:
        raise StepError(n0, exc) from exc
    Q_hat = np.zeros((k, k))
    history = deque(maxlen=cfg.handoff_window + 1)
    history.append((Q_hat, R_hat))
    mode = "jackknife"
    members = None
    records = []

    for n in range(n0 + 1, total + 1):
        t_n = float(data.times[n - 1])
        t_prev = float(data.times[n - 2])
        dt = t_n - t_prev
        y_n = data.ys[n - 1]
        bias = res.bias if cfg.bias_correction else np.zeros(model.output_dim)
        clip_q = False
        try:
            if mode == "jackknife":
                seen = data.head(n)
                full = fit(LsqProblem(model, seen, full.theta.values, T))
                subsets = jk.sample_subsets(n, r, m, must_include=n, rng=rng.child("subsets", n))
                new_batch = jk.build_batch(subsets, _subset_fitter(model, seen, full.theta.values, T),
                                           n, r, T, cfg.workers)
                stats = jk.adaptive_update(stats, new_batch, cfg.center)
                res_new = residual_stats(new_batch, seen, cfg.mu or n - r, model, cfg.residual_scaling)
                res = adaptive_residuals(res, res_new, n, r)
                R_hat, clip_r = estimate_R(res, new_batch, seen, model)
                bias = res.bias if cfg.bias_correction else np.zeros(model.output_dim)

                prior = ensemble_moments(model, batch, t_n, Q_hat, cfg.omit_Qy, dt)
                phi = flow_jacobian(model, ThetaVector(T, stats.mean), t_n)
                v_state = as_sym(phi @ stats.var @ phi.T)
                qe = estimate_Q(v_state, prior.Px, prior.Pxy, res.sigma2, prior.Qy, dt,
                                omit_Qy=cfg.omit_Qy, omit_Px_minus=cfg.omit_Px_minus,
                                denominator=cfg.q_denominator)
                Q_hat, clip_q = qe.Q, qe.clipped
                post = kalman_update(prior, y_n, R_hat, bias, prior.x_mean, prior.Px + Q_hat * dt)
                state, cov = post.mean, v_state
                batch = new_batch

                history.append((Q_hat, R_hat))
                if cfg.handoff and len(history) > cfg.handoff_window:
                    pairs = list(history)
                    steady = all(
                        _relative_change(a[0], b[0]) <= cfg.handoff_tol
                        and _relative_change(a[1], b[1]) <= cfg.handoff_tol
                        for b, a in zip(pairs[:-1], pairs[1:]))
                    if steady:
                        log.info("noise estimates settled at step %d; switching to ensemble filter", n)
                        mode = "enkf"
                        members = propagate(model, batch.thetas, T, t_n)
                records.append(StepRecord(n, t_n, "jackknife", state, cov, Q_hat, R_hat, bias,
                                          clip_q, clip_r))
            else:
                members, post = enkf_step(model, members, t_prev, t_n, y_n, Q_hat, R_hat, bias,
                                          rng.child("enkf", n))
                records.append(StepRecord(n, t_n, "enkf", post.mean, post.cov, Q_hat, R_hat, bias,
                                          False, False))
        except JackfilterError as exc:
            raise StepError(n, exc) from exc
        if truth is not None:
            records[-1].err = float(np.linalg.norm(records[-1].state - truth[n - 1]))
    return records
