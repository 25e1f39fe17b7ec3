"""Nonlinear least squares for the augmented state ``theta = (x(T), params)``.

The objective is the mean squared prediction error over a set of
measurements, ``(1/n) sum_i ||y_i - h(F(t_i, x(T)))||^2``, minimised with a
Levenberg-Marquardt damped Gauss-Newton iteration on central-difference
Jacobians. Box bounds are enforced by projection after every step.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Union

import numpy as np

from .errors import AllStartsFailed, NonFiniteObjective, NonFiniteState
from .model import MeasurementLog, ModelSpec, ThetaVector, predict_outputs
from .numkit import RngHandle

MAX_ITER = 200
FTOL = 1e-10
XTOL = 1e-10


@dataclass(frozen=True)
class Samples:
    """Fit data without the ordering requirement of a measurement log
    (repeated abscissae are fine for a least-squares fit)."""

    times: np.ndarray
    ys: np.ndarray

    def __len__(self):
        return self.times.shape[0]


def as_samples(data) -> Union[MeasurementLog, Samples]:
    """Accept a :class:`MeasurementLog`, ``(times, ys)`` arrays or a list of
    :class:`~jackfilter.model.Measurement`."""
    if isinstance(data, (MeasurementLog, Samples)):
        return data
    if isinstance(data, tuple) and len(data) == 2:
        times, ys = data
    else:
        times = [m.t for m in data]
        ys = [np.atleast_1d(m.y) for m in data]
    ys = np.asarray(ys, dtype=float)
    return Samples(np.asarray(times, dtype=float).ravel(), ys.reshape(len(ys), -1))


@dataclass
class LsqProblem:
    """A fit of ``init``'s dimension to ``data``.

    ``model`` is either a :class:`ModelSpec` (predictions are
    ``h(F(t, x(T)))`` with ``T = anchor_time``) or a plain callable
    ``predict(times, values) -> (len(times), m)`` array. ``anchor_time``
    defaults to the earliest measurement time. ``data`` may be a
    :class:`MeasurementLog`, a ``(times, ys)`` pair or a list of
    measurements.
    """

    model: Union[ModelSpec, Callable]
    data: MeasurementLog
    init: np.ndarray
    anchor_time: Optional[float] = None
    bounds: Optional[tuple] = None

    def __post_init__(self):
        self.data = as_samples(self.data)
        if len(self.data) == 0:
            raise ValueError("LsqProblem needs at least one measurement")
        if isinstance(self.init, ThetaVector):
            if self.anchor_time is None:
                self.anchor_time = self.init.anchor_time
            self.init = self.init.values
        self.init = np.asarray(self.init, dtype=float).ravel()
        if self.anchor_time is None:
            self.anchor_time = float(np.min(self.data.times))
        if self.bounds is None and isinstance(self.model, ModelSpec):
            self.bounds = self.model.bounds
        if self.bounds is not None:
            lo, hi = (np.broadcast_to(np.asarray(b, dtype=float), self.init.shape) for b in self.bounds)
            if np.any(lo > hi):
                raise ValueError("bounds must satisfy lo <= hi")
            self.bounds = (lo.copy(), hi.copy())
        if isinstance(self.model, ModelSpec) and self.init.size != self.model.dim:
            raise ValueError(f"init has {self.init.size} entries, model needs {self.model.dim}")

    def predictor(self) -> Callable:
        if isinstance(self.model, ModelSpec):
            model, T, times = self.model, self.anchor_time, self.data.times
            if model.closed_form is None:
                return lambda v: predict_outputs(model, ThetaVector(T, v), times)
            # same arithmetic as predict_outputs without the per-call wrapping
            cf, obs, n, count = model.closed_form, model.observe, model.state_dim, len(times)
            at_anchor = times == T
            shape = (count, model.output_dim)

            def predict(v):
                x = np.asarray(cf(times, T, v[:n], v[n:]), dtype=float).reshape(count, n)
                x[at_anchor] = v[:n]
                return np.asarray(obs(x), dtype=float).reshape(shape)

            return predict
        times = self.data.times
        return lambda v: np.asarray(self.model(times, v), dtype=float).reshape(len(times), -1)

    def project(self, values) -> np.ndarray:
        if self.bounds is None:
            return values
        return np.clip(values, self.bounds[0], self.bounds[1])

    def free_mask(self, values, descent) -> np.ndarray:
        """Components not pinned at a bound that ``descent`` pushes against."""
        if self.bounds is None:
            return np.ones(values.shape, dtype=bool)
        lo, hi = self.bounds
        pinned = ((values <= lo) & (descent < 0)) | ((values >= hi) & (descent > 0))
        return ~pinned

    @property
    def underdetermined(self) -> bool:
        return self.data.ys.size < self.init.size


@dataclass
class LsqSolution:
    theta: ThetaVector
    mse: float
    converged: bool
    iterations: int
    underdetermined: bool = False


def _residual(predict, ys, values) -> np.ndarray:
    try:
        r = (ys - predict(values)).ravel()
    except NonFiniteState as exc:
        raise NonFiniteObjective(str(exc)) from None
    if not np.all(np.isfinite(r)):
        raise NonFiniteObjective("model prediction is not finite")
    return r


def _jacobian(predict, values) -> np.ndarray:
    """Central differences of the predictions, step 1e-6 * (1 + |theta_i|)."""
    cols = []
    for i in range(values.size):
        step = 1e-6 * (1.0 + abs(values[i]))
        up = values.copy()
        dn = values.copy()
        up[i] += step
        dn[i] -= step
        try:
            diff = (predict(up) - predict(dn)).ravel() / (2 * step)
        except NonFiniteState as exc:
            raise NonFiniteObjective(str(exc)) from None
        cols.append(diff)
    jac = np.column_stack(cols)
    if not np.all(np.isfinite(jac)):
        raise NonFiniteObjective("non-finite Jacobian")
    return jac


def fit(problem: LsqProblem, *, max_iter: int = MAX_ITER, ftol: float = FTOL,
        xtol: float = XTOL, trace: Optional[list] = None) -> LsqSolution:
    """Local minimiser of the mean squared error of ``problem``.

    Stops when a full Gauss-Newton step would lower the summed squared
    error by less than ``ftol`` relative, when an accepted step moves theta
    by less than ``xtol`` relative, when no damping level gives a decrease,
    or after ``max_iter`` iterations.
    If ``trace`` is a list, the objective after every accepted step is
    appended to it.

    Raises:
        NonFiniteObjective: if the model cannot be evaluated at the start.
    """
    with np.errstate(all="ignore"):
        return _fit(problem, max_iter, ftol, xtol, trace)


def _fit(problem, max_iter, ftol, xtol, trace):
    predict = problem.predictor()
    ys = problem.data.ys
    count = ys.shape[0]
    x = problem.project(problem.init.copy())
    r = _residual(predict, ys, x)
    cost = float(r @ r)
    if trace is not None:
        trace.append(cost / count)
    lam = 1e-3
    converged = cost == 0.0
    it = 0
    while not converged and it < max_iter:
        it += 1
        jac = _jacobian(predict, x)
        A = jac.T @ jac
        g = jac.T @ r
        scale = np.maximum(np.diag(A), 1e-12 * max(1.0, float(np.max(np.diag(A)))))
        free = problem.free_mask(x, g)
        if not free.any():
            converged = True
            break
        A_f = A[np.ix_(free, free)]
        # decrease an undamped Gauss-Newton step would still buy
        gn = np.linalg.lstsq(A_f, g[free], rcond=None)[0]
        if float(g[free] @ gn) <= ftol * cost:
            # take that last cheap step if it does not hurt, then stop
            step = np.zeros_like(x)
            step[free] = gn
            x_new = problem.project(x + step)
            try:
                r_new = _residual(predict, ys, x_new)
            except NonFiniteObjective:
                r_new = None
            if r_new is not None and float(r_new @ r_new) <= cost:
                x, r, cost = x_new, r_new, float(r_new @ r_new)
                if trace is not None:
                    trace.append(cost / count)
            converged = True
            break
        accepted = False
        while lam <= 1e16:
            step = np.zeros_like(x)
            try:
                step[free] = np.linalg.solve(A_f + lam * np.diag(scale[free]), g[free])
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            x_new = problem.project(x + step)
            try:
                r_new = _residual(predict, ys, x_new)
            except NonFiniteObjective:
                lam *= 10.0
                continue
            cost_new = float(r_new @ r_new)
            if cost_new < cost:
                accepted = True
                break
            lam *= 10.0
        if not accepted:
            # no damping level improves the objective: stationary to precision
            converged = True
            break
        rel_step = np.linalg.norm(x_new - x) / (np.linalg.norm(x) + xtol)
        x, r, cost = x_new, r_new, cost_new
        if trace is not None:
            trace.append(cost / count)
        lam = max(lam / 10.0, 1e-12)
        if cost == 0.0 or rel_step < xtol:
            converged = True
    return LsqSolution(
        theta=ThetaVector(problem.anchor_time, x),
        mse=cost / count,
        converged=converged,
        iterations=it,
        underdetermined=problem.underdetermined,
    )


def mean_squared_error(problem: LsqProblem, values) -> float:
    r = _residual(problem.predictor(), problem.data.ys, np.asarray(values, dtype=float))
    return float(r @ r) / problem.data.ys.shape[0]


def _jitter(problem: LsqProblem, gen: np.random.Generator) -> np.ndarray:
    """A start drawn log-uniformly inside positive bounds, otherwise a
    log-uniform factor in [0.1, 10] on the initial magnitude."""
    init = problem.init
    out = np.empty_like(init)
    for i, v in enumerate(init):
        if problem.bounds is not None and problem.bounds[0][i] > 0 and np.isfinite(problem.bounds[1][i]):
            lo, hi = np.log(problem.bounds[0][i]), np.log(problem.bounds[1][i])
            out[i] = np.exp(gen.uniform(lo, hi))
        else:
            mag = abs(v) if v != 0 else 1.0
            out[i] = np.copysign(mag * 10.0 ** gen.uniform(-1.0, 1.0), v if v != 0 else 1.0)
    return problem.project(out)


def multistart_fit(problem: LsqProblem, starts: int, rng: RngHandle, **kw) -> LsqSolution:
    """Best (minimum-mse) of ``starts`` fits: ``problem.init`` plus jittered
    starts. Deterministic given ``rng``.

    Raises:
        AllStartsFailed: every start hit a non-finite objective.
    """
    if starts < 1:
        raise ValueError("starts must be >= 1")
    gen = rng.generator()
    inits = [problem.init] + [_jitter(problem, gen) for _ in range(starts - 1)]
    best = None
    for init in inits:
        trial = LsqProblem(problem.model, problem.data, init, problem.anchor_time, problem.bounds)
        try:
            sol = fit(trial, **kw)
        except NonFiniteObjective:
            continue
        if best is None or sol.mse < best.mse:
            best = sol
    if best is None:
        raise AllStartsFailed(f"all {starts} starts produced a non-finite objective")
    return best
