import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from jackfilter import jackknife as jk
from jackfilter.errors import InsufficientHoldout, InvalidSizes, StepError
from jackfilter.filtering import (
    EnsembleMoments,
    FilterConfig,
    ResidualStats,
    adaptive_residuals,
    ensemble_moments,
    enkf_step,
    estimate_Q,
    estimate_R,
    kalman_update,
    moments_from_states,
    residual_stats,
    run_adaptive,
)
from jackfilter.lsq import LsqProblem, fit
from jackfilter.model import LINEAR, LOGISTIC, MeasurementLog, ModelSpec, ThetaVector, simulate
from jackfilter.numkit import RngHandle, psd_tol

# observes the whole augmented state of the linear model
LINEAR_FULL = ModelSpec(
    name="linear-full", state_dim=2, param_dim=0, output_dim=2,
    drift=lambda t, x, p: np.array([x[1], 0.0]), observe=lambda s: np.asarray(s)[:, :2],
    closed_form=lambda times, t0, x0, p: np.column_stack(
        [x0[0] + x0[1] * (np.asarray(times) - t0), np.full(len(times), x0[1])]),
)


def scalar_moments(Px, Py, Pxy, Qy=0.0, x_mean=0.0, y_mean=0.0):
    arr = lambda v: np.atleast_2d(float(v))
    return EnsembleMoments(arr(Px), arr(Py), arr(Pxy), arr(Qy), np.array([x_mean]),
                           np.array([y_mean]), None, None)


def test_moments_of_identical_members():
    batch = jk.EnsembleBatch([(1,), (2,), (3,)], np.tile([2.0, 0.5], (3, 1)), 4, 1)
    mom = ensemble_moments(LINEAR, batch, 3.0, np.zeros((2, 2)))
    assert not mom.Px.any() and not mom.Py.any() and not mom.Pxy.any()


def test_moments_linear_identity():
    gen = np.random.default_rng(0)
    states = gen.standard_normal((30, 2)) * [3.0, 1.0]
    mom = moments_from_states(LINEAR, states)
    H = np.array([[1.0, 0.0]])
    np.testing.assert_allclose(mom.Py, H @ mom.Px @ H.T, atol=1e-10)
    np.testing.assert_allclose(mom.Pxy, mom.Px @ H.T, atol=1e-10)


def test_process_noise_output_term():
    states = np.random.default_rng(1).standard_normal((10, 2))
    mom = moments_from_states(LINEAR_FULL, states, Q_prev=0.7 * np.eye(2), dt=1.0)
    np.testing.assert_allclose(mom.Qy, 0.7 * np.eye(2), atol=1e-6)
    off = moments_from_states(LINEAR_FULL, states, Q_prev=0.7 * np.eye(2), dt=1.0, omit_Qy=True)
    assert not off.Qy.any()


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_block_covariance_is_psd(seed):
    gen = np.random.default_rng(seed)
    states = gen.standard_normal((int(gen.integers(2, 40)), 3)) * [100.0, 0.1, 50.0]
    states[:, 0] = np.abs(states[:, 0]) + 1
    states[:, 2] = np.abs(states[:, 2]) + 10
    mom = moments_from_states(LOGISTIC, states)
    block = np.block([[mom.Px, mom.Pxy], [mom.Pxy.T, mom.Py]])
    assert np.linalg.eigvalsh(block).min() >= -psd_tol(block)


def test_zero_gain_keeps_prior():
    mom = scalar_moments(Px=1.0, Py=1.0, Pxy=0.0)
    post = kalman_update(mom, [5.0], np.eye(1), [0.0], [3.0], [[2.0]])
    assert post.mean[0] == 3.0 and post.cov[0, 0] == 2.0


def test_scalar_update_by_hand():
    mom = scalar_moments(Px=1.0, Py=1.0, Pxy=1.0)
    post = kalman_update(mom, [2.0], np.eye(1), [0.0], [0.0], [[1.0]])
    assert post.gain[0, 0] == pytest.approx(0.5)
    assert post.mean[0] == pytest.approx(1.0)
    assert post.cov[0, 0] == pytest.approx(0.5)


def test_bias_shifts_innovation():
    mom = scalar_moments(Px=1.0, Py=1.0, Pxy=1.0, y_mean=1.0)
    post = kalman_update(mom, [4.0], np.eye(1), [1.0], [0.0], [[1.0]])
    assert post.mean[0] == pytest.approx(1.0)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_posterior_never_exceeds_prior(seed):
    gen = np.random.default_rng(seed)
    states = gen.standard_normal((20, 2))
    mom = moments_from_states(LINEAR_FULL, states, Q_prev=np.eye(2) * gen.uniform(0, 1), dt=0.5)
    R = np.diag(gen.uniform(0.1, 2, 2))
    prior = mom.Px + 0.1 * np.eye(2)
    post = kalman_update(mom, gen.standard_normal(2), R, np.zeros(2), mom.x_mean, prior)
    S = mom.Py + mom.Qy + R
    raw = prior - post.gain @ S @ post.gain.T
    assert np.linalg.eigvalsh(prior - raw).min() >= -psd_tol(prior)


def linear_batch(n, r, m, seed, noise=1.0):
    t = np.arange(1.0, n + 1)
    gen = RngHandle(seed, "lin").generator()
    y = 3.0 + 0.5 * t + noise * gen.standard_normal(n)
    log = MeasurementLog(t, y)

    def est(s):
        idx = np.array(s) - 1
        return fit(LsqProblem(LINEAR, MeasurementLog(t[idx], y[idx]), [0.0, 0.0], 1.0))

    subs = jk.sample_subsets(n, r, m, rng=RngHandle(seed, "subs"))
    return jk.build_batch(subs, est, n, r, 1.0), log


def test_residuals_noiseless_exact_fit():
    batch, log = linear_batch(12, 8, 6, 0, noise=0.0)
    res = residual_stats(batch, log, 4, LINEAR)
    assert np.abs(res.bias).max() < 1e-8 and res.sigma2[0, 0] < 1e-14


def test_residuals_single_member_by_hand():
    batch = jk.EnsembleBatch([(1,)], [[0.0, 0.0]], 2, 1, anchor_time=0.0)
    log = MeasurementLog([0.0, 1.0], [0.0, 2.0])
    for scaling in ("literal", "average"):
        res = residual_stats(batch, log, 1, LINEAR, scaling)
        assert res.sigma2[0, 0] == pytest.approx(4.0)
        assert res.bias[0] == pytest.approx(2.0)


def test_residual_variance_on_linear_model():
    values = []
    for seed in range(10):
        batch, log = linear_batch(200, 180, 25, seed)
        values.append(residual_stats(batch, log, 20, LINEAR).sigma2[0, 0])
    assert all(0.6 <= v <= 1.6 for v in values)


def test_literal_scaling_shrinks_by_d_over_r_m():
    batch, log = linear_batch(200, 180, 25, 0)
    avg = residual_stats(batch, log, 20, LINEAR, "average").sigma2[0, 0]
    lit = residual_stats(batch, log, 20, LINEAR, "literal").sigma2[0, 0]
    assert lit == pytest.approx(avg * 20 / (180 * 25), rel=1e-12)


def test_insufficient_holdout():
    batch, log = linear_batch(12, 8, 3, 0)
    with pytest.raises(InsufficientHoldout):
        residual_stats(batch, log, 5, LINEAR)


def test_adaptive_residuals_examples():
    prev = ResidualStats(np.array([0.0]), np.array([[1.0]]))
    new = ResidualStats(np.array([1.0]), np.array([[1.0]]))
    out = adaptive_residuals(prev, new, 10, 9)
    assert out.bias[0] == pytest.approx(0.9)
    assert out.sigma2[0, 0] == pytest.approx(0.82)
    same = adaptive_residuals(prev, new, 10, 10)
    assert same.bias[0] == 1.0 and same.sigma2[0, 0] == 1.0


def spread_batch(value):
    """Two members whose output spread at any time is ``value``."""
    a = np.sqrt(value)
    return jk.EnsembleBatch([(1,), (2,)], [[-a, 0.0], [a, 0.0]], 2, 1, 0.0)


def test_estimate_R_examples():
    log = MeasurementLog([0.0, 1.0], [0.0, 0.0])
    R, clipped = estimate_R(ResidualStats(np.zeros(1), np.array([[1.4]])), spread_batch(0.3), log, LINEAR)
    assert R[0, 0] == pytest.approx(1.1) and not clipped
    R, clipped = estimate_R(ResidualStats(np.zeros(1), np.array([[0.3]])), spread_batch(0.3), log, LINEAR)
    assert R[0, 0] == pytest.approx(0.0, abs=1e-12)
    R, clipped = estimate_R(ResidualStats(np.zeros(1), np.array([[0.2]])), spread_batch(0.5), log, LINEAR)
    assert R[0, 0] == 0.0 and clipped


def test_estimate_Q_examples():
    q = estimate_Q([[1.0]], [[1.0]], [[0.0]], [[1.0]], [[0.0]], 1.0)
    assert q.Q[0, 0] == 0.0
    q = estimate_Q([[2.0]], [[1.0]], [[1.0]], [[2.0]], [[0.0]], 1.0)
    assert q.Q[0, 0] == pytest.approx(1.5)
    both = estimate_Q([[2.0]], [[1.0]], [[1.0]], [[2.0]], [[0.0]], 1.0,
                      omit_Qy=True, omit_Px_minus=True)
    assert both.Q[0, 0] == pytest.approx(2.5) and both.Q[0, 0] >= q.Q[0, 0]


def test_estimate_Q_denominator_switch():
    args = ([[2.0]], [[1.0]], [[1.0]], [[2.0]], [[1.0]], 1.0)
    assert estimate_Q(*args).raw[0, 0] == pytest.approx(1 + 1 / 3)
    assert estimate_Q(*args, denominator="paper").raw[0, 0] == pytest.approx(2.0)
    with pytest.raises(ValueError):
        estimate_Q(*args[:-1], 0.0)


def test_literal_denominator_reverses_pessimism():
    # with sigma2 - Qy, dropping Qy enlarges the denominator and lowers Q
    args = ([[2.0]], [[1.0]], [[1.0]], [[2.0]], [[1.0]], 1.0)
    full = estimate_Q(*args, denominator="paper").raw[0, 0]
    omitted = estimate_Q(*args, denominator="paper", omit_Qy=True).raw[0, 0]
    assert omitted < full


def test_enkf_step_shapes_and_determinism():
    members = np.column_stack([np.linspace(1, 2, 20), np.full(20, 0.5)])
    args = (LINEAR, members, 0.0, 1.0, [2.0], np.diag([0.1, 0.0]), np.eye(1), [0.0])
    a, post = enkf_step(*args, RngHandle(3))
    b, _ = enkf_step(*args, RngHandle(3))
    assert a.shape == members.shape and post.mean.shape == (2,)
    np.testing.assert_array_equal(a, b)


def linear_log(n=80, seed=0, q=0.0, r=1.0):
    times = np.linspace(0, 20, n)
    Q = np.diag([q, 0.0])
    return simulate(LINEAR, ThetaVector(0.0, [1.0, 0.5]), times, Q, r * np.eye(1), RngHandle(seed))


def test_run_adaptive_records_and_determinism():
    truth, log = linear_log()
    cfg = FilterConfig(r=25, m=8, n0=30, seed=4, starts=2)
    a = run_adaptive(LINEAR, log, cfg, truth)
    b = run_adaptive(LINEAR, log, cfg, truth)
    assert [x.n for x in a] == list(range(31, 81))
    assert all(x.mode in ("jackknife", "enkf") for x in a)
    assert np.all(np.diff([x.t for x in a]) > 0)
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.state, y.state)
        np.testing.assert_array_equal(x.Q, y.Q)
        np.testing.assert_array_equal(x.R, y.R)
        assert x.err == y.err and x.mode == y.mode
    assert np.median([x.err for x in a]) < 1.0


def test_run_adaptive_handoff_freezes_noise():
    truth, log = linear_log(n=120, seed=2)
    cfg = FilterConfig(r=25, m=8, n0=30, seed=1, starts=2, handoff_window=3, handoff_tol=0.5)
    recs = run_adaptive(LINEAR, log, cfg, truth)
    modes = [x.mode for x in recs]
    assert "enkf" in modes
    first = modes.index("enkf")
    assert all(m == "enkf" for m in modes[first:])
    frozen = [x.R for x in recs[first:]]
    assert all(np.array_equal(frozen[0], R) for R in frozen)


def test_run_adaptive_rejects_bad_sizes():
    truth, log = linear_log(n=40)
    with pytest.raises(InvalidSizes):
        run_adaptive(LINEAR, log, FilterConfig(r=30, n0=30))
    with pytest.raises(InvalidSizes):
        run_adaptive(LINEAR, log, FilterConfig(r=20, n0=40))


def test_step_errors_carry_the_index():
    def closed_form(times, t0, x0, p):
        times = np.asarray(times, dtype=float)
        x = x0[0] + p[0] * (times - t0)
        return np.where(times > 9.9, np.nan, x)[:, None]

    fragile = ModelSpec(name="fragile", state_dim=1, param_dim=1, output_dim=1,
                        drift=LINEAR.drift, observe=LINEAR.observe, closed_form=closed_form)
    times = np.arange(40.0) / 3.0  # t = 10 is the 31st measurement
    log = MeasurementLog(times, 1.0 + 0.5 * times)
    cfg = FilterConfig(r=25, m=4, n0=30, starts=1, init=np.array([1.0, 0.5]))
    with pytest.raises(StepError) as info:
        run_adaptive(fragile, log, cfg)
    assert info.value.step == 31
