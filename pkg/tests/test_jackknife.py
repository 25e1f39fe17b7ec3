import math
import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from jackfilter import jackknife as jk
from jackfilter.errors import BatchMismatch, InvalidSizes, TooManySubsets
from jackfilter.numkit import RngHandle
from jackfilter.oracle import enumerate_jackknife, linear_dataset, proportional_fit

# hand-derived: members 1 +/- sqrt(0.1011...) give a spread of exactly 1 with
# prefactor r/((d+1) m) = 9/(1*2) around the updated mean 0.9
MEMBER_OFFSET = math.sqrt(1 / 9 - 0.01)


def scalar_batch(values, n, r, subsets=None):
    subsets = subsets or [tuple(range(1, r + 1))] * len(values)
    return jk.EnsembleBatch(subsets, np.array(values, dtype=float)[:, None], n, r)


def test_sample_subsets_full_enumeration():
    subs = jk.sample_subsets(3, 2, 3, rng=RngHandle(0))
    assert sorted(subs) == [(1, 2), (1, 3), (2, 3)]


def test_sample_subsets_must_include():
    subs = jk.sample_subsets(5, 4, 4, must_include=5, rng=RngHandle(0))
    assert sorted(subs) == [(1, 2, 3, 5), (1, 2, 4, 5), (1, 3, 4, 5), (2, 3, 4, 5)]


def test_sample_subsets_growth_family():
    subs = jk.sample_subsets(50, 45, 25, rng=RngHandle(1))
    assert len(subs) == 25 and len(set(subs)) == 25
    assert all(len(s) == 45 and len(set(s)) == 45 for s in subs)


def test_sample_subsets_rejection_path_is_distinct():
    # C(200, 20) is far above the enumeration limit
    subs = jk.sample_subsets(200, 180, 30, must_include=200, rng=RngHandle(2))
    assert len(set(subs)) == 30 and all(200 in s for s in subs)


def test_sample_subsets_with_replacement_when_oversampled():
    subs = jk.sample_subsets(4, 3, 10, rng=RngHandle(0))
    assert len(subs) == 10 and len(set(subs)) <= 4


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 40), st.data())
def test_sample_subsets_invariants(n, data):
    r = data.draw(st.integers(1, n - 1))
    m = data.draw(st.integers(1, 30))
    must = data.draw(st.one_of(st.none(), st.integers(1, n)))
    subs = jk.sample_subsets(n, r, m, must_include=must, rng=RngHandle(n, "prop"))
    assert len(subs) == m
    for s in subs:
        assert len(s) == r and len(set(s)) == r
        assert list(s) == sorted(s) and 1 <= s[0] and s[-1] <= n
        if must is not None:
            assert must in s


def test_sample_subsets_rejects_bad_sizes():
    with pytest.raises(InvalidSizes):
        jk.sample_subsets(5, 5, 3)
    with pytest.raises(InvalidSizes):
        jk.sample_subsets(5, 3, 0)
    with pytest.raises(InvalidSizes):
        jk.sample_subsets(5, 3, 2, must_include=6)


def test_sample_subsets_deterministic():
    a = jk.sample_subsets(30, 25, 10, must_include=30, rng=RngHandle(4, "s"))
    b = jk.sample_subsets(30, 25, 10, must_include=30, rng=RngHandle(4, "s"))
    assert a == b


def test_batch_jsve_degenerate():
    stats = jk.batch_jsve(scalar_batch([3.0, 3.0, 3.0], 5, 4))
    assert stats.mean[0] == 3.0 and stats.var[0, 0] == 0.0


def test_batch_jsve_two_members():
    stats = jk.batch_jsve(scalar_batch([0.0, 2.0], 2, 1, [(1,), (2,)]))
    assert stats.mean[0] == 1.0
    assert stats.var[0, 0] == pytest.approx(1.0, abs=1e-15)


def test_batch_jsve_custom_center():
    stats = jk.batch_jsve(scalar_batch([0.0, 2.0], 2, 1, [(1,), (2,)]), theta_center=[0.0])
    assert stats.var[0, 0] == pytest.approx(2.0)


def test_batch_jsve_matches_enumeration():
    t, y = linear_dataset(8, 7)
    ref = enumerate_jackknife(t, y, 6)
    subs = jk.sample_subsets(8, 6, 28, rng=RngHandle(0))
    batch = jk.build_batch(subs, lambda s: proportional_fit(t[np.array(s) - 1], y[np.array(s) - 1]), 8, 6)
    stats = jk.batch_jsve(batch)
    assert stats.var[0, 0] == pytest.approx(ref["vtilde_n"], rel=1e-12)
    assert stats.mean[0] == pytest.approx(ref["theta_hat"], rel=1e-12)


def test_oracle_limits():
    t, y = linear_dataset(8, 0)
    with pytest.raises(InvalidSizes):
        enumerate_jackknife(t, y, 8)
    t, y = linear_dataset(40, 0)
    with pytest.raises(TooManySubsets):
        enumerate_jackknife(t, y, 20)


def test_oracle_frozen_values():
    t, y = linear_dataset(8, 7)
    ref = enumerate_jackknife(t, y, 6)
    assert ref["subsets"] == 28 and ref["d"] == 2
    # frozen from the brute-force enumeration
    assert ref["theta_n"] == pytest.approx(2.0083028324150525, rel=1e-14)
    assert ref["vtilde_n"] == pytest.approx(0.0071625289116047687, rel=1e-12)
    assert ref["v_n"] == pytest.approx(0.0072073827500963184, rel=1e-12)


def test_adaptive_weights():
    assert jk.adaptive_weights(10, 8) == pytest.approx((0.8, 0.2))
    assert jk.adaptive_weights(5, 5) == (1.0, 0.0)
    assert jk.adaptive_weights(50, 45) == pytest.approx((0.9, 0.1))
    with pytest.raises(InvalidSizes):
        jk.adaptive_weights(3, 4)


def test_adaptive_update_r_equals_n_reproduces_batch():
    prev = jk.JackknifeStats(np.array([5.0]), np.array([[3.0]]), 3, 10)
    full = (1, 2, 3, 4)
    batch = scalar_batch([2.0, 2.0], 4, 4, [full, full])
    out = jk.adaptive_update(prev, batch)
    direct = jk.batch_jsve(batch)
    np.testing.assert_array_equal(out.mean, direct.mean)
    np.testing.assert_array_equal(out.var, direct.var)


def test_adaptive_update_worked_example():
    prev = jk.JackknifeStats(np.array([0.0]), np.array([[1.0]]), 9, 9)
    members = [1 - MEMBER_OFFSET, 1 + MEMBER_OFFSET]
    subsets = [tuple(range(1, 9)) + (10,), tuple(range(2, 11))]
    out = jk.adaptive_update(prev, scalar_batch(members, 10, 9, subsets))
    assert out.mean[0] == pytest.approx(0.9, abs=1e-12)
    assert out.var[0, 0] == pytest.approx(0.82, abs=1e-12)
    assert out.n == 10 and out.m_total == 11


def test_adaptive_update_constant_members_shrink():
    prev = jk.JackknifeStats(np.array([2.0]), np.array([[4.0]]), 9, 9)
    subsets = [tuple(range(2, 11))] * 3
    out = jk.adaptive_update(prev, scalar_batch([2.0, 2.0, 2.0], 10, 9, subsets), center="previous")
    assert out.mean[0] == pytest.approx(2.0)
    assert out.var[0, 0] == pytest.approx(0.04, abs=1e-12)


def test_adaptive_update_requires_newest_index():
    prev = jk.JackknifeStats(np.zeros(1), np.zeros((1, 1)), 4, 4)
    with pytest.raises(BatchMismatch):
        jk.adaptive_update(prev, scalar_batch([1.0], 5, 3, [(1, 2, 3)]))
    with pytest.raises(BatchMismatch):
        jk.adaptive_update(prev, scalar_batch([1.0], 6, 3, [(1, 2, 6)]))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_adaptive_mean_is_convex_combination(seed):
    gen = np.random.default_rng(seed)
    n, dim = int(gen.integers(5, 30)), int(gen.integers(1, 4))
    r = int(gen.integers(2, n))
    prev = jk.JackknifeStats(gen.standard_normal(dim), np.eye(dim), n - 1, 5)
    subs = jk.sample_subsets(n, r, 4, must_include=n, rng=RngHandle(seed))
    batch = jk.EnsembleBatch(subs, gen.standard_normal((4, dim)), n, r)
    out = jk.adaptive_update(prev, batch)
    lo = np.minimum(prev.mean, batch.mean) - 1e-12
    hi = np.maximum(prev.mean, batch.mean) + 1e-12
    assert np.all((lo <= out.mean) & (out.mean <= hi))
    a1, a2 = jk.adaptive_weights(n, r)
    assert a1**2 + a2**2 <= 1.0
    assert np.linalg.eigvalsh(out.var).min() >= -1e-12


def test_build_batch_order_independent_of_workers():
    t, y = linear_dataset(12, 3)
    subs = jk.sample_subsets(12, 9, 40, rng=RngHandle(3))
    seen = set()

    def est(s):
        seen.add(threading.get_ident())
        idx = np.array(s) - 1
        return proportional_fit(t[idx], y[idx])

    serial = jk.build_batch(subs, est, 12, 9, workers=1)
    pooled = jk.build_batch(subs, est, 12, 9, workers=4)
    np.testing.assert_array_equal(serial.thetas, pooled.thetas)
    assert serial.subsets == pooled.subsets


def test_worker_count_env(monkeypatch):
    monkeypatch.setenv("JACKFILTER_THREADS", "3")
    assert jk.worker_count() == 3
    monkeypatch.setenv("JACKFILTER_THREADS", "0")
    assert jk.worker_count() >= 1
    assert jk.worker_count(2) == 2
