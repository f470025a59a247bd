import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from forksim.scenarios import distinct_tables
from forksim.workload import KeyDist, QueryKind, WorkloadSpec, generate

from . import oracles


class TestArrivals:
    def test_fixed_interarrival(self):
        s = generate(WorkloadSpec(rate=50_000, total_queries=100))
        assert set(np.diff(s.times).tolist()) == {oracles.INTERARRIVAL_50K_NS}

    def test_start_offset(self):
        s = generate(WorkloadSpec(total_queries=3, start_ns=500))
        assert s.times.tolist() == [500, 20_500, 40_500]

    def test_poisson_mean_gap(self):
        s = generate(WorkloadSpec(rate=50_000, total_queries=20_000, arrivals="poisson", seed=4))
        assert abs(np.diff(s.times).mean() - 20_000) < 600
        assert (np.diff(s.times) >= 0).all()


class TestMix:
    def test_all_set(self):
        s = generate(WorkloadSpec(total_queries=500))
        assert s.is_set.all() and s.set_fraction() == 1.0

    def test_ratio_over_many_queries(self):
        s = generate(WorkloadSpec(set_get_ratio=(1, 3), total_queries=100_000, seed=2))
        assert abs(s.set_fraction() - 0.25) <= 0.01

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 10), st.integers(0, 10), st.integers(1, 400))
    def test_set_count_exact(self, sets, gets, n):
        if sets + gets == 0:
            return
        s = generate(WorkloadSpec(set_get_ratio=(sets, gets), total_queries=n))
        assert int(s.is_set.sum()) == round(n * sets / (sets + gets))

    def test_iteration_yields_kinds(self):
        s = generate(WorkloadSpec(set_get_ratio=(1, 1), total_queries=10, clients=3))
        rows = list(s)
        assert {r[1] for r in rows} == {QueryKind.SET, QueryKind.GET}
        assert [r[3] for r in rows[:4]] == [0, 1, 2, 0]


class TestKeys:
    def test_determinism(self):
        a = generate(WorkloadSpec(seed=9, total_queries=1000))
        b = generate(WorkloadSpec(seed=9, total_queries=1000))
        assert np.array_equal(a.keys, b.keys) and np.array_equal(a.is_set, b.is_set)

    def test_seed_changes_keys(self):
        a = generate(WorkloadSpec(seed=1, total_queries=100))
        b = generate(WorkloadSpec(seed=2, total_queries=100))
        assert not np.array_equal(a.keys, b.keys)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 5000), st.sampled_from(list(KeyDist)), st.integers(0, 99))
    def test_keys_in_range(self, space, dist, seed):
        s = generate(WorkloadSpec(key_space=space, key_dist=dist, total_queries=200, seed=seed))
        assert s.keys.min() >= 0 and s.keys.max() < space

    def test_gaussian_touches_fewer_tables(self):
        n, space = 5000, 2**21
        uni = generate(WorkloadSpec(key_space=space, total_queries=n, seed=3))
        gau = generate(WorkloadSpec(key_space=space, total_queries=n, seed=3, key_dist="gaussian",
                                    key_stddev=space / 64))
        assert distinct_tables(gau.keys) < distinct_tables(uni.keys)


class TestValidation:
    @pytest.mark.parametrize("kw", [dict(rate=0), dict(set_get_ratio=(0, 0)), dict(set_get_ratio=(-1, 1)),
                                    dict(key_space=0), dict(arrivals="bursty"), dict(key_stddev=0.0),
                                    dict(key_dist="zipf"), dict(clients=0)])
    def test_rejects(self, kw):
        with pytest.raises(ValueError):
            WorkloadSpec(**kw)
