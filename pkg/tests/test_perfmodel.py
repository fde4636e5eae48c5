"""Unit tests for the analytical performance model."""

import math

import pytest
from hypothesis import given, strategies as st

from statefarm.perfmodel import (
    CompletionTime,
    CostParams,
    completion_time,
    min_flush_frequency,
    predicted_speedup_separate,
    service_time,
    speedup_bound_separate,
)


def test_service_time_compute_bound():
    assert service_time(CostParams(t_a=0, t_f=100, n_w=4)) == 25.0


def test_service_time_arrival_bound():
    assert service_time(CostParams(t_a=50, t_f=100, n_w=4)) == 50.0


def test_service_time_tie():
    assert service_time(CostParams(t_a=25, t_f=100, n_w=4)) == 25.0


def test_completion_time_single_worker():
    ct = completion_time(CostParams(t_f=100, t_s=0, m=1000, n_w=1))
    assert ct == CompletionTime(ideal_us=100000.0, stateless_us=100000.0)


def test_completion_time_halves_when_degree_doubles():
    a = completion_time(CostParams(t_f=100, t_s=10, m=1000, n_w=2))
    b = completion_time(CostParams(t_f=100, t_s=10, m=1000, n_w=4))
    assert b.ideal_us == a.ideal_us / 2
    assert b.stateless_us == a.stateless_us / 2


def test_completion_time_ideal_curve_sixteenth():
    # A compute cost giving 428.032 ms at degree 1 must give exactly a
    # sixteenth of that (26.752 ms) at degree 16.
    base = completion_time(CostParams(t_f=42.8032, t_s=0.0, m=10000, n_w=1))
    wide = completion_time(CostParams(t_f=42.8032, t_s=0.0, m=10000, n_w=16))
    assert base.ideal_us == pytest.approx(428032.0)
    assert wide.ideal_us == pytest.approx(base.ideal_us / 16)
    assert wide.ideal_us == pytest.approx(26752.0)


@pytest.mark.parametrize(
    "ratio,bound", [(100.0, 101.0), (10.0, 11.0), (5.0, 6.0)]
)
def test_speedup_bound_reference_ratios(ratio, bound):
    t_s = 2.0
    assert speedup_bound_separate(ratio * t_s, t_s) == bound


def test_speedup_bound_pure_serial():
    assert speedup_bound_separate(0.0, 10.0) == 1.0


def test_speedup_bound_unbounded_when_update_free():
    assert speedup_bound_separate(100.0, 0.0) == math.inf


def test_predicted_speedup_identity_at_one_worker():
    assert predicted_speedup_separate(100.0, 10.0, 1) == 1.0


def test_predicted_speedup_ratio_ten_at_sixteen():
    assert predicted_speedup_separate(10.0, 1.0, 16) == pytest.approx(176 / 26)


def test_predicted_speedup_approaches_bound():
    assert predicted_speedup_separate(5.0, 1.0, 10**7) == pytest.approx(6.0, rel=1e-5)


def test_min_flush_frequency_formula():
    assert min_flush_frequency(2.0, 1.0, 8) == 16.0


def test_min_flush_frequency_unit_boundary():
    assert min_flush_frequency(1.0, 1.0, 1) == 1.0


def test_min_flush_frequency_no_constraint_without_update_cost():
    assert min_flush_frequency(100.0, 0.0, 8) == 0.0


@pytest.mark.parametrize(
    "kwargs",
    [
        {"t_a": -1.0},
        {"t_f": -1.0},
        {"t_s": -1.0},
        {"m": -1},
        {"n_w": 0},
    ],
)
def test_cost_params_validation(kwargs):
    with pytest.raises(ValueError):
        CostParams(**kwargs)


def test_predicted_speedup_rejects_degenerate_inputs():
    with pytest.raises(ValueError):
        predicted_speedup_separate(0.0, 0.0, 4)
    with pytest.raises(ValueError):
        predicted_speedup_separate(1.0, 1.0, 0)


positive_times = st.floats(min_value=0.01, max_value=1e6, allow_nan=False)


@given(t_f=positive_times, t_s=positive_times)
def test_predicted_speedup_is_one_at_degree_one(t_f, t_s):
    assert predicted_speedup_separate(t_f, t_s, 1) == pytest.approx(1.0)


@given(t_f=positive_times, t_s=positive_times, n_w=st.integers(1, 512))
def test_predicted_speedup_nondecreasing_and_bounded(t_f, t_s, n_w):
    lo = predicted_speedup_separate(t_f, t_s, n_w)
    hi = predicted_speedup_separate(t_f, t_s, n_w + 1)
    assert hi >= lo - 1e-12
    assert hi <= speedup_bound_separate(t_f, t_s) * (1 + 1e-12)


@given(
    t_f=positive_times,
    t_s=positive_times,
    m=st.integers(1, 10**6),
    n_w=st.integers(1, 256),
)
def test_completion_time_scales_inversely_with_degree(t_f, t_s, m, n_w):
    one = completion_time(CostParams(t_f=t_f, t_s=t_s, m=m, n_w=1))
    many = completion_time(CostParams(t_f=t_f, t_s=t_s, m=m, n_w=n_w))
    assert many.ideal_us == pytest.approx(one.ideal_us / n_w)
