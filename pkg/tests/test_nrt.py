import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from smartbal.nrt import NrtScenario, bin_value, publish, published_count

E, Es, Is, El, Il = (NrtScenario(kind=k) for k in ("E", "Es", "Is", "El", "Il"))


@pytest.mark.parametrize("avg,scenario,expected", [
    (500.0, Es, (500.0, 500.0)),
    (50.0, Es, (-120.0, 120.0)),
    (50.0, Is, (0.0, 240.0)),
    (-950.0, Il, (-960.0, -720.0)),
    (0.0, E, (0.0, 0.0)),
    (-10.0, Is, (-240.0, 0.0)),
    (500.0, El, (-900.0, 970.0)),
    (980.0, El, (980.0, 980.0)),
    (980.0, Il, (960.0, 1200.0)),
])
def test_bin_value(avg, scenario, expected):
    assert bin_value(avg, scenario) == expected


def test_centered_anchor():
    assert bin_value(50.0, NrtScenario(kind="Is", bin_anchor="centered")) == (-120.0, 120.0)


def test_long_kind_names_and_label():
    s = NrtScenario(kind="ExactWithLargeCentralInterval", delay=120)
    assert s.kind == "El" and s.label == "El-120s"
    with pytest.raises(ValueError):
        NrtScenario(kind="X")
    assert NrtScenario.from_dict({"kind": "Is", "delay_s": 120}).delay == 120


def test_nothing_published_at_start():
    b = publish([], 0.0, Es, n=10)
    exact, interval, future = b.ranges()
    assert exact.size == 0 and interval.size == 0
    assert np.array_equal(future, np.arange(10))


def test_availability_with_one_minute_delay():
    b = publish([300.0, -200.0, 10.0], 180.0, E, n=5)
    exact, interval, future = b.ranges()
    assert list(exact) == [0, 1] and list(future) == [2, 3, 4] and interval.size == 0
    assert published_count(180.0, NrtScenario(delay=120)) == 1


def test_binned_and_exact_mix():
    b = publish([50.0, 500.0, 0.0], 180.0, Es, n=4)
    assert list(b.interval) == [0] and (b.lower[0], b.upper[0]) == (-120.0, 120.0)
    assert list(b.exact) == [1]


def test_publish_requires_completed_minutes():
    with pytest.raises(ValueError):
        publish([1.0], 240.0, E, n=5)


traces = st.lists(st.floats(-3000, 3000, allow_nan=False), min_size=1, max_size=40)
scenarios = st.builds(NrtScenario, kind=st.sampled_from(["E", "Es", "Is", "El", "Il"]),
                      delay=st.sampled_from([60.0, 120.0]))


@given(traces, scenarios)
def test_partition_and_truth_containment(avgs, scenario):
    n = len(avgs)
    b = publish(avgs, n * 60.0, scenario, n=n)
    exact, interval, future = b.ranges()
    union = np.sort(np.concatenate([exact, interval, future]))
    assert np.array_equal(union, np.arange(n))
    assert np.all(b.lower <= b.upper)
    pub = np.flatnonzero(np.isfinite(b.lower))
    a = np.asarray(avgs)
    assert np.all((b.lower[pub] <= a[pub]) & (a[pub] <= b.upper[pub]))


@given(traces, scenarios)
def test_monotone_information(avgs, scenario):
    n = len(avgs)
    prev = None
    for k in range(n + 1):
        b = publish(avgs[:k], k * 60.0, scenario, n=n)
        if prev is not None:
            assert set(b.future) <= set(prev.future)
            done = np.flatnonzero(np.isfinite(prev.lower))
            assert np.array_equal(b.lower[done], prev.lower[done])
            assert np.array_equal(b.upper[done], prev.upper[done])
        prev = b


@given(traces, st.sampled_from([60.0, 120.0]))
def test_exact_and_small_interval_agree_outside_it(avgs, delay):
    n = len(avgs)
    a = publish(avgs, n * 60.0, NrtScenario("E", delay), n=n)
    b = publish(avgs, n * 60.0, NrtScenario("Es", delay), n=n)
    big = np.abs(avgs) > 120
    assert np.array_equal(a.lower[big], b.lower[big]) and np.array_equal(a.upper[big], b.upper[big])


def test_published_bounds_finite_where_due():
    b = publish([1.0] * 5, 300.0, Il, n=5)
    assert all(math.isfinite(x) for x in b.lower[:4])
