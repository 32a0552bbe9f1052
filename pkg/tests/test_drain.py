import math

import pytest
from hypothesis import given
from hypothesis import strategies as st

from ckptf.ckpt.drain import DrainPolicy, Drainer, drain
from ckptf.clock import VirtualClock
from ckptf.errors import DrainTimeout
from ckptf.fabric import Fabric, FabricConfig

W = 10


def in_flight(latencies, window=W):
    """One UD message per latency, all sent at t=0; draining starts at t=0."""
    clock = VirtualClock()
    fab = Fabric(FabricConfig(latency_min=0, latency_max=max(latencies, default=0)), nodes=2,
                 clock=clock)
    a, b = fab.create_hca(0), fab.create_hca(1)
    src, dst = fab.create_qp(a, "UD"), fab.create_qp(b, "UD")
    for i, lat in enumerate(latencies):
        fab._latency = lambda lat=lat: lat
        fab.post_send(src, dst.address, bytes([i]))
    return fab, [("UD", dst)]


def oracle_windows(latencies, window=W):
    """Count windows from the definition: window k covers (t0+(k-1)W, t0+kW]."""
    arrivals = [lat for lat in latencies if lat > 0]
    k = 1
    while True:
        if not any((k - 1) * window < lat <= k * window for lat in arrivals):
            return k
        k += 1


def stream(latency):
    """A schedule with an arrival every half window up to ``latency``."""
    return sorted({*range(0, latency, W // 2), latency})


@pytest.mark.parametrize("latency, windows", [(0, 1), (W // 2, 2), (3 * W // 2, 3), (5 * W // 2, 4)])
def test_window_count_law(latency, windows):
    schedule = stream(latency)
    fab, queues = in_flight(schedule)
    res = drain(fab, queues, DrainPolicy(window=W))
    assert res.windows == windows
    assert res.windows == DrainPolicy(window=W).expected_windows(latency)
    assert res.drained == len(schedule)
    assert fab.in_flight() == 0


def test_everything_inside_one_window_takes_two_windows():
    fab, queues = in_flight([1, 3, 7, 9, 10])
    res = drain(fab, queues, DrainPolicy(window=W))
    assert res.windows == 2
    assert res.per_window == [5, 0]


def test_no_traffic_is_one_empty_window():
    fab, queues = in_flight([])
    assert drain(fab, queues, DrainPolicy(window=W)).per_window == [0]


@given(st.lists(st.integers(0, 120), max_size=30))
def test_windows_match_oracle_and_respect_the_bound(latencies):
    fab, queues = in_flight(latencies)
    got = []
    res = drain(fab, queues, DrainPolicy(window=W), sink=lambda mode, p: got.append(p))
    assert res.windows == oracle_windows(latencies)
    assert res.windows <= math.ceil(max(latencies, default=0) / W) + 1
    # whatever the drain leaves behind is still in flight, never lost
    assert len(got) + fab.in_flight() == len(latencies)
    assert fab.conservation_holds()


@given(st.integers(0, 120))
def test_dense_schedules_hit_the_bound_exactly(latency):
    fab, queues = in_flight(stream(latency))
    res = drain(fab, queues, DrainPolicy(window=W))
    assert res.windows == math.ceil(latency / W) + 1
    assert fab.in_flight() == 0


def test_gap_longer_than_a_window_stops_early():
    # the late message arrives after an empty window and is left for later
    fab, queues = in_flight([5, 35])
    res = drain(fab, queues, DrainPolicy(window=W))
    assert res.windows == 2
    assert fab.in_flight() == 1


def test_timeout_when_arrivals_never_stop():
    fab, queues = in_flight(list(range(1, 200, 3)))
    with pytest.raises(DrainTimeout):
        drain(fab, queues, DrainPolicy(window=W, max_windows=3))


def test_drainer_stepping_by_hand():
    fab, queues = in_flight([15])
    d = Drainer(fab, queues, DrainPolicy(window=W), sink=lambda *_: None)
    fab.clock.advance(W)
    assert d.window() == 0 and d.done
    assert d.result().windows == 1


def test_policy_validation():
    with pytest.raises(ValueError):
        DrainPolicy(window=0)
    with pytest.raises(ValueError):
        DrainPolicy(max_windows=1)
