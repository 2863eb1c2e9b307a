import numpy as np

from tntprune.rng import RngStream
from tntprune.tensor import gaussian


def test_identical_state_gives_identical_draws():
    a = gaussian(RngStream(5, 9, 17), (3, 4)).data
    b = gaussian(RngStream(5, 9, 17), (3, 4)).data
    assert a.tobytes() == b.tobytes()


def test_stream_advances_and_rewinds():
    s = RngStream(1, 2)
    start = s.copy()
    first = s.standard_normal(10)
    second = s.standard_normal(10)
    assert not np.array_equal(first, second)
    assert np.array_equal(start.standard_normal(10), first)
    assert np.array_equal(start.standard_normal(10), second)


def test_counter_addresses_draws():
    s = RngStream(3, 4)
    s.standard_normal(7)
    mid = s.counter
    after = s.standard_normal(5)
    assert np.array_equal(RngStream(3, 4, mid).standard_normal(5), after)


def test_moments_of_a_million_draws():
    x = RngStream(2024, 1).standard_normal(1_000_000)
    assert abs(x.mean()) < 0.005
    assert abs(x.std() - 1.0) < 0.005


def test_distinct_streams_uncorrelated():
    a = RngStream(99, 1).standard_normal(100_000)
    b = RngStream(99, 2).standard_normal(100_000)
    assert abs(np.corrcoef(a, b)[0, 1]) < 0.01


def test_fork_is_deterministic_and_distinct():
    root = RngStream(8, 0)
    assert root.fork(1, 2).stream_id == root.fork(1, 2).stream_id
    assert root.fork(1, 2).stream_id != root.fork(2, 1).stream_id
    a = root.fork(0).standard_normal(50_000)
    b = root.fork(1).standard_normal(50_000)
    assert abs(np.corrcoef(a, b)[0, 1]) < 0.02


def test_golden_values_are_stable():
    # Philox-4x64 keyed by (seed=0, stream=0); guards against generator drift.
    got = RngStream(0, 0).standard_normal(3)
    assert got.tolist() == [0.15929546600623282, -1.7741885208017214, 1.3265118818830892]
