"""Random stream determinism and independence."""

import numpy as np

from telecast.rng import RngStream


def test_same_seed_counter_identical_draws():
    a = RngStream(42, counter=3).normal((100,))
    b = RngStream(42, counter=3).normal((100,))
    assert np.array_equal(a, b)


def test_counter_changes_stream():
    a = RngStream(42, counter=0).normal((100,))
    b = RngStream(42, counter=1).normal((100,))
    assert not np.array_equal(a, b)


def test_split_streams_differ_from_parent_and_each_other():
    root = RngStream(7)
    a = root.split("data").normal((50,))
    b = root.split("init").normal((50,))
    c = RngStream(7).normal((50,))
    assert not np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_split_is_stable_regardless_of_draw_order():
    r1 = RngStream(5)
    r1.normal((10,))
    child_after = r1.split("x").normal((5,))
    child_fresh = RngStream(5).split("x").normal((5,))
    assert np.array_equal(child_after, child_fresh)


def test_nested_split_paths_are_distinct():
    root = RngStream(1)
    ab = root.split("a").split("b").normal((8,))
    ba = root.split("b").split("a").normal((8,))
    assert not np.array_equal(ab, ba)


def test_permutation_deterministic():
    assert np.array_equal(RngStream(3).permutation(20), RngStream(3).permutation(20))


def test_integers_within_range():
    draws = RngStream(11).integers(1, 22, (1000,))
    assert draws.min() >= 1 and draws.max() <= 21


def test_unit_floats_in_unit_interval():
    u = RngStream(13).unit_floats((1000,))
    assert (u >= 0).all() and (u < 1).all()
