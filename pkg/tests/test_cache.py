import numpy as np
import pytest

from streamkv.cache import KvCache, PositionMode, TokenMeta

from oracles import naive_gather


def _fill(cache, layer, count, start=0):
    rng = np.random.default_rng(start + 100)
    for i in range(count):
        cache.append(
            layer,
            rng.normal(size=(cache.heads, cache.head_dim)),
            rng.normal(size=(cache.heads, cache.head_dim)),
            TokenMeta(original_position=start + i),
        )


def test_append_increments_length():
    c = KvCache(1, 2, 8)
    _fill(c, 0, 1)
    assert c.length(0) == 1


def test_original_positions_strictly_increasing():
    c = KvCache(1, 2, 8)
    _fill(c, 0, 5)
    pos = c.original_positions(0)
    assert np.all(np.diff(pos) > 0)


def test_append_rejects_non_increasing_position():
    c = KvCache(1, 1, 4)
    _fill(c, 0, 3)
    with pytest.raises(ValueError):
        c.append(0, np.zeros((1, 4)), np.zeros((1, 4)), TokenMeta(original_position=1))


def test_append_rejects_bad_shapes():
    c = KvCache(1, 2, 8)
    with pytest.raises(ValueError):
        c.append(0, np.zeros((2, 6)), np.zeros((2, 8)), TokenMeta(0))
    with pytest.raises(ValueError):
        c.append(0, np.zeros((3, 8)), np.zeros((2, 8)), TokenMeta(0))


def test_gather_keep_identity():
    c = KvCache(1, 1, 4)
    _fill(c, 0, 6)
    before = c.keys(0).copy()
    c.gather_keep(0, np.arange(6))
    np.testing.assert_array_equal(c.keys(0), before)


def test_gather_keep_compacts_preserving_order():
    c = KvCache(1, 1, 4)
    _fill(c, 0, 5)
    keys_before = c.keys(0).copy()
    c.gather_keep(0, [0, 3, 4])
    assert c.length(0) == 3
    np.testing.assert_array_equal(c.original_positions(0), [0, 3, 4])
    np.testing.assert_array_equal(c.keys(0), keys_before[:, [0, 3, 4]])


def test_gather_keep_rejects_bad_indices():
    c = KvCache(1, 1, 4)
    _fill(c, 0, 5)
    with pytest.raises(ValueError):
        c.gather_keep(0, [0, 0, 1])
    with pytest.raises(ValueError):
        c.gather_keep(0, [3, 5])
    with pytest.raises(ValueError):
        c.gather_keep(0, [-1, 2])


def test_gather_keep_matches_naive_filter_oracle():
    rng = np.random.default_rng(11)
    for _ in range(50):
        n = int(rng.integers(1, 40))
        c = KvCache(1, 2, 4)
        entries = []
        for i in range(n):
            k = rng.normal(size=(2, 4)).astype(np.float32)
            v = rng.normal(size=(2, 4)).astype(np.float32)
            c.append(0, k, v, TokenMeta(i))
            entries.append((k, v, i))
        m = int(rng.integers(1, n + 1))
        kept = np.sort(rng.choice(n, size=m, replace=False))
        c.gather_keep(0, kept)
        expect = naive_gather(entries, kept)
        assert c.length(0) == len(expect)
        for slot, (k, v, pos) in enumerate(expect):
            np.testing.assert_array_equal(c.keys(0)[:, slot], k)
            np.testing.assert_array_equal(c.values(0)[:, slot], v)
            assert c.original_positions(0)[slot] == pos


def test_gather_composition_law():
    rng = np.random.default_rng(12)
    for _ in range(30):
        n = int(rng.integers(2, 30))
        c1 = KvCache(1, 1, 4)
        c2 = KvCache(1, 1, 4)
        for i in range(n):
            k = rng.normal(size=(1, 4)).astype(np.float32)
            v = rng.normal(size=(1, 4)).astype(np.float32)
            c1.append(0, k, v, TokenMeta(i))
            c2.append(0, k, v, TokenMeta(i))
        a = np.sort(rng.choice(n, size=int(rng.integers(1, n + 1)), replace=False))
        b = np.sort(rng.choice(a.size, size=int(rng.integers(1, a.size + 1)), replace=False))
        c1.gather_keep(0, a)
        c1.gather_keep(0, b)
        c2.gather_keep(0, a[b])
        np.testing.assert_array_equal(c1.keys(0), c2.keys(0))
        np.testing.assert_array_equal(c1.original_positions(0), c2.original_positions(0))


def test_append_after_gather_keeps_positions_ascending():
    c = KvCache(1, 1, 4)
    _fill(c, 0, 5)
    c.gather_keep(0, [0, 3, 4])
    _fill(c, 0, 3, start=5)
    pos = c.original_positions(0)
    np.testing.assert_array_equal(pos, [0, 3, 4, 5, 6, 7])
    assert np.all(np.diff(pos) > 0)


def test_positions_for_modes():
    c = KvCache(1, 1, 4)
    _fill(c, 0, 5)
    np.testing.assert_array_equal(
        c.positions_for(0, PositionMode.CACHE_RELATIVE), c.positions_for(0, PositionMode.ORIGINAL)
    )
    c.gather_keep(0, [0, 3, 4])
    np.testing.assert_array_equal(c.positions_for(0, PositionMode.CACHE_RELATIVE), [0, 1, 2])
    np.testing.assert_array_equal(c.positions_for(0, PositionMode.ORIGINAL), [0, 3, 4])


def test_memory_bytes_formula():
    c = KvCache(2, 2, 8)
    assert c.memory_bytes() == 0
    for layer in range(2):
        _fill(c, layer, 100)
    # 2 (K and V) * n * head_dim * heads * layers * 4 bytes
    assert c.memory_bytes() == 2 * 100 * 8 * 2 * 2 * 4


def test_memory_bytes_linear_and_monotone():
    c = KvCache(1, 2, 8)
    per_entry = 2 * 8 * 2 * 4
    sizes = []
    for i in range(10):
        _fill(c, 0, 1, start=i)
        sizes.append(c.memory_bytes())
    assert sizes == [per_entry * (i + 1) for i in range(10)]
    before = c.memory_bytes()
    c.gather_keep(0, [1, 5])
    assert c.memory_bytes() <= before
    assert c.memory_bytes() == 2 * per_entry


def test_per_layer_lengths_equal_across_heads_after_gather():
    c = KvCache(2, 3, 4)
    for layer in range(2):
        _fill(c, layer, 8)
    c.gather_keep(0, [0, 2, 4])
    assert c.keys(0).shape == (3, 3, 4)
    assert c.values(0).shape == (3, 3, 4)
    assert c.length(1) == 8
