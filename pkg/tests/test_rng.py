"""Deterministic stream properties of the SplitMix64 generator."""

import numpy as np
import pytest

from specdec.rng import Rng, derive_seed

MASK = (1 << 64) - 1


def _reference_splitmix(seed, n):
    """Independent textbook SplitMix64: state += golden; output = mix(state)."""
    out = []
    state = seed & MASK
    for _ in range(n):
        state = (state + 0x9E3779B97F4A7C15) & MASK
        z = state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK
        out.append(z ^ (z >> 31))
    return out


def test_matches_reference_stream():
    rng = Rng(12345)
    assert [rng.next_u64() for _ in range(8)] == _reference_splitmix(12345, 8)


def test_same_seed_same_stream():
    a = [Rng(7).uniform() for _ in range(100)]
    b = [Rng(7).uniform() for _ in range(100)]
    assert a == b


def test_uniform_range_and_mean():
    rng = Rng(3)
    vals = [rng.uniform() for _ in range(20000)]
    assert all(0.0 <= v < 1.0 for v in vals)
    assert abs(np.mean(vals) - 0.5) < 0.01


def test_uniform_array_matches_scalar_stream():
    a = Rng(99)
    b = Rng(99)
    arr = a.uniform_array(50)
    scalars = [b.uniform() for _ in range(50)]
    assert np.allclose(arr, scalars, rtol=0, atol=0)


def test_split_is_position_independent():
    a = Rng(5)
    _ = [a.next_u64() for _ in range(17)]  # consuming must not move substreams
    b = Rng(5)
    assert a.split("x").next_u64() == b.split("x").next_u64()
    assert a.split("x").next_u64() != a.split("y").next_u64()


def test_derive_seed_sensitive_to_labels():
    seeds = {derive_seed(1, lab) for lab in ["a", "b", "c", 0, 1, 2]}
    assert len(seeds) == 6
    assert derive_seed(1, "a", "b") != derive_seed(1, "b", "a")


def test_normal_moments():
    xs = Rng(17).normal_array((50000,), scale=2.0).astype(np.float64)
    assert abs(xs.mean()) < 0.05
    assert abs(xs.std() - 2.0) < 0.05


def test_permutation_is_permutation():
    perm = Rng(4).permutation(64)
    assert sorted(perm.tolist()) == list(range(64))


def test_sample_without_replacement_distinct():
    got = Rng(9).sample_without_replacement(10, 10)
    assert sorted(got.tolist()) == list(range(10))
    small = Rng(9).sample_without_replacement(64, 4)
    assert len(set(small.tolist())) == 4
    with pytest.raises(ValueError):
        Rng(1).sample_without_replacement(3, 4)


def test_categorical_frequencies():
    rng = Rng(21)
    p = np.array([0.5, 0.3, 0.2])
    counts = np.zeros(3)
    n = 30000
    for _ in range(n):
        counts[rng.categorical(p)] += 1
    assert np.abs(counts / n - p).max() < 0.02


def test_categorical_rejects_zero_mass():
    with pytest.raises(ValueError):
        Rng(0).categorical(np.zeros(3))
