import numpy as np
import pytest

from veinseg.rng import Rng, _splitmix64_next

MASK = (1 << 64) - 1


def _reference_stream(seed, count):
    """Clean-room xoshiro256** for cross-checking the packaged generator."""
    def rotl(x, k):
        return ((x << k) | (x >> (64 - k))) & MASK

    sm = seed
    s = []
    for _ in range(4):
        sm = (sm + 0x9E3779B97F4A7C15) & MASK
        z = sm
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK
        s.append(z ^ (z >> 31))
    out = []
    for _ in range(count):
        out.append((rotl((s[1] * 5) & MASK, 7) * 9) & MASK)
        t = (s[1] << 17) & MASK
        s[2] ^= s[0]
        s[3] ^= s[1]
        s[1] ^= s[2]
        s[0] ^= s[3]
        s[2] ^= t
        s[3] = rotl(s[3], 45)
    return out


def test_splitmix64_known_values():
    # First outputs for seed 0 (widely published reference sequence).
    state = 0
    outs = []
    for _ in range(3):
        state, z = _splitmix64_next(state)
        outs.append(z)
    assert outs == [0xE220A8397B1DCDAF, 0x6E789E6AA1B965F4, 0x06C45D188009454F]


@pytest.mark.parametrize("seed", [0, 1, 42, 2 ** 64 - 1])
def test_matches_independent_reimplementation(seed):
    rng = Rng(seed)
    assert [rng.next_u64() for _ in range(200)] == _reference_stream(seed, 200)


def test_block_generation_matches_scalar():
    a = Rng(7)
    b = Rng(7)
    block = a._u64_block(100)
    assert block.tolist() == [b.next_u64() for _ in range(100)]


def test_same_seed_same_sequence():
    assert Rng(123).uniform(50).tolist() == Rng(123).uniform(50).tolist()
    assert Rng(123).normal(51).tolist() == Rng(123).normal(51).tolist()


def test_different_seeds_differ():
    assert Rng(1).uniform(8).tolist() != Rng(2).uniform(8).tolist()


def test_uniform_range():
    u = Rng(5).uniform(10000)
    assert (u >= 0).all() and (u < 1).all()


def test_normal_moments():
    z = Rng(11).normal(200000)
    assert abs(z.mean()) < 0.01
    assert abs(z.std() - 1.0) < 0.01


def test_normal_consumes_fixed_stream():
    # odd draw discards the half pair: next value matches the even case
    a = Rng(3)
    a.normal(3)
    b = Rng(3)
    b.normal(4)
    assert a.next_u64() == b.next_u64()


def test_below_unbiased_range():
    rng = Rng(9)
    vals = [rng.below(7) for _ in range(2000)]
    assert set(vals) <= set(range(7))
    counts = np.bincount(vals, minlength=7)
    assert counts.min() > 200  # roughly uniform


def test_shuffle_deterministic_permutation():
    items = list(range(20))
    a, b = items[:], items[:]
    Rng(21).shuffle(a)
    Rng(21).shuffle(b)
    assert a == b
    assert sorted(a) == items
    assert a != items  # astronomically unlikely to be identity


def test_seed_validation():
    with pytest.raises(ValueError):
        Rng(-1)
    with pytest.raises(ValueError):
        Rng(1 << 64)
