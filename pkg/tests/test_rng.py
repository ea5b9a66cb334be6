import numpy as np
import pytest

from coalsis import rng


# Known-answer vectors for Philox4x32-10 from the Random123 distribution.
KAT = [
    ((0, 0, 0, 0), (0, 0), (0x6627E8D5, 0xE169C58D, 0xBC57AC4C, 0x9B00DBD8)),
    ((0xFFFFFFFF,) * 4, (0xFFFFFFFF,) * 2, (0x408F276D, 0x41C83B0E, 0xA20BC7C6, 0x6D5451FD)),
    (
        (0x243F6A88, 0x85A308D3, 0x13198A2E, 0x03707344),
        (0xA4093822, 0x299F31D0),
        (0xD16CFE09, 0x94FDCCEB, 0x5001E420, 0x24126EA1),
    ),
]


@pytest.mark.parametrize("counter,key,expected", KAT)
def test_philox_known_answers(counter, key, expected):
    out = rng.philox4x32(counter, key)
    assert tuple(int(x) for x in out) == expected


def test_philox_vectorized_matches_scalar():
    c = np.arange(12, dtype=np.uint64).reshape(4, 3)
    out = rng.philox4x32(c, (7, 9))
    for k in range(3):
        assert np.array_equal(out[:, k], rng.philox4x32(c[:, k], (7, 9)))


def test_uniforms_are_pure_functions_of_counters():
    a = rng.uniforms(5, np.arange(10), 2, 3)
    b = np.array([rng.uniforms(5, k, 2, 3) for k in range(10)])
    assert np.array_equal(a, b)
    assert np.all((a >= 0) & (a < 1))
    assert not np.array_equal(a, rng.uniforms(5, np.arange(10), 2, 4))
    assert not np.array_equal(a, rng.uniforms(5, np.arange(10), 2, 3, rng.TAG_RESAMPLE))
    assert not np.array_equal(a, rng.uniforms(6, np.arange(10), 2, 3))


def test_uniforms_moments():
    u = rng.uniforms(1, np.arange(200_000))
    assert abs(u.mean() - 0.5) < 4 * np.sqrt(1 / 12 / len(u))
    assert abs(u.var() - 1 / 12) < 0.002


def test_seed_range():
    with pytest.raises(ValueError):
        rng.uniforms(-1, 0)
    with pytest.raises(ValueError):
        rng.uniforms(2**64, 0)
    rng.uniforms(2**64 - 1, 0)


def test_derive_seed_and_generator_are_deterministic():
    assert rng.derive_seed(3, 1, 2) == rng.derive_seed(3, 1, 2)
    assert rng.derive_seed(3, 1, 2) != rng.derive_seed(3, 2, 1)
    assert rng.generator(3, 4).random() == rng.generator(3, 4).random()
