"""Counter-based random streams.

Every uniform used by the importance sampler is a pure function of
``(seed, draw, generation, stream, tag)``.  Results therefore do not depend on
how replicates are split between workers, and offspring created by resampling
get fresh streams simply by moving to the next generation.

The generator is Philox4x32-10 (Salmon et al., SC'11), vectorized with numpy.
"""

import numpy as np

_M0 = np.uint64(0xD2511F53)
_M1 = np.uint64(0xCD9E8D57)
_W0 = np.uint64(0x9E3779B9)
_W1 = np.uint64(0xBB67AE85)
_MASK32 = np.uint64(0xFFFFFFFF)
_SHIFT32 = np.uint64(32)

# Tags separating independent uses of the same seed.
TAG_STEP = 0
TAG_RESAMPLE = 1
TAG_MISC = 2


def philox4x32(counter, key, rounds=10):
    """Apply Philox4x32 to a batch of counters.

    Parameters
    ----------
    counter : array_like, shape (4, ...)
        Counter words, each < 2**32.
    key : array_like, shape (2, ...)
        Key words, broadcastable against the counter words.
    rounds : int
        Number of rounds (10 is the standard choice).

    Returns
    -------
    numpy.ndarray of uint32, shape (4, ...)
    """
    c = [np.asarray(w, dtype=np.uint64) & _MASK32 for w in counter]
    k0, k1 = (np.asarray(w, dtype=np.uint64) & _MASK32 for w in key)
    for r in range(rounds):
        if r:
            k0 = (k0 + _W0) & _MASK32
            k1 = (k1 + _W1) & _MASK32
        p0 = _M0 * c[0]
        p1 = _M1 * c[2]
        hi0, lo0 = p0 >> _SHIFT32, p0 & _MASK32
        hi1, lo1 = p1 >> _SHIFT32, p1 & _MASK32
        c = [hi1 ^ c[1] ^ k0, lo1, hi0 ^ c[3] ^ k1, lo0]
    return np.stack(np.broadcast_arrays(*c)).astype(np.uint32)


def _split_seed(seed):
    seed = int(seed)
    if not 0 <= seed < 2**64:
        raise ValueError(f"seed must lie in [0, 2**64), got {seed}")
    return np.uint64(seed & 0xFFFFFFFF), np.uint64(seed >> 32)


def uniforms(seed, draw, generation=0, stream=0, tag=TAG_STEP):
    """Uniforms on [0, 1) with 53 random bits, one per broadcast counter.

    Parameters
    ----------
    seed : int
        Master seed, the Philox key.
    draw, generation, stream : array_like of int
        Counter words; broadcast against each other.
    tag : int
        Purpose tag, kept in the last counter word.
    """
    k0, k1 = _split_seed(seed)
    draw, generation, stream, tag = np.broadcast_arrays(
        np.asarray(draw, dtype=np.uint64),
        np.asarray(generation, dtype=np.uint64),
        np.asarray(stream, dtype=np.uint64),
        np.asarray(tag, dtype=np.uint64),
    )
    out = philox4x32((draw, generation, stream, tag), (k0, k1))
    a = out[0].astype(np.uint64) >> np.uint64(5)
    b = out[1].astype(np.uint64) >> np.uint64(6)
    return (a * np.uint64(67108864) + b).astype(np.float64) * 2.0**-53


def derive_seed(seed, *words):
    """Deterministically derive a 64-bit child seed from ``seed`` and ints."""
    k0, k1 = _split_seed(seed)
    w = [int(x) & 0xFFFFFFFF for x in words] + [0, 0, 0]
    out = philox4x32([np.uint64(w[0]), np.uint64(w[1]), np.uint64(w[2]),
                      np.uint64(0xC0FFEE)], (k0, k1))
    return int(out[0]) | (int(out[1]) << 32)


def generator(seed, *words):
    """A numpy Generator on the Philox bit generator, keyed by derived seed.

    Used for the sequential (non-vectorized) simulators where per-draw counter
    bookkeeping would only add noise.
    """
    return np.random.Generator(np.random.Philox(key=derive_seed(seed, *words)))
