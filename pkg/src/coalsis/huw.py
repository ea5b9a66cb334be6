"""Precomputed combinatorial sums for the HUW infinite-sites proposal.

For ``s`` lineages and a mutation carried by ``d`` of them, the proposal needs

    K(s, d) = sum_k 1/(k-1+theta) * C(s-d-1, k-2) / C(s-1, k-1)
    J(s, d) = sum_k (d-1)/((s-k)(k-1+theta)) * C(s-d-1, k-2) / C(s-1, k-1)

over ``k = 2 .. s-d+1``.  Both follow from one triangular array ``A = K``
with ``J(s, d) = (d-1)/(s-1) * A(s-1, d-1)``, and ``A`` obeys the positive
Polya-urn recurrence

    A(s+1, d) = A(s, d-1) (d-1)/s + A(s, d) (s-d)/s + [d == 1]/(s+theta),

so the whole table costs ``O(s_max^2)`` additions with no cancellation.
"""

import math
import struct

import numpy as np
from scipy.special import gammaln, logsumexp

MAGIC = b"HUWT"
VERSION = 1
_HEADER = struct.Struct("<4sIdIB")
READINGS = ("mutant_count", "allele_count")


class TableMissError(LookupError):
    """Requested entry lies outside the precomputed range."""


def _offset(s):
    # Row s stores d = 0..s.
    return (s - 1) * (s + 2) // 2


def _build(s_max, theta):
    A = np.zeros(_offset(s_max + 1))
    row = np.zeros(2)
    A[0:2] = row
    for s in range(1, s_max):
        d = np.arange(1, s + 1)
        nxt = np.zeros(s + 2)
        nxt[1 : s + 1] = row[0:s] * (d - 1) / s + row[1 : s + 1] * (s - d) / s
        nxt[1] += 1.0 / (s + theta)
        o = _offset(s + 1)
        A[o : o + s + 2] = nxt
        row = nxt
    return A


class HuwTable:
    """Triangular table of the HUW sums at a fixed driving value ``theta``.

    Parameters
    ----------
    s_max : int
        Largest number of lineages covered.
    theta : float
        Driving value of the mutation rate.
    reading : {"mutant_count", "allele_count"}
        How the ``d - 1`` factor in the numerator is read: as ``d_omega - 1``
        (default) or as a constant one, for sensitivity checks.
    """

    def __init__(self, s_max, theta, reading="mutant_count", _array=None):
        if s_max < 2:
            raise ValueError("s_max must be at least 2")
        if not theta > 0:
            raise ValueError("theta must be positive")
        if reading not in READINGS:
            raise ValueError(f"reading must be one of {READINGS}")
        self.s_max = int(s_max)
        self.theta = float(theta)
        self.reading = reading
        self._A = _build(self.s_max, self.theta) if _array is None else _array
        self._A.setflags(write=False)

    def _check(self, s, d):
        if not 2 <= s <= self.s_max:
            raise TableMissError(
                f"{s} lineages outside table range [2, {self.s_max}]; rebuild with larger s_max"
            )
        d = np.asarray(d)
        if np.any(d < 1) or np.any(d > s - 1):
            raise TableMissError(f"mutant count outside [1, {s - 1}]")
        return d

    def denominator(self, s, d):
        d = self._check(s, d)
        return self._A[_offset(s) + d]

    def numerator(self, s, d):
        d = self._check(s, d)
        base = self._A[_offset(s - 1) + d - 1] / (s - 1)
        if self.reading == "mutant_count":
            return (d - 1) * base
        return base

    def rho(self, s, d):
        """``J(s, d) / K(s, d)``; lies in ``[0, 1]`` for the default reading."""
        return self.numerator(s, d) / self.denominator(s, d)

    def rho_unchecked(self, s, d):
        """``rho`` without range checks, for callers that guarantee them."""
        A = self._A
        num = A[_offset(s - 1) + d - 1] / (s - 1)
        if self.reading == "mutant_count":
            num = (d - 1) * num
        return num / A[_offset(s) + d]

    def u(self, n_j, s, d, carries):
        """HUW row/column weight ``u_{j, omega}``."""
        r = self.rho(s, d)
        return np.where(carries, n_j / d * r, n_j / (s - np.asarray(d)) * (1 - r))

    def covers(self, s, theta=None):
        return s <= self.s_max and (theta is None or theta == self.theta)

    @property
    def nbytes(self):
        return self._A.nbytes

    def save(self, path):
        code = READINGS.index(self.reading)
        with open(path, "wb") as f:
            f.write(_HEADER.pack(MAGIC, VERSION, self.theta, self.s_max, code))
            f.write(self._A.astype("<f8").tobytes())

    @classmethod
    def load(cls, path):
        with open(path, "rb") as f:
            head = f.read(_HEADER.size)
            if len(head) != _HEADER.size:
                raise ValueError(f"{path}: truncated header")
            magic, version, theta, s_max, code = _HEADER.unpack(head)
            if magic != MAGIC:
                raise ValueError(f"{path}: not a HUW table file")
            if version != VERSION:
                raise ValueError(f"{path}: unsupported table version {version}")
            A = np.frombuffer(f.read(), dtype="<f8").astype(np.float64)
        if len(A) != _offset(s_max + 1):
            raise ValueError(f"{path}: expected {_offset(s_max + 1)} entries, found {len(A)}")
        return cls(s_max, theta, READINGS[code], _array=A)

    def __eq__(self, other):
        return (
            isinstance(other, HuwTable)
            and self.s_max == other.s_max
            and self.theta == other.theta
            and self.reading == other.reading
            and np.array_equal(self._A, other._A)
        )


def huw_precompute(s_max, theta, reading="mutant_count"):
    return HuwTable(s_max, theta, reading)


def _log_binom(a, b):
    return gammaln(a + 1) - gammaln(b + 1) - gammaln(a - b + 1)


def direct_sums(s, d, theta, reading="mutant_count"):
    """Numerator and denominator by explicit log-space summation.

    Costs ``s - d`` terms per sum.  The numerator term at ``k = s`` (only
    present when ``d = 1``) is singular; it carries a zero factor in the
    default reading and is taken as zero in the other.
    """
    if not 1 <= d <= s - 1:
        raise ValueError("need 1 <= d <= s - 1")
    k = np.arange(2, s - d + 2, dtype=float)
    lb = _log_binom(s - d - 1, k - 2) - _log_binom(s - 1, k - 1) - np.log(k - 1 + theta)
    den = math.exp(logsumexp(lb))
    if d == 1:
        return 0.0, den
    factor = (d - 1) if reading == "mutant_count" else 1
    num = factor * math.exp(logsumexp(lb - np.log(s - k)))
    return num, den


def direct_rho(s, d, theta, reading="mutant_count"):
    num, den = direct_sums(s, d, theta, reading)
    return num / den
