"""Finite-alleles coalescent: samples, mutation models, kernels and oracles.

A sample is a vector of type counts ``n``.  Two mutation models are provided:
a dense ``MutationModel`` holding a full transition matrix ``P``, and
``SiteFlipModel``, a structured model on ``2**L`` types where each mutation
flips one uniformly chosen site of a binary sequence.  Both expose the same
small interface used by the proposals and the sampler.

Sampling probabilities ``p(n)`` are for unordered samples (counts), i.e. they
sum to one over all count vectors of a given size.
"""

from bisect import bisect_left
from dataclasses import dataclass, field
from functools import cached_property, lru_cache
from itertools import combinations_with_replacement
from math import comb
from typing import NamedTuple

import numpy as np
from scipy.special import gammaln


class Coalesce(NamedTuple):
    """Merge of two type-``j`` lineages (backward: ``n -> n - e_j``)."""

    j: int


class Mutate(NamedTuple):
    """Mutation from type ``i`` to type ``j`` forward in time.

    Backward the move is ``n -> n - e_j + e_i``.
    """

    i: int
    j: int


@dataclass(frozen=True)
class TypedSample:
    """Sparse count vector over allele types.

    Only types with a positive count are stored, sorted by type index, so the
    same representation serves small dense models and the ``2**L``-type
    site-flip model.
    """

    types: tuple
    counts: tuple
    _hash: int = field(default=0, repr=False, compare=False)

    def __post_init__(self):
        if len(self.types) != len(self.counts):
            raise ValueError("types and counts differ in length")
        if not self.types:
            raise ValueError("a sample must contain at least one lineage")
        if any(c <= 0 for c in self.counts):
            raise ValueError("stored counts must be positive")
        if any(a >= b for a, b in zip(self.types, self.types[1:])):
            raise ValueError("types must be strictly increasing")
        if self.types[0] < 0:
            raise ValueError("type indices must be non-negative")
        object.__setattr__(self, "_hash", hash((self.types, self.counts)))

    def __hash__(self):
        return self._hash

    @classmethod
    def from_counts(cls, counts):
        """Build from a dense count vector."""
        counts = [int(c) for c in counts]
        if any(c < 0 for c in counts):
            raise ValueError("counts must be non-negative")
        pairs = [(i, c) for i, c in enumerate(counts) if c > 0]
        if not pairs:
            raise ValueError("a sample must contain at least one lineage")
        return cls(tuple(p[0] for p in pairs), tuple(p[1] for p in pairs))

    @classmethod
    def from_mapping(cls, mapping):
        """Build from a ``{type: count}`` mapping; zero counts are dropped."""
        pairs = sorted((int(t), int(c)) for t, c in mapping.items() if c)
        if any(c < 0 for _, c in pairs):
            raise ValueError("counts must be non-negative")
        return cls(tuple(p[0] for p in pairs), tuple(p[1] for p in pairs))

    @property
    def size(self):
        return sum(self.counts)

    def count(self, i):
        k = bisect_left(self.types, i)
        if k < len(self.types) and self.types[k] == i:
            return self.counts[k]
        return 0

    def dense(self, d):
        out = np.zeros(d, dtype=np.int64)
        out[list(self.types)] = self.counts
        return out

    def add(self, i, k):
        """Return the sample with ``k`` (possibly negative) lineages of type i added."""
        types, counts = list(self.types), list(self.counts)
        pos = bisect_left(types, i)
        if pos < len(types) and types[pos] == i:
            c = counts[pos] + k
            if c < 0:
                raise ValueError(f"negative count for type {i}")
            if c == 0:
                del types[pos], counts[pos]
            else:
                counts[pos] = c
        else:
            if k < 0:
                raise ValueError(f"negative count for type {i}")
            if k > 0:
                types.insert(pos, i)
                counts.insert(pos, k)
        return TypedSample(tuple(types), tuple(counts))

    def backward(self, move):
        """Predecessor of this sample under ``move`` (one step towards the MRCA)."""
        if isinstance(move, Coalesce):
            return self.add(move.j, -1)
        if move.i == move.j:
            if self.count(move.j) < 1:
                raise ValueError("mutation source absent from sample")
            return self
        return self.add(move.j, -1).add(move.i, 1)

    def forward(self, move):
        """Successor of this sample under ``move`` forward in time."""
        if isinstance(move, Coalesce):
            if self.count(move.j) < 1:
                raise ValueError("branching type absent from sample")
            return self.add(move.j, 1)
        if move.i == move.j:
            if self.count(move.i) < 1:
                raise ValueError("mutation source absent from sample")
            return self
        return self.add(move.i, -1).add(move.j, 1)


@dataclass(frozen=True)
class TransitionDistribution:
    """A finite distribution over moves."""

    moves: tuple
    probs: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=float)
        if len(p) != len(self.moves):
            raise ValueError("moves and probabilities differ in length")
        if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-12:
            raise ValueError("not a probability distribution")
        p.setflags(write=False)
        object.__setattr__(self, "probs", p)

    @classmethod
    def normalized(cls, moves, masses):
        masses = np.asarray(masses, dtype=float)
        keep = masses > 0
        moves = tuple(m for m, k in zip(moves, keep) if k)
        masses = masses[keep]
        total = masses.sum()
        if total <= 0:
            raise ValueError("empty support")
        return cls(moves, masses / total)

    def __iter__(self):
        return iter(zip(self.moves, self.probs))

    def __len__(self):
        return len(self.moves)

    def prob(self, move):
        for m, p in self:
            if m == move:
                return float(p)
        return 0.0

    def as_dict(self):
        return {m: float(p) for m, p in self}


def _reachability_closure(adj):
    """Boolean transitive closure (Warshall)."""
    reach = adj.copy() | np.eye(len(adj), dtype=bool)
    for k in range(len(adj)):
        reach |= reach[:, k : k + 1] & reach[k : k + 1, :]
    return reach


@dataclass(frozen=True, eq=False)
class MutationModel:
    """Mutation rate ``theta`` and a dense row-stochastic matrix ``P``.

    Parameters
    ----------
    theta : float
        Scaled mutation rate.
    P : array_like, shape (d, d)
        Mutation transition matrix; must be irreducible.
    pim_q : array_like, optional
        Target distribution when mutation is parent-independent.  Inferred
        automatically when all rows of ``P`` coincide.
    """

    theta: float
    P: np.ndarray
    pim_q: np.ndarray = None

    def __post_init__(self):
        P = np.array(self.P, dtype=float)
        if P.ndim != 2 or P.shape[0] != P.shape[1]:
            raise ValueError("P must be square")
        if not np.isfinite(self.theta) or self.theta <= 0:
            raise ValueError("theta must be positive")
        if np.any(P < 0) or np.any(np.abs(P.sum(axis=1) - 1.0) > 1e-12):
            raise ValueError("P must be row-stochastic")
        if not _reachability_closure(P > 0).all():
            raise ValueError("P must be irreducible")
        q = self.pim_q
        if q is None and np.all(P == P[0]):
            q = P[0]
        if q is not None:
            q = np.array(q, dtype=float)
            if q.shape != (len(P),) or np.any(np.abs(P - q) > 0):
                raise ValueError("pim_q given but rows of P differ from it")
            q.setflags(write=False)
        P.setflags(write=False)
        object.__setattr__(self, "theta", float(self.theta))
        object.__setattr__(self, "P", P)
        object.__setattr__(self, "pim_q", q)

    @classmethod
    def pim(cls, theta, q):
        q = np.asarray(q, dtype=float)
        return cls(theta, np.tile(q, (len(q), 1)), q)

    def with_theta(self, theta):
        return MutationModel(theta, self.P, self.pim_q)

    @property
    def d(self):
        return len(self.P)

    @property
    def is_pim(self):
        return self.pim_q is not None

    @cached_property
    def stationary(self):
        """Stationary law of ``P`` (the MRCA type distribution)."""
        if self.is_pim:
            return np.array(self.pim_q)
        d = self.d
        A = np.vstack([self.P.T - np.eye(d), np.ones(d)])
        b = np.zeros(d + 1)
        b[-1] = 1.0
        pi = np.linalg.lstsq(A, b, rcond=None)[0]
        return np.clip(pi, 0.0, None) / np.clip(pi, 0.0, None).sum()

    def root_prob(self, i):
        return float(self.stationary[i])

    def check_type(self, i):
        if not 0 <= i < self.d:
            raise IndexError(f"type {i} out of range for d={self.d}")

    def mutation_sources(self, j):
        """Types ``i`` with ``P[i, j] > 0`` and the corresponding entries."""
        return self._sources[j]

    def mutation_targets(self, i):
        """Types ``j`` with ``P[i, j] > 0`` and the corresponding entries."""
        return self._targets[i]

    @cached_property
    def _sources(self):
        return [(np.flatnonzero(col > 0), col[col > 0]) for col in self.P.T]

    @cached_property
    def _targets(self):
        return [(np.flatnonzero(row > 0), row[row > 0]) for row in self.P]

    def pi_hat(self, n):
        """Full vector ``n/(|n|+theta) (I - theta P/(|n|+theta))^{-1}``."""
        return _dense_pi_hat(self, n)

    def pi_hat_at(self, n, targets):
        return self.pi_hat(n)[np.asarray(targets, dtype=np.int64)]

    def sample_root(self, rng):
        return int(rng.choice(self.d, p=self.stationary))

    def sample_mutation(self, i, rng):
        js, ps = self.mutation_targets(i)
        return int(js[np.searchsorted(np.cumsum(ps), rng.random() * ps.sum(), side="right")])


@lru_cache(maxsize=1 << 16)
def _dense_pi_hat(m, n):
    counts = n.dense(m.d).astype(float)
    s = counts.sum() + m.theta
    A = np.eye(m.d) - m.theta * m.P / s
    # Row vector x solves x A = n / s.
    out = np.linalg.solve(A.T, counts / s)
    out.setflags(write=False)
    return out


@dataclass(frozen=True, eq=False)
class SiteFlipModel:
    """Binary sequences of ``n_sites`` sites; a mutation flips one uniform site.

    Types are integers in ``[0, 2**n_sites)`` read as bit strings.  The
    stationary law is uniform.  ``P`` is never formed: the resolvent needed by
    the SD proposal depends on two types only through their Hamming distance,
    and is obtained from the Ehrenfest distance chain.
    """

    theta: float
    n_sites: int

    def __post_init__(self):
        if self.theta <= 0 or not np.isfinite(self.theta):
            raise ValueError("theta must be positive")
        if not 1 <= self.n_sites <= 62:
            raise ValueError("n_sites must lie in [1, 62]")
        object.__setattr__(self, "theta", float(self.theta))
        object.__setattr__(self, "_cache", {})

    def with_theta(self, theta):
        return SiteFlipModel(theta, self.n_sites)

    @property
    def d(self):
        return 1 << self.n_sites

    is_pim = False
    pim_q = None

    def root_prob(self, i):
        return 2.0 ** -self.n_sites

    def check_type(self, i):
        if not 0 <= i < self.d:
            raise IndexError(f"type {i} out of range for {self.n_sites} sites")

    def _neighbours(self, i):
        js = np.int64(i) ^ (np.int64(1) << np.arange(self.n_sites, dtype=np.int64))
        return js, np.full(self.n_sites, 1.0 / self.n_sites)

    mutation_sources = _neighbours
    mutation_targets = _neighbours

    def P_entry(self, i, j):
        return 1.0 / self.n_sites if bin(i ^ j).count("1") == 1 else 0.0

    def resolvent(self, lam):
        """``R[h] = sum_m lam**m P^m(x, y)`` for types at Hamming distance h."""
        key = float(lam)
        R = self._cache.get(key)
        if R is not None:
            return R
        L = self.n_sites
        k = np.arange(L + 1)
        up = (L - k) / L
        down = k / L
        v = np.zeros(L + 1)
        v[0] = 1.0
        acc = v.copy()
        w = 1.0
        for m in range(1, 100000):
            nv = np.zeros(L + 1)
            nv[1:] += v[:-1] * up[:-1]
            nv[:-1] += v[1:] * down[1:]
            v = nv
            w *= lam
            term = w * v
            acc += term
            if m > L and w < 1e-18 * acc.min() * (1 - lam):
                break
        R = acc / np.array([comb(L, h) for h in range(L + 1)], dtype=float)
        if len(self._cache) > 4096:
            self._cache.clear()
        self._cache[key] = R
        return R

    def pi_hat_at(self, n, targets):
        targets = np.asarray(targets, dtype=np.int64)
        s = n.size + self.theta
        R = self.resolvent(self.theta / s)
        types = np.asarray(n.types, dtype=np.int64)
        counts = np.asarray(n.counts, dtype=float)
        dist = np.bitwise_count(types[:, None] ^ targets[None, :])
        return counts @ R[dist] / s

    def sample_root(self, rng):
        return int(rng.integers(0, self.d))

    def sample_mutation(self, i, rng):
        return int(i) ^ (1 << int(rng.integers(0, self.n_sites)))


def _check_sample(n, m):
    if not isinstance(n, TypedSample):
        raise TypeError("expected a TypedSample")
    m.check_type(n.types[-1])


def forward_transitions(n, m):
    """One step of the forward block-counting chain from ``n``.

    ``Coalesce(j)`` denotes the branching ``n -> n + e_j`` and ``Mutate(i, j)``
    the mutation ``n -> n - e_i + e_j``.  At a single lineage the branching
    mass is zero, exactly as the formula states.
    """
    _check_sample(n, m)
    N, th = n.size, m.theta
    moves, probs = [], []
    branch = (N - 1) / (N - 1 + th)
    mut = th / (N - 1 + th)
    for i, c in zip(n.types, n.counts):
        if branch > 0:
            moves.append(Coalesce(i))
            probs.append(branch * c / N)
        js, ps = m.mutation_targets(i)
        for j, p in zip(js.tolist(), ps.tolist()):
            moves.append(Mutate(i, j))
            probs.append(mut * c / N * p)
    return TransitionDistribution(tuple(moves), np.array(probs))


def recursion_weight(n, move, m):
    """Coefficient of ``p(n - v)`` in the sampling recursion for ``p(n)``.

    This is the forward density ``p(n | n - v)`` used in importance weights:
    ``(n_j - 1)/(|n| - 1 + theta)`` for a coalescence and
    ``theta/(|n| - 1 + theta) * (n_i + 1 - [i == j])/|n| * P_ij`` for a
    mutation whose predecessor is ``n - e_j + e_i``.
    """
    N, th = n.size, m.theta
    if isinstance(move, Coalesce):
        c = n.count(move.j)
        if c < 1:
            return 0.0
        return (c - 1) / (N - 1 + th)
    if n.count(move.j) < 1:
        return 0.0
    if isinstance(m, SiteFlipModel):
        pij = m.P_entry(move.i, move.j)
    else:
        pij = m.P[move.i, move.j]
    ni = n.count(move.i) + (move.i != move.j)
    return th / (N - 1 + th) * ni / N * pij


def backward_moves(n, m):
    """All backward moves from ``n`` with positive recursion weight.

    Returns
    -------
    moves : list
    weights : numpy.ndarray
        ``recursion_weight`` of each move.
    """
    N, th = n.size, m.theta
    denom = N - 1 + th
    moves, weights = [], []
    for j, c in zip(n.types, n.counts):
        if c >= 2:
            moves.append(Coalesce(j))
            weights.append((c - 1) / denom)
        srcs, ps = m.mutation_sources(j)
        for i, p in zip(srcs.tolist(), ps.tolist()):
            ni = n.count(i) + (i != j)
            moves.append(Mutate(i, j))
            weights.append(th / denom * ni / N * p)
    return moves, np.array(weights)


def _require_pim(m):
    if not getattr(m, "is_pim", False):
        raise NotImplementedError(
            "the backward kernel is only tractable for parent-independent mutation"
        )


def pim_conditional(i, n, m):
    """``(n_i + theta Q_i)/(|n| + theta)`` for a PIM model."""
    _require_pim(m)
    m.check_type(i)
    return (n.count(i) + m.theta * m.pim_q[i]) / (n.size + m.theta)


def pim_log_sampling_probability(n, m):
    """Closed-form log ``p(n)`` under PIM (unordered sample)."""
    _require_pim(m)
    th, q = m.theta, m.pim_q
    N = n.size
    out = gammaln(N + 1) - gammaln(N + th) + gammaln(th)
    for i, c in zip(n.types, n.counts):
        tq = th * q[i]
        out += gammaln(c + tq) - gammaln(tq) - gammaln(c + 1)
    return float(out)


def pim_sampling_probability(n, m):
    return float(np.exp(pim_log_sampling_probability(n, m)))


def backward_transitions_pim(n, m):
    """True backward kernel under PIM, built from ``pim_conditional``."""
    _require_pim(m)
    _check_sample(n, m)
    N, th, q = n.size, m.theta, m.pim_q
    if N < 2:
        raise ValueError("backward kernel needs at least two lineages")
    moves, probs = [], []
    denom = N * (N - 1 + th)
    for j, c in zip(n.types, n.counts):
        prev = n.add(j, -1)
        pj = pim_conditional(j, prev, m)
        if c >= 2:
            moves.append(Coalesce(j))
            probs.append(c * (c - 1) / denom / pj)
        for i in range(m.d):
            if q[j] > 0:
                moves.append(Mutate(i, j))
                probs.append(th * q[j] * c / denom * pim_conditional(i, prev, m) / pj)
    probs = np.array(probs)
    return TransitionDistribution(tuple(moves), probs / probs.sum())


def _compositions(s, d):
    """All length-d non-negative integer vectors summing to s, lexicographic."""
    out = []
    for bars in combinations_with_replacement(range(s + 1), d - 1):
        prev, v = 0, []
        for b in bars:
            v.append(b - prev)
            prev = b
        v.append(s - prev)
        out.append(tuple(v))
    out.sort()
    return out


def exact_sampling_probability(n, m, cap=12):
    """Exact ``p(n)`` by solving the sampling recursion level by level.

    Parameters
    ----------
    n : TypedSample
    m : MutationModel
        Dense model.
    cap : int
        Largest allowed sample size; the number of states per level grows
        like ``s**(d-1)``.
    """
    if not isinstance(m, MutationModel):
        raise TypeError("exact solver needs a dense MutationModel")
    _check_sample(n, m)
    N, d, th = n.size, m.d, m.theta
    if N > cap:
        raise ValueError(f"sample size {N} exceeds cap {cap}")
    target = tuple(n.dense(d))
    prev = {tuple(np.eye(d, dtype=int)[i]): m.stationary[i] for i in range(d)}
    if N == 1:
        return float(prev[target])
    P = m.P
    for s in range(2, N + 1):
        states = _compositions(s, d)
        index = {v: k for k, v in enumerate(states)}
        A = np.eye(len(states))
        b = np.zeros(len(states))
        denom = s - 1 + th
        for k, v in enumerate(states):
            for j in range(d):
                if v[j] == 0:
                    continue
                if v[j] >= 2:
                    w = list(v)
                    w[j] -= 1
                    b[k] += (v[j] - 1) / denom * prev[tuple(w)]
                for i in range(d):
                    if P[i, j] == 0:
                        continue
                    w = list(v)
                    w[j] -= 1
                    w[i] += 1
                    ni = v[i] + (i != j)
                    A[k, index[tuple(w)]] -= th / denom * ni / s * P[i, j]
        sol = np.linalg.solve(A, b)
        prev = dict(zip(states, sol))
    return float(prev[target])


def forward_simulate(size_target, m, seed):
    """Draw a sample of ``size_target`` lineages from the coalescent.

    The root type is drawn from the stationary law.  Forward in time, a
    population of ``k >= 2`` lineages mutates a uniform lineage with
    probability ``theta/(k - 1 + theta)`` and otherwise branches one; the
    single root lineage always branches.  The sample is the state just before
    the branching that would exceed ``size_target``.

    Parameters
    ----------
    size_target : int
    m : MutationModel or SiteFlipModel
    seed : int or numpy.random.Generator
    """
    if size_target < 1:
        raise ValueError("size_target must be at least 1")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    lineages = [m.sample_root(rng)]
    th = m.theta
    while True:
        k = len(lineages)
        if k >= 2 and rng.random() < th / (k - 1 + th):
            a = int(rng.integers(k))
            lineages[a] = m.sample_mutation(lineages[a], rng)
            continue
        if k == size_target:
            break
        lineages.append(lineages[int(rng.integers(k))])
    types, counts = np.unique(np.array(lineages, dtype=np.int64), return_counts=True)
    return TypedSample(tuple(types.tolist()), tuple(counts.tolist()))
