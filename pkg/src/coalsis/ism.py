"""Infinite-sites samples, forward simulation and backward proposals.

A sample is a triple ``(S, n, ell)``: a binary haplotype matrix with distinct
rows, their multiplicities and the mutation locations.  Backward moves are

* ``IsmCoalesce(j)``: merge two copies of haplotype ``j`` (needs ``n_j >= 2``);
* ``IsmRemove(j, w)``: delete singleton mutation ``w`` from row ``j`` (needs
  ``n_j = 1`` and ``d_w = 1``); the row may then coincide with another.

Importance weights use the recursion coefficients

    coalescence  (n_j - 1) / (N - 1 + theta)
    removal      theta / (N - 1 + theta) * n' / N

with ``n'`` the multiplicity of the resulting haplotype, and a terminal factor
of one at the mutation-free single ancestor.
"""

import enum
import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .huw import HuwTable, direct_sums
from .model import TransitionDistribution
from .rng import generator


class IsmCoalesce(NamedTuple):
    j: int


class IsmRemove(NamedTuple):
    j: int
    w: int


class ForwardBranch(NamedTuple):
    i: int


class ForwardMutate(NamedTuple):
    i: int


class IsmProposalKind(enum.Enum):
    GT = "GT"
    SD = "SD"
    HUW = "HUW"


def _incompatible_pair(S):
    S = S.astype(np.int64)
    both = S.T @ S
    only_a = S.T @ (1 - S)
    both_ok = (both > 0) & (only_a > 0) & (only_a.T > 0)
    hits = np.argwhere(np.triu(both_ok, 1))
    return tuple(hits[0]) if len(hits) else None


@dataclass(frozen=True, eq=False)
class IsmSample:
    """Infinite-sites sample.

    Parameters
    ----------
    S : array_like, shape (h, r)
        Binary haplotype matrix; rows must be distinct.
    n : array_like, shape (h,)
        Positive multiplicities.
    ell : array_like, shape (r,), optional
        Distinct locations in ``[0, 1]``; evenly spaced when omitted.
    """

    S: np.ndarray
    n: np.ndarray
    ell: np.ndarray = None

    def __post_init__(self):
        S = np.array(self.S, dtype=np.uint8, ndmin=2)
        n = np.array(self.n, dtype=np.int64, ndmin=1)
        if S.shape[0] != len(n):
            raise ValueError("S must have one row per multiplicity")
        r = S.shape[1]
        ell = (np.arange(1, r + 1) / (r + 1) if self.ell is None
               else np.array(self.ell, dtype=float, ndmin=1))
        if len(ell) != r:
            raise ValueError("need one location per column")
        if np.any(n < 1):
            raise ValueError("multiplicities must be positive")
        if np.any(S > 1):
            raise ValueError("S must be binary")
        if len({row.tobytes() for row in S}) != len(S):
            raise ValueError("rows of S must be distinct")
        if r and np.any(S.sum(axis=0) == 0):
            raise ValueError("every column needs at least one carrier")
        if np.any((ell < 0) | (ell > 1)) or len(np.unique(ell)) != r:
            raise ValueError("locations must be distinct and lie in [0, 1]")
        pair = _incompatible_pair(S) if r > 1 else None
        if pair is not None:
            raise ValueError(f"columns {pair[0]} and {pair[1]} are incompatible")
        for name, v in (("S", S), ("n", n), ("ell", ell)):
            v.setflags(write=False)
            object.__setattr__(self, name, v)

    @property
    def h(self):
        return self.S.shape[0]

    @property
    def r(self):
        return self.S.shape[1]

    @property
    def size(self):
        return int(self.n.sum())

    @property
    def d(self):
        """Number of sampled lineages carrying each mutation."""
        return self.n @ self.S.astype(np.int64)

    def key(self):
        """Hashable form, invariant to row order."""
        rows = sorted((row.tobytes(), int(c)) for row, c in zip(self.S, self.n))
        return (self.r, tuple(rows))

    def __eq__(self, other):
        return isinstance(other, IsmSample) and self.key() == other.key()

    def __hash__(self):
        return hash(self.key())

    def __repr__(self):
        rows = ", ".join(f"{''.join(map(str, row))}x{c}" for row, c in zip(self.S, self.n))
        return f"IsmSample({rows})"


def watterson(r, n):
    """Watterson estimator ``r / sum_{k=1}^{n-1} 1/k``."""
    if n < 2:
        raise ValueError("need n >= 2")
    return r / sum(1.0 / k for k in range(1, n))


def watterson_estimate(sample):
    return watterson(sample.r, sample.size)


@dataclass(frozen=True)
class SingletonIndex:
    """Rows of multiplicity one carrying a mutation seen nowhere else.

    Attributes
    ----------
    M : frozenset
    columns : dict
        Row index to the tuple of its singleton columns.
    """

    M: frozenset
    columns: dict = field(default_factory=dict)


def singleton_scan(sample):
    d = sample.d
    cols = {}
    for j in np.flatnonzero(sample.n == 1):
        w = np.flatnonzero((sample.S[j] == 1) & (d == 1))
        if len(w):
            cols[int(j)] = tuple(int(x) for x in w)
    return SingletonIndex(frozenset(cols), cols)


def ism_forward_transitions(sample, theta):
    """Forward moves as written: branch row ``i`` or mutate a copy of row ``i``.

    A mutation's column slot is fixed by its uniform location, so the slot is
    not part of the move; see ``apply_forward``.
    """
    N = sample.size
    den = N - 1 + theta
    moves, probs = [], []
    for i, c in enumerate(sample.n.tolist()):
        if N > 1:
            moves.append(ForwardBranch(i))
            probs.append((N - 1) / den * c / N)
        moves.append(ForwardMutate(i))
        probs.append(theta / den * c / N)
    return TransitionDistribution(tuple(moves), np.array(probs))


def apply_forward(sample, move, x=None):
    """Successor of ``sample`` under a forward move; ``x`` is the new location."""
    S, n, ell = sample.S, sample.n.copy(), sample.ell
    if isinstance(move, ForwardBranch):
        n[move.i] += 1
        return IsmSample(S, n, ell)
    if x is None:
        raise ValueError("a mutation needs a location")
    slot = int(np.searchsorted(ell, x))
    h = sample.h
    S2 = np.insert(np.vstack([S, S[move.i]]), slot, 0, axis=1)
    S2[h, slot] = 1
    n[move.i] -= 1
    n2 = np.append(n, 1)
    keep = n2 > 0
    return IsmSample(S2[keep], n2[keep], np.insert(ell, slot, x))


def simulate_ism(n, theta, seed=0, r_target=None, max_tries=100_000):
    """Simulate an ISM sample of size ``n`` forward in time.

    From one lineage the first event is a branching; with ``k >= 2`` lineages a
    mutation occurs with probability ``theta / (k - 1 + theta)`` on a uniformly
    chosen lineage.  With ``r_target`` the simulation is repeated until the
    number of segregating sites equals it.
    """
    if n < 2:
        raise ValueError("need n >= 2")
    gen = seed if isinstance(seed, np.random.Generator) else generator(seed)
    for _ in range(max_tries):
        lineages = [0]
        locs = []
        k = 1
        while True:
            if k >= 2 and gen.random() < theta / (k - 1 + theta):
                i = int(gen.integers(k))
                lineages[i] |= 1 << len(locs)
                locs.append(float(gen.random()))
                continue
            if k == n:
                break
            i = int(gen.integers(k))
            lineages.append(lineages[i])
            k += 1
        if r_target is None or len(locs) == r_target:
            return _assemble(lineages, locs)
    raise RuntimeError(f"no sample with r = {r_target} in {max_tries} tries")


def _assemble(lineages, locs):
    order = np.argsort(locs)
    r = len(locs)
    counts = {}
    for x in lineages:
        counts[x] = counts.get(x, 0) + 1
    rows = sorted(counts, key=lambda x: -counts[x])
    S = np.array([[(x >> int(c)) & 1 for c in order] for x in rows], dtype=np.uint8).reshape(
        len(rows), r
    )
    return IsmSample(S, [counts[x] for x in rows], np.asarray(locs)[order])


@dataclass
class IsmProposalState:
    """Cached HUW row weights ``w_j = sum_w u_{j,w}`` and operation counters.

    ``dirty`` marks that a coalescence invalidated the cache.  Counters:
    ``lookups`` table reads, ``sample_ops`` per-step sampling work,
    ``direct_terms`` summation terms when no table is used.
    """

    w: list = None
    dirty: bool = True
    lookups: int = 0
    sample_ops: int = 0
    direct_terms: int = 0
    full_refreshes: int = 0
    partial_refreshes: int = 0

    @property
    def operations(self):
        return self.lookups + self.sample_ops + self.direct_terms

    def copy(self):
        return IsmProposalState(None if self.w is None else list(self.w), self.dirty,
                                self.lookups, self.sample_ops, self.direct_terms,
                                self.full_refreshes, self.partial_refreshes)


def _bits(x):
    while x:
        low = x & -x
        yield low.bit_length() - 1
        x ^= low


class IsmWork:
    """Mutable backward state of one replicate.

    Rows are Python-int bitmasks over the original columns; ``d`` holds column
    occupancy counts and ``one_mask`` the columns with ``d = 1``.
    """

    __slots__ = ("rows", "counts", "d", "one_mask", "index", "N", "r", "huw")

    @classmethod
    def from_sample(cls, sample):
        self = cls()
        self.rows = [sum(1 << int(c) for c in np.flatnonzero(row)) for row in sample.S]
        self.counts = sample.n.tolist()
        self.d = sample.d.tolist()
        self.N = sample.size
        self.r = sample.r
        if self.N > 1 and any(x == self.N for x in self.d):
            raise ValueError("a mutation carried by every lineage has probability zero")
        self.one_mask = sum(1 << w for w, x in enumerate(self.d) if x == 1)
        self.index = {x: j for j, x in enumerate(self.rows)}
        self.huw = None
        return self

    def copy(self):
        new = IsmWork()
        new.rows = list(self.rows)
        new.counts = list(self.counts)
        new.d = list(self.d)
        new.one_mask = self.one_mask
        new.index = dict(self.index)
        new.N, new.r = self.N, self.r
        new.huw = None if self.huw is None else self.huw.copy()
        return new

    @property
    def size(self):
        return self.N

    @property
    def h(self):
        return len(self.rows)

    def to_sample(self):
        cols = [w for w, x in enumerate(self.d) if x > 0]
        S = np.array([[(x >> w) & 1 for w in cols] for x in self.rows], dtype=np.uint8)
        return IsmSample(S.reshape(len(self.rows), len(cols)), self.counts)

    def singletons(self, j):
        return list(_bits(self.rows[j] & self.one_mask)) if self.counts[j] == 1 else []

    def removal_target(self, j, w):
        """Row the haplotype ``S_j^w`` coincides with, or ``None``."""
        return self.index.get(self.rows[j] & ~(1 << w))

    def _drop_row(self, j):
        last = len(self.rows) - 1
        del self.index[self.rows[j]]
        if j != last:
            self.rows[j] = self.rows[last]
            self.counts[j] = self.counts[last]
            self.index[self.rows[j]] = j
        self.rows.pop()
        self.counts.pop()
        if self.huw is not None and self.huw.w is not None:
            w = self.huw.w
            w[j] = w[last]
            w.pop()

    def coalesce(self, j):
        if self.counts[j] < 2:
            raise ValueError(f"row {j} has a single copy")
        self.counts[j] -= 1
        self.N -= 1
        for w in _bits(self.rows[j]):
            self.d[w] -= 1
            if self.d[w] == 1:
                self.one_mask |= 1 << w
        if self.huw is not None:
            self.huw.dirty = True

    def remove(self, j, w, table=None):
        bit = 1 << w
        if self.counts[j] != 1 or not self.rows[j] & bit or self.d[w] != 1:
            raise ValueError(f"mutation {w} is not a singleton of row {j}")
        tgt = self.removal_target(j, w)
        if self.huw is not None and not self.huw.dirty and table is not None:
            self._partial_refresh(j, w, tgt, table)
        self.d[w] = 0
        self.one_mask &= ~bit
        self.r -= 1
        if tgt is None:
            del self.index[self.rows[j]]
            self.rows[j] &= ~bit
            self.index[self.rows[j]] = j
        else:
            self.counts[tgt] += 1
            self._drop_row(j)

    def apply(self, move, table=None):
        if isinstance(move, IsmCoalesce):
            self.coalesce(move.j)
        else:
            self.remove(move.j, move.w, table)

    # HUW weights

    def huw_weights_full(self, table, count=True):
        """Row weights recomputed from scratch with the table."""
        N = self.N
        cols = [w for w, x in enumerate(self.d) if x > 0]
        if not cols:
            return [0.0] * len(self.rows)
        d = np.array([self.d[w] for w in cols])
        rho = table.rho_unchecked(N, d)
        carry = rho / d
        other = (1 - rho) / (N - d)
        delta = carry - other
        if len(self.d) < 64:
            bits = (np.array(self.rows, dtype=np.uint64)[:, None]
                    >> np.array(cols, dtype=np.uint64)[None, :]) & np.uint64(1)
            out = (np.array(self.counts) * (other.sum() + bits.astype(float) @ delta)).tolist()
        else:
            base = other.sum()
            pos = {w: k for k, w in enumerate(cols)}
            out = []
            for x, c in zip(self.rows, self.counts):
                s = base
                for w in _bits(x):
                    s += delta[pos[w]]
                out.append(c * s)
        if count and self.huw is not None:
            self.huw.lookups += len(cols) * len(self.rows)
            self.huw.full_refreshes += 1
        return out

    def huw_weights_direct(self, theta, reading="mutant_count"):
        """Row weights from explicit sums, with no table."""
        N = self.N
        cols = [w for w, x in enumerate(self.d) if x > 0]
        d = np.array([self.d[w] for w in cols])
        rho = np.empty(len(cols))
        for k, dw in enumerate(d):
            num, den = direct_sums(N, int(dw), theta, reading)
            rho[k] = num / den
        out = []
        for x, c in zip(self.rows, self.counts):
            s = 0.0
            for k, w in enumerate(cols):
                s += rho[k] / d[k] if (x >> w) & 1 else (1 - rho[k]) / (N - d[k])
            out.append(c * s)
        if self.huw is not None:
            self.huw.direct_terms += int((N - d).sum()) + len(cols) * len(self.rows)
        return out

    def _partial_refresh(self, j, w, tgt, table):
        """Update cached weights for the removal of singleton ``w`` from row ``j``."""
        N = self.N
        rho = float(table.rho_unchecked(N, 1))
        other = (1 - rho) / (N - 1)
        wts = self.huw.w
        for k, c in enumerate(self.counts):
            wts[k] -= c * (rho if k == j else other)
        if tgt is not None:
            wts[tgt] *= (self.counts[tgt] + 1) / self.counts[tgt]
        self.huw.lookups += 1 + len(self.rows)
        self.huw.partial_refreshes += 1


def huw_drift(work, table):
    """Largest difference between cached and recomputed HUW row weights,
    relative to the largest weight (the scale of the proposal masses)."""
    fresh = np.array(work.huw_weights_full(table, count=False))
    cached = np.array(work.huw.w)
    scale = np.abs(fresh).max() if len(fresh) else 0.0
    if scale == 0:
        return float(np.abs(cached).max(initial=0.0))
    return float(np.abs(cached - fresh).max() / scale)


_HUW_ZERO = 1e-9


def _huw_masses(work, table, theta, direct):
    """HUW masses, or ``None`` where the SD substitute applies."""
    st = work.huw
    if direct:
        w = work.huw_weights_direct(table.theta if table else theta,
                                    table.reading if table else "mutant_count")
    else:
        if st.dirty or st.w is None:
            st.w = work.huw_weights_full(table)
            st.dirty = False
        w = st.w
    if work.N <= 2:
        return None
    moves, mass = [], []
    for j, c in enumerate(work.counts):
        if c >= 2:
            moves.append(IsmCoalesce(j))
            mass.append(w[j])
        else:
            cols = work.singletons(j)
            for om in cols:
                moves.append(IsmRemove(j, om))
                mass.append(w[j] / len(cols))
    mass = np.array(mass)
    top = mass.max() if len(mass) else 0.0
    if not top > 0 or np.any(mass <= _HUW_ZERO * top):
        return None
    return moves, mass


def ism_step_table(work, theta, kind, table=None, direct=False):
    """Backward moves, normalized proposal and log one-step costs.

    Parameters
    ----------
    work : IsmWork
    theta : float
        Mutation rate of the target model.
    kind : IsmProposalKind or str
    table : HuwTable, optional
        Required for HUW unless ``direct``.
    direct : bool
        Evaluate HUW weights by explicit summation.
    """
    kind = IsmProposalKind(getattr(kind, "value", kind))
    N = work.N
    if N < 2:
        raise ValueError("no backward step from a single lineage")
    den = N - 1 + theta
    moves, gt, sd, logw = [], [], [], []
    for j, c in enumerate(work.counts):
        if c >= 2:
            moves.append(IsmCoalesce(j))
            gt.append(c - 1)
            sd.append(c)
            logw.append(math.log((c - 1) / den))
        for om in work.singletons(j):
            tgt = work.removal_target(j, om)
            nn = 1 if tgt is None else work.counts[tgt] + 1
            moves.append(IsmRemove(j, om))
            gt.append(theta * nn / N)
            sd.append(1.0)
            logw.append(math.log(theta / den * nn / N))
    if not moves:
        raise AssertionError(f"empty backward support at {work.to_sample()}")
    if kind is IsmProposalKind.GT:
        mass = np.array(gt)
    elif kind is IsmProposalKind.SD:
        mass = np.array(sd)
    else:
        if work.huw is None:
            work.huw = IsmProposalState()
        got = _huw_masses(work, table, theta, direct)
        if got is None:
            mass = np.array(sd)
        else:
            hmoves, mass = got
            if hmoves != moves:
                raise AssertionError("HUW support differs from the backward support")
        work.huw.sample_ops += len(work.rows)
    q = mass / mass.sum()
    return moves, q, np.array(logw) - np.log(q)


def _dist(sample, theta, kind, table=None):
    work = IsmWork.from_sample(sample)
    moves, q, _ = ism_step_table(work, theta, kind, table)
    return TransitionDistribution(tuple(moves), q)


def ism_gt_proposal(sample, theta):
    return _dist(sample, theta, IsmProposalKind.GT)


def ism_sd_proposal(sample, theta):
    return _dist(sample, theta, IsmProposalKind.SD)


def ism_huw_proposal(sample, theta, table, state=None):
    """HUW proposal at ``sample``; falls back to SD masses for two lineages or
    when a supported move gets (numerically) zero HUW mass."""
    work = IsmWork.from_sample(sample)
    work.huw = state if state is not None else IsmProposalState()
    moves, q, _ = ism_step_table(work, theta, IsmProposalKind.HUW, table)
    return TransitionDistribution(tuple(moves), q)


def huw_u(sample, j, w, table):
    """Single HUW weight ``u_{j, w}`` read from the table."""
    N = sample.size
    d = int(sample.d[w])
    if not table.covers(N):
        raise LookupError(f"table covers up to {table.s_max} lineages, sample has {N}; rebuild")
    return float(table.u(int(sample.n[j]), N, d, bool(sample.S[j, w])))


def apply_backward(sample, move):
    """Predecessor of ``sample`` under a backward move (row/column indices of ``sample``)."""
    work = IsmWork.from_sample(sample)
    work.apply(move)
    return work.to_sample()


class IsmKernel:
    """Step kernel over ``IsmWork`` replicates for the SIS engine."""

    def __init__(self, model, proposal, huw_table=None, direct=False, shadow_check=False):
        self.theta = float(getattr(model, "theta", model))
        self.kind = IsmProposalKind(getattr(proposal, "value", proposal))
        self.table = huw_table
        self.direct = direct
        self.shadow_check = shadow_check

    def _ensure_table(self, n):
        if self.kind is IsmProposalKind.HUW and not self.direct:
            if self.table is None:
                self.table = HuwTable(max(n, 2), self.theta)
            elif not self.table.covers(n):
                raise LookupError(
                    f"HUW table covers {self.table.s_max} lineages, sample has {n}; rebuild"
                )

    def encode(self, samples):
        out, cache = [], {}
        for s in samples:
            if isinstance(s, IsmWork):
                out.append(s)
                continue
            base = cache.get(id(s))
            if base is None:
                base = cache[id(s)] = IsmWork.from_sample(s)
                self._ensure_table(s.size)
            out.append(base.copy())
        return out

    def decode(self, states):
        return list(states)

    def take(self, states, idx):
        return [states[i].copy() for i in idx]

    def concat(self, parts):
        return [x for p in parts for x in p]

    def sizes(self, states):
        return np.array([s.N for s in states], dtype=np.int64)

    def step(self, states, rows, u):
        lc = np.empty(len(rows))
        coal = np.empty(len(rows), dtype=bool)
        for k, (i, x) in enumerate(zip(rows, u)):
            wk = states[i]
            moves, q, log_cost = ism_step_table(wk, self.theta, self.kind, self.table, self.direct)
            cum = np.cumsum(q)
            cum[-1] = 1.0
            m = int(np.searchsorted(cum, x, side="right"))
            wk.apply(moves[m], self.table)
            if self.shadow_check and wk.huw is not None and not wk.huw.dirty:
                if huw_drift(wk, self.table) > 1e-12:
                    raise AssertionError("incremental HUW weights drifted from recomputation")
            lc[k] = log_cost[m]
            coal[k] = isinstance(moves[m], IsmCoalesce)
        return lc, coal

    def terminal_log(self, states, rows):
        return np.zeros(len(rows))

    def log_potential(self, states, rows):
        return np.zeros(len(rows))

    def maintain(self, states):
        return states
