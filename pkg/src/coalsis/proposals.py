"""Backward proposals for the finite-alleles coalescent and their costs.

The one-step cost of a move is ``p(n | n - v) / q(n - v | n)`` where the
numerator is ``model.recursion_weight``.  Products of costs along a backward
path, times the MRCA factor, give the importance weight.
"""

import enum
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .model import (
    Coalesce,
    MutationModel,
    SiteFlipModel,
    Mutate,
    TransitionDistribution,
    TypedSample,
    backward_moves,
    backward_transitions_pim,
    recursion_weight,
)


class ProposalKind(enum.Enum):
    GT = "GT"
    SD = "SD"
    PIM_OPTIMAL = "PIM_OPTIMAL"


class ProposalSupportError(RuntimeError):
    """A move with positive target density has zero proposal mass."""


@dataclass(frozen=True)
class StepTable:
    """Everything needed to take one proposal step from a state.

    Attributes
    ----------
    moves : tuple
    q : numpy.ndarray
        Normalized proposal probabilities (all positive).
    log_cost : numpy.ndarray
        ``log p(n | n - v) - log q(n - v | n)`` per move.
    """

    moves: tuple
    q: np.ndarray
    log_cost: np.ndarray


def _scaled_state(y, n_scale):
    y = np.asarray(y, dtype=float)
    counts = np.rint(n_scale * y).astype(np.int64)
    return TypedSample.from_counts(counts)


def gt_masses(n, m):
    moves, w = backward_moves(n, m)
    return moves, w, w


def sd_masses(n, m):
    """Unnormalized SD masses and the matching recursion weights."""
    N, th = n.size, m.theta
    denom = N * (N - 1 + th)
    rdenom = N - 1 + th
    moves, mass, weight = [], [], []
    for j, c in zip(n.types, n.counts):
        prev = n.add(j, -1)
        srcs, ps = m.mutation_sources(j)
        ph = m.pi_hat_at(prev, np.concatenate([[j], srcs]))
        pj = ph[0]
        if c >= 2:
            moves.append(Coalesce(j))
            mass.append(c * (c - 1) / denom / pj)
            weight.append((c - 1) / rdenom)
        for i, p, pi_i in zip(srcs.tolist(), ps.tolist(), ph[1:].tolist()):
            moves.append(Mutate(i, j))
            mass.append(th * c / denom * p * pi_i / pj)
            ni = n.count(i) + (i != j)
            weight.append(th / rdenom * ni / N * p)
    return moves, np.array(mass), np.array(weight)


def pim_masses(n, m):
    dist = backward_transitions_pim(n, m)
    w = np.array([recursion_weight(n, v, m) for v in dist.moves])
    return list(dist.moves), np.array(dist.probs), w


_MASSES = {
    ProposalKind.GT: gt_masses,
    ProposalKind.SD: sd_masses,
    ProposalKind.PIM_OPTIMAL: pim_masses,
}


def step_table(n, m, kind):
    """Normalized proposal and log one-step costs at ``n``.

    Raises
    ------
    ProposalSupportError
        If a move with positive recursion weight gets no proposal mass.
    """
    kind = ProposalKind(kind)
    if n.size < 2:
        raise ValueError("no backward step from a single lineage")
    moves, mass, weight = _MASSES[kind](n, m)
    bad = (weight > 0) & ~(mass > 0)
    if bad.any():
        raise ProposalSupportError(
            f"{kind.value} proposal gives zero mass to {moves[int(np.argmax(bad))]} at state {n}"
        )
    keep = mass > 0
    moves = tuple(v for v, k in zip(moves, keep) if k)
    mass, weight = mass[keep], weight[keep]
    q = mass / mass.sum()
    with np.errstate(divide="ignore"):
        log_cost = np.log(weight) - np.log(q)
    return StepTable(moves, q, log_cost)


def proposal(n, m, kind):
    t = step_table(n, m, kind)
    return TransitionDistribution(t.moves, t.q)


def gt_proposal(n, m):
    """GT proposal: backward moves in proportion to their recursion weights."""
    if n.size < 2:
        raise ValueError("no backward step from a single lineage")
    moves, w = backward_moves(n, m)
    return TransitionDistribution.normalized(moves, w)


def gt_cost(n, m):
    """The (move independent) GT one-step cost: total recursion weight at n."""
    return float(backward_moves(n, m)[1].sum())


def gt_one_step_cost(v, y, n_scale, m):
    """GT cost of move ``v`` from the state ``n_scale * y``."""
    n = _scaled_state(y, n_scale)
    if recursion_weight(n, v, m) <= 0:
        raise ValueError(f"{v} is not a valid backward move from {n}")
    return gt_cost(n, m)


def sd_pi_hat(n, m):
    """SD approximation of the conditional type law, ``pi_hat[. | n]``."""
    if not isinstance(m, MutationModel):
        raise TypeError("the full vector is only available for dense models")
    return np.array(m.pi_hat(n))


def sd_proposal(n, m):
    """SD proposal, renormalized over its support."""
    return proposal(n, m, ProposalKind.SD)


def sd_one_step_cost(v, y, n_scale, m):
    """SD cost ``p/q`` of move ``v`` from the state ``n_scale * y``.

    Includes the renormalizing constant of the proposal, which equals one up
    to rounding for the SD kernel.
    """
    n = _scaled_state(y, n_scale)
    t = step_table(n, m, ProposalKind.SD)
    for move, lc in zip(t.moves, t.log_cost):
        if move == v:
            return float(np.exp(lc))
    raise ValueError(f"{v} is not a valid backward move from {n}")


@dataclass(frozen=True)
class CostCoefficients:
    """First-order cost coefficients.

    ``a(y)`` returns the length-d vector of coalescence coefficients and
    ``b(y)`` the d-by-d matrix of mutation-cost limits.
    """

    a: Callable
    b: Callable


def expansion_coefficients(kind, m):
    """Coefficients ``a_j(y)``, ``b_ij(y)`` of the large-sample cost expansion."""
    kind = ProposalKind(kind)
    d, th = m.d, m.theta

    def ones(y):
        return np.ones((d, d))

    if kind is ProposalKind.GT:
        def a(y):
            y = np.asarray(y, dtype=float)
            return np.full(d, -(d - 1) / y.sum())
    elif kind is ProposalKind.SD:
        P = m.P

        def a(y):
            y = np.asarray(y, dtype=float)
            s = y.sum()
            return (1 - th) / s - (1 - th * (y @ P) / s) / y
    else:
        raise ValueError("expansion coefficients are defined for GT and SD only")
    return CostCoefficients(a, ones)


@dataclass(frozen=True)
class MoveArrays:
    """Array form of a step table: move ``k`` is a coalescence of type
    ``dst[k]`` when ``is_coal[k]``, otherwise the backward mutation
    ``dst[k] -> src[k]``."""

    is_coal: np.ndarray
    src: np.ndarray
    dst: np.ndarray
    q: np.ndarray
    log_cost: np.ndarray

    def move(self, k):
        if self.is_coal[k]:
            return Coalesce(int(self.dst[k]))
        return Mutate(int(self.src[k]), int(self.dst[k]))


def _flip_arrays(n, m, kind):
    """Vectorized GT/SD tables for the site-flip model."""
    N, th, L = n.size, m.theta, m.n_sites
    T = np.asarray(n.types, dtype=np.int64)
    C = np.asarray(n.counts, dtype=np.int64)
    h = len(T)
    rdenom = N - 1 + th
    nb = T[:, None] ^ (np.int64(1) << np.arange(L, dtype=np.int64))[None, :]
    pos = np.clip(np.searchsorted(T, nb), 0, h - 1)
    n_src = np.where(T[pos] == nb, C[pos], 0)
    coal_w = (C - 1) / rdenom
    mut_w = th / rdenom * (n_src + 1) / N / L
    if kind is ProposalKind.GT:
        coal_m, mut_m = coal_w, mut_w
    elif kind is ProposalKind.SD:
        R = m.resolvent(th / (N - 1 + th))
        s = N - 1 + th
        d_self = np.bitwise_count(T[:, None] ^ T[None, :])
        d_nb = np.bitwise_count(T[:, None, None] ^ nb[None, :, :])
        # Row j holds the counts of n - e_j; forming them explicitly avoids
        # cancellation when type j is a singleton far from the others.
        prev = C[None, :] - np.eye(h, dtype=np.int64)
        pj = np.einsum("jx,xj->j", prev, R[d_self]) / s
        pn = np.einsum("jx,xjs->js", prev, R[d_nb]) / s
        denom = N * rdenom
        coal_m = C * (C - 1) / denom / pj
        mut_m = th * C[:, None] / denom / L * pn / pj[:, None]
    else:
        raise ValueError("PIM_OPTIMAL needs a dense PIM model")
    keep = C >= 2
    is_coal = np.concatenate([np.ones(keep.sum(), bool), np.zeros(h * L, bool)])
    dst = np.concatenate([T[keep], np.repeat(T, L)])
    src = np.concatenate([T[keep], nb.ravel()])
    mass = np.concatenate([coal_m[keep], mut_m.ravel()])
    weight = np.concatenate([coal_w[keep], mut_w.ravel()])
    if np.any(~(mass > 0)):
        raise ProposalSupportError(f"{kind.value} proposal has a zero-mass move at state {n}")
    q = mass / mass.sum()
    return MoveArrays(is_coal, src, dst, q, np.log(weight) - np.log(q))


def step_arrays(n, m, kind):
    """Step table as arrays, vectorized for the site-flip model."""
    kind = ProposalKind(kind)
    if n.size < 2:
        raise ValueError("no backward step from a single lineage")
    if isinstance(m, SiteFlipModel):
        return _flip_arrays(n, m, kind)
    t = step_table(n, m, kind)
    is_coal = np.array([isinstance(v, Coalesce) for v in t.moves])
    dst = np.array([v.j for v in t.moves], dtype=np.int64)
    src = np.array([v.j if isinstance(v, Coalesce) else v.i for v in t.moves], dtype=np.int64)
    return MoveArrays(is_coal, src, dst, t.q, t.log_cost)
