"""Sequential importance sampling over coalescent histories.

Replicates are held in a structure-of-arrays ``_Population``.  A *kernel*
knows how to represent states and take one proposal step for many replicates
at once; ``FaKernel`` handles finite-alleles samples and ``ism.IsmKernel``
infinite-sites samples.  Every replicate draws its uniforms from a
counter-based stream keyed by ``(master_seed, draw, generation, stream)``, so
results are identical for any number of worker processes.
"""

import logging
import math
import multiprocessing
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import gammaln, logsumexp

from . import rng as _rng
from .model import MutationModel, TypedSample, pim_log_sampling_probability
from .proposals import ProposalKind, ProposalSupportError, step_arrays

log = logging.getLogger(__name__)

SCHEDULE_KINDS = ("S1", "S2", "S3", "S4")


def switch_point(n, theta, chi):
    """Lineage count at which schedule S2 branches out.

    ``floor(n ** (chi ** (1 / (theta * ln n))))`` clamped to ``[2, n - 1]``.
    """
    if n < 3:
        raise ValueError("switch point needs n >= 3")
    if theta <= 0 or not 0 < chi < 1:
        raise ValueError("need theta > 0 and chi in (0, 1)")
    z = math.floor(n ** (chi ** (1.0 / (theta * math.log(n)))))
    return int(min(max(z, 2), n - 1))


@dataclass(frozen=True)
class Schedule:
    """Replicate schedule.

    ``S1``: ``Gamma`` replicates throughout.  ``S2``: ``gamma`` replicates
    down to the switch point, then ``Gamma``.  ``S3``: ``gamma`` throughout.
    ``S4``: a constant count matching the S2 coalescence-step budget.
    """

    kind: str = "S1"
    gamma: int = 100
    Gamma: int = 10_000
    chi: float = 0.1
    zeta: int = None

    def __post_init__(self):
        if self.kind not in SCHEDULE_KINDS:
            raise ValueError(f"unknown schedule {self.kind!r}")
        if not 1 <= self.gamma <= self.Gamma:
            raise ValueError("need 1 <= gamma <= Gamma")
        if not 0 < self.chi < 1:
            raise ValueError("chi must lie in (0, 1)")

    def for_sample(self, n, theta):
        """Copy with the switch point fixed for sample size ``n``."""
        return replace(self, zeta=switch_point(n, theta, self.chi))

    def replicates(self, n):
        """Number of replicates at the start of the run."""
        if self.kind == "S1":
            return self.Gamma
        if self.kind in ("S2", "S3"):
            return self.gamma
        z = self._zeta()
        return (self.Gamma * z + self.gamma * (n - z)) // (n - 1)

    def _zeta(self):
        if self.zeta is None:
            raise ValueError("switch point unset; call for_sample first")
        return self.zeta


def schedule_draw_count(schedule, n):
    """Coalescence-step draws of one run of ``schedule`` on ``n`` lineages."""
    s = schedule
    if s.kind == "S1":
        return s.Gamma * (n - 1)
    if s.kind == "S3":
        return s.gamma * (n - 1)
    z = s._zeta()
    if s.kind == "S2":
        return s.gamma * (n - z) + s.Gamma * (z - 1)
    return s.replicates(n) * (n - 1)


@dataclass(frozen=True)
class ResamplingPolicy:
    """Stopping-time resampling: at each lineage-count level, resample when
    the effective sample size drops below ``ess_fraction`` of the count."""

    enabled: bool = False
    ess_fraction: float = 0.1
    mode: str = "stopping-time"

    def __post_init__(self):
        if not 0 < self.ess_fraction <= 1:
            raise ValueError("ess_fraction must lie in (0, 1]")
        if self.mode != "stopping-time":
            raise ValueError("only stopping-time resampling is supported")


@dataclass
class RunResult:
    estimate: float
    log_estimate: float
    standard_error: float
    draw_count: int
    mutation_draws: int
    n_replicates: int
    repetitions: int = 1
    discarded: int = 0
    discard_fraction: float = 0.0
    resample_events: int = 0
    level_variances: dict = field(default_factory=dict)
    wall_time: float = 0.0
    proposal: str = ""
    schedule: str = ""
    theta: float = float("nan")

    @property
    def relative_se(self):
        return self.standard_error / self.estimate if self.estimate > 0 else float("nan")


@dataclass
class Replicate:
    """Read-only view of one replicate."""

    state: object
    log_weight: float
    steps_taken: int
    stopped: bool
    rng_stream: tuple
    mutations: int = 0


def gt_rejection_control(replicate, mutation_cap):
    """Keep a replicate unless its mutation count exceeds ``mutation_cap``."""
    if mutation_cap is None or math.isinf(mutation_cap):
        return True
    return replicate.mutations <= mutation_cap


def ess(weights):
    """Effective sample size ``(sum w)^2 / sum w^2``."""
    w = np.asarray(weights, dtype=float)
    if np.any(w < 0) or not np.any(w > 0):
        raise ValueError("weights must be non-negative with at least one positive")
    with np.errstate(divide="ignore"):
        return ess_from_log(np.log(w))


def ess_from_log(log_w):
    """ESS from log-weights, shifted by their maximum for stability."""
    log_w = np.asarray(log_w, dtype=float)
    top = np.max(log_w)
    if not np.isfinite(top):
        raise ValueError("all weights are zero")
    w = np.exp(log_w - top)
    return float(w.sum() ** 2 / np.dot(w, w))


def _systematic_indices(w, count, u):
    w = np.asarray(w, dtype=float)
    total = w.sum()
    if count < 1:
        raise ValueError("count must be at least 1")
    if np.any(w < 0) or not np.isfinite(total) or total <= 0:
        raise ValueError("weights must be non-negative and normalizable")
    cum = np.cumsum(w / total)
    cum[-1] = 1.0
    pos = (u + np.arange(count)) / count
    return np.minimum(np.searchsorted(cum, pos, side="right"), len(w) - 1)


def systematic_resample(weights, count, seed):
    """Systematic resampling driven by one uniform derived from ``seed``.

    Returns
    -------
    numpy.ndarray
        ``count`` parent indices, sorted.
    """
    u = float(_rng.uniforms(seed, 0, 0, 0, _rng.TAG_RESAMPLE))
    return _systematic_indices(weights, count, u)


def _mean_se(log_w):
    """Mean and standard error of ``exp(log_w)`` computed after a max-shift."""
    log_w = np.asarray(log_w, dtype=float)
    R = len(log_w)
    top = np.max(log_w) if R else -np.inf
    if not np.isfinite(top):
        return 0.0, -np.inf, 0.0
    w = np.exp(log_w - top)
    mean = w.mean()
    sd = w.std(ddof=1) if R > 1 else 0.0
    scale = math.exp(top) if top < 700 else float("inf")
    return mean * scale, top + math.log(mean), sd * scale / math.sqrt(R)


class FaKernel:
    """Finite-alleles step kernel.

    States are interned to integer ids; each id caches its step table, and
    successor ids are created lazily the first time a move is drawn.
    """

    def __init__(self, model, kind, compact_limit=200_000):
        self.model = model
        self.kind = ProposalKind(kind)
        if self.kind is ProposalKind.PIM_OPTIMAL and not model.is_pim:
            raise ValueError("PIM_OPTIMAL requires a parent-independent model")
        self.compact_limit = compact_limit
        self._reset()

    def _reset(self):
        self._ids = {}
        self._states = []
        self._sizes = []
        self._tables = []
        self._potentials = []

    def __getstate__(self):
        return {"model": self.model, "kind": self.kind, "compact_limit": self.compact_limit}

    def __setstate__(self, state):
        self.__dict__.update(state)
        self._reset()

    def _intern(self, n):
        sid = self._ids.get(n)
        if sid is None:
            sid = len(self._states)
            self._ids[n] = sid
            self._states.append(n)
            self._sizes.append(n.size)
            self._tables.append(None)
            self._potentials.append(None)
        return sid

    def encode(self, samples):
        return np.array([self._intern(s) for s in samples], dtype=np.int64)

    def decode(self, ids):
        return [self._states[i] for i in ids]

    def take(self, ids, idx):
        return ids[idx]

    def concat(self, parts):
        return np.concatenate(parts)

    def sizes(self, ids):
        return np.array([self._sizes[i] for i in ids], dtype=np.int64)

    def _table(self, sid):
        tab = self._tables[sid]
        if tab is None:
            arr = step_arrays(self._states[sid], self.model, self.kind)
            cum = np.cumsum(arr.q)
            cum[-1] = 1.0
            succ = np.full(len(cum), -1, dtype=np.int64)
            tab = (cum, arr.log_cost, arr.is_coal, succ, arr)
            self._tables[sid] = tab
        return tab

    def step(self, ids, rows, u):
        sub = ids[rows]
        order = np.argsort(sub, kind="stable")
        srt = sub[order]
        cuts = np.flatnonzero(srt[1:] != srt[:-1]) + 1
        starts = np.concatenate([[0], cuts])
        ends = np.concatenate([cuts, [len(srt)]])
        lc = np.empty(len(rows))
        coal = np.empty(len(rows), dtype=bool)
        new = np.empty(len(rows), dtype=np.int64)
        for a, b in zip(starts, ends):
            sid = int(srt[a])
            cum, log_cost, is_coal, succ, arr = self._table(sid)
            g = order[a:b]
            k = np.searchsorted(cum, u[g], side="right")
            nxt = succ[k]
            if np.any(nxt < 0):
                here = self._states[sid]
                for kk in np.unique(k[nxt < 0]):
                    succ[kk] = self._intern(here.backward(arr.move(kk)))
                nxt = succ[k]
            lc[g] = log_cost[k]
            coal[g] = is_coal[k]
            new[g] = nxt
        ids[rows] = new
        return lc, coal

    def terminal_log(self, ids, rows):
        m = self.model
        return np.array([math.log(m.root_prob(self._states[i].types[0])) for i in ids[rows]])

    def log_potential(self, ids, rows):
        """Log ``p(n)`` when it is available in closed form (PIM), else 0."""
        if not self.model.is_pim:
            return np.zeros(len(rows))
        out = np.empty(len(rows))
        for r, i in enumerate(ids[rows]):
            v = self._potentials[i]
            if v is None:
                n = self._states[i]
                v = 0.0 if n.size == 1 else pim_log_sampling_probability(n, self.model)
                self._potentials[i] = v
            out[r] = v
        return out

    def maintain(self, ids):
        if len(self._states) <= self.compact_limit:
            return ids
        live, inv = np.unique(ids, return_inverse=True)
        keep = [self._states[i] for i in live]
        self._reset()
        return self.encode(keep)[inv]


class DenseKernel:
    """Batched GT/SD kernel for dense mutation models.

    States are rows of an ``(R, d)`` count matrix, so every step is a handful
    of array operations over all active replicates.  Reductions run over the
    type axis only, with no BLAS calls across replicates, so a row's result
    does not depend on which other rows share the batch.
    """

    def __init__(self, model, kind, n_max):
        self.model = model
        self.kind = ProposalKind(kind)
        if self.kind is ProposalKind.PIM_OPTIMAL:
            raise ValueError("use FaKernel for PIM_OPTIMAL")
        d, th = model.d, model.theta
        self.P = np.asarray(model.P, dtype=float)
        self._log_root = np.log(model.stationary)
        if self.kind is ProposalKind.SD:
            # T[N] maps counts of an (N-1)-lineage state to pi_hat.
            T = np.zeros((n_max + 1, d, d))
            for N in range(2, n_max + 1):
                s = N - 1 + th
                T[N] = np.linalg.inv(np.eye(d) - th * self.P / s) / s
            self._T = T

    def encode(self, samples):
        if isinstance(samples, np.ndarray):
            return samples
        d = self.model.d
        return np.array([s.dense(d) for s in samples], dtype=np.int64).reshape(-1, d)

    def decode(self, states):
        return states

    def take(self, states, idx):
        return states[idx]

    def concat(self, parts):
        return np.concatenate(parts)

    def sizes(self, states):
        return states.sum(axis=1)

    def as_samples(self, states):
        return [TypedSample.from_counts(row) for row in states]

    def tables(self, C):
        """Masses and recursion weights for count rows ``C``.

        Returns ``(mass, weight)`` of shape ``(B, d + d*d)``: coalescences of
        each type, then backward mutations ``(i, j)`` flattened row-major.
        """
        C = C.astype(float)
        B, d = C.shape
        th, P = self.model.theta, self.P
        N = C.sum(axis=1)
        den = N - 1 + th
        has = C >= 1
        coal_w = np.where(C >= 2, (C - 1) / den[:, None], 0.0)
        ni = C[:, :, None] + 1 - np.eye(d)[None]
        mut_w = th / (den * N)[:, None, None] * ni * P[None] * has[:, None, :]
        if self.kind is ProposalKind.GT:
            coal_m, mut_m = coal_w, mut_w
        else:
            T = self._T[N.astype(np.int64)]
            prev = C[:, None, :] - np.eye(d)[None]
            ph = np.zeros((B, d, d))
            for x in range(d):
                ph += prev[:, :, x, None] * T[:, x, None, :]
            pjj = np.einsum("bjj->bj", ph)
            with np.errstate(divide="ignore", invalid="ignore"):
                scale = 1.0 / (N * den)
                coal_m = np.where(C >= 2, C * (C - 1) * scale[:, None] / pjj, 0.0)
                ratio = np.swapaxes(ph, 1, 2) / pjj[:, None, :]
                mut_m = th * C[:, None, :] * scale[:, None, None] * P[None] * ratio
                mut_m = np.where(has[:, None, :] & (P[None] > 0), mut_m, 0.0)
        mass = np.concatenate([coal_m, mut_m.reshape(B, d * d)], axis=1)
        weight = np.concatenate([coal_w, mut_w.reshape(B, d * d)], axis=1)
        return mass, weight

    def step(self, states, rows, u):
        C = states[rows]
        d = C.shape[1]
        mass, weight = self.tables(C)
        bad = (weight > 0) & ~(mass > 0)
        if bad.any():
            b = int(np.flatnonzero(bad.any(axis=1))[0])
            raise ProposalSupportError(
                f"{self.kind.value} proposal gives zero mass at state {TypedSample.from_counts(C[b])}"
            )
        cum = np.cumsum(mass, axis=1)
        total = cum[:, -1]
        k = (cum <= (u * total)[:, None]).sum(axis=1)
        last = d + d * d - 1 - np.argmax((mass > 0)[:, ::-1], axis=1)
        k = np.minimum(k, last)
        b = np.arange(len(rows))
        q = mass[b, k] / total
        lc = np.log(weight[b, k]) - np.log(q)
        coal = k < d
        j = np.where(coal, k, (k - d) % d)
        i = (k - d) // d
        C[b, j] -= 1
        mut = ~coal
        C[b[mut], i[mut]] += 1
        states[rows] = C
        return lc, coal

    def terminal_log(self, states, rows):
        return self._log_root[np.argmax(states[rows], axis=1)]

    def log_potential(self, states, rows):
        m = self.model
        if not m.is_pim:
            return np.zeros(len(rows))
        C = states[rows].astype(float)
        N = C.sum(axis=1)
        tq = m.theta * np.asarray(m.pim_q, dtype=float)
        out = (gammaln(N + 1) - gammaln(N + m.theta) + gammaln(m.theta)
               + (gammaln(C + tq) - gammaln(tq) - gammaln(C + 1)).sum(axis=1))
        return np.where(N > 1, out, 0.0)

    def maintain(self, states):
        return states


@dataclass
class _Population:
    states: object
    log_w: np.ndarray
    size: np.ndarray
    draws: np.ndarray
    steps: np.ndarray
    muts: np.ndarray
    stream: np.ndarray
    gen: np.ndarray
    dead: np.ndarray

    @classmethod
    def fresh(cls, kernel, data, count, generation=0):
        states = kernel.encode([data] * count)
        z = np.zeros(count, dtype=np.int64)
        return cls(
            states=states,
            log_w=np.zeros(count),
            size=kernel.sizes(states),
            draws=z.copy(),
            steps=z.copy(),
            muts=z.copy(),
            stream=np.arange(count, dtype=np.int64),
            gen=np.full(count, generation, dtype=np.int64),
            dead=np.zeros(count, dtype=bool),
        )

    def __len__(self):
        return len(self.log_w)

    _ARRAYS = ("log_w", "size", "draws", "steps", "muts", "stream", "gen", "dead")

    def split(self, kernel, idx):
        """Picklable piece holding replicates ``idx``."""
        return (kernel.decode(kernel.take(self.states, idx)),
                {k: getattr(self, k)[idx] for k in self._ARRAYS})

    @classmethod
    def join(cls, kernel, pieces):
        states = kernel.concat([kernel.encode(p[0]) for p in pieces])
        arrays = {k: np.concatenate([p[1][k] for p in pieces]) for k in cls._ARRAYS}
        return cls(states=states, **arrays)

    def replicate(self, kernel, i):
        return Replicate(
            state=kernel.decode(kernel.take(self.states, np.array([i])))[0],
            log_weight=float(self.log_w[i]),
            steps_taken=int(self.steps[i]),
            stopped=bool(self.dead[i] or self.size[i] == 1),
            rng_stream=(int(self.stream[i]), int(self.gen[i])),
            mutations=int(self.muts[i]),
        )


def _advance(kernel, pop, stop_size, seed, tag, max_steps=None, cap=None, terminal=True):
    """Step every live replicate until it first reaches ``stop_size`` lineages.

    Returns the numbers of coalescence and mutation draws made.
    """
    n_coal = n_mut = 0
    while True:
        live = ~pop.dead & (pop.size > stop_size)
        if max_steps is not None:
            live &= pop.steps < max_steps
        rows = np.flatnonzero(live)
        if rows.size == 0:
            break
        u = _rng.uniforms(seed, pop.draws[rows], pop.gen[rows], pop.stream[rows], tag)
        lc, coal = kernel.step(pop.states, rows, u)
        pop.log_w[rows] += lc
        pop.draws[rows] += 1
        pop.steps[rows] += 1
        pop.muts[rows] += ~coal
        pop.size[rows] -= coal
        c = int(coal.sum())
        n_coal += c
        n_mut += len(rows) - c
        if terminal:
            root = rows[pop.size[rows] == 1]
            if root.size:
                pop.log_w[root] += kernel.terminal_log(pop.states, root)
        if cap is not None:
            over = rows[pop.muts[rows] > cap]
            pop.dead[over] = True
            pop.log_w[over] = -np.inf
        pop.states = kernel.maintain(pop.states)
    return n_coal, n_mut


def _chunk_job(args):
    kernel, piece, kwargs = args
    pop = _Population.join(kernel, [piece])
    counts = _advance(kernel, pop, **kwargs)
    return pop.split(kernel, np.arange(len(pop))), counts


class _Runner:
    """Owns the kernel, the seed and an optional process pool."""

    def __init__(self, kernel, seed, workers=1):
        self.kernel = kernel
        self.seed = int(seed)
        self.workers = max(1, int(workers))
        self._pool = None
        self.coal = 0
        self.muts = 0

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        if self._pool is not None:
            self._pool.shutdown()
            self._pool = None

    def advance(self, pop, stop_size, tag, **kwargs):
        kwargs.update(stop_size=stop_size, seed=self.seed, tag=tag)
        if self.workers == 1 or len(pop) < 2 * self.workers:
            c, m = _advance(self.kernel, pop, **kwargs)
        else:
            if self._pool is None:
                ctx = multiprocessing.get_context("fork")
                self._pool = ProcessPoolExecutor(self.workers, mp_context=ctx)
            chunks = np.array_split(np.arange(len(pop)), self.workers)
            jobs = [(self.kernel, pop.split(self.kernel, idx), kwargs) for idx in chunks]
            out = list(self._pool.map(_chunk_job, jobs))
            new = _Population.join(self.kernel, [o[0] for o in out])
            pop.__dict__.update(new.__dict__)
            c = sum(o[1][0] for o in out)
            m = sum(o[1][1] for o in out)
        self.coal += c
        self.muts += m
        return pop


def _resample(kernel, pop, count, seed, tag, generation):
    """Weight-proportional systematic resampling to ``count`` offspring."""
    top = np.max(pop.log_w)
    w = np.exp(pop.log_w - top)
    u = float(_rng.uniforms(seed, 0, generation, 0, tag | _rng.TAG_RESAMPLE))
    idx = _systematic_indices(w, count, u)
    mean_log = top + math.log(w.mean())
    z = np.zeros(count, dtype=np.int64)
    return _Population(
        states=kernel.take(pop.states, idx),
        log_w=np.full(count, mean_log),
        size=pop.size[idx],
        draws=z,
        steps=pop.steps[idx],
        muts=pop.muts[idx],
        stream=np.arange(count, dtype=np.int64),
        gen=np.full(count, generation, dtype=np.int64),
        dead=np.zeros(count, dtype=bool),
    )


def _level_log_stats(kernel, pop):
    """Log mean and log variance (ddof 0) of the level weights ``L_k * phi(n_k)``."""
    rows = np.arange(len(pop))
    lw = pop.log_w + kernel.log_potential(pop.states, rows)
    top = np.max(lw)
    if top == -np.inf:
        return -math.inf, -math.inf
    x = np.exp(lw - top)
    v = float(np.var(x))
    log_var = 2 * top + math.log(v) if v > 0 else -math.inf
    return top + math.log(x.mean()), log_var


@dataclass
class LevelStats:
    """Per-level weight moments from stopping replicates at each level.

    Attributes
    ----------
    log_mean, log_var : dict
        ``{level: value}``: log sample mean and log variance of the level
        weights ``L_k * phi(n_k)``.
    exact_log_p : float or None
        Closed-form log ``p(n)`` when the model is parent-independent; it is
        then the exact mean of every level weight.
    discarded : int
        Replicates removed by rejection control; their weights count as 0,
        which biases the level means downwards.
    """

    log_mean: dict
    log_var: dict
    exact_log_p: float = None
    discarded: int = 0

    def variances(self, reference=None):
        """Variances of the level weights divided by their mean.

        The mean of ``L_k * phi(n_k)`` does not depend on the proposal, so
        the denominator may come from another run: ``reference`` is a
        ``LevelStats`` or a ``{level: log mean}`` mapping.  Without it the
        exact ``p(n)`` is used when known, else this run's sample means, which
        caps the result at ``R - 1`` for ``R`` replicates.
        """
        if isinstance(reference, LevelStats):
            reference = reference.log_mean
        out = {}
        for level, lv in self.log_var.items():
            if self.exact_log_p is not None:
                lm = self.exact_log_p
            elif reference is not None:
                lm = reference.get(level, float("nan"))
            else:
                lm = self.log_mean[level]
            if math.isnan(lv) or not np.isfinite(lm):
                out[level] = float("nan")
            elif lv == -math.inf:
                out[level] = 0.0
            else:
                z = lv - 2 * lm
                out[level] = math.exp(z) if z < 709 else math.inf
        return out

    @staticmethod
    def shared_reference(runs):
        """Per level, the log mean of the run whose own relative variance is
        smallest, i.e. the most precise of the estimates of the common mean.
        Runs with discarded replicates are used only if all runs have some."""
        clean = [r for r in runs if not r.discarded] or list(runs)
        out = {}
        for level in clean[0].log_mean:
            best, best_rv = float("nan"), math.inf
            for r in clean:
                rv = r.log_var.get(level, float("nan")) - 2 * r.log_mean.get(level, float("nan"))
                if rv == -math.inf or rv < best_rv:
                    best, best_rv = r.log_mean[level], rv
            out[level] = best
        return out


def _has_potential(kernel):
    return bool(getattr(getattr(kernel, "model", None), "is_pim", False))


def make_kernel(data, model, proposal, huw_table=None, **opts):
    """Kernel for ``data``: a ``TypedSample`` or an ``ism.IsmSample``."""
    if isinstance(data, TypedSample):
        kind = ProposalKind(getattr(proposal, "value", proposal))
        if isinstance(model, MutationModel) and kind is not ProposalKind.PIM_OPTIMAL:
            return DenseKernel(model, kind, data.size)
        return FaKernel(model, kind)
    from .ism import IsmKernel, IsmSample

    if isinstance(data, IsmSample):
        return IsmKernel(model, proposal, huw_table=huw_table, **opts)
    raise TypeError(f"unsupported data type {type(data).__name__}")


def _data_size(data):
    return data.size


def _one_execution(runner, data, schedule, policy, n, theta, rep, cap):
    """One pass of a schedule; returns final population and bookkeeping."""
    kernel, seed = runner.kernel, runner.seed
    tag = rep << 4
    start = schedule.replicates(n) if schedule is not None else None
    pop = _Population.fresh(kernel, data, start)
    generation = 0
    resamples = 0
    variances = {}
    lockstep = policy is not None and policy.enabled
    levels = range(n - 1, 0, -1) if lockstep else ()
    zeta = schedule.zeta if schedule is not None and schedule.kind == "S2" else None

    def maybe_resample(pop, level):
        nonlocal generation, resamples
        variances[level] = _level_log_stats(kernel, pop)
        if level > 1 and not np.all(pop.dead):
            if ess_from_log(pop.log_w) < policy.ess_fraction * len(pop):
                generation += 1
                resamples += 1
                pop = _resample(kernel, pop, len(pop), seed, tag, generation)
        return pop

    if zeta is not None:
        if lockstep:
            for level in range(n - 1, zeta - 1, -1):
                pop = runner.advance(pop, level, tag, cap=cap)
                if level > zeta:
                    pop = maybe_resample(pop, level)
        else:
            pop = runner.advance(pop, zeta, tag, cap=cap)
        generation += 1
        pop = _resample(kernel, pop, schedule.Gamma, seed, tag, generation)
        levels = range(zeta - 1, 0, -1) if lockstep else ()
    for level in levels:
        pop = runner.advance(pop, level, tag, cap=cap)
        pop = maybe_resample(pop, level)
    pop = runner.advance(pop, 1, tag, cap=cap)
    return pop, resamples, variances


def run_sis(
    data,
    model,
    proposal,
    schedule=None,
    policy=None,
    n_replicates=None,
    master_seed=0,
    workers=1,
    mutation_cap=None,
    repetitions=None,
    huw_table=None,
):
    """Estimate the sampling probability of ``data`` by importance sampling.

    Parameters
    ----------
    data : TypedSample or IsmSample
    model : MutationModel, SiteFlipModel, or the ISM mutation rate
    proposal : ProposalKind or str
        ``GT``, ``SD``, ``PIM_OPTIMAL`` (finite alleles) or ``HUW`` (ISM).
    schedule : Schedule, optional
        Replicate schedule; defaults to ``n_replicates`` independent
        replicates (schedule S1 with ``Gamma = n_replicates``).
    policy : ResamplingPolicy, optional
        Stopping-time resampling.
    n_replicates : int, optional
    master_seed : int
    workers : int
        Worker processes; results do not depend on this.
    mutation_cap : int, optional
        Rejection control: discard a replicate once its number of mutation
        steps exceeds the cap.  The estimator is biased when this triggers.
    repetitions : int, optional
        Independent repetitions used for the standard error.  Defaults to 20
        for S2 and resampled runs, 1 otherwise.
    huw_table : HuwTable, optional
        Precomputed table for the ISM HUW proposal.

    Returns
    -------
    RunResult
    """
    t0 = time.perf_counter()
    n = _data_size(data)
    if n < 2:
        raise ValueError("need at least two lineages")
    theta = float(getattr(model, "theta", model))
    if schedule is None:
        if n_replicates is None:
            raise ValueError("give a schedule or n_replicates")
        schedule = Schedule("S1", gamma=1, Gamma=int(n_replicates))
    if schedule.kind in ("S2", "S4") and schedule.zeta is None:
        if n < 3:
            schedule = replace(schedule, kind="S1")
        else:
            schedule = schedule.for_sample(n, theta)
    if policy is not None and not policy.enabled:
        policy = None
    batched = schedule.kind == "S2" or policy is not None
    B = repetitions if repetitions is not None else (20 if batched else 1)
    kernel = make_kernel(data, model, proposal, huw_table=huw_table)
    rep_logs, rep_ses, coal_first, resamples, discarded, total = [], [], None, 0, 0, 0
    variances = {}
    mut_draws = 0
    with _Runner(kernel, master_seed, workers) as runner:
        for rep in range(B):
            runner.coal = runner.muts = 0
            pop, rs, var = _one_execution(
                runner, data, schedule, policy, n, theta, rep, mutation_cap
            )
            est, log_est, se = _mean_se(pop.log_w)
            rep_logs.append(log_est)
            rep_ses.append(se)
            if coal_first is None:
                coal_first = runner.coal
                variances = _level_stats(kernel, data, var).variances()
            mut_draws += runner.muts
            resamples += rs
            discarded += int(pop.dead.sum())
            total += len(pop)
    if B == 1:
        est, log_est, se = _mean_se(pop.log_w)
    else:
        est, log_est, se = _mean_se(np.array(rep_logs))
    kind = getattr(proposal, "value", str(proposal))
    return RunResult(
        estimate=est,
        log_estimate=log_est,
        standard_error=se,
        draw_count=int(coal_first),
        mutation_draws=int(mut_draws),
        n_replicates=int(schedule.replicates(n)),
        repetitions=B,
        discarded=discarded,
        discard_fraction=discarded / total if total else 0.0,
        resample_events=resamples,
        level_variances=variances,
        wall_time=time.perf_counter() - t0,
        proposal=kind,
        schedule=schedule.kind,
        theta=theta,
    )


@dataclass
class TruncatedResult:
    """Cost products ``C(floor(t n))`` of replicates that stayed above the MRCA."""

    costs: np.ndarray
    steps: int
    excluded: int

    @property
    def mean(self):
        return float(self.costs.mean()) if len(self.costs) else float("nan")

    @property
    def standard_error(self):
        k = len(self.costs)
        return float(self.costs.std(ddof=1) / math.sqrt(k)) if k > 1 else float("nan")


def truncated_run(data, model, proposal, t, n_replicates, master_seed=0, workers=1):
    """Run every replicate for ``floor(t n)`` steps, accumulating only costs."""
    if not 0 <= t < 1:
        raise ValueError("t must lie in [0, 1)")
    n = _data_size(data)
    steps = int(math.floor(t * n))
    kernel = make_kernel(data, model, proposal)
    pop = _Population.fresh(kernel, data, int(n_replicates))
    with _Runner(kernel, master_seed, workers) as runner:
        if steps > 0:
            runner.advance(pop, 1, 0, max_steps=steps, terminal=False)
    early = pop.steps < steps
    return TruncatedResult(np.exp(pop.log_w[~early]), steps, int(early.sum()))


def level_statistics(data, model, proposal, n_replicates, master_seed=0, workers=1,
                     mutation_cap=None, huw_table=None):
    """Stop all replicates at each remaining-lineage level and record moments.

    No resampling takes place.  The weight of a replicate at a level is its
    accumulated cost product times ``phi(n_k)``: the closed-form sampling
    probability of its current state for parent-independent models, and 1
    otherwise.

    Returns
    -------
    LevelStats
        Levels ``n, n-1, ..., 1``.
    """
    n = _data_size(data)
    kernel = make_kernel(data, model, proposal, huw_table=huw_table)
    pop = _Population.fresh(kernel, data, int(n_replicates))
    stats = {n: _level_log_stats(kernel, pop)}
    with _Runner(kernel, master_seed, workers) as runner:
        for level in range(n - 1, 0, -1):
            runner.advance(pop, level, 0, cap=mutation_cap)
            stats[level] = _level_log_stats(kernel, pop)
    out = _level_stats(kernel, data, stats)
    out.discarded = int(pop.dead.sum())
    return out


def variance_by_lineage_count(data, model, proposal, n_replicates, master_seed=0,
                              workers=1, mutation_cap=None, huw_table=None,
                              reference=None):
    """Variance of the normalized weights at each remaining-lineage level.

    See ``level_statistics`` and ``LevelStats.variances``; ``reference``
    supplies shared level means so that proposals can be compared without
    the ``R - 1`` cap of self-normalization.

    Returns
    -------
    dict
        ``{level: variance}`` for levels ``n, n-1, ..., 1``.
    """
    return level_statistics(data, model, proposal, n_replicates, master_seed, workers,
                            mutation_cap, huw_table).variances(reference)


def _level_stats(kernel, data, stats):
    exact = None
    if _has_potential(kernel):
        start = kernel.encode([data])
        exact = float(kernel.log_potential(start, np.array([0]))[0])
    return LevelStats({k: v[0] for k, v in stats.items()},
                      {k: v[1] for k, v in stats.items()}, exact)
