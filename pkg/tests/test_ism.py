import math
from functools import lru_cache

import numpy as np
import pytest
from hypothesis import given, strategies as st

from coalsis.engine import run_sis
from coalsis.experiments import BUILTIN, load_data, ExperimentConfig
from coalsis.huw import HuwTable
from coalsis.ism import (
    ForwardBranch,
    ForwardMutate,
    IsmCoalesce,
    IsmKernel,
    IsmProposalKind,
    IsmProposalState,
    IsmRemove,
    IsmSample,
    IsmWork,
    apply_backward,
    apply_forward,
    huw_drift,
    huw_u,
    ism_forward_transitions,
    ism_gt_proposal,
    ism_huw_proposal,
    ism_sd_proposal,
    ism_step_table,
    simulate_ism,
    singleton_scan,
    watterson,
    watterson_estimate,
)
from coalsis.rng import generator


def exact_ism(sample, theta):
    """Exact probability from the backward recursion, memoized on the sample."""

    @lru_cache(maxsize=None)
    def p(key):
        work = key_to_work[key]
        N = work.N
        if N == 1:
            return 1.0
        moves, _, _ = ism_step_table(work, theta, "GT")
        total = 0.0
        den = N - 1 + theta
        for v in moves:
            nxt = work.copy()
            if isinstance(v, IsmCoalesce):
                coef = (work.counts[v.j] - 1) / den
            else:
                tgt = work.removal_target(v.j, v.w)
                coef = theta / den * (1 if tgt is None else work.counts[tgt] + 1) / N
            nxt.apply(v)
            k = canon(nxt)
            key_to_work.setdefault(k, nxt)
            total += coef * p(k)
        return total

    def canon(work):
        return (tuple(sorted(zip(work.rows, work.counts))), tuple(x > 0 for x in work.d))

    key_to_work = {}
    w = IsmWork.from_sample(sample)
    k = canon(w)
    key_to_work[k] = w
    return p(k)


SMALL = IsmSample([[1, 0, 0], [0, 1, 0], [0, 1, 1], [0, 0, 0]], [1, 2, 1, 2])


# samples

def test_sample_validation():
    with pytest.raises(ValueError, match="distinct"):
        IsmSample([[1, 0], [1, 0]], [1, 1])
    with pytest.raises(ValueError, match="carrier"):
        IsmSample([[1, 0], [0, 0]], [1, 1])
    with pytest.raises(ValueError, match="incompatible"):
        IsmSample([[1, 0], [0, 1], [1, 1]], [1, 1, 1])
    with pytest.raises(ValueError, match="locations"):
        IsmSample([[1, 0], [0, 1]], [1, 1], [0.5, 0.5])
    with pytest.raises(ValueError, match="positive"):
        IsmSample([[1], [0]], [0, 1])
    with pytest.raises(ValueError, match="every lineage"):
        IsmWork.from_sample(IsmSample([[1, 1], [1, 0]], [1, 2]))


def test_sample_equality_ignores_row_order():
    a = IsmSample([[1, 0], [0, 1]], [2, 1])
    b = IsmSample([[0, 1], [1, 0]], [1, 2])
    assert a == b and hash(a) == hash(b)
    assert a.size == 3 and list(a.d) == [2, 1]


# forward model

def test_forward_masses():
    fw = ism_forward_transitions(SMALL, 2.0)
    N = SMALL.size
    branch = sum(p for v, p in fw if isinstance(v, ForwardBranch))
    assert branch == pytest.approx((N - 1) / (N - 1 + 2.0))
    assert fw.probs.sum() == pytest.approx(1.0)
    one = IsmSample(np.zeros((1, 0), dtype=np.uint8), [1])
    assert all(isinstance(v, ForwardMutate) for v in ism_forward_transitions(one, 1.0).moves)


def test_apply_forward():
    s = IsmSample([[1, 0], [0, 1]], [2, 1], [0.2, 0.6])
    b = apply_forward(s, ForwardBranch(1))
    assert list(b.n) == [2, 2]
    m = apply_forward(s, ForwardMutate(0), x=0.4)
    assert list(m.ell) == [0.2, 0.4, 0.6]
    assert m == IsmSample([[1, 0, 0], [0, 0, 1], [1, 1, 0]], [1, 1, 1], [0.2, 0.4, 0.6])
    with pytest.raises(ValueError):
        apply_forward(s, ForwardMutate(0))


def test_watterson_identity():
    theta, n, R = 3.93, 55, 10_000
    g = generator(8)
    r = np.array([simulate_ism(n, theta, g).r for _ in range(R)])
    expect = theta * sum(1 / k for k in range(1, n))
    assert abs(r.mean() - expect) < 3 * r.std(ddof=1) / math.sqrt(R)


def test_simulate_conditioned_and_deterministic():
    a = simulate_ism(30, 2.0, seed=3, r_target=9)
    assert a.r == 9 and a.size == 30
    assert a == simulate_ism(30, 2.0, seed=3, r_target=9)


def test_watterson_values():
    assert watterson(10, 2) == 10
    with pytest.raises(ValueError):
        watterson(1, 1)
    for name, value in (("ism55", 3.93), ("ism550", 4.94), ("ism5500", 4.90)):
        data, _ = load_data(ExperimentConfig(model="ism", data=f"builtin:{name}"))
        assert round(watterson_estimate(data), 2) == value


# singletons

def test_singleton_scan_examples():
    assert singleton_scan(IsmSample([[1, 0], [0, 1], [0, 0]], [2, 2, 3])).M == frozenset()
    idx = singleton_scan(SMALL)
    assert idx.M == {0, 2} and idx.columns == {0: (0,), 2: (2,)}


@given(st.integers(0, 2**32 - 1))
def test_singleton_scan_brute_force(seed):
    s = simulate_ism(int(np.random.default_rng(seed).integers(2, 25)), 3.0, seed=seed)
    idx = singleton_scan(s)
    brute = {}
    for j in range(s.h):
        for w in range(s.r):
            carriers = sum(int(s.n[i]) for i in range(s.h) if s.S[i, w])
            if s.n[j] == 1 and s.S[j, w] and carriers == 1:
                brute.setdefault(j, []).append(w)
    assert idx.M == set(brute)
    assert {j: list(c) for j, c in idx.columns.items()} == brute


# proposals

def test_three_leaf_hand_enumeration():
    s = IsmSample([[1], [0]], [1, 2])
    theta = 0.7
    gt = ism_gt_proposal(s, theta).as_dict()
    # coalescence of row 1: n_j - 1 = 1; removal merging into row 1: theta*3/3
    assert gt == pytest.approx({IsmCoalesce(1): 1 / (1 + theta), IsmRemove(0, 0): theta / (1 + theta)})
    sd = ism_sd_proposal(s, theta).as_dict()
    assert sd == pytest.approx({IsmCoalesce(1): 2 / 3, IsmRemove(0, 0): 1 / 3})


def test_no_singletons_pure_coalescence():
    s = IsmSample([[1, 0], [0, 1], [0, 0]], [2, 3, 4])
    gt = ism_gt_proposal(s, 1.0)
    assert gt.as_dict() == pytest.approx({IsmCoalesce(0): 1 / 6, IsmCoalesce(1): 2 / 6,
                                          IsmCoalesce(2): 3 / 6})
    sd = ism_sd_proposal(s, 1.0)
    assert sd.as_dict() == pytest.approx({IsmCoalesce(0): 2 / 9, IsmCoalesce(1): 3 / 9,
                                          IsmCoalesce(2): 4 / 9})


@given(st.integers(0, 2**32 - 1), st.sampled_from(["GT", "SD", "HUW"]))
def test_proposals_normalized_on_valid_support(seed, kind):
    s = simulate_ism(int(np.random.default_rng(seed).integers(3, 30)), 2.5, seed=seed)
    if any(x == s.size for x in s.d):
        return
    table = HuwTable(40, 2.5)
    dist = (ism_huw_proposal(s, 2.5, table) if kind == "HUW"
            else ism_gt_proposal(s, 2.5) if kind == "GT" else ism_sd_proposal(s, 2.5))
    assert abs(dist.probs.sum() - 1) < 1e-12 and np.all(dist.probs > 0)
    idx = singleton_scan(s)
    for v in dist.moves:
        if isinstance(v, IsmCoalesce):
            assert s.n[v.j] >= 2
        else:
            assert v.j in idx.M and v.w in idx.columns[v.j]
        apply_backward(s, v)


def test_huw_masses_follow_row_weights():
    s = IsmSample([[1, 0], [0, 1], [0, 0]], [1, 3, 2])
    t = HuwTable(10, 1.5)
    q = ism_huw_proposal(s, 1.5, t).as_dict()
    N = s.size
    w = [sum(huw_u(s, j, om, t) for om in range(s.r)) for j in range(s.h)]
    total = w[0] + w[1] + w[2]
    assert q[IsmRemove(0, 0)] == pytest.approx(w[0] / total)
    assert q[IsmCoalesce(1)] == pytest.approx(w[1] / total)
    assert N == 6


def test_huw_two_lineage_fallback():
    s = IsmSample([[1, 0], [0, 1]], [1, 1])
    t = HuwTable(5, 1.0)
    assert ism_huw_proposal(s, 1.0, t).as_dict() == ism_sd_proposal(s, 1.0).as_dict()


def test_huw_u_table_miss():
    with pytest.raises(LookupError, match="rebuild"):
        huw_u(SMALL, 0, 0, HuwTable(3, 1.0))


@pytest.mark.parametrize("kind", ["GT", "SD", "HUW"])
def test_path_length(kind):
    s = simulate_ism(25, 3.0, seed=4)
    k = IsmKernel(3.0, kind)
    states = k.encode([s])
    g = np.random.default_rng(1)
    steps = 0
    while states[0].N > 1:
        k.step(states, np.array([0]), g.random(1))
        steps += 1
    assert steps == s.size - 1 + s.r


# estimates

def test_two_lineage_closed_form():
    s = IsmSample([[1, 0], [0, 1]], [1, 1])
    th = 1.3
    assert exact_ism(s, th) == pytest.approx(th**2 / (1 + th) ** 3, rel=1e-14)


@pytest.mark.parametrize("kind", ["GT", "SD", "HUW"])
def test_sis_matches_exact(kind):
    theta = 1.2
    p = exact_ism(SMALL, theta)
    r = run_sis(SMALL, theta, kind, n_replicates=4000, master_seed=5)
    assert abs(r.estimate - p) < 3 * r.standard_error


def test_sd_and_huw_agree_on_benchmark():
    data, theta = load_data(ExperimentConfig(model="ism", data="builtin:ism55"))
    a = run_sis(data, theta, "SD", n_replicates=1000, master_seed=1)
    b = run_sis(data, theta, "HUW", n_replicates=1000, master_seed=2)
    assert abs(a.estimate - b.estimate) < 3 * (a.standard_error + b.standard_error)


def test_incremental_refresh_matches_recompute():
    data, theta = load_data(ExperimentConfig(model="ism", data="builtin:ism55"))
    table = HuwTable(data.size, theta)
    k = IsmKernel(theta, "HUW", huw_table=table)
    g = np.random.default_rng(0)
    worst = 0.0
    partial = 0
    for _ in range(100):
        states = k.encode([data])
        wk = states[0]
        while wk.N > 1:
            k.step(states, np.array([0]), g.random(1))
            if wk.huw is not None and not wk.huw.dirty and wk.huw.w is not None:
                worst = max(worst, huw_drift(wk, table))
        partial += wk.huw.partial_refreshes
    assert worst < 1e-12 and partial > 0


def test_shadow_check_and_op_counters():
    data, theta = load_data(ExperimentConfig(model="ism", data="builtin:ism55"))
    r = run_sis(data, theta, "HUW", n_replicates=20, master_seed=3)
    assert r.estimate > 0
    k = IsmKernel(theta, "HUW", shadow_check=True)
    states = k.encode([data])
    g = np.random.default_rng(2)
    while states[0].N > 1:
        k.step(states, np.array([0]), g.random(1))
    st_ = states[0].huw
    assert isinstance(st_, IsmProposalState)
    assert st_.lookups > 0 and st_.sample_ops > 0 and st_.direct_terms == 0
    kd = IsmKernel(theta, "HUW", direct=True)
    states = kd.encode([data])
    while states[0].N > 1:
        kd.step(states, np.array([0]), g.random(1))
    assert states[0].huw.direct_terms > 0
