import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from coalsis.engine import (
    LevelStats,
    Replicate,
    ResamplingPolicy,
    Schedule,
    ess,
    ess_from_log,
    gt_rejection_control,
    level_statistics,
    run_sis,
    schedule_draw_count,
    switch_point,
    systematic_resample,
    truncated_run,
    variance_by_lineage_count,
)
from coalsis.model import (
    MutationModel,
    SiteFlipModel,
    TypedSample,
    exact_sampling_probability,
    forward_simulate,
    pim_sampling_probability,
)

P3 = np.array([[0.1, 0.6, 0.3], [0.5, 0.2, 0.3], [0.2, 0.2, 0.6]])


def S(*counts):
    return TypedSample.from_counts(counts)


# schedules

def test_switch_point_pinned():
    assert switch_point(50, 0.5, 0.1) == 3
    assert switch_point(500, 0.5, 0.1) == 19
    assert switch_point(5000, 0.5, 0.1) == 142


def test_switch_point_clamps():
    assert switch_point(50, 0.5, 1 - 1e-9) == 49
    assert switch_point(3, 0.01, 0.1) == 2
    with pytest.raises(ValueError):
        switch_point(2, 0.5, 0.1)
    with pytest.raises(ValueError):
        switch_point(10, 0.5, 1.0)


def test_schedule_draw_counts():
    n = 50
    s1 = Schedule("S1", gamma=100, Gamma=10_000)
    s3 = Schedule("S3", gamma=100, Gamma=10_000)
    s2 = Schedule("S2", gamma=100, Gamma=10_000).for_sample(n, 0.5)
    s4 = Schedule("S4", gamma=100, Gamma=10_000).for_sample(n, 0.5)
    assert schedule_draw_count(s1, n) == 10_000 * 49
    assert schedule_draw_count(s1, n) // schedule_draw_count(s3, n) == 100
    assert schedule_draw_count(s2, n) == 24_700
    assert s4.replicates(n) == (10_000 * 3 + 100 * 47) // 49
    assert schedule_draw_count(s4, n) == s4.replicates(n) * 49
    with pytest.raises(ValueError):
        schedule_draw_count(Schedule("S2"), n)
    with pytest.raises(ValueError):
        Schedule("S2", gamma=10, Gamma=5)


def test_s4_replicates_approach_asymptotic_form():
    # the switch fraction converges to chi**(1/theta) at rate 1/ln n
    theta, chi, g, G = 0.5, 0.1, 100, 10_000
    target = G * chi ** (1 / theta) + g * (1 - chi ** (1 / theta))
    errs = []
    for k in (4, 16, 64, 300):
        s4 = Schedule("S4", gamma=g, Gamma=G, chi=chi).for_sample(10**k, theta)
        errs.append(abs(s4.replicates(10**k) / target - 1))
    assert all(a > b for a, b in zip(errs, errs[1:]))
    assert errs[-1] < 0.02


# weights and resampling

def test_ess_examples():
    assert ess(np.ones(7)) == 7
    assert ess([0, 0, 3, 0]) == 1
    assert ess([1, 1, 2]) == pytest.approx(16 / 6)
    assert ess_from_log(np.full(5, -1e4)) == 5
    with pytest.raises(ValueError):
        ess([0, 0])


def test_systematic_examples():
    idx = systematic_resample(np.ones(4), 12, 0)
    assert list(np.bincount(idx, minlength=4)) == [3, 3, 3, 3]
    for seed in range(20):
        c = np.bincount(systematic_resample([0.5, 0.5], 3, seed), minlength=2)
        assert c.sum() == 3 and set(c) <= {1, 2}
    with pytest.raises(ValueError):
        systematic_resample([0, 0], 3, 0)
    with pytest.raises(ValueError):
        systematic_resample([1, 1], 0, 0)


@given(st.lists(st.floats(0, 100), min_size=1, max_size=30), st.integers(1, 200),
       st.integers(0, 2**63))
def test_systematic_bracketing(w, count, seed):
    w = np.array(w)
    if w.sum() <= 0:
        return
    c = np.bincount(systematic_resample(w, count, seed), minlength=len(w))
    expect = count * w / w.sum()
    assert c.sum() == count
    assert np.all(c >= np.floor(expect - 1e-9)) and np.all(c <= np.ceil(expect + 1e-9))


def test_gt_rejection_control():
    r = Replicate(state=None, log_weight=0.0, steps_taken=5, stopped=False, rng_stream=(0,),
                  mutations=3)
    assert gt_rejection_control(r, math.inf) and gt_rejection_control(r, None)
    assert not gt_rejection_control(r, 0)
    assert gt_rejection_control(r, 3) and not gt_rejection_control(r, 2)


# sampler

def test_pim_optimal_zero_variance():
    m = MutationModel.pim(0.7, [0.2, 0.3, 0.5])
    n = S(3, 2, 3)
    r = run_sis(n, m, "PIM_OPTIMAL", n_replicates=500, master_seed=1)
    assert r.estimate == pytest.approx(exact_sampling_probability(n, m), rel=1e-10)
    assert r.standard_error <= 1e-10 * r.estimate
    v = variance_by_lineage_count(n, m, "PIM_OPTIMAL", 200)
    assert max(v.values()) < 1e-20


@pytest.mark.parametrize("kind", ["GT", "SD"])
def test_unbiased_small_sample(kind):
    m = MutationModel(0.5, P3)
    n = S(3, 1, 2)
    p = exact_sampling_probability(n, m)
    r = run_sis(n, m, kind, n_replicates=20_000, master_seed=4)
    assert abs(r.estimate - p) < 3 * r.standard_error
    assert r.draw_count == 20_000 * 5


def test_resampled_run_unbiased():
    m = MutationModel(0.5, P3)
    n = S(3, 1, 2)
    p = exact_sampling_probability(n, m)
    r = run_sis(n, m, "GT", n_replicates=500, policy=ResamplingPolicy(True, 0.99),
                master_seed=2)
    assert r.repetitions == 20 and r.resample_events > 0
    assert abs(r.estimate - p) < 3 * r.standard_error


def test_worker_count_does_not_change_results():
    m = MutationModel(0.5, P3)
    n = S(4, 2, 3)
    a = run_sis(n, m, "SD", n_replicates=300, master_seed=11, workers=1)
    b = run_sis(n, m, "SD", n_replicates=300, master_seed=11, workers=3)
    assert a.estimate == b.estimate and a.standard_error == b.standard_error
    sched = Schedule("S2", gamma=5, Gamma=40)
    a = run_sis(n, m, "GT", schedule=sched, master_seed=3, workers=1, repetitions=3)
    b = run_sis(n, m, "GT", schedule=sched, master_seed=3, workers=2, repetitions=3)
    assert a.estimate == b.estimate and a.level_variances == b.level_variances


@pytest.mark.parametrize("kind", ["S1", "S2", "S3", "S4"])
def test_run_draw_count_matches_schedule(kind):
    m = MutationModel(0.5, P3)
    n = forward_simulate(30, m, 5)
    s = Schedule(kind, gamma=3, Gamma=30)
    r = run_sis(n, m, "SD", schedule=s, master_seed=0, repetitions=1)
    assert r.draw_count == schedule_draw_count(s.for_sample(30, 0.5) if kind in ("S2", "S4")
                                               else s, 30)


def test_mutation_cap_discards():
    m = MutationModel(0.5, P3)
    n = S(3, 3, 3)
    r = run_sis(n, m, "GT", n_replicates=200, master_seed=0, mutation_cap=0)
    assert 0 < r.discard_fraction <= 1
    r = run_sis(n, m, "GT", n_replicates=200, master_seed=0, mutation_cap=None)
    assert r.discarded == 0


def test_pim_optimal_needs_pim_model():
    with pytest.raises(ValueError, match="parent-independent"):
        run_sis(TypedSample.from_mapping({0: 3}), SiteFlipModel(0.5, 4), "PIM_OPTIMAL",
                n_replicates=3)
    with pytest.raises(ValueError):
        run_sis(S(2, 1, 1), MutationModel(0.5, P3), "PIM_OPTIMAL", n_replicates=3)


def test_too_small_sample():
    with pytest.raises(ValueError):
        run_sis(S(1, 0, 0), MutationModel(0.5, P3), "SD", n_replicates=3)


def test_long_paths_stay_finite():
    m = SiteFlipModel(0.5, 20)
    n = forward_simulate(200, m, 2)
    r = run_sis(n, m, "SD", n_replicates=4, master_seed=0)
    assert np.isfinite(r.log_estimate) and r.estimate >= 0


# truncated runs

def test_truncated_run_zero_horizon():
    m = MutationModel(0.5, P3)
    t = truncated_run(S(10, 10, 10), m, "SD", 0.0, 50)
    assert t.steps == 0 and np.all(t.costs == 1.0)


def test_truncated_run_excludes_early_mrca():
    m = MutationModel(0.5, P3)
    t = truncated_run(S(2, 1, 1), m, "GT", 0.9, 300, master_seed=1)
    assert t.steps == 3
    assert t.excluded + len(t.costs) == 300


# level statistics

def test_level_variance_starts_at_zero():
    m = MutationModel(0.5, P3)
    n = S(5, 3, 4)
    v = variance_by_lineage_count(n, m, "GT", 300, master_seed=2)
    assert v[12] == 0.0 and set(v) == set(range(1, 13))
    assert v[1] > 0


def test_level_means_are_proposal_independent():
    m = MutationModel(0.5, P3)
    n = S(4, 2, 3)
    gt = level_statistics(n, m, "GT", 20_000, 1)
    sd = level_statistics(n, m, "SD", 20_000, 2)
    for k in (8, 5, 2, 1):
        # relative SE of the mean is sqrt(variance / R)
        rv = max(gt.variances()[k], sd.variances()[k])
        se = math.sqrt(rv / 20_000)
        assert abs(math.exp(gt.log_mean[k] - sd.log_mean[k]) - 1) < 4 * se + 1e-12
    p = exact_sampling_probability(n, m)
    assert math.exp(sd.log_mean[1]) == pytest.approx(p, rel=0.05)


def test_shared_reference():
    a = LevelStats({3: 0.0, 2: 1.0}, {3: -math.inf, 2: 0.5})
    b = LevelStats({3: 0.1, 2: 1.2}, {3: -math.inf, 2: 5.0})
    ref = LevelStats.shared_reference([a, b])
    assert ref[2] == 1.0  # the run with the smaller relative variance
    assert ref[3] in (0.0, 0.1)
    c = LevelStats({3: 0.5, 2: 2.0}, {3: -math.inf, 2: 0.0}, discarded=3)
    assert LevelStats.shared_reference([a, c])[2] == 1.0
    assert b.variances(a)[2] == pytest.approx(math.exp(5.0 - 2.0))
    assert b.variances()[2] == pytest.approx(math.exp(5.0 - 2.4))


def test_pim_level_weights_normalized_exactly():
    m = MutationModel.pim(0.5, [0.3, 0.7])
    n = S(4, 3)
    st_ = level_statistics(n, m, "GT", 5000, 0)
    assert st_.exact_log_p == pytest.approx(math.log(pim_sampling_probability(n, m)))
