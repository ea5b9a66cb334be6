"""Sequential importance sampling for coalescent likelihoods."""

from .engine import (
    LevelStats,
    ResamplingPolicy,
    RunResult,
    Schedule,
    ess,
    level_statistics,
    run_sis,
    schedule_draw_count,
    switch_point,
    systematic_resample,
    truncated_run,
    variance_by_lineage_count,
)
from .huw import HuwTable, huw_precompute
from .ism import IsmSample, simulate_ism, singleton_scan, watterson
from .model import (
    MutationModel,
    SiteFlipModel,
    TypedSample,
    exact_sampling_probability,
    forward_simulate,
    pim_sampling_probability,
)
from .proposals import ProposalKind

__all__ = [
    "HuwTable", "IsmSample", "LevelStats", "MutationModel", "ProposalKind", "ResamplingPolicy", "RunResult",
    "Schedule", "SiteFlipModel", "TypedSample", "ess", "exact_sampling_probability",
    "forward_simulate", "huw_precompute", "level_statistics", "pim_sampling_probability", "run_sis",
    "schedule_draw_count", "simulate_ism", "singleton_scan", "switch_point",
    "systematic_resample", "truncated_run", "variance_by_lineage_count", "watterson",
]
