"""Experiment drivers behind the command-line interface.

Every driver writes CSV files whose rows depend only on the configuration and
the master seed.  Wall-clock timings go to a separate ``*_timing.csv`` so the
result files are byte-identical across machines and worker counts.
"""

import csv
import dataclasses
import logging
import math
import os
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from . import formats
from .engine import ResamplingPolicy, Schedule, run_sis, schedule_draw_count, truncated_run
from .engine import LevelStats, level_statistics
from .huw import HuwTable
from .ism import IsmSample, simulate_ism, watterson_estimate
from .model import MutationModel, SiteFlipModel, TypedSample, forward_simulate
from .rng import derive_seed, generator

log = logging.getLogger(__name__)

CONFIG_VERSION = 1
BUILTIN = {
    "fa50": ("fa50.txt", "flip20.model"),
    "fa500": ("fa500.txt", "flip20.model"),
    "fa5000": ("fa5000.txt", "flip20.model"),
    "ism55": ("ism55.txt", None),
    "ism550": ("ism550.txt", None),
    "ism5500": ("ism5500.txt", None),
}
COST_P = ((0.3, 0.7), (0.6, 0.4))


class ConfigError(ValueError):
    pass


def _floats(text):
    return tuple(float(x) for x in text.replace(",", " ").split())


def _ints(text):
    return tuple(int(x) for x in text.replace(",", " ").split())


def _strs(text):
    return tuple(x for x in text.replace(",", " ").split())


def _opt_int(text):
    return None if text.lower() in ("", "none", "inf") else int(text)


def _opt_float(text):
    return None if text.lower() in ("", "none") else float(text)


def _bool(text):
    if text.lower() in ("1", "true", "yes", "on"):
        return True
    if text.lower() in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


@dataclass
class ExperimentConfig:
    """Settings shared by all experiment commands.

    ``data`` is a file path or ``builtin:<name>`` for a shipped benchmark
    (fa50, fa500, fa5000, ism55, ism550, ism5500).  Replicate counts left at
    ``None`` take the defaults for the data set (see ``resolved``).
    """

    model: str = "finite-alleles"
    data: str = None
    model_file: str = None
    proposal: str = "SD"
    thetas: tuple = ()
    schedules: tuple = ("S1",)
    gamma: int = None
    Gamma: int = None
    chi: float = 0.1
    resampling: bool = False
    ess_fraction: float = 0.1
    replicates: int = 10_000
    repetitions: int = None
    mutation_cap: int = None
    huw_table: str = None
    huw_theta: float = None
    n_values: tuple = (500, 5000)
    t: float = 0.5
    seed: int = 0
    workers: int = 1
    output: str = "results"

    _PARSERS = {
        "model": str, "data": str, "model_file": str, "proposal": str,
        "thetas": _floats, "schedules": _strs, "gamma": _opt_int, "Gamma": _opt_int,
        "chi": float, "resampling": _bool, "ess_fraction": float, "replicates": int,
        "repetitions": _opt_int, "mutation_cap": _opt_int, "huw_table": str,
        "huw_theta": _opt_float, "n_values": _ints, "t": float, "seed": int,
        "workers": int, "output": str,
    }

    def validate(self):
        if self.model not in ("finite-alleles", "ism"):
            raise ConfigError(f"model must be 'finite-alleles' or 'ism', got {self.model!r}")
        th = np.asarray(self.thetas, dtype=float)
        if len(th) and (np.any(th <= 0) or np.any(np.diff(th) <= 0)):
            raise ConfigError("thetas must be positive and strictly increasing")
        for s in self.schedules:
            if s not in ("S1", "S2", "S3", "S4"):
                raise ConfigError(f"unknown schedule {s!r}")
        if not 0 < self.chi < 1:
            raise ConfigError("chi must lie in (0, 1)")
        if not 0 < self.ess_fraction <= 1:
            raise ConfigError("ess_fraction must lie in (0, 1]")
        if self.replicates < 1 or self.workers < 1:
            raise ConfigError("replicates and workers must be positive")
        if not 0 <= self.t < 1:
            raise ConfigError("t must lie in [0, 1)")
        return self

    def resolved(self, n):
        """Copy with replicate defaults filled in for a sample of size ``n``."""
        g, G = self.gamma, self.Gamma
        if g is None or G is None:
            if self.model == "ism" and n > 100:
                dg, dG = 2_000, 200_000
            elif self.model == "ism":
                dg, dG = 1_000, 100_000
            else:
                dg, dG = 100, 10_000
            g = dg if g is None else g
            G = dG if G is None else G
        return dataclasses.replace(self, gamma=g, Gamma=G)


def parse_config(text, source="<config>"):
    """Parse flat ``key = value`` text; ``version`` is required."""
    values, version = {}, None
    fields = {f.name for f in dataclasses.fields(ExperimentConfig)}
    for no, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{no}: expected 'key = value'")
        key, val = (s.strip() for s in line.split("=", 1))
        if key == "version":
            version = int(val)
            continue
        if key not in fields:
            raise ConfigError(f"{source}:{no}: unknown key {key!r}")
        try:
            values[key] = ExperimentConfig._PARSERS[key](val)
        except ValueError as e:
            raise ConfigError(f"{source}:{no}: bad value for {key}: {e}")
    if version is None:
        raise ConfigError(f"{source}: missing 'version' key")
    if version != CONFIG_VERSION:
        raise ConfigError(f"{source}: unsupported config version {version}")
    return ExperimentConfig(**values).validate()


def load_config(path):
    with open(path) as f:
        return parse_config(f.read(), path)


def format_config(cfg):
    lines = [f"version = {CONFIG_VERSION}"]
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        if v is None:
            continue
        if isinstance(v, tuple):
            v = " ".join(str(x) for x in v)
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"


def data_path(name):
    return str(resources.files("coalsis") / "data" / name)


def load_data(cfg, theta=None):
    """Returns ``(data, model)`` for the configured data set.

    For infinite sites the model is the mutation rate; ``theta`` overrides the
    rate stored with a finite-alleles sample.
    """
    path, model_file = cfg.data, cfg.model_file
    if path is None:
        raise ConfigError("no data set configured")
    if path.startswith("builtin:"):
        name = path.split(":", 1)[1]
        if name not in BUILTIN:
            raise ConfigError(f"unknown builtin data set {name!r}; choose from {sorted(BUILTIN)}")
        fname, mname = BUILTIN[name]
        path = data_path(fname)
        if model_file is None and mname is not None:
            model_file = data_path(mname)
    if cfg.model == "ism":
        sample = formats.read_ism(path)
        return sample, (theta if theta is not None else watterson_estimate(sample))
    sample, d, th0 = formats.read_fa_sample(path)
    th = th0 if theta is None else theta
    if model_file is None:
        raise ConfigError("finite-alleles data needs model_file")
    m = formats.read_model(model_file, th)
    if m.d != d:
        raise ConfigError(f"sample declares {d} types but the model has {m.d}")
    return sample, m


# CSV contract

SURFACE_COLUMNS = (
    "theta", "schedule", "proposal", "estimate", "log_estimate", "standard_error",
    "draw_count", "predicted_draw_count", "mutation_draws", "n_replicates", "repetitions",
    "discard_fraction", "resample_events",
)
TIMING_COLUMNS = ("theta", "schedule", "proposal", "wall_time")
VARCURVE_COLUMNS = ("proposal", "lineages", "variance", "log_variance", "zero_variance")
COSTCONV_COLUMNS = ("proposal", "n", "t", "steps", "mean_cost", "standard_error",
                    "predicted", "excluded")

_TYPES = {
    "theta": float, "schedule": str, "proposal": str, "estimate": float,
    "log_estimate": float, "standard_error": float, "draw_count": int,
    "predicted_draw_count": int, "mutation_draws": int, "n_replicates": int,
    "repetitions": int, "discard_fraction": float, "resample_events": int,
    "wall_time": float, "lineages": int, "variance": float, "log_variance": float,
    "zero_variance": int, "n": int, "t": float, "steps": int, "mean_cost": float,
    "predicted": float, "excluded": int,
}


def _cell(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path, columns, rows):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([_cell(row[c]) for c in columns])


def read_csv(path):
    """Rows as dicts with typed values."""
    with open(path, newline="") as f:
        return [{k: _TYPES.get(k, str)(v) for k, v in row.items()} for row in csv.DictReader(f)]


# Commands


def _schedule(cfg, kind, n, theta):
    s = Schedule(kind, gamma=cfg.gamma, Gamma=cfg.Gamma, chi=cfg.chi)
    return s.for_sample(n, theta) if n >= 3 and kind in ("S2", "S4") else s


def _huw_table(cfg, data, theta):
    if cfg.model != "ism" or cfg.proposal != "HUW":
        return None
    if cfg.huw_table:
        table = HuwTable.load(cfg.huw_table)
    else:
        table = HuwTable(data.size, cfg.huw_theta or watterson_estimate(data))
    if not table.covers(data.size):
        raise ConfigError(f"HUW table covers {table.s_max} lineages; data has {data.size}")
    return table


def _policy(cfg):
    return ResamplingPolicy(True, cfg.ess_fraction) if cfg.resampling else None


def cmd_likelihood_surface(cfg):
    """One independent run per (theta, schedule); returns the CSV path."""
    cfg.validate()
    if not cfg.thetas:
        raise ConfigError("theta grid is empty")
    data, _ = load_data(cfg)
    cfg = cfg.resolved(data.size)
    table = _huw_table(cfg, data, None)
    os.makedirs(cfg.output, exist_ok=True)
    rows, timing = [], []
    for a, theta in enumerate(cfg.thetas):
        _, model = load_data(cfg, theta)
        for b, kind in enumerate(cfg.schedules):
            sched = _schedule(cfg, kind, data.size, theta)
            seed = derive_seed(cfg.seed, a, b)
            res = run_sis(data, model, cfg.proposal, schedule=sched, policy=_policy(cfg),
                          master_seed=seed, workers=cfg.workers, mutation_cap=cfg.mutation_cap,
                          repetitions=cfg.repetitions, huw_table=table)
            log.info("theta=%g %s: %.6g +- %.3g", theta, kind, res.estimate, res.standard_error)
            rows.append(dict(
                theta=theta, schedule=kind, proposal=cfg.proposal, estimate=res.estimate,
                log_estimate=res.log_estimate, standard_error=res.standard_error,
                draw_count=res.draw_count,
                predicted_draw_count=schedule_draw_count(sched, data.size),
                mutation_draws=res.mutation_draws, n_replicates=res.n_replicates,
                repetitions=res.repetitions, discard_fraction=res.discard_fraction,
                resample_events=res.resample_events,
            ))
            timing.append(dict(theta=theta, schedule=kind, proposal=cfg.proposal,
                               wall_time=res.wall_time))
    out = os.path.join(cfg.output, "surface.csv")
    write_csv(out, SURFACE_COLUMNS, rows)
    write_csv(os.path.join(cfg.output, "surface_timing.csv"), TIMING_COLUMNS, timing)
    return out


def cmd_variance_curve(cfg, proposals=None):
    """Weight variance at each remaining-lineage level; returns the CSV path."""
    cfg.validate()
    theta = cfg.thetas[0] if cfg.thetas else None
    data, model = load_data(cfg, theta)
    os.makedirs(cfg.output, exist_ok=True)
    rows, runs = [], []
    proposals = proposals or (cfg.proposal,)
    for a, prop in enumerate(proposals):
        c = dataclasses.replace(cfg, proposal=prop)
        table = _huw_table(c, data, None)
        runs.append(level_statistics(
            data, model, prop, cfg.replicates, derive_seed(cfg.seed, a),
            workers=cfg.workers, mutation_cap=cfg.mutation_cap, huw_table=table,
        ))
    # Level means do not depend on the proposal; share the most precise one.
    reference = LevelStats.shared_reference(runs)
    for prop, stats in zip(proposals, runs):
        curve = stats.variances(reference)
        for level in sorted(curve, reverse=True):
            v = curve[level]
            zero = v == 0
            rows.append(dict(proposal=prop, lineages=level, variance=v,
                             log_variance=-math.inf if zero else math.log(v),
                             zero_variance=int(zero)))
    out = os.path.join(cfg.output, "varcurve.csv")
    write_csv(out, VARCURVE_COLUMNS, rows)
    return out


def cost_start(n, d):
    """Balanced start state: ``n`` lineages split as evenly as possible."""
    counts = np.full(d, n // d)
    counts[: n % d] += 1
    return TypedSample.from_counts(counts)


def cmd_cost_convergence(cfg, proposals=None, P=COST_P, theta=0.5):
    """Mean truncated cost for each ``n`` against ``(1 - t)^(d - 1)``."""
    cfg.validate()
    m = MutationModel(theta, np.asarray(P, dtype=float))
    if cfg.model_file:
        m = formats.read_model(cfg.model_file, theta)
    os.makedirs(cfg.output, exist_ok=True)
    rows = []
    for a, prop in enumerate(proposals or (cfg.proposal,)):
        for b, n in enumerate(cfg.n_values):
            res = truncated_run(cost_start(n, m.d), m, prop, cfg.t, cfg.replicates,
                                derive_seed(cfg.seed, a, b), workers=cfg.workers)
            rows.append(dict(proposal=prop, n=n, t=cfg.t, steps=res.steps, mean_cost=res.mean,
                             standard_error=res.standard_error,
                             predicted=(1 - cfg.t) ** (m.d - 1), excluded=res.excluded))
    out = os.path.join(cfg.output, "costconv.csv")
    write_csv(out, COSTCONV_COLUMNS, rows)
    return out


def make_fa_data(n, sites, theta, seed, nested=()):
    """Site-flip benchmark of size ``n`` plus nested subsamples.

    Returns ``{size: TypedSample}``.  Subsamples are drawn without replacement
    from the largest sample, so each is itself a coalescent sample.
    """
    m = SiteFlipModel(theta, sites)
    full = forward_simulate(n, m, generator(seed, 1))
    out = {n: full}
    gen = generator(seed, 2)
    cur = full
    for k in sorted(nested, reverse=True):
        if k > cur.size:
            raise ValueError("nested sizes must not exceed the sample size")
        counts = gen.multivariate_hypergeometric(np.array(cur.counts), k)
        keep = counts > 0
        cur = TypedSample(tuple(np.array(cur.types)[keep].tolist()), tuple(counts[keep].tolist()))
        out[k] = cur
    return out, m


def make_ism_data(n, theta, seed, r_target=None):
    if n == 1:
        return IsmSample(np.zeros((1, 0), dtype=np.uint8), [1])
    return simulate_ism(n, theta, generator(seed, 3), r_target=r_target)


def cmd_make_data(kind, out_dir, n, theta, seed, sites=20, nested=(), r_target=None,
                  prefix=None):
    """Write generated data files; returns their paths."""
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    if kind == "fa":
        samples, m = make_fa_data(n, sites, theta, seed, nested)
        mpath = os.path.join(out_dir, f"flip{sites}.model")
        formats.write_model(mpath, m)
        paths.append(mpath)
        for k, s in sorted(samples.items()):
            p = os.path.join(out_dir, f"{prefix or 'fa'}{k}.txt")
            formats.write_fa_sample(p, s, m.d, theta)
            paths.append(p)
    elif kind == "ism":
        s = make_ism_data(n, theta, seed, r_target)
        p = os.path.join(out_dir, f"{prefix or 'ism'}{n}.txt")
        formats.write_ism(p, s)
        paths.append(p)
    else:
        raise ValueError(f"unknown data kind {kind!r}")
    return paths


def cmd_huw_table(s_max, theta, path, reading="mutant_count"):
    table = HuwTable(s_max, theta, reading)
    table.save(path)
    return table


# Plots


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    matplotlib.rcParams["svg.hashsalt"] = "coalsis"
    import matplotlib.pyplot as plt

    return plt


def plot_surface(csv_path, svg_path):
    plt = _pyplot()
    rows = read_csv(csv_path)
    fig, ax = plt.subplots(figsize=(6, 4))
    for kind in sorted({r["schedule"] for r in rows}):
        sel = [r for r in rows if r["schedule"] == kind]
        ax.errorbar([r["theta"] for r in sel], [r["estimate"] for r in sel],
                    yerr=[2 * r["standard_error"] for r in sel], label=kind, capsize=2,
                    marker="o", ms=3)
    ax.set_xlabel("theta")
    ax.set_ylabel("likelihood estimate")
    ax.legend()
    fig.tight_layout()
    fig.savefig(svg_path, metadata={"Date": None})
    plt.close(fig)


def plot_varcurve(csv_path, svg_path):
    plt = _pyplot()
    rows = read_csv(csv_path)
    fig, ax = plt.subplots(figsize=(6, 4))
    for prop in sorted({r["proposal"] for r in rows}):
        sel = [r for r in rows if r["proposal"] == prop and not r["zero_variance"]]
        ax.plot([r["lineages"] for r in sel], [r["log_variance"] for r in sel], label=prop)
    ax.invert_xaxis()
    ax.set_xlabel("remaining lineages")
    ax.set_ylabel("log variance of weights")
    ax.legend()
    fig.tight_layout()
    fig.savefig(svg_path, metadata={"Date": None})
    plt.close(fig)
