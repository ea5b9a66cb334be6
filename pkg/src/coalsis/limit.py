"""The large-sample limit of the normalized lineage process and its cost.

Along the limit, lineage proportions shrink deterministically,
``Y(s) = y0 (1 - s)``, while mutations ``i -> j`` arrive as independent
Poisson processes with intensity ``theta P_ij y0_i / (1 - s)``.  The limiting
cost is

    C(t) = exp( int_0^t <y0, a(Y(u))> du ) * prod_jumps b_ij(Y(T)).
"""

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate

from .proposals import CostCoefficients


def limit_Y(t, y0):
    if not 0 <= t < 1:
        raise ValueError("t must lie in [0, 1)")
    return np.asarray(y0, dtype=float) * (1 - t)


def cumulative_intensity(t, y0, theta, P):
    """Matrix ``Lambda_ij(t) = theta P_ij y0_i ln(1 / (1 - t))``."""
    y0 = np.asarray(y0, dtype=float)
    return theta * np.asarray(P, dtype=float) * y0[:, None] * -math.log1p(-t)


@dataclass(frozen=True)
class LimitConfig:
    y0: np.ndarray
    theta: float
    P: np.ndarray
    t: float
    coefficients: CostCoefficients = None

    def __post_init__(self):
        y0 = np.asarray(self.y0, dtype=float)
        P = np.asarray(self.P, dtype=float)
        if np.any(y0 <= 0) or abs(y0.sum() - 1) > 1e-12:
            raise ValueError("y0 must be strictly positive and sum to one")
        if P.shape != (len(y0), len(y0)):
            raise ValueError("P must be d x d")
        if not 0 <= self.t < 1:
            raise ValueError("t must lie in [0, 1)")
        if not self.theta > 0:
            raise ValueError("theta must be positive")
        object.__setattr__(self, "y0", y0)
        object.__setattr__(self, "P", P)

    @property
    def d(self):
        return len(self.y0)


@dataclass
class LimitPath:
    """Jump times of the mutation counters on ``[0, t]``.

    Attributes
    ----------
    jumps : dict
        ``(i, j) -> increasing array of jump times``.
    """

    config: LimitConfig
    jumps: dict = field(default_factory=dict)

    def counts(self, s=None):
        """Matrix of ``M_ij(s)`` (default ``s = t``)."""
        s = self.config.t if s is None else s
        d = self.config.d
        M = np.zeros((d, d), dtype=np.int64)
        for (i, j), T in self.jumps.items():
            M[i, j] = np.searchsorted(T, s, side="right")
        return M

    def Y(self, s):
        return limit_Y(s, self.config.y0)


def simulate_M(config, seed):
    """Jump times by inversion of the cumulative intensity.

    Counts are Poisson with mean ``Lambda_ij(t)``; given the count, jump times
    are i.i.d. with distribution ``Lambda(s)/Lambda(t)``, inverted as
    ``s = 1 - (1 - t) ** U``.
    """
    gen = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    lam = cumulative_intensity(config.t, config.y0, config.theta, config.P)
    jumps = {}
    d = config.d
    for i in range(d):
        for j in range(d):
            if lam[i, j] <= 0:
                continue
            k = gen.poisson(lam[i, j])
            U = np.sort(gen.random(k))
            jumps[(i, j)] = 1 - (1 - config.t) ** U
    return LimitPath(config, jumps)


def drift_integral(coefficients, y0, t, tol=1e-10):
    """``int_0^t <y0, a(y0 (1 - u))> du`` by adaptive quadrature."""
    y0 = np.asarray(y0, dtype=float)
    if t == 0:
        return 0.0
    val, err = integrate.quad(lambda u: float(y0 @ coefficients.a(y0 * (1 - u))), 0, t,
                              epsabs=tol, epsrel=tol, limit=200)
    if not err < 1e3 * tol:
        raise RuntimeError(f"quadrature did not converge (error estimate {err:g})")
    return val


def limit_cost(path, coefficients=None, t=None):
    """Limiting cost ``C(t)`` along ``path``."""
    cfg = path.config
    coefficients = coefficients or cfg.coefficients
    t = cfg.t if t is None else t
    log_c = drift_integral(coefficients, cfg.y0, t)
    for (i, j), T in path.jumps.items():
        for s in T[T <= t]:
            log_c += math.log(coefficients.b(cfg.y0 * (1 - s))[i, j])
    return math.exp(log_c)


def segment_grid(y0, t, points=101):
    """Points ``y0 (1 - u)`` for ``u`` evenly spaced on ``[0, t]``."""
    u = np.linspace(0, t, points)
    return np.asarray(y0, dtype=float)[None, :] * (1 - u)[:, None]


@dataclass(frozen=True)
class ConditionReport:
    passed: bool
    max_residual: float
    residuals: np.ndarray


def check_proposal_condition(a_star, d, grid, tol=1e-8):
    """Check ``-<Y, a*(Y)> = d - 1`` at every grid point ``Y``."""
    res = np.array([abs(float(np.dot(y, a_star(y))) + (d - 1)) for y in np.atleast_2d(grid)])
    worst = float(res.max())
    return ConditionReport(worst < tol, worst, res)


def predicted_weight_limit(kind, t, d):
    """Limits along a truncated path.

    ``kind`` is ``"cost"`` for ``(1 - t)^(d - 1)``, ``"ratio"`` for the
    probability-ratio factor ``(1 - t)^(1 - d)``, or a proposal name (GT, SD)
    for the normalized weight, whose limit is 1.
    """
    if not 0 <= t < 1:
        raise ValueError("t must lie in [0, 1)")
    kind = getattr(kind, "value", kind)
    if kind == "cost":
        return (1 - t) ** (d - 1)
    if kind == "ratio":
        return (1 - t) ** (1 - d)
    if kind in ("GT", "SD", "weight"):
        return 1.0
    raise ValueError(f"unknown limit kind {kind!r}")


PATH_COLUMNS = ("record", "i", "j", "time", "value")


def write_path_csv(path, fh, coefficients=None, grid_points=11):
    """Write jump times, then ``C(s)`` on a grid of ``[0, t]``."""
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(PATH_COLUMNS)
    for (i, j), T in sorted(path.jumps.items()):
        for s in T:
            w.writerow(("jump", i, j, repr(float(s)), ""))
    coefficients = coefficients or path.config.coefficients
    if coefficients is not None:
        for s in np.linspace(0, path.config.t, grid_points):
            w.writerow(("cost", "", "", repr(float(s)), repr(limit_cost(path, coefficients, s))))


def read_path_csv(fh, config):
    """Inverse of ``write_path_csv``; returns the path and the ``(s, C)`` grid."""
    rows = list(csv.reader(fh))
    if tuple(rows[0]) != PATH_COLUMNS:
        raise ValueError("unexpected header")
    jumps, grid = {}, []
    for rec in rows[1:]:
        if rec[0] == "jump":
            jumps.setdefault((int(rec[1]), int(rec[2])), []).append(float(rec[3]))
        elif rec[0] == "cost":
            grid.append((float(rec[3]), float(rec[4])))
        else:
            raise ValueError(f"unknown record {rec[0]!r}")
    return LimitPath(config, {k: np.array(v) for k, v in jumps.items()}), grid
