"""Empirical and exact-mode tail diagnostics.

Hill estimates, scaled-tail ratio scans for the L-index and the Matuszewska
indexes, joint-exceedance curves for pairwise tail independence, and the
residuals of the conditional-tail limits that the weight links promise.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize

from . import dependence as dep
from .distributions import Distribution, DistributionError
from .model import Scenario

L_FIT_VS = (1.05, 1.1, 1.2)
MATUSZEWSKA_VS = (2.0, 4.0, 8.0, 16.0)
VANISHING = 0.01
PERSISTENT = 0.1
MIN_EXCEEDANCES = 100
NOT_HEAVY_ALPHA = 5.0


@dataclass(frozen=True)
class HillEstimate:
    alpha: float
    k: int
    m: int
    stderr: float
    heavy: bool

    def to_record(self) -> dict:
        return {"alpha": self.alpha, "k": self.k, "m": self.m, "stderr": self.stderr,
                "verdict": "heavy" if self.heavy else "not-heavy"}


def hill(sample, k: int) -> HillEstimate:
    """Reciprocal mean log-excess of the top k order statistics over the (k+1)-th."""
    x = np.asarray(sample, dtype=float).ravel()
    m = x.size
    if k < 30 or k > m / 10:
        raise ValueError(f"Hill needs 30 <= k <= m/10, got k={k}, m={m}")
    top = -np.partition(-x, k)[: k + 1]
    top.sort()
    if top[0] <= 0:
        raise DistributionError("Hill estimator needs positive values in the top k+1 order statistics")
    logs = np.log(top)
    gamma = float(np.mean(logs[1:]) - logs[0])
    alpha = 1.0 / gamma if gamma > 0 else math.inf
    return HillEstimate(alpha, k, m, alpha / math.sqrt(k), alpha <= NOT_HEAVY_ALPHA)


# ---------------------------------------------------------------------------
# ratio scans


@dataclass(frozen=True)
class RatioScan:
    """Matrix of sf(v x) / sf(x) over (v, x) plus the derived index estimates."""

    vs: tuple[float, ...]
    xs: tuple[float, ...]
    ratios: np.ndarray          # (len(vs), len(xs))
    mode: str                   # exact | empirical
    l_hat: float = math.nan
    alpha_hat: float = math.nan
    flags: tuple[str, ...] = ()
    notes: dict = field(default_factory=dict)

    def lower_envelope(self) -> np.ndarray:
        return self.ratios.min(axis=1)

    def upper_envelope(self) -> np.ndarray:
        return self.ratios.max(axis=1)

    def to_record(self) -> dict:
        return {"mode": self.mode, "vs": list(self.vs), "xs": list(self.xs),
                "ratios": self.ratios.tolist(), "l_hat": self.l_hat, "alpha_hat": self.alpha_hat,
                "flags": list(self.flags), **self.notes}


def _tail_function(source, xs_max: float):
    """sf callable plus flags; a sample gives the empirical tail frequency."""
    if isinstance(source, Distribution):
        return (lambda z: np.asarray(source.sf(np.asarray(z, dtype=float)), dtype=float)), "exact", ()
    data = np.sort(np.asarray(source, dtype=float).ravel())
    m = data.size

    def sf(z):
        return (m - np.searchsorted(data, np.asarray(z, dtype=float), side="right")) / m

    flags = ()
    if (m - np.searchsorted(data, xs_max, side="right")) < MIN_EXCEEDANCES:
        flags = ("inconclusive",)
    return sf, "empirical", flags


def ratio_matrix(source, vs, xs) -> tuple[np.ndarray, str, tuple[str, ...]]:
    vs = np.asarray(vs, dtype=float)
    xs = np.asarray(xs, dtype=float)
    if np.any(vs < 1):
        raise ValueError("scan factors v must be >= 1")
    sf, mode, flags = _tail_function(source, float(np.max(vs) * np.max(xs)))
    base = sf(xs)
    if np.any(base <= 0):
        bad = xs[np.argmax(base <= 0)]
        raise ValueError(f"sf vanishes at x={bad}; scan grid is beyond the data")
    return sf(np.outer(vs, xs)) / base, mode, flags


def default_grid(d: Distribution, lo_level: float = 1e-2, hi_level: float = 1e-6, points: int = 4001) -> np.ndarray:
    """Dense geometric x-grid between two upper quantiles."""
    return np.geomspace(float(d.isf(lo_level)), float(d.isf(hi_level)), points)


def l_index_scan(source, vs=L_FIT_VS, xs=None) -> RatioScan:
    """Lower envelope of the scaled tail ratio, extrapolated to v = 1.

    The fit is linear in (log v, log ratio), so an exact power law returns
    L = 1 to rounding. The three-point choice is recorded in the notes.
    """
    if xs is None:
        if not isinstance(source, Distribution):
            raise ValueError("an x-grid is required for samples")
        xs = default_grid(source)
    vs = tuple(float(v) for v in vs)
    R, mode, flags = ratio_matrix(source, vs, xs)
    low = R.min(axis=1)
    fit_v = [v for v in vs if v > 1]
    l_hat, alpha_hat = math.nan, math.nan
    if len(fit_v) >= 2 and np.all(low[[vs.index(v) for v in fit_v]] > 0):
        lv = np.log(fit_v)
        lr = np.log(low[[vs.index(v) for v in fit_v]])
        slope, icept = np.polyfit(lv, lr, 1)
        l_hat = float(min(1.0, max(0.0, math.exp(icept))))
        alpha_hat = float(-slope)
    notes = {"fit": "least squares of log lower-envelope on log v", "fit_vs": fit_v}
    return RatioScan(vs, tuple(float(x) for x in xs), R, mode, l_hat, alpha_hat, flags, notes)


@dataclass(frozen=True)
class MatuszewskaScan:
    vs: tuple[float, ...]
    upper_series: tuple[float, ...]     # -log(min ratio) / log v, per v
    lower_series: tuple[float, ...]     # -log(max ratio) / log v, per v
    mode: str
    verdict: str
    flags: tuple[str, ...] = ()

    @property
    def upper(self) -> float:
        return self.upper_series[-1]

    @property
    def lower(self) -> float:
        return self.lower_series[-1]

    def to_record(self) -> dict:
        return {"vs": list(self.vs), "upper": self.upper, "lower": self.lower,
                "upper_series": list(self.upper_series), "lower_series": list(self.lower_series),
                "mode": self.mode, "verdict": self.verdict, "flags": list(self.flags)}


def matuszewska_scan(source, vs=MATUSZEWSKA_VS, xs=None) -> MatuszewskaScan:
    """Index envelopes from min and max scaled ratios; growth in v means no finite upper index."""
    vs = tuple(float(v) for v in vs)
    if min(vs) < 2:
        raise ValueError("Matuszewska scan needs v >= 2")
    if xs is None:
        if not isinstance(source, Distribution):
            raise ValueError("an x-grid is required for samples")
        xs = default_grid(source, points=1001)
    R, mode, flags = ratio_matrix(source, vs, xs)
    if np.any(R <= 0):
        return MatuszewskaScan(vs, (math.inf,) * len(vs), (math.inf,) * len(vs), mode, "not-in-D", flags)
    lv = np.log(vs)
    up = -np.log(R.min(axis=1)) / lv
    lo = -np.log(R.max(axis=1)) / lv
    growing = bool(np.all(np.diff(up) > 1e-6) and up[-1] - up[0] > 0.1)
    verdict = "not-in-D" if growing else "in-D"
    return MatuszewskaScan(vs, tuple(up.tolist()), tuple(lo.tolist()), mode, verdict, flags)


# ---------------------------------------------------------------------------
# pairwise tail independence


@dataclass(frozen=True)
class DependenceCurve:
    pair: tuple[int, int]
    xs: tuple[float, ...]
    joint: tuple[float, ...]
    denom: tuple[float, ...]
    mode: str
    verdict: str
    flags: tuple[str, ...] = ()

    @property
    def ratio(self) -> tuple[float, ...]:
        return tuple(j / d for j, d in zip(self.joint, self.denom))

    def to_record(self) -> dict:
        return {"pair": [self.pair[0] + 1, self.pair[1] + 1], "xs": list(self.xs), "joint": list(self.joint),
                "denom": list(self.denom), "ratio": list(self.ratio), "mode": self.mode,
                "verdict": self.verdict, "flags": list(self.flags)}


def tail_verdict(ratio) -> str:
    r = np.asarray(ratio, dtype=float)
    if np.all(r >= PERSISTENT):
        return "persistent"
    if np.all(np.diff(r) <= 1e-15) and r[-1] < VANISHING:
        return "vanishing"
    return "inconclusive"


def tai_curve(s: Scenario, pair: tuple[int, int], xs, sample=None) -> DependenceCurve:
    """Joint loss exceedance over the sum of the two marginal tails along ``xs``.

    Exact mode uses the loss-pair copula; passing a JointSample switches to
    empirical frequencies.
    """
    i, j = pair
    xs = np.asarray(xs, dtype=float)
    if np.any(np.diff(xs) <= 0):
        raise ValueError("x-grid must be increasing")
    Fi, Fj = s.losses[i], s.losses[j]
    flags: tuple[str, ...] = ()
    if sample is None:
        cop = s.joint.loss_latent.pair(i, j)
        joint = np.array([float(dep.joint_exceedance(cop, Fi, Fj, x, x)) for x in xs])
        denom = np.asarray(Fi.sf(xs)) + np.asarray(Fj.sf(xs))
        mode = "exact"
    else:
        Xi, Xj = sample.x[:, i], sample.x[:, j]
        hits = (Xi[:, None] > xs) & (Xj[:, None] > xs)
        joint = hits.mean(axis=0)
        denom = (Xi[:, None] > xs).mean(axis=0) + (Xj[:, None] > xs).mean(axis=0)
        mode = "empirical"
        if hits[:, -1].sum() < MIN_EXCEEDANCES and not np.all(joint / np.maximum(denom, 1e-300) >= PERSISTENT):
            flags = ("insufficient-depth",)
        if np.any(denom == 0):
            raise ValueError("sample has no exceedances at the deepest x")
    ratio = joint / denom
    v = "inconclusive" if flags else tail_verdict(ratio)
    return DependenceCurve((i, j), tuple(xs.tolist()), tuple(joint.tolist()), tuple(denom.tolist()), mode, v, flags)


# ---------------------------------------------------------------------------
# uniformity of the conditional-tail limits


def theta_grid(G: Distribution, points: int = 41) -> np.ndarray:
    if G.discrete:
        atoms, _, _ = dep._weight_intervals(G)
        return np.asarray(atoms, dtype=float)
    v = np.linspace(0.0, 1.0, points)
    lo, hi = G.support
    inner = G.quantile(v[1:-1])
    ends = [lo] if math.isfinite(lo) else []
    tail = [hi] if math.isfinite(hi) else []
    return np.concatenate([ends, inner, tail])


def joint_level_marginal(pl: dep.PairLink, level: float) -> float:
    """Common marginal tail level f with P[X_i > ., X_j > .] = level."""
    return float(optimize.brentq(lambda f: pl.loss_tail(f, f) - level, level, 1.0, xtol=1e-15, rtol=1e-13))


def uniformity_residual(s: Scenario, which, level: float, points: int = 41) -> float:
    """Sup over a weight grid of |conditional tail / (limit * unconditional tail) - 1|.

    ``which`` is a 0-based loss index (weight link) or a pair of indexes (pair
    link). For a single link ``level`` is the marginal tail level; for a pair
    it is the joint level, reached with a common marginal tail level.
    """
    if not 0 < level < 1:
        raise ValueError("level must lie in (0, 1)")
    if isinstance(which, (int, np.integer)):
        link = s.link(int(which))
        F = s.losses[int(which)]
        x = float(F.isf(level))
        f = float(F.sf(x))
        th = theta_grid(link.weight, points)
        cond = np.asarray(link.conditional_sf(F, x, th))
        lim = np.asarray(link.h(th)) * f
        return float(np.max(np.abs(cond / lim - 1.0)))
    i, j = which
    pl = s.pair(i, j)
    fi = fj = joint_level_marginal(pl, level)
    uncond = pl.loss_tail(fi, fj)
    worst = 0.0
    for ti in theta_grid(pl.link_i.weight, points):
        for tj in theta_grid(pl.link_j.weight, points):
            cond = pl.conditional_loss_tail(fi, fj, ti, tj)
            worst = max(worst, abs(cond / (pl.g(ti, tj) * uncond) - 1.0))
    return worst
