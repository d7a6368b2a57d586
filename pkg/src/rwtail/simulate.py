"""Monte Carlo estimators for weighted-sum tails, moments, shortfall and ruin.

Every estimator reduces to per-row values computed shard by shard. Shards
have fixed size and seeds derived from (seed, shard index), and are merged in
shard order, so results do not depend on the number of worker threads.

The conditional estimator partitions on which summand is the largest and
replaces the indicator by the exact probability that this summand's loss
clears the remaining threshold, given every other latent variable.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import reduce
from typing import Callable

import numpy as np

from .dependence import JointSample, shard_rng, shard_sizes
from .model import Scenario, ScenarioError

QUANTITIES = ("sum", "partial_max", "max_summand")
EXCEEDANCE_FLOOR = 100
Z95 = 1.96


class DivergenceError(ValueError):
    """The requested moment does not exist for this scenario."""


@dataclass(frozen=True)
class TailEstimate:
    quantity: str
    x: float
    estimate: float
    stderr: float
    m: int
    seed: int
    method: str
    flags: tuple[str, ...] = ()
    widen: float = 1.0

    @property
    def ci(self) -> tuple[float, float]:
        half = Z95 * self.stderr * self.widen
        return (self.estimate - half, self.estimate + half)

    @property
    def rel_stderr(self) -> float:
        return self.stderr / abs(self.estimate) if self.estimate else math.inf

    def to_record(self) -> dict:
        lo, hi = self.ci
        return {"quantity": self.quantity, "x": self.x, "estimate": self.estimate,
                "stderr": self.stderr, "ci": [lo, hi], "m": self.m, "seed": self.seed,
                "method": self.method, "flags": list(self.flags)}


@dataclass(frozen=True)
class Phi:
    """Weight function for generalized moments E[phi(S) 1{S > x}]."""

    kind: str
    p: float = 1.0
    cap: float = 50.0

    def __post_init__(self):
        if self.kind not in ("one", "identity", "power", "clamped_exp"):
            raise ValueError(f"unknown phi {self.kind!r}")
        if self.kind == "power" and not self.p >= 1:
            raise ValueError("power phi needs p >= 1")
        if self.kind == "clamped_exp" and not self.cap > 0:
            raise ValueError("clamped exponential needs a positive cap")

    @property
    def order(self) -> float:
        """Polynomial growth order (what moment of the loss it needs)."""
        return {"one": 0.0, "identity": 1.0, "power": self.p, "clamped_exp": 0.0}[self.kind]

    @property
    def C(self) -> float:
        return {"one": 1.0, "identity": 2.0, "power": 2.0 ** self.p,
                "clamped_exp": math.exp(self.cap / 2.0)}[self.kind]

    def __call__(self, z):
        z = np.asarray(z, dtype=float)
        if self.kind == "one":
            return np.ones_like(z)
        if self.kind == "identity":
            return z
        if self.kind == "power":
            return np.power(np.maximum(z, 0.0), self.p)
        return np.exp(np.minimum(z, self.cap))

    def deriv(self, z):
        z = np.asarray(z, dtype=float)
        if self.kind == "one":
            return np.zeros_like(z)
        if self.kind == "identity":
            return np.ones_like(z)
        if self.kind == "power":
            return self.p * np.power(np.maximum(z, 0.0), self.p - 1.0)
        return np.where(z < self.cap, np.exp(np.minimum(z, self.cap)), 0.0)

    def check(self, x0: float = 1.0, doublings: int = 40) -> bool:
        """Nondecreasing on [x0, inf) and phi(2x) <= C phi(x) along a doubling grid."""
        grid = x0 * np.geomspace(1.0, 2.0 ** doublings, 8 * doublings + 1)
        vals = self(grid)
        mono = bool(np.all(np.diff(vals) >= 0))
        sub = bool(np.all(self(2 * grid) <= self.C * vals * (1 + 1e-12)))
        return mono and sub

    def to_record(self) -> dict:
        rec = {"kind": self.kind}
        if self.kind == "power":
            rec["p"] = self.p
        if self.kind == "clamped_exp":
            rec["cap"] = self.cap
        return rec


def parse_phi(text: str) -> Phi:
    """'one', 'identity', 'power:2.5' or 'clamped_exp:30'."""
    kind, _, arg = text.partition(":")
    if kind == "power":
        return Phi("power", p=float(arg))
    if kind == "clamped_exp":
        return Phi("clamped_exp", cap=float(arg) if arg else 50.0)
    return Phi(kind)


def check_moment(s: Scenario, phi: Phi) -> None:
    """Raise DivergenceError unless E[phi(weight * loss)] is finite for every summand."""
    p = phi.order
    if p == 0:
        return
    for i, (F, G) in enumerate(zip(s.losses, s.weights)):
        meta = F.meta()
        lower = meta.rv_index if meta.rv_index is not None else meta.matuszewska_lower
        if meta.in_D and not p < lower:
            raise DivergenceError(f"phi of order {p} on loss {i + 1} with tail index {lower}: moment is infinite")
        gm = G.meta()
        if not G.bounded and gm.in_D and not p < gm.matuszewska_lower:
            raise DivergenceError(f"phi of order {p} on weight {i + 1} with tail index {gm.matuszewska_lower}: "
                                  "moment is infinite")


# ---------------------------------------------------------------------------
# per-row kits


@dataclass(frozen=True)
class SumDrawKit:
    """Weighted summands of one batch of draws, truncated at a per-row horizon."""

    summands: np.ndarray      # (m, n), zero beyond the horizon
    active: np.ndarray        # (m, n) bool
    partial: np.ndarray       # (m, n) running sums
    total: np.ndarray         # (m,)
    partial_max: np.ndarray   # (m,), 0 when the horizon is 0
    max_summand: np.ndarray   # (m,), 0 when the horizon is 0

    @classmethod
    def build(cls, sample: JointSample, horizon: np.ndarray) -> "SumDrawKit":
        m, n = sample.x.shape
        active = np.arange(n)[None, :] < horizon[:, None]
        Y = np.where(active, sample.theta * sample.x, 0.0)
        R = np.cumsum(Y, axis=1)
        empty = horizon == 0
        pmax = np.where(empty, 0.0, np.max(np.where(active, R, -np.inf), axis=1))
        mmax = np.where(empty, 0.0, np.max(np.where(active, Y, -np.inf), axis=1))
        return cls(Y, active, R, R[:, -1], pmax, mmax)


def crude_columns(kit: SumDrawKit, x: float) -> np.ndarray:
    return np.stack([kit.total > x, kit.partial_max > x, kit.max_summand > x], axis=1).astype(float)


def conditional_columns(s: Scenario, sample: JointSample, kit: SumDrawKit, x: float,
                        which: tuple[str, ...] = QUANTITIES) -> np.ndarray:
    """Conditional probabilities for the requested quantities, one column each."""
    m, n = kit.summands.shape
    Y = kit.summands
    R = kit.partial
    out = np.zeros((m, len(which)))
    neg = np.where(kit.active, Y, -np.inf)
    for i in range(n):
        rows = np.flatnonzero(kit.active[:, i])
        if rows.size == 0:
            continue
        others = neg[rows].copy()
        others[:, i] = -np.inf
        M = np.max(others, axis=1)
        Yi = Y[rows, i]
        rest = kit.total[rows] - Yi
        th = sample.theta[rows, i]
        cols = []
        for q in which:
            if q == "sum":
                thr = np.maximum(x - rest, M)
            elif q == "max_summand":
                thr = np.maximum(x, M)
            else:
                pre = np.max(R[rows, :i], axis=1) if i > 0 else np.full(rows.size, -np.inf)
                post_R = np.where(kit.active[rows, i:], R[rows, i:] - Yi[:, None], -np.inf)
                post = np.max(post_R, axis=1)
                thr = np.where(pre > x, M, np.maximum(x - post, M))
            cols.append(thr)
        thr = np.stack(cols, axis=1)
        pos = th > 0
        prob = np.zeros_like(thr)
        if np.any(pos):
            t = thr[pos] / th[pos, None]
            prob[pos] = s.joint.cond_loss_sf(i, t, sample, rows=rows[pos])
        if np.any(~pos):
            # a zero weight leaves nothing to condition on
            z = ~pos
            prob[z] = ((0.0 > M[z, None]) & (0.0 > thr[z])).astype(float)
        out[rows] += prob
    return np.clip(out, 0.0, 1.0)


# ---------------------------------------------------------------------------
# shard engine


def _moments(cols: np.ndarray):
    k = cols.shape[0]
    mean = cols.mean(axis=0)
    d = cols - mean
    return k, mean, d.T @ d


def _merge(a, b):
    na, ma, Ma = a
    nb, mb, Mb = b
    n = na + nb
    delta = mb - ma
    mean = ma + delta * (nb / n)
    return n, mean, Ma + Mb + np.outer(delta, delta) * (na * nb / n)


@dataclass(frozen=True)
class RunStats:
    m: int
    mean: np.ndarray
    cov: np.ndarray
    hits: int = 0

    def se(self, k: int) -> float:
        return math.sqrt(max(self.cov[k, k], 0.0) / self.m)


def run_columns(s: Scenario, m: int, seed: int, kernel: Callable, workers: int = 1,
                horizon: int | None = None, stopped: bool = False) -> RunStats:
    """Sample shards, evaluate ``kernel(sample, kit)`` and merge column moments."""
    if m < 1:
        raise ValueError("m must be >= 1")
    if stopped and s.stopping is None:
        raise ScenarioError("stopping-law", "scenario has no stopping law")
    sizes = shard_sizes(m)
    hz = s.n if horizon is None else horizon
    if not 0 <= hz <= s.n:
        raise ValueError(f"horizon {hz} outside 0..{s.n}")

    def run(k):
        sample = s.joint.sample_shard(shard_rng(seed, k), sizes[k])
        if stopped:
            h = s.stopping.sample(shard_rng(seed, k, 1), sizes[k])
        else:
            h = np.full(sizes[k], hz)
        kit = SumDrawKit.build(sample, h)
        return _moments(np.asarray(kernel(sample, kit), dtype=float))

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            parts = list(ex.map(run, range(len(sizes))))
    else:
        parts = [run(k) for k in range(len(sizes))]
    n, mean, M2 = reduce(_merge, parts)
    cov = M2 / max(n - 1, 1)
    return RunStats(n, mean, cov)


def _estimate(stats: RunStats, k: int, quantity: str, x: float, seed: int, method: str,
              flags: tuple[str, ...] = ()) -> TailEstimate:
    est = float(stats.mean[k])
    se = stats.se(k)
    if method == "crude" and est == 0.0:
        flags = flags + ("zero-hits",)
    return TailEstimate(quantity, x, est, se, stats.m, seed, method, flags)


def _ratio(stats: RunStats, a: int, b: int, quantity: str, x: float, seed: int) -> TailEstimate:
    """Delta-method ratio mean[a] / mean[b] where column b is an exceedance indicator."""
    mb = stats.mean[b]
    hits = int(round(mb * stats.m))
    if hits == 0:
        return TailEstimate(quantity, x, math.nan, math.nan, stats.m, seed, "crude", ("zero-hits",))
    r = stats.mean[a] / mb
    var = (stats.cov[a, a] - 2 * r * stats.cov[a, b] + r * r * stats.cov[b, b]) / (stats.m * mb * mb)
    flags: tuple[str, ...] = ()
    widen = 1.0
    if hits < EXCEEDANCE_FLOOR:
        flags = ("widened-ci",)
        widen = 2.0
    return TailEstimate(quantity, x, float(r), math.sqrt(max(var, 0.0)), stats.m, seed, "crude", flags, widen)


# ---------------------------------------------------------------------------
# public estimators


def _check_x(x: float):
    if not x > 0:
        raise ValueError("threshold x must be positive")


def tails_all_mc(s: Scenario, x: float, m: int, seed: int, method: str = "crude", workers: int = 1,
                 horizon: int | None = None) -> tuple[TailEstimate, TailEstimate, TailEstimate]:
    """Tails of the sum, the maximal partial sum and the maximal summand from common draws."""
    _check_x(x)
    if method == "crude":
        stats = run_columns(s, m, seed, lambda smp, kit: crude_columns(kit, x), workers, horizon)
    elif method == "conditional":
        stats = run_columns(s, m, seed, lambda smp, kit: conditional_columns(s, smp, kit, x), workers, horizon)
    else:
        raise ValueError(f"unknown method {method!r}")
    return tuple(_estimate(stats, k, q, x, seed, method) for k, q in enumerate(QUANTITIES))


def tail_sum_condmc(s: Scenario, x: float, m: int, seed: int, workers: int = 1) -> TailEstimate:
    _check_x(x)
    stats = run_columns(s, m, seed, lambda smp, kit: conditional_columns(s, smp, kit, x, ("sum",)), workers)
    return _estimate(stats, 0, "sum", x, seed, "conditional")


def ruin_finite_mc(s: Scenario, x: float, horizon: int, m: int, seed: int, method: str = "crude",
                   workers: int = 1) -> TailEstimate:
    """Probability that the running sum exceeds the initial capital within ``horizon`` periods."""
    if not 1 <= horizon <= s.n:
        raise ValueError(f"horizon must lie in 1..{s.n}")
    est = tails_all_mc(s, x, m, seed, method, workers, horizon=horizon)[1]
    return TailEstimate("ruin", est.x, est.estimate, est.stderr, est.m, est.seed, est.method, est.flags)


def stopped_tails_mc(s: Scenario, x: float, m: int, seed: int, method: str = "crude",
                     workers: int = 1) -> tuple[TailEstimate, TailEstimate, TailEstimate]:
    """Tails of the randomly stopped sum, its running maximum and maximal summand."""
    _check_x(x)
    if s.stopping is None:
        raise ScenarioError("stopping-law", "scenario has no stopping law")
    if method == "crude":
        kern = lambda smp, kit: crude_columns(kit, x)  # noqa: E731
    elif method == "conditional":
        kern = lambda smp, kit: conditional_columns(s, smp, kit, x)  # noqa: E731
    else:
        raise ValueError(f"unknown method {method!r}")
    stats = run_columns(s, m, seed, kern, workers, stopped=True)
    return tuple(_estimate(stats, k, "stopped_" + q, x, seed, method) for k, q in enumerate(QUANTITIES))


def _moment_columns(phi: Phi, x: float):
    def kern(smp, kit):
        hit = kit.total > x
        return np.stack([np.where(hit, phi(kit.total), 0.0), hit.astype(float)], axis=1)
    return kern


def genmoment_mc(s: Scenario, phi: Phi, x: float, m: int, seed: int, workers: int = 1) -> TailEstimate:
    """Sample mean of phi(S) 1{S > x}."""
    _check_x(x)
    check_moment(s, phi)
    stats = run_columns(s, m, seed, _moment_columns(phi, x), workers)
    return _estimate(stats, 0, f"genmoment[{phi.kind}]", x, seed, "crude")


def es_mc(s: Scenario, x: float, m: int, seed: int, workers: int = 1) -> TailEstimate:
    """Expected shortfall E[S | S > x] as a ratio estimator."""
    _check_x(x)
    check_moment(s, Phi("identity"))
    stats = run_columns(s, m, seed, _moment_columns(Phi("identity"), x), workers)
    return _ratio(stats, 0, 1, "es", x, seed)


def mes_columns(x: float):
    def kern(smp, kit):
        hit = kit.total > x
        cols = [np.where(hit, kit.summands[:, j], 0.0) for j in range(kit.summands.shape[1])]
        cols.append(np.where(hit, kit.total, 0.0))
        cols.append(hit.astype(float))
        return np.stack(cols, axis=1)
    return kern


def mes_mc(s: Scenario, j: int, x: float, m: int, seed: int, workers: int = 1) -> TailEstimate:
    """Marginal expected shortfall E[weight_j loss_j | S > x] (j is 0-based)."""
    _check_x(x)
    if not 0 <= j < s.n:
        raise ValueError(f"summand index must lie in 0..{s.n - 1}")
    check_moment(s, Phi("identity"))
    stats = run_columns(s, m, seed, mes_columns(x), workers)
    return _ratio(stats, j, s.n + 1, f"mes[{j + 1}]", x, seed)


@dataclass(frozen=True)
class ShortfallRun:
    """ES and every MES from one set of draws, plus the sum-of-MES check."""

    es: TailEstimate
    mes: tuple[TailEstimate, ...]
    mes_total: TailEstimate
    extras: dict = field(default_factory=dict)


def shortfall_mc(s: Scenario, x: float, m: int, seed: int, workers: int = 1) -> ShortfallRun:
    _check_x(x)
    check_moment(s, Phi("identity"))
    stats = run_columns(s, m, seed, mes_columns(x), workers)
    n = s.n
    es = _ratio(stats, n, n + 1, "es", x, seed)
    mes = tuple(_ratio(stats, j, n + 1, f"mes[{j + 1}]", x, seed) for j in range(n))
    # sum of MES as its own ratio, with the joint covariance of the numerators
    w = np.zeros(n + 2)
    w[:n] = 1.0
    mean = np.append(stats.mean, w @ stats.mean)
    cov = np.zeros((n + 3, n + 3))
    cov[: n + 2, : n + 2] = stats.cov
    cov[n + 2, : n + 2] = cov[: n + 2, n + 2] = stats.cov @ w
    cov[n + 2, n + 2] = w @ stats.cov @ w
    total = _ratio(RunStats(stats.m, mean, cov), n + 2, n + 1, "mes_total", x, seed)
    tail = _estimate(stats, n + 1, "sum", x, seed, "crude")
    return ShortfallRun(es, mes, total, {"tail": tail})
