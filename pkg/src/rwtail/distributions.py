"""Marginal laws for losses and weights.

Every family exposes an exact survival function, a generalized-inverse
quantile, inversion sampling and declared heavy-tail class metadata.
Instances are immutable and vectorized over numpy arrays.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any

import numpy as np
from scipy import special


class DistributionError(ValueError):
    """Invalid distribution parameters or out-of-domain arguments."""


@dataclass(frozen=True)
class DistributionMeta:
    in_D: bool
    in_L: bool
    in_C: bool
    in_S: bool
    rv_index: float | None
    matuszewska_upper: float
    matuszewska_lower: float
    l_index: float

    def check(self) -> None:
        """Assert the class-chain relations between flags and indexes."""
        if self.in_C and not (self.in_D and self.in_L):
            raise AssertionError("C must imply D and L")
        if self.in_D != math.isfinite(self.matuszewska_upper):
            raise AssertionError("D iff finite upper Matuszewska index")
        if self.in_D != (self.l_index > 0):
            raise AssertionError("D iff L_F > 0")
        if self.in_C != (self.l_index == 1.0):
            raise AssertionError("C iff L_F = 1")
        if self.rv_index is not None:
            if not (self.matuszewska_upper == self.matuszewska_lower == self.rv_index):
                raise AssertionError("regular variation pins both Matuszewska indexes")
            if self.l_index != 1.0:
                raise AssertionError("regular variation implies L_F = 1")


_LIGHT = DistributionMeta(False, False, False, False, None, math.inf, math.inf, 0.0)
_SUBEXP_NOT_D = DistributionMeta(False, True, False, True, None, math.inf, math.inf, 0.0)


def _rv_meta(alpha: float) -> DistributionMeta:
    return DistributionMeta(True, True, True, True, alpha, alpha, alpha, 1.0)


def _check_p(p):
    p = np.asarray(p, dtype=float)
    if np.any(~(p > 0)) or np.any(~(p < 1)):
        raise DistributionError("quantile level must lie in (0, 1)")
    return p


def _scalarize(arr, like):
    return float(arr) if np.ndim(like) == 0 else arr


class Distribution:
    """Common interface; subclasses fill in the closed forms."""

    family: str = ""
    discrete: bool = False

    # subclasses implement _sf, _isf (q in (0, 1]) and meta
    def sf(self, x):
        x_arr = np.asarray(x, dtype=float)
        return _scalarize(np.clip(self._sf(x_arr), 0.0, 1.0), x)

    def cdf(self, x):
        x_arr = np.asarray(x, dtype=float)
        return _scalarize(1.0 - np.clip(self._sf(x_arr), 0.0, 1.0), x)

    def quantile(self, p):
        """Smallest x with cdf(x) >= p, for p in (0, 1)."""
        arr = _check_p(p)
        return _scalarize(self._quantile(arr), p)

    def isf(self, q):
        """Quantile at upper-tail probability q in (0, 1]; isf(q) == quantile(1 - q)."""
        q_arr = np.asarray(q, dtype=float)
        if np.any(~(q_arr > 0)) or np.any(q_arr > 1):
            raise DistributionError("tail probability must lie in (0, 1]")
        return _scalarize(self._isf(q_arr), q)

    def _quantile(self, p):
        return self._isf(1.0 - p)

    def sample(self, rng: np.random.Generator, m: int) -> np.ndarray:
        u = rng.random(m)
        return self._isf(1.0 - u)

    @property
    def support(self) -> tuple[float, float]:
        raise NotImplementedError

    @property
    def bounded(self) -> bool:
        return math.isfinite(self.support[1])

    def in_support(self, theta: float) -> bool:
        lo, hi = self.support
        return lo <= theta <= hi

    def mid_cdf(self, theta):
        """(F(theta-) + F(theta)) / 2; equals F on continuous laws."""
        return self.cdf(theta)

    def jump_points(self, lo: float, hi: float) -> list[float]:
        """Points of (lo, hi) where the survival function jumps."""
        return []

    def meta(self) -> DistributionMeta:
        raise NotImplementedError

    def to_record(self) -> dict[str, Any]:
        raise NotImplementedError


@dataclass(frozen=True)
class Pareto(Distribution):
    alpha: float
    scale: float = 1.0
    family = "pareto"

    def __post_init__(self):
        if not (self.alpha > 0 and self.scale > 0):
            raise DistributionError("pareto needs alpha > 0 and scale > 0")

    def _sf(self, x):
        with np.errstate(divide="ignore", invalid="ignore"):
            out = np.power(np.maximum(x, self.scale) / self.scale, -self.alpha)
        return np.where(x < self.scale, 1.0, out)

    def _isf(self, q):
        return self.scale * np.power(q, -1.0 / self.alpha)

    @property
    def support(self):
        return (self.scale, math.inf)

    def meta(self):
        return _rv_meta(self.alpha)

    def to_record(self):
        return {"family": "pareto", "alpha": self.alpha, "scale": self.scale}


@dataclass(frozen=True)
class Frechet(Distribution):
    alpha: float
    scale: float = 1.0
    family = "frechet"

    def __post_init__(self):
        if not (self.alpha > 0 and self.scale > 0):
            raise DistributionError("frechet needs alpha > 0 and scale > 0")

    def _sf(self, x):
        with np.errstate(divide="ignore", over="ignore"):
            z = np.power(np.maximum(x, 0.0) / self.scale, -self.alpha)
        return np.where(x <= 0, 1.0, -np.expm1(-z))

    def _isf(self, q):
        # cdf = exp(-z) = 1 - q  ->  z = -log1p(-q)
        with np.errstate(divide="ignore"):
            z = -np.log1p(-q)
        return self.scale * np.power(z, -1.0 / self.alpha)

    @property
    def support(self):
        return (0.0, math.inf)

    def meta(self):
        return _rv_meta(self.alpha)

    def to_record(self):
        return {"family": "frechet", "alpha": self.alpha, "scale": self.scale}


@dataclass(frozen=True)
class Lognormal(Distribution):
    mu: float = 0.0
    sigma: float = 1.0
    family = "lognormal"

    def __post_init__(self):
        if not (self.sigma > 0 and math.isfinite(self.mu)):
            raise DistributionError("lognormal needs finite mu and sigma > 0")

    def _sf(self, x):
        with np.errstate(divide="ignore"):
            z = (np.log(np.maximum(x, 0.0)) - self.mu) / self.sigma
        return special.ndtr(-z)

    def _isf(self, q):
        return np.exp(self.mu - self.sigma * special.ndtri(q))

    @property
    def support(self):
        return (0.0, math.inf)

    def meta(self):
        return _SUBEXP_NOT_D

    def to_record(self):
        return {"family": "lognormal", "mu": self.mu, "sigma": self.sigma}


@dataclass(frozen=True)
class WeibullHeavy(Distribution):
    shape: float
    scale: float = 1.0
    family = "weibull_heavy"

    def __post_init__(self):
        if not (0 < self.shape < 1 and self.scale > 0):
            raise DistributionError("heavy Weibull needs shape in (0, 1) and scale > 0")

    def _sf(self, x):
        return np.exp(-np.power(np.maximum(x, 0.0) / self.scale, self.shape))

    def _isf(self, q):
        return self.scale * np.power(-np.log(q), 1.0 / self.shape)

    @property
    def support(self):
        return (0.0, math.inf)

    def meta(self):
        return _SUBEXP_NOT_D

    def to_record(self):
        return {"family": "weibull_heavy", "shape": self.shape, "scale": self.scale}


@dataclass(frozen=True)
class Uniform(Distribution):
    a: float
    b: float
    family = "uniform"

    def __post_init__(self):
        if not (math.isfinite(self.a) and math.isfinite(self.b) and self.a < self.b):
            raise DistributionError("uniform needs finite a < b")

    def _sf(self, x):
        return np.clip((self.b - x) / (self.b - self.a), 0.0, 1.0)

    def _isf(self, q):
        return self.b - q * (self.b - self.a)

    def _quantile(self, p):
        return self.a + p * (self.b - self.a)

    @property
    def support(self):
        return (self.a, self.b)

    def meta(self):
        return _LIGHT

    def to_record(self):
        return {"family": "uniform", "a": self.a, "b": self.b}


class _Atomic(Distribution):
    """Finite atomic law; subclasses provide ``atoms`` and ``probs`` tuples."""

    discrete = True
    atoms: tuple[float, ...]
    probs: tuple[float, ...]

    def _validate(self):
        a = np.asarray(self.atoms, dtype=float)
        p = np.asarray(self.probs, dtype=float)
        if a.ndim != 1 or a.size == 0 or a.size != p.size:
            raise DistributionError("atoms and probabilities must be non-empty and aligned")
        if np.any(~np.isfinite(a)) or np.any(np.diff(a) <= 0):
            raise DistributionError("atoms must be finite and strictly increasing")
        if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-12:
            raise DistributionError("probabilities must be nonnegative and sum to 1")

    @property
    def _a(self):
        return np.asarray(self.atoms, dtype=float)

    @property
    def _p(self):
        return np.asarray(self.probs, dtype=float)

    def _sf(self, x):
        a, p = self._a, self._p
        tail = np.concatenate([np.cumsum(p[::-1])[::-1], [0.0]])  # tail[k] = P[X >= a_k]
        idx = np.searchsorted(a, x, side="right")
        return tail[idx]

    def _quantile(self, p):
        cum = np.cumsum(self._p)
        idx = np.searchsorted(cum, p - 1e-15, side="left")
        return self._a[np.minimum(idx, len(cum) - 1)]

    def _isf(self, q):
        tail = np.cumsum(self._p[::-1])[::-1]  # P[X >= a_k]
        # smallest atom a_k with P[X > a_k] <= q
        after = np.concatenate([tail[1:], [0.0]])
        idx = np.searchsorted(-after, -q - 1e-15, side="left")
        return self._a[np.minimum(idx, len(after) - 1)]

    def mid_cdf(self, theta):
        theta = np.asarray(theta, dtype=float)
        below = 1.0 - self._sf(np.nextafter(theta, -np.inf))
        at = 1.0 - self._sf(theta)
        return _scalarize(0.5 * (below + at), theta)

    def in_support(self, theta):
        return bool(np.any(np.isclose(self._a, theta, rtol=0, atol=1e-12)))

    def jump_points(self, lo, hi):
        return [float(a) for a, p in zip(self._a, self._p) if p > 0 and lo < a < hi]

    @property
    def support(self):
        nz = self._a[self._p > 0]
        return (float(nz[0]), float(nz[-1]))

    def meta(self):
        return _LIGHT


@dataclass(frozen=True)
class BoundedDiscrete(_Atomic):
    atoms: tuple[float, ...]
    probs: tuple[float, ...]
    family = "bounded_discrete"

    def __post_init__(self):
        object.__setattr__(self, "atoms", tuple(float(a) for a in self.atoms))
        object.__setattr__(self, "probs", tuple(float(p) for p in self.probs))
        self._validate()

    def to_record(self):
        return {"family": "bounded_discrete", "atoms": list(self.atoms), "probs": list(self.probs)}


@dataclass(frozen=True)
class TwoPoint(_Atomic):
    theta1: float
    p1: float
    theta2: float
    p2: float
    family = "two_point"
    atoms: tuple[float, ...] = field(init=False, repr=False)
    probs: tuple[float, ...] = field(init=False, repr=False)

    def __post_init__(self):
        if self.theta1 == self.theta2:
            raise DistributionError("two-point law needs distinct atoms")
        pairs = sorted([(float(self.theta1), float(self.p1)), (float(self.theta2), float(self.p2))])
        object.__setattr__(self, "atoms", tuple(a for a, _ in pairs))
        object.__setattr__(self, "probs", tuple(p for _, p in pairs))
        self._validate()

    def to_record(self):
        return {"family": "two_point", "theta1": self.theta1, "p1": self.p1,
                "theta2": self.theta2, "p2": self.p2}


@dataclass(frozen=True)
class LogPeriodicPareto(Distribution):
    """Pareto tail mixed with a geometric lattice; dominatedly but not consistently varying.

    With probability ``1 - weight`` the draw is Pareto(alpha, scale); otherwise
    it sits on the lattice ``scale * period**k`` with P[L >= scale*period**k] =
    period**(-alpha*k). At every lattice point the tail drops by the factor
    ``1 - weight*(1 - period**-alpha)``, which is the L-index.
    """

    alpha: float
    scale: float = 1.0
    period: float = 2.0
    weight: float = 4.0 / 15.0
    family = "log_periodic_pareto"

    def __post_init__(self):
        if not (self.alpha > 0 and self.scale > 0 and self.period > 1 and 0 < self.weight <= 1):
            raise DistributionError("log-periodic Pareto needs alpha>0, scale>0, period>1, weight in (0,1]")

    def _lattice_sf(self, x):
        with np.errstate(divide="ignore", invalid="ignore"):
            k = np.floor(np.log(np.maximum(x, self.scale) / self.scale) / math.log(self.period) + 1e-12)
        out = np.power(self.period, -self.alpha * (k + 1.0))
        return np.where(x < self.scale, 1.0, out)

    def _sf(self, x):
        pareto = np.where(x < self.scale, 1.0,
                          np.power(np.maximum(x, self.scale) / self.scale, -self.alpha))
        return (1.0 - self.weight) * pareto + self.weight * self._lattice_sf(x)

    def _isf(self, q):
        q = np.asarray(q, dtype=float)
        lo = np.full(q.shape, math.log(self.scale))
        hi = math.log(self.scale) - np.log(q) / self.alpha  # sf(e^hi) <= q
        # smallest x with sf(x) <= q
        for _ in range(80):
            mid = 0.5 * (lo + hi)
            ok = self._sf(np.exp(mid)) <= q
            hi = np.where(ok, mid, hi)
            lo = np.where(ok, lo, mid)
        res = np.exp(hi)
        # snap onto a lattice atom when the bracket straddles one
        k = np.round(np.log(res / self.scale) / math.log(self.period))
        atom = self.scale * np.power(self.period, k)
        snap = (np.abs(res / atom - 1) < 1e-9) & (self._sf(atom) <= q)
        res = np.where(snap, atom, res)
        return np.where(q >= 1.0, self.scale, res)

    @property
    def support(self):
        return (self.scale, math.inf)

    def jump_points(self, lo, hi):
        if not hi > max(lo, self.scale):
            return []
        base = math.log(self.period)
        k0 = max(0, math.floor(math.log(max(lo, self.scale) / self.scale) / base))
        k1 = math.ceil(math.log(hi / self.scale) / base) if math.isfinite(hi) else k0 + 64
        pts = (self.scale * self.period ** k for k in range(k0, k1 + 1))
        return [float(p) for p in pts if lo < p < hi]

    @property
    def l_index(self) -> float:
        return 1.0 - self.weight * (1.0 - self.period ** (-self.alpha))

    def meta(self):
        return DistributionMeta(True, False, False, False, None, self.alpha, self.alpha, self.l_index)

    def to_record(self):
        return {"family": "log_periodic_pareto", "alpha": self.alpha, "scale": self.scale,
                "period": self.period, "weight": self.weight}


_FAMILIES = {
    "pareto": (Pareto, ("alpha",), ("scale",)),
    "frechet": (Frechet, ("alpha",), ("scale",)),
    "lognormal": (Lognormal, (), ("mu", "sigma")),
    "weibull_heavy": (WeibullHeavy, ("shape",), ("scale",)),
    "uniform": (Uniform, ("a", "b"), ()),
    "two_point": (TwoPoint, ("theta1", "p1", "theta2", "p2"), ()),
    "bounded_discrete": (BoundedDiscrete, ("atoms", "probs"), ()),
    "log_periodic_pareto": (LogPeriodicPareto, ("alpha",), ("scale", "period", "weight")),
}


def from_record(rec: dict[str, Any]) -> Distribution:
    """Build a distribution from a ``{family: ..., <params>}`` record."""
    if not isinstance(rec, dict) or "family" not in rec:
        raise DistributionError(f"distribution record needs a 'family' key: {rec!r}")
    fam = rec["family"]
    if fam not in _FAMILIES:
        raise DistributionError(f"unknown family {fam!r}; expected one of {sorted(_FAMILIES)}")
    cls, required, optional = _FAMILIES[fam]
    extra = set(rec) - {"family", *required, *optional}
    if extra:
        raise DistributionError(f"unknown keys for {fam}: {sorted(extra)}")
    missing = [k for k in required if k not in rec]
    if missing:
        raise DistributionError(f"missing keys for {fam}: {missing}")
    kwargs = {k: rec[k] for k in (*required, *optional) if k in rec}
    if fam == "bounded_discrete":
        kwargs = {"atoms": tuple(kwargs["atoms"]), "probs": tuple(kwargs["probs"])}
    else:
        for k, v in kwargs.items():
            if isinstance(v, bool) or not isinstance(v, (int, float)):
                raise DistributionError(f"{fam}.{k} must be a number, got {v!r}")
            kwargs[k] = float(v)
    return cls(**kwargs)


def sample_iid(d: Distribution, seed: int, m: int) -> np.ndarray:
    """Deterministic inversion sample of size m."""
    if m < 1:
        raise DistributionError("sample size must be >= 1")
    return d.sample(np.random.default_rng(seed), m)


def ratio_curve(d: Distribution, v: float, xs) -> np.ndarray:
    """Exact F(vx)-tail over F(x)-tail on a grid."""
    if not v > 0:
        raise DistributionError("scale factor v must be positive")
    xs = np.asarray(xs, dtype=float)
    den = np.asarray(d.sf(xs), dtype=float)
    bad = np.flatnonzero(den <= 0)
    if bad.size:
        raise DistributionError(f"survival is zero at grid point x={float(xs[bad[0]])!r}")
    return np.asarray(d.sf(v * xs), dtype=float) / den
