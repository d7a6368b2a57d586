"""Right-hand sides: product tails, first-order sum asymptotics and L-index bounds.

Integrals over a weight law are taken in uniform space, ``theta = G^{-1}(v)``,
which handles atoms and continuous parts alike. Unbounded weights get an
exponential change of variables near v = 1 so that the far tail of the weight
law is resolved.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate, optimize

from . import dependence as dep
from .distributions import Distribution
from .model import Scenario, loss_kinks
from . import simulate as sim
from .simulate import QUANTITIES, Phi, check_moment

EPSABS = 1e-15
EPSREL = 1e-10


class TheoremScopeError(ValueError):
    """The scenario falls outside the hypotheses of the formula requested."""


class MomentConditionError(ValueError):
    """A moment condition needed by a formula cannot be verified."""


class QuadratureError(ArithmeticError):
    pass


@dataclass(frozen=True)
class AsymptoticValue:
    value: float
    tag: str
    x: float
    scenario: str = ""
    mask: tuple[str, ...] = QUANTITIES
    extras: dict = field(default_factory=dict)

    def to_record(self) -> dict:
        return {"value": self.value, "tag": self.tag, "x": self.x, "scenario": self.scenario,
                "mask": list(self.mask), **self.extras}


# ---------------------------------------------------------------------------
# one-dimensional integrals over a weight law


def _quad(f, a, b, points=()):
    pts = sorted({p for p in points if a < p < b})
    kw = dict(epsabs=EPSABS, epsrel=EPSREL, limit=500)
    if pts and math.isfinite(b):
        val, err = integrate.quad(f, a, b, points=pts, **kw)
        return val, err
    if pts:
        total, errs = 0.0, 0.0
        edges = [a, *pts, b]
        for lo, hi in zip(edges[:-1], edges[1:]):
            v, e = integrate.quad(f, lo, hi, **kw)
            total += v
            errs += e
        return total, errs
    return integrate.quad(f, a, b, **kw)


def weight_expect(G: Distribution, fn, breaks=()) -> float:
    """E[fn(G^{-1}(V), V)] for V uniform; exact atom sums for atomic G.

    For atomic weights ``fn`` must be affine in v on each atom interval (true
    for every use here), so the midpoint rule is exact.
    """
    if G.discrete:
        atoms, lo, hi = dep._weight_intervals(G)
        return float(sum((b - a) * fn(t, 0.5 * (a + b)) for t, a, b in zip(atoms, lo, hi)))

    def f(v):
        return fn(float(G._quantile(np.asarray(v))), v)

    if G.bounded:
        val, err = _quad(f, 0.0, 1.0, breaks)
        _check(val, err)
        return val
    split = 0.5
    head, e1 = _quad(f, 0.0, split, [b for b in breaks if b < split])

    def g(t):
        # v = 1 - exp(-t), dv = exp(-t) dt
        q = math.exp(-t)
        if q == 0.0:
            return 0.0   # the moment condition makes the integrand vanish here
        return fn(float(G._isf(np.asarray(q))), 1.0 - q) * q

    tbreaks = [-math.log1p(-b) for b in breaks if split < b < 1]
    tail, e2 = _quad(g, math.log(2.0), math.inf, tbreaks)
    _check(head + tail, e1 + e2)
    return head + tail


def _check(val, err):
    if not math.isfinite(val) or err > max(1e-12, 1e-9 * abs(val)):
        raise QuadratureError(f"quadrature reached only |error| <= {err:.3g} for value {val:.6g}")


def _product_tail(F: Distribution, G: Distribution, kappa: float, x: float) -> float:
    def fn(theta, v):
        if theta <= 0:
            return 0.0
        f = float(F.sf(x / theta))
        return f * (1.0 + kappa * (2.0 * v - 1.0) * (1.0 - f))

    return weight_expect(G, fn, loss_kinks(F, G, x))


def product_tail(s: Scenario, i: int, x: float) -> float:
    """Exact P[weight_i * loss_i > x] at finite x (i is 0-based)."""
    if not x > 0:
        raise ValueError("x must be positive")
    return _product_tail(s.losses[i], s.weights[i], s.link(i).kappa, x)


def product_tails(s: Scenario, x: float) -> np.ndarray:
    return np.array([product_tail(s, i, x) for i in range(s.n)])


# ---------------------------------------------------------------------------
# scope


def _require_regime(s: Scenario, what: str):
    if s.regime == "negative-control":
        raise TheoremScopeError(f"{what}: negative-control scenarios are outside every theorem's hypotheses")


def regime_mask(s: Scenario) -> tuple[str, ...]:
    return QUANTITIES if s.regime == "pTAI" else ("sum", "partial_max")


def _require_classes(s: Scenario, what: str, need_L: bool):
    for i, F in enumerate(s.losses):
        meta = F.meta()
        if s.regime == "pQAI" and not meta.in_C:
            raise TheoremScopeError(f"{what}: pQAI needs consistently varying losses; loss {i + 1} is not in C")
        if not meta.in_D or (need_L and not meta.in_L):
            raise TheoremScopeError(f"{what}: loss {i + 1} must be dominatedly varying"
                                    + (" and long-tailed" if need_L else ""))


# ---------------------------------------------------------------------------
# first-order formulas


def sum_tail_first_order(s: Scenario, x: float) -> AsymptoticValue:
    """Sum of the product tails, with the quantities it is claimed for."""
    _require_regime(s, "sum_tail_first_order")
    _require_classes(s, "sum_tail_first_order", need_L=True)
    return AsymptoticValue(float(product_tails(s, x).sum()), "sum-product-tails", x, s.hash, regime_mask(s))


def reference_sum(s: Scenario, x: float, horizon: int | None = None) -> float:
    """Sum of the first ``horizon`` product tails, without any scope claim."""
    h = s.n if horizon is None else horizon
    return float(sum(product_tail(s, i, x) for i in range(h)))


def joint_product_tail(s: Scenario, pair: tuple[int, int], xi: float, xj: float) -> float:
    """Double integral of g times the unconditional joint loss tail at (xi/theta_i, xj/theta_j)."""
    i, j = pair
    pl = s.pair(i, j)
    pl._require()
    Fi, Fj = s.losses[i], s.losses[j]
    Gi, Gj = s.weights[i], s.weights[j]
    ki, kj = pl.link_i.kappa, pl.link_j.kappa
    norm = pl.norm

    def level(F, G, x, u):
        th = G._quantile(np.clip(u, 1e-300, 1 - 1e-16))
        with np.errstate(divide="ignore"):
            return np.where(th > 0, F.sf(x / np.where(th > 0, th, 1.0)), 0.0)

    def fn(u, v):
        fi = level(Fi, Gi, xi, u)
        fj = level(Fj, Gj, xj, v)
        hh = (1 + ki * (2 * u - 1)) * (1 + kj * (2 * v - 1)) / norm
        return hh * _loss_pair_tail(pl, fi, fj)

    return dep.pair_expect(pl.weight_pair, fn, loss_kinks(Fi, Gi, xi), loss_kinks(Fj, Gj, xj))


def _loss_pair_tail(pl: dep.PairLink, fi, fj):
    """Vectorized unconditional P[X_i > ., X_j > .] from tail levels."""
    ki, kj = pl.link_i.kappa, pl.link_j.kappa
    if ki == 0 and kj == 0:
        return pl.loss_pair.tail(fi, fj)
    kap = pl.loss_pair.kappa if isinstance(pl.loss_pair, dep.FGM) else 0.0
    M = dep._fgm_pair_moments(pl.weight_pair, 2)
    # tau = f (1 + k e (1 - f)): coefficients c0 = f, c1 = f k (1 - f)
    a0, a1 = fi, fi * ki * (1 - fi)
    b0, b1 = fj, fj * kj * (1 - fj)
    # tau (1 - tau) = c0 (1 - c0) + c1 (1 - 2 c0) e - c1^2 e^2
    p = (a0 * (1 - a0), a1 * (1 - 2 * a0), -a1 * a1)
    q = (b0 * (1 - b0), b1 * (1 - 2 * b0), -b1 * b1)
    out = a0 * b0 + a0 * b1 * M[0, 1] + a1 * b0 * M[1, 0] + a1 * b1 * M[1, 1]
    for r in range(3):
        for c in range(3):
            out = out + kap * p[r] * q[c] * M[r, c]
    return out


def _moment_ok(G: Distribution, rho: float) -> bool:
    if G.bounded:
        return True
    meta = G.meta()
    if not meta.in_D:
        return True  # lognormal / heavy Weibull weights have every moment
    return rho < meta.matuszewska_lower


def breiman_constant(G: Distribution, link: dep.WeightLink | float, alpha: float) -> float:
    """E[weight^alpha h(weight)] by quadrature (atom sums for atomic weights)."""
    kappa = link.kappa if isinstance(link, dep.WeightLink) else float(link)
    if not alpha > 0:
        raise ValueError("alpha must be positive")
    rho = alpha * 1.01 + 1e-6
    if not _moment_ok(G, rho):
        raise MomentConditionError(
            f"E[weight^rho h(weight)] is infinite for every rho > alpha={alpha}: weight tail index "
            f"{G.meta().matuszewska_lower} does not exceed alpha")

    def fn(theta, v):
        return max(theta, 0.0) ** alpha * (1.0 + kappa * (2.0 * v - 1.0))

    return weight_expect(G, fn)


def rv_sum_tail(s: Scenario, x: float) -> AsymptoticValue:
    _require_regime(s, "rv_sum_tail")
    total = 0.0
    for i, F in enumerate(s.losses):
        alpha = F.meta().rv_index
        if alpha is None:
            raise TheoremScopeError(f"rv_sum_tail: loss {i + 1} is not regularly varying")
        total += breiman_constant(s.weights[i], s.link(i), alpha) * float(F.sf(x))
    return AsymptoticValue(total, "breiman-rv", x, s.hash, regime_mask(s))


def _l_indexes(s: Scenario, what: str) -> np.ndarray:
    _require_regime(s, what)
    L = np.array([F.meta().l_index for F in s.losses])
    bad = np.flatnonzero(L <= 0)
    if bad.size:
        raise TheoremScopeError(f"{what}: loss {bad[0] + 1} is not dominatedly varying (L-index 0)")
    return L


def dclass_tail_bounds(s: Scenario, x: float) -> tuple[AsymptoticValue, AsymptoticValue]:
    L = _l_indexes(s, "dclass_tail_bounds")
    P = product_tails(s, x)
    return (AsymptoticValue(float(np.sum(L * P)), "dclass-lower", x, s.hash, ("sum",)),
            AsymptoticValue(float(np.sum(P / L)), "dclass-upper", x, s.hash, ("sum",)))


def _tail_breaks(F: Distribution, G: Distribution, lo: float, hi: float) -> list[float]:
    """Points of (lo, hi) where z -> P[weight * loss > z] may jump or kink."""
    if G.discrete:
        ts = dep._weight_intervals(G)[0]
    else:
        ts = [t for t in G.support if 0 < t < math.inf]
    return sorted({t * a for t in ts if t > 0 for a in F.jump_points(lo / t, hi / t)})


def partial_moment(s: Scenario, i: int, phi: Phi, x: float) -> float:
    """E[phi(weight_i loss_i) 1{weight_i loss_i > x}] = phi(x) P_i(x) + int_x^inf phi'(z) P_i(z) dz."""
    F, G, kappa = s.losses[i], s.weights[i], s.link(i).kappa
    base = float(phi(x)) * _product_tail(F, G, kappa, x)
    if phi.kind == "one":
        return base
    pts = []
    if phi.kind == "clamped_exp" and phi.cap > x:
        pts.append(phi.cap)

    def f(z):
        return float(phi.deriv(z)) * _product_tail(F, G, kappa, z)

    hi = math.inf
    if phi.kind == "clamped_exp":
        hi = max(phi.cap, x)
    if hi <= x:
        return base
    if not _tail_breaks(F, G, x, 2.0 * x):
        val, err = _quad(f, x, hi, pts)
        _check(val, err)
        return base + val
    # the tail jumps along a lattice: integrate doubling by doubling
    total, errs, lo = 0.0, 0.0, x
    for _ in range(2000):
        top = min(2.0 * lo, hi)
        v, e = _quad(f, lo, top, pts + _tail_breaks(F, G, lo, top))
        total, errs, lo = total + v, errs + e, top
        if lo >= hi or abs(v) <= 1e-13 * abs(total):
            break
    else:
        raise QuadratureError(f"moment tail above x={x!r} did not settle after 2000 doublings")
    _check(total, errs)
    return base + total


def genmoment_bounds(s: Scenario, phi: Phi, x: float) -> tuple[AsymptoticValue, AsymptoticValue]:
    L = _l_indexes(s, "genmoment_bounds")
    check_moment(s, phi)
    if not phi.check():
        raise TheoremScopeError(f"phi {phi.kind} fails monotonicity or sub-homogeneity")
    M = np.array([partial_moment(s, i, phi, x) for i in range(s.n)])
    tag = f"genmoment[{phi.kind}]"
    return (AsymptoticValue(float(np.sum(L * M)), tag + "-lower", x, s.hash, ("sum",)),
            AsymptoticValue(float(np.sum(M / L)), tag + "-upper", x, s.hash, ("sum",)))


def es_bounds(s: Scenario, x: float, tail_of_S: float) -> tuple[AsymptoticValue, AsymptoticValue]:
    if not tail_of_S > 0:
        raise ValueError("tail of the sum must be positive")
    lo, hi = genmoment_bounds(s, Phi("identity"), x)
    return (AsymptoticValue(lo.value / tail_of_S, "es-lower", x, s.hash, ("sum",)),
            AsymptoticValue(hi.value / tail_of_S, "es-upper", x, s.hash, ("sum",)))


@dataclass(frozen=True)
class MESBounds:
    lower: AsymptoticValue | None
    upper: AsymptoticValue
    warnings: tuple[str, ...] = ()


def mes_bounds(s: Scenario, j: int, x: float, tail_of_S: float, doublings: int = 8) -> MESBounds:
    """Bounds on E[weight_j loss_j | S > x]; lower bound only under pTAI."""
    if not tail_of_S > 0:
        raise ValueError("tail of the sum must be positive")
    L = _l_indexes(s, "mes_bounds")
    check_moment(s, Phi("identity"))
    warnings = []
    grid = x * 2.0 ** np.arange(doublings + 1)
    Pj = np.array([product_tail(s, j, z) for z in grid])
    for i in range(s.n):
        if i == j:
            continue
        r = np.array([product_tail(s, i, z) for z in grid]) / Pj
        if np.all(np.diff(r) > 0) and r[-1] > 2 * r[0]:
            warnings.append(f"tail of summand {i + 1} may not be O(tail of summand {j + 1})")
    Mj = partial_moment(s, j, Phi("identity"), x)
    upper = AsymptoticValue(Mj / tail_of_S, "mes-upper", x, s.hash, ("sum",))
    lower = None
    if s.regime == "pTAI":
        lower = AsymptoticValue(L[j] * Mj / tail_of_S, "mes-lower", x, s.hash, ("sum",))
    return MESBounds(lower, upper, tuple(warnings))


def stopped_first_order(s: Scenario, x: float) -> AsymptoticValue:
    """E[N] times the common product tail; the regularly varying variant rides along."""
    if s.stopping is None:
        raise TheoremScopeError("stopped_first_order: scenario has no stopping law")
    _require_regime(s, "stopped_first_order")
    _require_classes(s, "stopped_first_order", need_L=True)
    EN = s.stopping.mean
    val = EN * product_tail(s, 0, x)
    extras = {}
    alpha = s.losses[0].meta().rv_index
    if alpha is not None:
        try:
            extras["rv_value"] = EN * breiman_constant(s.weights[0], s.link(0), alpha) * float(s.losses[0].sf(x))
        except MomentConditionError:
            pass
    return AsymptoticValue(val, "stopped-first-order", x, s.hash, regime_mask(s), extras)


def ruin_first_order(s: Scenario, x: float, horizon: int | None = None, random: bool = False) -> AsymptoticValue:
    _require_regime(s, "ruin_first_order")
    _require_classes(s, "ruin_first_order", need_L=True)
    if random:
        if s.stopping is None:
            raise TheoremScopeError("ruin_first_order: random horizon needs a stopping law")
        return AsymptoticValue(s.stopping.mean * product_tail(s, 0, x), "ruin-random", x, s.hash, ("partial_max",))
    h = s.n if horizon is None else horizon
    if not 1 <= h <= s.n:
        raise ValueError(f"horizon must lie in 1..{s.n}")
    return AsymptoticValue(reference_sum(s, x, h), "ruin-finite", x, s.hash, ("partial_max",))


# ---------------------------------------------------------------------------
# level inversion


def invert_level(fn, level: float, x0: float = 1.0) -> float:
    """x with fn(x) = level for a nonincreasing tail function fn."""
    if not 0 < level < 1:
        raise ValueError("level must lie in (0, 1)")
    lo = x0
    for _ in range(200):
        if fn(lo) > level:
            break
        lo /= 4.0
    else:
        raise ValueError("could not bracket the level from below")
    hi = max(lo * 4.0, x0)
    for _ in range(400):
        if fn(hi) < level:
            break
        hi *= 4.0
    else:
        raise ValueError("could not bracket the level from above")
    t = optimize.brentq(lambda u: math.log(max(fn(math.exp(u)), 1e-300)) - math.log(level),
                        math.log(lo), math.log(hi), xtol=1e-13, rtol=1e-13)
    return math.exp(t)


def level_to_x(s: Scenario, level: float, horizon: int | None = None, stopped: bool = False) -> float:
    """Threshold at which the first-order approximation equals ``level``."""
    if stopped:
        if s.stopping is None:
            raise TheoremScopeError("stopped level needs a stopping law")
        EN = s.stopping.mean
        return invert_level(lambda z: EN * product_tail(s, 0, z), level)
    return invert_level(lambda z: reference_sum(s, z, horizon), level)


# ---------------------------------------------------------------------------
# convergence reports

VERDICTS = ("within-tol", "outside-tol", "inconclusive")
MAX_REL_STDERR = 0.25
TAIL_QUANTITIES = QUANTITIES + ("ruin", "stopped_sum", "stopped_partial_max", "stopped_max_summand", "ruin_random")
CSV_COLUMNS = ("x", "level", "mc", "mc_lo", "mc_hi", "asym", "lower", "upper", "ratio", "verdict")


@dataclass(frozen=True)
class MCSettings:
    m: int
    seed: int
    method: str = "conditional"
    workers: int = 1
    phi: Phi | None = None


@dataclass(frozen=True)
class ReportRow:
    x: float
    level: float
    mc: float
    mc_lo: float
    mc_hi: float
    asym: float
    lower: float
    upper: float
    ratio: float
    verdict: str
    flags: tuple[str, ...] = ()

    def to_record(self) -> dict:
        rec = {k: getattr(self, k) for k in CSV_COLUMNS}
        rec["flags"] = list(self.flags)
        return rec


@dataclass(frozen=True)
class ConvergenceReport:
    quantity: str
    scenario: str
    method: str
    m: int
    seed: int
    tol: float
    claimed: bool
    rows: tuple[ReportRow, ...]

    def __post_init__(self):
        xs = [r.x for r in self.rows]
        if any(b <= a for a, b in zip(xs[:-1], xs[1:])):
            raise ValueError("report grid must be strictly increasing")

    @property
    def xs(self) -> list[float]:
        return [r.x for r in self.rows]

    @property
    def passed(self) -> bool:
        return all(r.verdict != "outside-tol" for r in self.rows)

    def first_failure(self) -> ReportRow | None:
        return next((r for r in self.rows if r.verdict == "outside-tol"), None)

    def csv_rows(self) -> list[list[str]]:
        out = [list(CSV_COLUMNS)]
        for r in self.rows:
            out.append([_fmt(getattr(r, k)) for k in CSV_COLUMNS])
        return out

    def to_record(self) -> dict:
        return {"quantity": self.quantity, "scenario": self.scenario, "method": self.method, "m": self.m,
                "seed": self.seed, "tol": self.tol, "claimed": self.claimed,
                "rows": [r.to_record() for r in self.rows]}

    def curves(self) -> dict[str, list[tuple[float, float]]]:
        """Two-column (x, value) series for plotting."""
        return {"mc": [(r.x, r.mc) for r in self.rows],
                "asym": [(r.x, r.asym) for r in self.rows],
                "ratio": [(r.x, r.ratio) for r in self.rows]}


def _fmt(v) -> str:
    if isinstance(v, str):
        return v
    return repr(float(v))


def verdict(est: float, ci: tuple[float, float], rel_stderr: float, band: tuple[float, float]) -> str:
    """Point inside the band passes; a CI wholly outside it fails; anything else is inconclusive."""
    if not math.isfinite(est) or not rel_stderr <= MAX_REL_STDERR:
        return "inconclusive"
    lo, hi = band
    if lo <= est <= hi:
        return "within-tol"
    if ci[1] < lo or ci[0] > hi:
        return "outside-tol"
    return "inconclusive"


def _claimed(s: Scenario, quantity: str) -> bool:
    if s.regime == "negative-control":
        return False
    base = quantity.removeprefix("stopped_")
    if base in ("ruin", "ruin_random"):
        base = "partial_max"
    return base not in QUANTITIES or base in regime_mask(s)


def masked_quantities(s: Scenario) -> tuple[str, ...]:
    """Tail quantities that the regime's theorem does not cover (and reports skip)."""
    if s.regime == "pQAI":
        return ("max_summand", "stopped_max_summand")
    return ()


def reference(s: Scenario, quantity: str, x: float, settings: MCSettings | None = None,
              tail_of_S: float | None = None) -> tuple[float, float, float]:
    """(asymptotic value, lower, upper) the MC estimate is compared against."""
    if quantity in QUANTITIES:
        asym = reference_sum(s, x)
        if quantity == "sum" and s.regime != "negative-control":
            try:
                lo, hi = dclass_tail_bounds(s, x)
                return asym, lo.value, hi.value
            except TheoremScopeError:
                pass
        return asym, asym, asym
    if quantity == "ruin":
        asym = reference_sum(s, x, s.n)
        return asym, asym, asym
    if quantity.startswith("stopped_") or quantity == "ruin_random":
        if s.stopping is None:
            raise TheoremScopeError(f"{quantity}: scenario has no stopping law")
        asym = s.stopping.mean * product_tail(s, 0, x)
        return asym, asym, asym
    if quantity == "genmoment":
        phi = settings.phi if settings and settings.phi else Phi("one")
        M = sum(partial_moment(s, i, phi, x) for i in range(s.n))
        lo, hi = genmoment_bounds(s, phi, x)
        return M, lo.value, hi.value
    if quantity == "es":
        M = sum(partial_moment(s, i, Phi("identity"), x) for i in range(s.n)) / tail_of_S
        lo, hi = es_bounds(s, x, tail_of_S)
        return M, lo.value, hi.value
    if quantity.startswith("mes"):
        j = int(quantity[4:-1]) - 1
        b = mes_bounds(s, j, x, tail_of_S)
        lower = b.lower.value if b.lower is not None else 0.0
        return b.upper.value, lower, b.upper.value
    raise ValueError(f"unknown quantity {quantity!r}")


def _tail_levels(s: Scenario, quantity: str, level: float) -> float:
    if quantity.startswith("stopped_") or quantity == "ruin_random":
        return level_to_x(s, level, stopped=True)
    return level_to_x(s, level)


def _mc_values(s: Scenario, family: str, x: float, st: MCSettings) -> dict:
    if family == "tails":
        ests = sim.tails_all_mc(s, x, st.m, st.seed, st.method, st.workers)
        out = dict(zip(QUANTITIES, ests))
        out["ruin"] = ests[1]   # ruin over the full horizon is the partial-sum maximum on the same draws
        return out
    if family == "stopped":
        ests = sim.stopped_tails_mc(s, x, st.m, st.seed, st.method, st.workers)
        out = {"stopped_" + q: e for q, e in zip(QUANTITIES, ests)}
        out["ruin_random"] = out["stopped_partial_max"]
        return out
    if family == "genmoment":
        phi = st.phi or Phi("one")
        return {"genmoment": sim.genmoment_mc(s, phi, x, st.m, st.seed, st.workers)}
    if family == "shortfall":
        run = sim.shortfall_mc(s, x, st.m, st.seed, st.workers)
        out = {"es": run.es, "_tail": run.extras["tail"], "mes_total": run.mes_total}
        out.update({f"mes[{j + 1}]": e for j, e in enumerate(run.mes)})
        return out
    raise ValueError(f"unknown family {family!r}")


def _family(quantity: str) -> str:
    if quantity in QUANTITIES or quantity == "ruin":
        return "tails"
    if quantity.startswith("stopped_") or quantity == "ruin_random":
        return "stopped"
    if quantity == "genmoment":
        return "genmoment"
    if quantity == "es" or quantity.startswith("mes["):
        return "shortfall"
    raise ValueError(f"unknown quantity {quantity!r}")


def convergence_reports(s: Scenario, quantities, levels, settings: MCSettings,
                        tol: float | None = None) -> list[ConvergenceReport]:
    """One report per quantity over a grid given by exceedance levels (deepest last).

    Quantities sharing a Monte Carlo family reuse one run per grid point.
    """
    tol = s.tol if tol is None else tol
    levels = sorted(levels, reverse=True)
    quantities = [q for q in quantities if q not in masked_quantities(s)]
    cache: dict[tuple[str, float], dict] = {}
    rows: dict[str, list[ReportRow]] = {q: [] for q in quantities}
    for q in quantities:
        fam = _family(q)
        for level in levels:
            x = _tail_levels(s, q, level)
            key = (fam, x)
            if key not in cache:
                cache[key] = _mc_values(s, fam, x, settings)
            vals = cache[key]
            est = vals[q]
            tail = None
            if "_tail" in vals:
                if not vals["_tail"].estimate > 0:
                    rows[q].append(ReportRow(x, level, math.nan, math.nan, math.nan, math.nan, math.nan,
                                             math.nan, math.nan, "inconclusive", ("zero-hits",)))
                    continue
                # shortfall references divide by the first-order tail, not by the noisy MC one
                tail = reference_sum(s, x)
            asym, lower, upper = reference(s, q, x, settings, tail)
            lo_ci, hi_ci = est.ci
            band = (lower * (1 - tol), upper * (1 + tol))
            v = verdict(est.estimate, est.ci, est.rel_stderr, band)
            ratio = est.estimate / asym if asym > 0 else math.nan
            rows[q].append(ReportRow(x, level, est.estimate, lo_ci, hi_ci, asym, lower, upper, ratio, v, est.flags))
    method = {"genmoment": "crude", "shortfall": "crude"}
    return [ConvergenceReport(q, s.hash, method.get(_family(q), settings.method), settings.m, settings.seed, tol,
                              _claimed(s, q), tuple(rows[q])) for q in quantities]


def convergence_report(s: Scenario, quantity: str, levels, settings: MCSettings,
                       tol: float | None = None) -> ConvergenceReport:
    return convergence_reports(s, [quantity], levels, settings, tol)[0]
