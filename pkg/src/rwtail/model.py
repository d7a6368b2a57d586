"""Scenario assembly, validation and the stopping law for random sums."""
from __future__ import annotations

import copy
import hashlib
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import yaml

from . import dependence as dep
from .distributions import Distribution, DistributionError, from_record

REGIMES = ("pTAI", "pQAI", "negative-control")
TOP_KEYS = {"n", "losses", "weights", "links", "regime", "stopping", "grids"}
LINK_KEYS = {"x_theta", "x_x", "theta_theta"}
GRID_KEYS = {"levels", "tol", "xs"}


class ScenarioError(ValueError):
    """A scenario record failed validation; ``violation`` names the rule."""

    def __init__(self, violation: str, message: str):
        super().__init__(f"{violation}: {message}")
        self.violation = violation


@dataclass(frozen=True)
class StoppingLaw:
    """Law of a bounded counting variable N, independent of the summands."""

    pmf: tuple[tuple[int, float], ...]

    def __post_init__(self):
        ks = [k for k, _ in self.pmf]
        ps = np.array([p for _, p in self.pmf], dtype=float)
        if not ks:
            raise ScenarioError("stopping-law", "empty pmf")
        if len(set(ks)) != len(ks) or any(k < 0 for k in ks):
            raise ScenarioError("stopping-law", "support must be distinct nonnegative integers")
        if np.any(ps < 0) or abs(ps.sum() - 1.0) > 1e-12:
            raise ScenarioError("stopping-law", f"probabilities must be nonnegative and sum to 1 (sum={float(ps.sum())!r})")
        if sum(p for k, p in self.pmf if k >= 1) <= 0:
            raise ScenarioError("stopping-law", "P[N >= 1] must be positive")

    @property
    def support_max(self) -> int:
        return max(k for k, p in self.pmf if p > 0)

    @property
    def mean(self) -> float:
        return float(sum(k * p for k, p in self.pmf))

    def sample(self, rng: np.random.Generator, m: int) -> np.ndarray:
        ks = np.array([k for k, _ in sorted(self.pmf)])
        cum = np.cumsum([p for _, p in sorted(self.pmf)])
        idx = np.searchsorted(cum, rng.random(m), side="right")
        return ks[np.minimum(idx, len(ks) - 1)]

    def to_record(self) -> dict:
        return {"pmf": {str(k): p for k, p in sorted(self.pmf)}}


def stopping_mean(sl: StoppingLaw) -> float:
    return sl.mean


@dataclass(frozen=True, eq=False)
class Scenario:
    n: int
    losses: tuple[Distribution, ...]
    weights: tuple[Distribution, ...]
    joint: dep.JointModel
    regime: str
    stopping: StoppingLaw | None = None
    levels: tuple[float, ...] = ()
    tol: float = 0.10
    xs: tuple[float, ...] = ()
    record: dict = field(default_factory=dict, repr=False)

    def link(self, i: int) -> dep.WeightLink:
        return self.joint.weight_links[i]

    def pair(self, i: int, j: int) -> dep.PairLink:
        return self.joint.pair_link(i, j)

    def dump(self) -> str:
        return dump_record(self.record)

    @property
    def hash(self) -> str:
        return hashlib.sha256(self.dump().encode()).hexdigest()[:16]

    @property
    def signed(self) -> bool:
        return any(F.support[0] < 0 for F in self.losses)


# ---------------------------------------------------------------------------
# record parsing


def _num(value, where: str) -> float:
    if isinstance(value, bool):
        raise ScenarioError("type", f"{where} must be a number, got {value!r}")
    if isinstance(value, str):
        try:
            return float(value)
        except ValueError:
            raise ScenarioError("type", f"{where} must be a number, got {value!r}") from None
    if not isinstance(value, (int, float)):
        raise ScenarioError("type", f"{where} must be a number, got {value!r}")
    return float(value)


def _normalize_numbers(obj):
    # YAML 1.1 reads "1e-3" as a string; coerce plain numeric strings back
    if isinstance(obj, dict):
        return {k: _normalize_numbers(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_normalize_numbers(v) for v in obj]
    if isinstance(obj, str):
        try:
            return float(obj) if obj.strip().lower() not in ("nan", "inf", "-inf", "infinity") else obj
        except ValueError:
            return obj
    return obj


def _marginals(raw, n: int, what: str) -> tuple[Distribution, ...]:
    if isinstance(raw, dict):
        raw = [raw] * n
    if not isinstance(raw, list) or len(raw) != n:
        raise ScenarioError("dimension", f"{what} must be one record or a list of {n} records")
    out = []
    for k, rec in enumerate(raw):
        try:
            out.append(from_record(rec))
        except DistributionError as exc:
            raise ScenarioError("distribution", f"{what}[{k + 1}]: {exc}") from None
    return tuple(out)


def _indices(raw, n: int, where: str) -> tuple[int, ...]:
    if raw is None:
        return tuple(range(n))
    if not isinstance(raw, list) or not raw:
        raise ScenarioError("links", f"{where}.indices must be a non-empty list")
    idx = []
    for v in raw:
        k = int(_num(v, f"{where}.indices"))
        if not 1 <= k <= n:
            raise ScenarioError("links", f"{where}: index {k} outside 1..{n}")
        idx.append(k - 1)
    if len(set(idx)) != len(idx):
        raise ScenarioError("links", f"{where}: repeated index")
    return tuple(idx)


def _check_keys(rec: dict, allowed: set, where: str):
    extra = set(rec) - allowed
    if extra:
        raise ScenarioError("unknown-key", f"{where}: unknown keys {sorted(extra)}")


def _pair_list_block(entries: list, n: int, where: str, allowed: tuple[str, ...]) -> dep.LatentBlock | None:
    kinds = {e.get("copula") for e in entries if isinstance(e, dict)}
    if len(kinds) != 1 or len(entries) != sum(isinstance(e, dict) for e in entries):
        raise ScenarioError("links", f"{where}: pair entries must be records sharing one copula family")
    kind = kinds.pop()
    if kind not in allowed:
        raise ScenarioError("links", f"{where}: pairwise copula {kind!r} not supported here (allowed: {list(allowed)})")
    if kind == "independence":
        return None
    par = "kappa" if kind == "fgm" else "rho"
    M = np.eye(n) if kind == "gaussian" else np.zeros((n, n))
    touched: set[int] = set()
    for e in entries:
        _check_keys(e, {"i", "j", "copula", par}, where)
        i = int(_num(e.get("i"), f"{where}.i")) - 1
        j = int(_num(e.get("j"), f"{where}.j")) - 1
        if not (0 <= i < n and 0 <= j < n) or i == j:
            raise ScenarioError("links", f"{where}: invalid pair ({i + 1}, {j + 1})")
        if par not in e:
            raise ScenarioError("links", f"{where}: pair ({i + 1}, {j + 1}) is missing {par}")
        val = _num(e[par], f"{where}.{par}")
        M[i, j] = M[j, i] = val
        touched |= {i, j}
    members = tuple(sorted(touched))
    sub = M[np.ix_(members, members)]
    rows = tuple(tuple(float(v) for v in r) for r in sub)
    try:
        if kind == "fgm":
            return dep.FGMBlock(members, rows)
        return dep.GaussianBlock(members, rows)
    except dep.DependenceError as exc:
        raise ScenarioError("links", f"{where}: {exc}") from None


def _dict_block(rec: dict, n: int, where: str, allowed: tuple[str, ...]) -> dep.LatentBlock | None:
    kind = rec.get("copula")
    if kind not in allowed:
        raise ScenarioError("links", f"{where}: copula {kind!r} not supported here (allowed: {list(allowed)})")
    par = {"fgm": "kappa", "gaussian": "rho", "survival_clayton": "theta", "independence": None}[kind]
    _check_keys(rec, {"copula", "indices"} | ({par} if par else set()), where)
    if kind == "independence":
        return None
    if par not in rec:
        raise ScenarioError("links", f"{where}: missing {par}")
    val = _num(rec[par], f"{where}.{par}")
    members = _indices(rec.get("indices"), n, where)
    d = len(members)
    if d < 2:
        return None
    try:
        if kind == "fgm":
            K = [[0.0 if a == b else val for b in range(d)] for a in range(d)]
            return dep.FGMBlock(members, tuple(tuple(r) for r in K))
        if kind == "gaussian":
            R = [[1.0 if a == b else val for b in range(d)] for a in range(d)]
            return dep.GaussianBlock(members, tuple(tuple(r) for r in R))
        return dep.ClaytonBlock(members, val)
    except dep.DependenceError as exc:
        raise ScenarioError("links", f"{where}: {exc}") from None


def _latent(raw, n: int, where: str, dict_kinds, pair_kinds) -> dep.LatentCopula:
    if raw is None:
        return dep.LatentCopula(n)
    if isinstance(raw, dict):
        blk = _dict_block(raw, n, where, dict_kinds)
    elif isinstance(raw, list):
        blk = _pair_list_block(raw, n, where, pair_kinds) if raw else None
    else:
        raise ScenarioError("links", f"{where} must be a record or a list of pair records")
    try:
        return dep.LatentCopula(n, (blk,) if blk is not None else ())
    except dep.DependenceError as exc:
        raise ScenarioError("links", f"{where}: {exc}") from None


def _weight_links(raw, n: int, weights) -> tuple[dep.WeightLink, ...]:
    kappas = [0.0] * n
    if raw is None:
        raw = []
    if isinstance(raw, dict):
        raw = [dict(raw, i=k + 1) for k in range(n)] if "i" not in raw else [raw]
    if not isinstance(raw, list):
        raise ScenarioError("links", "x_theta must be a list of {i, copula, kappa} records")
    seen = set()
    for e in raw:
        if not isinstance(e, dict):
            raise ScenarioError("links", "x_theta entries must be records")
        _check_keys(e, {"i", "copula", "kappa"}, "x_theta")
        kind = e.get("copula", "fgm")
        i = int(_num(e.get("i"), "x_theta.i")) - 1
        if not 0 <= i < n:
            raise ScenarioError("links", f"x_theta: index {i + 1} outside 1..{n}")
        if i in seen:
            raise ScenarioError("links", f"x_theta: index {i + 1} given twice")
        seen.add(i)
        if kind == "independence":
            continue
        if kind != "fgm":
            raise ScenarioError(
                "unsupported-link",
                f"x_theta[{i + 1}]: copula {kind!r} admits no finite conditional tail limit; use fgm or independence")
        kappas[i] = _num(e.get("kappa"), "x_theta.kappa")
    try:
        return tuple(dep.WeightLink(i, kappas[i], weights[i]) for i in range(n))
    except dep.DependenceError as exc:
        raise ScenarioError("links", str(exc)) from None


def _stopping(raw) -> StoppingLaw | None:
    if raw is None:
        return None
    if not isinstance(raw, dict) or set(raw) != {"pmf"} or not isinstance(raw["pmf"], dict):
        raise ScenarioError("stopping-law", "stopping must be {pmf: {k: p, ...}}")
    pmf = []
    for k, p in raw["pmf"].items():
        try:
            kk = int(str(k))
        except ValueError:
            raise ScenarioError("stopping-law", f"support point {k!r} is not an integer") from None
        pmf.append((kk, _num(p, f"stopping.pmf[{k}]")))
    return StoppingLaw(tuple(sorted(pmf)))


def build_scenario(config: dict) -> Scenario:
    """Validate a scenario record and assemble the immutable Scenario."""
    if not isinstance(config, dict):
        raise ScenarioError("format", "scenario must be a mapping")
    rec = _normalize_numbers(copy.deepcopy(config))
    _check_keys(rec, TOP_KEYS, "scenario")
    for key in ("n", "losses", "weights"):
        if key not in rec:
            raise ScenarioError("missing-key", f"scenario needs '{key}'")
    n_raw = rec["n"]
    n = int(_num(n_raw, "n"))
    if n != _num(n_raw, "n") or n < 1:
        raise ScenarioError("dimension", f"n must be a positive integer, got {n_raw!r}")
    if n > dep.MAX_DIM:
        raise ScenarioError("dimension", f"n={n} exceeds the supported maximum {dep.MAX_DIM}")
    rec["n"] = n

    losses = _marginals(rec["losses"], n, "losses")
    weights = _marginals(rec["weights"], n, "weights")
    for k, G in enumerate(weights):
        if G.support[0] < 0:
            raise ScenarioError("nonnegative-weight", f"weights[{k + 1}] takes negative values")
        if not G.sf(0.0) > 0:
            raise ScenarioError("non-degenerate at zero", f"weights[{k + 1}] is degenerate at zero")

    links = rec.get("links") or {}
    if not isinstance(links, dict):
        raise ScenarioError("links", "links must be a mapping")
    _check_keys(links, LINK_KEYS, "links")
    wlinks = _weight_links(links.get("x_theta"), n, weights)
    loss_lat = _latent(links.get("x_x"), n, "x_x",
                       ("independence", "fgm", "gaussian", "survival_clayton"), ("independence", "fgm", "gaussian"))
    weight_lat = _latent(links.get("theta_theta"), n, "theta_theta",
                         ("independence", "fgm", "gaussian"), ("independence", "fgm", "gaussian"))
    try:
        joint = dep.JointModel(losses, weights, wlinks, weight_lat, loss_lat)
    except dep.DependenceError as exc:
        raise ScenarioError("fgm-admissibility" if "admissib" in str(exc) else "links", str(exc)) from None

    regime = rec.get("regime", "pTAI")
    if regime not in REGIMES:
        raise ScenarioError("regime", f"regime must be one of {list(REGIMES)}, got {regime!r}")
    if regime != "negative-control" and loss_lat.has(dep.ClaytonBlock):
        raise ScenarioError("regime-conflict",
                            f"{regime} regime forbids tail-dependent (survival Clayton) loss links")

    stopping = _stopping(rec.get("stopping"))
    if stopping is not None:
        if stopping.support_max > n:
            raise ScenarioError("stopping-law", f"N can reach {stopping.support_max} but only {n} summands are modeled")
        _check_identical(losses, weights, wlinks, loss_lat, weight_lat, n)

    grids = rec.get("grids") or {}
    if not isinstance(grids, dict):
        raise ScenarioError("grids", "grids must be a mapping")
    _check_keys(grids, GRID_KEYS, "grids")
    levels = tuple(_num(v, "grids.levels") for v in grids.get("levels", []) or [])
    if any(not 0 < v < 1 for v in levels):
        raise ScenarioError("grids", "levels must be exceedance probabilities in (0, 1)")
    xs = tuple(_num(v, "grids.xs") for v in grids.get("xs", []) or [])
    tol = _num(grids.get("tol", 0.10), "grids.tol")
    if not 0 < tol < 1:
        raise ScenarioError("grids", "tol must lie in (0, 1)")

    return Scenario(n, losses, weights, joint, regime, stopping, levels, tol, xs, rec)


def _check_identical(losses, weights, wlinks, loss_lat, weight_lat, n):
    if len({repr(F.to_record()) for F in losses}) > 1 or len({repr(G.to_record()) for G in weights}) > 1:
        raise ScenarioError("identical-summands", "random-sum scenarios need identical loss and weight laws")
    if len({w.kappa for w in wlinks}) > 1:
        raise ScenarioError("identical-summands", "random-sum scenarios need identical loss-weight links")
    for lat, what in ((loss_lat, "x_x"), (weight_lat, "theta_theta")):
        if not lat.blocks:
            continue
        b = lat.blocks[0]
        if len(b.members) != n:
            raise ScenarioError("identical-summands", f"{what} must cover every summand alike")
        if isinstance(b, dep.FGMBlock):
            off = b.K[~np.eye(n, dtype=bool)]
        elif isinstance(b, dep.GaussianBlock):
            off = b.R[~np.eye(n, dtype=bool)]
        else:
            continue
        if np.ptp(off) > 0:
            raise ScenarioError("identical-summands", f"{what} must be exchangeable (equal pair parameters)")


# ---------------------------------------------------------------------------
# serialization


def dump_record(rec: dict) -> str:
    return yaml.safe_dump(rec, sort_keys=True, default_flow_style=False, allow_unicode=False)


def load_scenario(path) -> Scenario:
    with open(path) as fh:
        text = fh.read()
    return parse_scenario(text)


def parse_scenario(text: str) -> Scenario:
    try:
        rec = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f" at line {mark.line + 1}, column {mark.column + 1}" if mark else ""
        raise ScenarioError("parse", f"invalid YAML{where}: {getattr(exc, 'problem', exc)}") from None
    return build_scenario(rec)


def write_scenario(s: Scenario, path) -> None:
    with open(path, "w") as fh:
        fh.write(s.dump())


# ---------------------------------------------------------------------------
# weight-tail assumption probe


def loss_kinks(F: Distribution, G: Distribution, x: float) -> list[float]:
    """Uniform-space points where F.sf(x / G^{-1}(v)) has a kink or jump."""
    pts = list(dep.weight_breaks(G))
    lo = F.support[0]
    if lo > 0 and not G.discrete:
        pts.append(float(G.cdf(x / lo)))
        if not G.bounded:
            # dyadic refinement where the weight quantile steepens
            pts += [float(G.cdf(x / lo / 2.0 ** k)) for k in range(1, 9)]
    if not G.discrete:
        # loss jumps at a sit where the weight equals x / a
        tlo, thi = G.support
        jumps = F.jump_points(x / thi, x / tlo if tlo > 0 else math.inf)
        pts += [float(G.cdf(x / a)) for a in jumps]
    return sorted(p for p in set(pts) if 0 < p < 1)


def exact_joint_product_tail(s: Scenario, i: int, j: int, xi: float, xj: float) -> float:
    """P[weight_i loss_i > xi, weight_j loss_j > xj] under the model, by 2-D quadrature."""
    Fi, Fj = s.losses[i], s.losses[j]
    Gi, Gj = s.weights[i], s.weights[j]
    ki, kj = s.link(i).kappa, s.link(j).kappa
    cop = s.joint.loss_latent.pair(i, j)

    def level(F, G, x, u, kap):
        th = G._quantile(np.clip(u, 1e-300, 1 - 1e-16))
        with np.errstate(divide="ignore"):
            f = np.where(th > 0, F.sf(x / np.where(th > 0, th, 1.0)), 0.0)
        return f * (1 + kap * (2 * u - 1) * (1 - f))

    def fn(u, v):
        return cop.tail(level(Fi, Gi, xi, u, ki), level(Fj, Gj, xj, v, kj))

    return dep.pair_expect(s.joint.weight_latent.pair(i, j), fn,
                           loss_kinks(Fi, Gi, xi), loss_kinks(Fj, Gj, xj))


def sqrt_b(x):
    return np.sqrt(np.asarray(x, dtype=float))


@dataclass(frozen=True)
class AssumptionProbe:
    pair: tuple[int, int]
    b_name: str
    xs: np.ndarray
    numerators: np.ndarray
    denominators: np.ndarray
    ratios: np.ndarray
    verdict: str

    def to_record(self) -> dict:
        return {"pair": [self.pair[0] + 1, self.pair[1] + 1], "b": self.b_name,
                "xs": self.xs.tolist(), "numerators": self.numerators.tolist(),
                "denominators": self.denominators.tolist(), "ratios": self.ratios.tolist(),
                "verdict": self.verdict}


def probe_assumption_b(s: Scenario, pair: tuple[int, int], xs, b: Callable = sqrt_b,
                       b_name: str = "sqrt") -> AssumptionProbe:
    """Finite-grid evidence on the weight-tail condition for a pair.

    The numerator is max(G_i-tail(b(x)), G_j-tail(b(x))); the denominator is the
    exact joint tail of the two weighted losses at (x, x).
    """
    i, j = pair
    xs = np.asarray(xs, dtype=float)
    if xs.ndim != 1 or xs.size < 2 or np.any(np.diff(xs) <= 0):
        raise ScenarioError("grid", "probe grid must be strictly increasing with at least two points")
    bx = b(xs)
    num = np.maximum(np.asarray(s.weights[i].sf(bx)), np.asarray(s.weights[j].sf(bx)))
    bounded = s.weights[i].bounded and s.weights[j].bounded
    den = np.empty_like(xs)
    for k, x in enumerate(xs):
        if bounded and num[k] == 0:
            den[k] = np.nan
            continue
        den[k] = exact_joint_product_tail(s, i, j, x, x)
        if not den[k] > 0:
            raise ScenarioError("grid-too-deep", f"joint tail evaluates to 0 at x={float(x)!r}")
    with np.errstate(invalid="ignore"):
        ratios = np.where(num == 0, 0.0, num / den)
    if bounded:
        edge = max(s.weights[i].support[1], s.weights[j].support[1])
        beyond = bx > edge
        verdict = "holds-trivially" if np.all(num[beyond] == 0) and beyond[-1] else "inconclusive"
    else:
        d = np.diff(ratios)
        if np.all(d < 0):
            verdict = "consistent"
        elif np.all(d > 0):
            verdict = "violated"
        else:
            verdict = "inconclusive"
    return AssumptionProbe(pair, b_name, xs, num, den, ratios, verdict)


def scenario_record_s1(n: int = 3) -> dict:
    """Reference scenario: Pareto(2) losses, Uniform(0.5, 1.5) weights, FGM and Gaussian links."""
    return {
        "n": n,
        "losses": {"family": "pareto", "alpha": 2.0, "scale": 1.0},
        "weights": {"family": "uniform", "a": 0.5, "b": 1.5},
        "links": {
            "x_theta": [{"i": k + 1, "copula": "fgm", "kappa": 0.5} for k in range(n)],
            "x_x": [{"i": a + 1, "j": b + 1, "copula": "fgm", "kappa": 0.3}
                    for a in range(n) for b in range(a + 1, n)],
            "theta_theta": {"copula": "gaussian", "rho": 0.4},
        },
        "regime": "pTAI",
    }
