"""Copulas, weight/loss links and the joint (weight, loss) model.

Construction
------------
Two independent latent vectors drive the model. ``V`` carries the dependence
among weights and ``U'`` the dependence among losses. Each loss uniform is
``U_i = F_kappa_i^{-1}(U'_i | V_i)`` where ``F_kappa(.|v)`` is the FGM
conditional distribution, so every (loss, weight) pair is exactly FGM(kappa_i)
and the conditional tail of a loss given its weight has a closed form.

All latent uniforms are stored on the *tail* side (``T = 1 - U``), which keeps
deep exceedance probabilities exact in floating point. The supported latent
copulas are radially symmetric, except survival Clayton whose tail-side law is
plain Clayton.
"""
from __future__ import annotations

import itertools
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy import integrate, special

from .distributions import Distribution, DistributionError

SHARD_SIZE = 1 << 16
MAX_DIM = 8


class DependenceError(ValueError):
    """Invalid copula parameters or inadmissible dependence structure."""


class UnsupportedLink(DependenceError):
    """The requested limit function does not exist for this link family."""


# ---------------------------------------------------------------------------
# bivariate copulas


def bvn_upper(a, b, rho):
    """P[Z1 > -ndtri(a), Z2 > -ndtri(b)] for a standard bivariate normal.

    Equivalently the Gaussian-copula probability that both tail uniforms fall
    below ``a`` and ``b``. Uses Owen's T function.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    h = special.ndtri(np.clip(a, 1e-300, 1.0))
    k = special.ndtri(np.clip(b, 1e-300, 1.0))
    return bvn_cdf(h, k, rho) * ((a > 0) & (b > 0))


def bvn_cdf(h, k, rho):
    """Standard bivariate normal cdf via Owen's T (vectorized)."""
    h = np.asarray(h, dtype=float)
    k = np.asarray(k, dtype=float)
    h, k = np.broadcast_arrays(h, k)
    if rho == 0.0:
        return special.ndtr(h) * special.ndtr(k)
    r = math.sqrt(1.0 - rho * rho)
    hh = np.where(h == 0, 1e-300, h)
    kk = np.where(k == 0, 1e-300, k)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        ah = (k - rho * h) / (hh * r)
        ak = (h - rho * k) / (kk * r)
        ah = np.nan_to_num(ah, nan=0.0)
        ak = np.nan_to_num(ak, nan=0.0)
        hk = h * k
    beta = np.where((hk > 0) | ((hk == 0) & (h + k >= 0)), 0.0, 0.5)
    out = 0.5 * (special.ndtr(h) + special.ndtr(k)) - special.owens_t(h, ah) - special.owens_t(k, ak) - beta
    out = np.where(np.isneginf(h) | np.isneginf(k), 0.0, out)
    out = np.where(np.isposinf(h), special.ndtr(k), out)
    out = np.where(np.isposinf(k), special.ndtr(h), out)
    return np.clip(out, 0.0, 1.0)


class Copula:
    """Bivariate copula on (U, V).

    ``tail(a, b)`` is P[U > 1-a, V > 1-b], the joint survival at marginal
    tail levels a and b.
    """

    name = ""

    def cdf(self, u, v):
        u = np.asarray(u, dtype=float)
        v = np.asarray(v, dtype=float)
        return self.tail(1.0 - u, 1.0 - v) + u + v - 1.0

    def tail(self, a, b):
        raise NotImplementedError

    def upper_tail_dependence(self) -> float:
        return 0.0

    def density(self, u, v):
        raise NotImplementedError

    def to_record(self) -> dict:
        raise NotImplementedError


@dataclass(frozen=True)
class Independence(Copula):
    name = "independence"

    def cdf(self, u, v):
        return np.asarray(u, dtype=float) * np.asarray(v, dtype=float)

    def tail(self, a, b):
        return np.asarray(a, dtype=float) * np.asarray(b, dtype=float)

    def density(self, u, v):
        return np.ones(np.broadcast(u, v).shape)

    def to_record(self):
        return {"copula": "independence"}


@dataclass(frozen=True)
class FGM(Copula):
    kappa: float
    name = "fgm"

    def __post_init__(self):
        if not -1.0 <= self.kappa <= 1.0:
            raise DependenceError(f"FGM parameter must lie in [-1, 1], got {self.kappa}")

    def cdf(self, u, v):
        u = np.asarray(u, dtype=float)
        v = np.asarray(v, dtype=float)
        return u * v * (1.0 + self.kappa * (1.0 - u) * (1.0 - v))

    def tail(self, a, b):
        # FGM is radially symmetric
        return self.cdf(a, b)

    def density(self, u, v):
        return 1.0 + self.kappa * (1.0 - 2.0 * np.asarray(u)) * (1.0 - 2.0 * np.asarray(v))

    def to_record(self):
        return {"copula": "fgm", "kappa": self.kappa}


@dataclass(frozen=True)
class Gaussian(Copula):
    rho: float
    name = "gaussian"

    def __post_init__(self):
        if not -1.0 < self.rho < 1.0:
            raise DependenceError(f"Gaussian correlation must lie in (-1, 1), got {self.rho}")

    def tail(self, a, b):
        return bvn_upper(a, b, self.rho)

    def cdf(self, u, v):
        return bvn_upper(u, v, self.rho)

    def to_record(self):
        return {"copula": "gaussian", "rho": self.rho}


@dataclass(frozen=True)
class SurvivalClayton(Copula):
    """Rotated Clayton; upper-tail dependent, kept only as a negative control."""

    theta: float
    name = "survival_clayton"

    def __post_init__(self):
        if not self.theta > 0:
            raise DependenceError(f"survival Clayton parameter must be > 0, got {self.theta}")

    def tail(self, a, b):
        a = np.asarray(a, dtype=float)
        b = np.asarray(b, dtype=float)
        with np.errstate(divide="ignore", over="ignore"):
            s = np.power(a, -self.theta) + np.power(b, -self.theta) - 1.0
            out = np.power(s, -1.0 / self.theta)
        return np.where((a <= 0) | (b <= 0), 0.0, out)

    def upper_tail_dependence(self):
        return 2.0 ** (-1.0 / self.theta)

    def to_record(self):
        return {"copula": "survival_clayton", "theta": self.theta}


def copula_cdf(c: Copula, u, v):
    return c.cdf(u, v)


def upper_tail_dependence(c: Copula) -> float:
    return c.upper_tail_dependence()


def joint_exceedance(c: Copula, Fi: Distribution, Fj: Distribution, xi, xj):
    """P[Xi > xi, Xj > xj] when (Xi, Xj) are glued by the copula ``c``."""
    return c.tail(Fi.sf(xi), Fj.sf(xj))


def copula_from_record(rec: dict) -> Copula:
    kind = rec.get("copula")
    if kind == "independence":
        return Independence()
    if kind == "fgm":
        return FGM(float(rec["kappa"]))
    if kind == "gaussian":
        return Gaussian(float(rec["rho"]))
    if kind == "survival_clayton":
        return SurvivalClayton(float(rec["theta"]))
    raise DependenceError(f"unknown copula {kind!r}")


# ---------------------------------------------------------------------------
# pair expectations under a weight-side copula


def _quad(f, a, b, points=None):
    pts = None
    if points is not None and math.isfinite(a) and math.isfinite(b):
        pts = sorted(p for p in set(points) if a < p < b) or None
    val, err = integrate.quad(f, a, b, points=pts, epsabs=1e-15, epsrel=1e-11, limit=400)
    return val


def _split(breaks, lo=0.0, hi=1.0):
    edges = sorted({lo, hi, *[b for b in breaks if lo < b < hi]})
    return list(zip(edges[:-1], edges[1:]))


def pair_expect(cop: Copula, fn, ubreaks=(), vbreaks=(), urange=(0.0, 1.0), vrange=(0.0, 1.0),
                rtol: float = 1e-10, atol: float = 1e-17) -> float:
    """E[fn(U, V) ; U in urange, V in vrange] under a bivariate copula.

    ``fn`` is vectorized over arrays (u, v). Breakpoints mark kinks or jumps of
    ``fn`` and split the domain into rectangles. Independence and FGM
    integrate in uniform space; Gaussian integrates in normal-score space.
    """
    total = 0.0
    if isinstance(cop, (Independence, FGM)):
        kap = cop.kappa if isinstance(cop, FGM) else 0.0

        def f(p):
            u, v = p[:, 0], p[:, 1]
            return fn(u, v) * (1.0 + kap * (1 - 2 * u) * (1 - 2 * v))
        for u0, u1 in _split(ubreaks, *urange):
            for v0, v1 in _split(vbreaks, *vrange):
                total += _cubature(f, (u0, v0), (u1, v1), rtol, atol)
        return total
    if isinstance(cop, Gaussian):
        rho = cop.rho
        r2 = 1.0 - rho * rho
        norm = 1.0 / (2 * math.pi * math.sqrt(r2))

        def f(p):
            z, w = p[:, 0], p[:, 1]
            dens = norm * np.exp(-(z * z - 2 * rho * z * w + w * w) / (2 * r2))
            return fn(special.ndtr(z), special.ndtr(w)) * dens
        zb_u = [float(special.ndtri(b)) for b in ubreaks if 0 < b < 1]
        zb_v = [float(special.ndtri(b)) for b in vbreaks if 0 < b < 1]
        zr_u = tuple(max(float(special.ndtri(p)), -_ZMAX) for p in urange)
        zr_v = tuple(max(float(special.ndtri(p)), -_ZMAX) for p in vrange)
        zr_u = (zr_u[0], min(zr_u[1], _ZMAX))
        zr_v = (zr_v[0], min(zr_v[1], _ZMAX))
        for z0, z1 in _split(zb_u, *zr_u):
            for w0, w1 in _split(zb_v, *zr_v):
                total += _cubature(f, (z0, w0), (z1, w1), rtol, atol)
        return total
    raise UnsupportedLink(f"pair expectations are not available under {cop.name}")


_ZMAX = 9.5  # normal mass beyond is ~1e-21


def _cubature(f, a, b, rtol, atol):
    if a[0] >= b[0] or a[1] >= b[1]:
        return 0.0
    res = integrate.cubature(f, list(a), list(b), rtol=rtol, atol=atol, max_subdivisions=20000)
    if res.status != "converged":
        raise ArithmeticError(f"2-D quadrature did not converge (estimate {res.estimate}, error {res.error})")
    return float(res.estimate)


# ---------------------------------------------------------------------------
# latent multivariate blocks (tail-side uniforms)


class LatentBlock:
    members: tuple[int, ...]

    @property
    def dim(self) -> int:
        return len(self.members)

    def transform(self, W: np.ndarray) -> np.ndarray:
        """Map iid tail uniforms (m, d) to dependent tail uniforms."""
        raise NotImplementedError

    def cond_cdf(self, k: int, tau, T: np.ndarray):
        """P[T_k <= tau | T_l, l != k] for block-local position k."""
        raise NotImplementedError

    def pair(self, k: int, l: int) -> Copula:
        raise NotImplementedError

    def to_record(self) -> dict:
        raise NotImplementedError


def _col(p, tau):
    # per-row parameter against a (rows,) or (rows, q) threshold array
    return p[:, None] if np.ndim(tau) == 2 else p


def _fgm_solve(c, w):
    # root in [0,1] of t + c t (1 - t) = w
    c = np.asarray(c, dtype=float)
    return 2.0 * w / ((1.0 + c) + np.sqrt(np.maximum((1.0 + c) ** 2 - 4.0 * c * w, 0.0)))


@dataclass(frozen=True, eq=False)
class FGMBlock(LatentBlock):
    members: tuple[int, ...]
    kappa: tuple[tuple[float, ...], ...]

    def __post_init__(self):
        K = np.asarray(self.kappa, dtype=float)
        d = len(self.members)
        if K.shape != (d, d) or not np.allclose(K, K.T) or np.any(np.diag(K) != 0):
            raise DependenceError("FGM interaction matrix must be symmetric with zero diagonal")
        if d > MAX_DIM:
            raise DependenceError(f"FGM blocks are limited to {MAX_DIM} coordinates")

    @cached_property
    def K(self) -> np.ndarray:
        return np.asarray(self.kappa, dtype=float)

    def violating_sign(self) -> tuple[int, ...] | None:
        """First sign vector with negative density corner, or None."""
        K = self.K
        for eps in itertools.product((1, -1), repeat=self.dim):
            e = np.asarray(eps, dtype=float)
            if 1.0 + 0.5 * e @ K @ e < -1e-12:
                return eps
        return None

    def transform(self, W):
        T = np.empty_like(W)
        T[:, 0] = W[:, 0]
        K = self.K
        a = np.empty_like(W)
        a[:, 0] = 1.0 - 2.0 * T[:, 0]
        Q = np.zeros(W.shape[0])
        for k in range(1, self.dim):
            B = a[:, :k] @ K[:k, k]
            T[:, k] = _fgm_solve(B / (1.0 + Q), W[:, k])
            a[:, k] = 1.0 - 2.0 * T[:, k]
            Q = Q + a[:, k] * B
        return T

    def cond_cdf(self, k, tau, T):
        a = 1.0 - 2.0 * T
        AK = a @ self.K
        B = AK[:, k]
        Q = 0.5 * np.sum(a * AK, axis=1) - a[:, k] * B
        c = _col(B / (1.0 + Q), tau)
        return tau * (1.0 + c * (1.0 - tau))

    def pair(self, k, l):
        return FGM(float(self.K[k, l]))

    def to_record(self):
        return {"copula": "fgm", "members": list(self.members),
                "kappa": [list(r) for r in self.kappa]}


@dataclass(frozen=True, eq=False)
class GaussianBlock(LatentBlock):
    members: tuple[int, ...]
    corr: tuple[tuple[float, ...], ...]

    def __post_init__(self):
        R = np.asarray(self.corr, dtype=float)
        d = len(self.members)
        if R.shape != (d, d) or not np.allclose(R, R.T) or not np.allclose(np.diag(R), 1.0):
            raise DependenceError("Gaussian correlation matrix must be symmetric with unit diagonal")
        try:
            np.linalg.cholesky(R)
        except np.linalg.LinAlgError:
            raise DependenceError("Gaussian correlation matrix is not positive definite") from None

    @cached_property
    def R(self):
        return np.asarray(self.corr, dtype=float)

    @cached_property
    def _chol(self):
        return np.linalg.cholesky(self.R)

    @cached_property
    def _regress(self):
        out = []
        for k in range(self.dim):
            idx = [l for l in range(self.dim) if l != k]
            if not idx:
                out.append((np.zeros(0), 1.0))
                continue
            S = self.R[np.ix_(idx, idx)]
            s = self.R[idx, k]
            beta = np.linalg.solve(S, s)
            out.append((beta, math.sqrt(max(1.0 - beta @ s, 1e-300))))
        return out

    def transform(self, W):
        Z = special.ndtri(np.clip(W, 2.0 ** -60, 1.0 - 2.0 ** -60)) @ self._chol.T
        # tail side: T = 1 - Phi(Z) = Phi(-Z)
        return special.ndtr(-Z)

    def cond_cdf(self, k, tau, T):
        beta, sigma = self._regress[k]
        idx = [l for l in range(self.dim) if l != k]
        Z = -special.ndtri(T[:, idx])
        mu = _col(Z @ beta, tau)
        with np.errstate(invalid="ignore"):
            return special.ndtr((special.ndtri(tau) + mu) / sigma)

    def pair(self, k, l):
        return Gaussian(float(self.R[k, l]))

    def to_record(self):
        return {"copula": "gaussian", "members": list(self.members),
                "corr": [list(r) for r in self.corr]}


@dataclass(frozen=True, eq=False)
class ClaytonBlock(LatentBlock):
    """Survival Clayton on the uniforms, i.e. Clayton on the tail side."""

    members: tuple[int, ...]
    theta: float

    def __post_init__(self):
        if not self.theta > 0:
            raise DependenceError("survival Clayton parameter must be > 0")

    def transform(self, W):
        th = self.theta
        T = np.empty_like(W)
        T[:, 0] = W[:, 0]
        S = np.power(T[:, 0], -th)  # 1 + sum (t^-th - 1)
        for k in range(1, self.dim):
            expo = -1.0 / (1.0 / th + k)
            tk = np.power(1.0 + S * (np.power(W[:, k], expo) - 1.0), -1.0 / th)
            T[:, k] = tk
            S = S + np.power(tk, -th) - 1.0
        return T

    def cond_cdf(self, k, tau, T):
        th = self.theta
        idx = [l for l in range(self.dim) if l != k]
        S = _col(1.0 + np.sum(np.power(T[:, idx], -th) - 1.0, axis=1), tau)
        with np.errstate(divide="ignore", over="ignore"):
            ratio = (np.power(tau, -th) - 1.0) / S
        return np.power(1.0 + ratio, -(1.0 / th + self.dim - 1))

    def pair(self, k, l):
        return SurvivalClayton(self.theta)

    def to_record(self):
        return {"copula": "survival_clayton", "members": list(self.members), "theta": self.theta}


@dataclass(frozen=True, eq=False)
class LatentCopula:
    """Disjoint latent blocks over n coordinates; uncovered coordinates are independent."""

    n: int
    blocks: tuple[LatentBlock, ...] = ()

    def __post_init__(self):
        seen: set[int] = set()
        for b in self.blocks:
            for i in b.members:
                if not 0 <= i < self.n:
                    raise DependenceError(f"block member {i + 1} outside 1..{self.n}")
                if i in seen:
                    raise DependenceError(f"coordinate {i + 1} appears in two dependence blocks")
                seen.add(i)

    def locate(self, i: int) -> tuple[LatentBlock | None, int]:
        for b in self.blocks:
            if i in b.members:
                return b, b.members.index(i)
        return None, -1

    def transform(self, W):
        T = W.copy()
        for b in self.blocks:
            cols = list(b.members)
            T[:, cols] = b.transform(W[:, cols])
        return T

    def cond_cdf(self, i, tau, T):
        b, k = self.locate(i)
        if b is None:
            return np.array(tau, dtype=float, copy=True)
        return b.cond_cdf(k, tau, T[:, list(b.members)])

    def pair(self, i: int, j: int) -> Copula:
        b, k = self.locate(i)
        if b is None or j not in b.members:
            return Independence()
        return b.pair(k, b.members.index(j))

    def has(self, kind) -> bool:
        return any(isinstance(b, kind) for b in self.blocks)


# ---------------------------------------------------------------------------
# links


def _weight_cdf_mid(G: Distribution, theta):
    return G.mid_cdf(theta)


def _weight_intervals(G: Distribution):
    """Atom intervals [F(a-), F(a)] in uniform space for atomic weights."""
    a = np.asarray(G.atoms, dtype=float)
    p = np.asarray(G.probs, dtype=float)
    hi = np.cumsum(p)
    lo = hi - p
    keep = p > 0
    return a[keep], lo[keep], np.minimum(hi[keep], 1.0)


def weight_breaks(G: Distribution) -> list[float]:
    if G.discrete:
        _, lo, hi = _weight_intervals(G)
        return sorted(set(lo.tolist()) | set(hi.tolist()))
    return []


@dataclass(frozen=True)
class WeightLink:
    """FGM (or independent) bond between loss i and its weight."""

    index: int
    kappa: float
    weight: Distribution

    def __post_init__(self):
        if not -1.0 <= self.kappa <= 1.0:
            raise DependenceError(f"weight link kappa must lie in [-1, 1], got {self.kappa}")

    @property
    def copula(self) -> Copula:
        return FGM(self.kappa) if self.kappa != 0 else Independence()

    def _check_theta(self, theta):
        th = np.atleast_1d(np.asarray(theta, dtype=float))
        for t in th:
            if not self.weight.in_support(float(t)):
                raise DistributionError(f"theta={t} is outside the weight support {self.weight.support}")

    def h(self, theta):
        """Limit of P[X > x | weight = theta] / P[X > x]."""
        self._check_theta(theta)
        mid = np.asarray(_weight_cdf_mid(self.weight, theta), dtype=float)
        out = 1.0 + self.kappa * (2.0 * mid - 1.0)
        return float(out) if np.ndim(theta) == 0 else out

    def conditional_sf(self, F: Distribution, x, theta):
        """Exact P[X > x | weight = theta] at finite x."""
        self._check_theta(theta)
        f = np.asarray(F.sf(x), dtype=float)
        mid = np.asarray(_weight_cdf_mid(self.weight, theta), dtype=float)
        out = f * (1.0 + self.kappa * (1.0 - f) * (2.0 * mid - 1.0))
        return float(out) if out.ndim == 0 else out

    def mean_h(self) -> float:
        """Integral of h against the weight law, by quadrature or atom sums."""
        G = self.weight
        if G.discrete:
            atoms, lo, hi = _weight_intervals(G)
            return float(np.sum((hi - lo) * (1.0 + self.kappa * (lo + hi - 1.0))))
        # integrate in uniform space: theta = G^{-1}(v), h = 1 + kappa (2v - 1)
        return _quad(lambda v: 1.0 + self.kappa * (2.0 * v - 1.0), 0.0, 1.0)


def h_limit(link: WeightLink, theta):
    return link.h(theta)


def conditional_sf_given_weight(link: WeightLink, F: Distribution, x, theta):
    return link.conditional_sf(F, x, theta)


def _poly_tau(f, kap):
    """tau = f (1 + kap e (1 - f)) as coefficients in e."""
    return np.array([f, f * kap * (1.0 - f)])


def _fgm_pair_moments(cop: Copula, maxdeg: int = 2) -> np.ndarray:
    """M[p, q] = E[e_i^p e_j^q] with e = 2V - 1 under the weight pair copula."""
    m1 = [1.0, 0.0, 1.0 / 3.0, 0.0, 1.0 / 5.0]
    M = np.zeros((maxdeg + 1, maxdeg + 1))
    if isinstance(cop, (Independence, FGM)):
        kap = cop.kappa if isinstance(cop, FGM) else 0.0
        # density 1 + kap e_i e_j in e-coordinates
        for p in range(maxdeg + 1):
            for q in range(maxdeg + 1):
                M[p, q] = m1[p] * m1[q] + kap * m1[p + 1] * m1[q + 1]
        return M
    if isinstance(cop, Gaussian):
        return _gaussian_pair_moments(cop.rho, maxdeg)
    raise UnsupportedLink(f"weight pair moments unavailable under {cop.name}")


_GAUSS_MOM_CACHE: dict = {}


def _gaussian_pair_moments(rho: float, maxdeg: int) -> np.ndarray:
    key = (rho, maxdeg)
    if key in _GAUSS_MOM_CACHE:
        return _GAUSS_MOM_CACHE[key]
    M = np.zeros((maxdeg + 1, maxdeg + 1))
    for p in range(maxdeg + 1):
        for q in range(maxdeg + 1):
            if p == 0 or q == 0:
                M[p, q] = [1.0, 0.0, 1.0 / 3.0][p + q] if p + q <= 2 else 0.0
            elif (p + q) % 2 == 1:
                M[p, q] = 0.0  # radial symmetry
            elif p == 1 and q == 1:
                M[p, q] = spearman_gaussian(rho) / 3.0
            else:
                M[p, q] = pair_expect(Gaussian(rho), lambda u, v, p=p, q=q: (2 * u - 1) ** p * (2 * v - 1) ** q)
    _GAUSS_MOM_CACHE[key] = M
    return M


def spearman_gaussian(rho: float) -> float:
    return 6.0 / math.pi * math.asin(rho / 2.0)


@dataclass(frozen=True, eq=False)
class PairLink:
    """Everything needed for the joint conditional tail of losses i and j."""

    i: int
    j: int
    link_i: WeightLink
    link_j: WeightLink
    weight_pair: Copula
    loss_pair: Copula
    sandwich: tuple[float, float] = (1.0, 1.0)

    @property
    def supported(self) -> bool:
        if self.link_i.kappa == 0 and self.link_j.kappa == 0:
            return True
        if not isinstance(self.loss_pair, (Independence, FGM)):
            return False
        if isinstance(self.weight_pair, Gaussian) and (self.link_i.weight.discrete or self.link_j.weight.discrete):
            return False
        return isinstance(self.weight_pair, (Independence, FGM, Gaussian))

    def _require(self):
        if not self.supported:
            raise UnsupportedLink(
                f"no finite limit g for losses {self.i + 1},{self.j + 1}: loss link {self.loss_pair.name}, "
                f"weight link {self.weight_pair.name}")

    @cached_property
    def m11(self) -> float:
        if self.link_i.kappa == 0 or self.link_j.kappa == 0:
            return 0.0
        return float(_fgm_pair_moments(self.weight_pair, 1)[1, 1])

    @property
    def norm(self) -> float:
        return 1.0 + self.link_i.kappa * self.link_j.kappa * self.m11

    def _rect(self, theta_i, theta_j):
        def interval(link, theta):
            G = link.weight
            link._check_theta(theta)
            if G.discrete:
                atoms, lo, hi = _weight_intervals(G)
                k = int(np.argmin(np.abs(atoms - theta)))
                return float(lo[k]), float(hi[k])
            v = float(G.cdf(theta))
            return v, v
        return interval(self.link_i, theta_i), interval(self.link_j, theta_j)

    def g(self, theta_i: float, theta_j: float) -> float:
        """Limit ratio of the joint loss tail given both weights to the unconditional one."""
        self._require()
        ki, kj = self.link_i.kappa, self.link_j.kappa
        if ki == 0 and kj == 0:
            return 1.0
        (a0, a1), (b0, b1) = self._rect(theta_i, theta_j)
        if a0 == a1 and b0 == b1:
            num = (1 + ki * (2 * a0 - 1)) * (1 + kj * (2 * b0 - 1))
            return float(num / self.norm)
        num = self._rect_mean(lambda u, v: (1 + ki * (2 * u - 1)) * (1 + kj * (2 * v - 1)), (a0, a1), (b0, b1))
        return float(num / self.norm)

    def _rect_mean(self, fn, ur, vr):
        """E[fn(V_i, V_j) | V_i in ur, V_j in vr]; degenerate ranges act as conditioning points."""
        cop = self.weight_pair
        if ur[0] == ur[1] and vr[0] == vr[1]:
            return float(fn(ur[0], vr[0]))
        if ur[0] == ur[1] or vr[0] == vr[1]:
            # one coordinate pinned, integrate the other under the conditional density
            if not isinstance(cop, (Independence, FGM)):
                raise UnsupportedLink("mixed atom/continuous conditioning needs an FGM or independent weight link")
            kap = cop.kappa if isinstance(cop, FGM) else 0.0
            if ur[0] == ur[1]:
                u = ur[0]
                den = _quad(lambda v: 1 + kap * (1 - 2 * u) * (1 - 2 * v), *vr)
                return _quad(lambda v: fn(u, v) * (1 + kap * (1 - 2 * u) * (1 - 2 * v)), *vr) / den
            v = vr[0]
            den = _quad(lambda u: 1 + kap * (1 - 2 * u) * (1 - 2 * v), *ur)
            return _quad(lambda u: fn(u, v) * (1 + kap * (1 - 2 * u) * (1 - 2 * v)), *ur) / den
        num = pair_expect(cop, fn, urange=ur, vrange=vr)
        den = pair_expect(cop, lambda u, v: np.ones_like(u), urange=ur, vrange=vr)
        return num / den

    @property
    def bound(self) -> float:
        """Reported K with g <= K everywhere."""
        self._require()
        ki, kj = abs(self.link_i.kappa), abs(self.link_j.kappa)
        return (1 + ki) * (1 + kj) / self.norm

    def loss_tail(self, fi, fj):
        """P[X_i > x_i, X_j > x_j] from marginal tail levels fi, fj (exact)."""
        ki, kj = self.link_i.kappa, self.link_j.kappa
        fi = float(fi)
        fj = float(fj)
        if ki == 0 and kj == 0:
            return float(self.loss_pair.tail(fi, fj))
        if isinstance(self.loss_pair, (Independence, FGM)) and isinstance(self.weight_pair, (Independence, FGM, Gaussian)):
            return float(_poly_expect(self.loss_pair, self.weight_pair, fi, ki, fj, kj))
        cop = self.loss_pair

        def fn(u, v):
            ti = fi * (1 + ki * (2 * u - 1) * (1 - fi))
            tj = fj * (1 + kj * (2 * v - 1) * (1 - fj))
            return cop.tail(ti, tj)
        return pair_expect(self.weight_pair, fn)

    def conditional_loss_tail(self, fi, fj, theta_i, theta_j):
        """Exact P[X_i > x_i, X_j > x_j | weights] from marginal tail levels."""
        ki, kj = self.link_i.kappa, self.link_j.kappa
        cop = self.loss_pair
        (a0, a1), (b0, b1) = self._rect(theta_i, theta_j)

        def fn(u, v):
            ti = fi * (1 + ki * (2 * u - 1) * (1 - fi))
            tj = fj * (1 + kj * (2 * v - 1) * (1 - fj))
            return cop.tail(ti, tj)
        return float(self._rect_mean(fn, (a0, a1), (b0, b1)))


def _poly_expect(loss_pair: Copula, weight_pair: Copula, fi, ki, fj, kj) -> float:
    """E over weights of the FGM/independent loss-pair tail; a polynomial in e_i, e_j."""
    kap = loss_pair.kappa if isinstance(loss_pair, FGM) else 0.0
    ti = _poly_tau(fi, ki)
    tj = _poly_tau(fj, kj)
    one_ti = np.array([1.0 - ti[0], -ti[1]])
    one_tj = np.array([1.0 - tj[0], -tj[1]])
    pi = np.polynomial.polynomial
    a = ti
    b = pi.polymul(ti, one_ti)
    c = tj
    d = pi.polymul(tj, one_tj)
    coef = np.outer(a, c)
    full = np.zeros((3, 3))
    full[:2, :2] += coef
    full += kap * np.outer(np.pad(b, (0, 3 - len(b))), np.pad(d, (0, 3 - len(d))))
    M = _fgm_pair_moments(weight_pair, 2)
    return float(np.sum(full * M))


def g_limit(pl: PairLink, theta_i: float, theta_j: float) -> float:
    return pl.g(theta_i, theta_j)


# ---------------------------------------------------------------------------
# joint model


@dataclass(frozen=True)
class JointSample:
    theta: np.ndarray   # (m, n) weights
    x: np.ndarray       # (m, n) losses
    e: np.ndarray       # (m, n) 2V - 1 of the weight uniforms
    tail: np.ndarray    # (m, n) latent loss tail uniforms

    def __len__(self):
        return self.x.shape[0]


@dataclass(frozen=True, eq=False)
class JointModel:
    losses: tuple[Distribution, ...]
    weights: tuple[Distribution, ...]
    weight_links: tuple[WeightLink, ...]
    weight_latent: LatentCopula
    loss_latent: LatentCopula

    def __post_init__(self):
        n = len(self.losses)
        if not (len(self.weights) == len(self.weight_links) == n == self.weight_latent.n == self.loss_latent.n):
            raise DependenceError("joint model components disagree on dimension")
        if n > MAX_DIM:
            raise DependenceError(f"at most {MAX_DIM} summands are supported")
        if self.weight_latent.has(ClaytonBlock):
            raise DependenceError("survival Clayton is not available among weights")
        for b in (*self.weight_latent.blocks, *self.loss_latent.blocks):
            if isinstance(b, FGMBlock):
                eps = b.violating_sign()
                if eps is not None:
                    side = "theta" if b in self.weight_latent.blocks else "X"
                    labels = ", ".join(f"{side}{i + 1}={'+' if s > 0 else '-'}1" for i, s in zip(b.members, eps))
                    raise DependenceError(f"FGM admissibility violated at sign vector ({labels})")

    @property
    def n(self) -> int:
        return len(self.losses)

    def pair_link(self, i: int, j: int) -> PairLink:
        return PairLink(i, j, self.weight_links[i], self.weight_links[j],
                        self.weight_latent.pair(i, j), self.loss_latent.pair(i, j))

    def sample_shard(self, rng: np.random.Generator, m: int) -> JointSample:
        n = self.n
        Wv = 1.0 - rng.random((m, n))
        Wx = 1.0 - rng.random((m, n))
        S = self.weight_latent.transform(Wv)
        T = self.loss_latent.transform(Wx)
        e = 1.0 - 2.0 * S
        theta = np.empty((m, n))
        x = np.empty((m, n))
        for i in range(n):
            theta[:, i] = self.weights[i]._isf(S[:, i])
            b = self.weight_links[i].kappa * e[:, i]
            s = _loss_tail_level(b, T[:, i])
            x[:, i] = self.losses[i]._isf(np.clip(s, 1e-300, 1.0))
        return JointSample(theta, x, e, T)

    def cond_loss_sf(self, i: int, t, sample: JointSample, rows=slice(None)):
        """P[X_i > t | every latent variable except loss i's own] for each row."""
        f = np.asarray(self.losses[i].sf(t), dtype=float)
        e = sample.e[rows, i]
        if f.ndim == 2:
            e = e[:, None]
        tau = f * (1.0 + self.weight_links[i].kappa * e * (1.0 - f))
        return self.loss_latent.cond_cdf(i, tau, sample.tail[rows])


def _loss_tail_level(b, t):
    # smallest root s in [0, 1] of s (1 + b (1 - s)) = t
    return 2.0 * t / ((1.0 + b) + np.sqrt(np.maximum((1.0 + b) ** 2 - 4.0 * b * t, 0.0)))


def shard_sizes(m: int) -> list[int]:
    full, rest = divmod(m, SHARD_SIZE)
    return [SHARD_SIZE] * full + ([rest] if rest else [])


def shard_rng(seed: int, k: int, stream: int = 0) -> np.random.Generator:
    key = (k,) if stream == 0 else (k, stream)
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=key))


def sample_joint(jm: JointModel, seed: int, m: int, workers: int = 1) -> JointSample:
    """Deterministic joint draw; shard-then-concatenate, independent of ``workers``."""
    if m < 1:
        raise DependenceError("sample size must be >= 1")
    sizes = shard_sizes(m)

    def run(k):
        return jm.sample_shard(shard_rng(seed, k), sizes[k])

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            parts = list(ex.map(run, range(len(sizes))))
    else:
        parts = [run(k) for k in range(len(sizes))]
    return JointSample(*(np.concatenate([getattr(p, f) for p in parts]) for f in ("theta", "x", "e", "tail")))
