"""Deterministic variational lower bounds E_lambda and bar E_lambda(q, phi).

The inner problem ``sup_m lam sqrt(q) g m + gamma m^2/2 + tau m + nu h(m)``
is solved in the pre-activation variable ``u = arctanh(m)``, where the
stationarity condition reads ``a + gamma tanh(u) - nu u = 0`` with
``a = lam sqrt(q) g + tau``; this keeps every iterate finite even when the
maximizer sits within rounding distance of +-1.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass

import numpy as np

from .errors import ConvergenceError, DomainError
from .scalar import default_quadrature, log2cosh

log = logging.getLogger(__name__)

GAMMA_MAX = 1.0 - 1e-3
GAMMA_MIN = -1e3


def _entropy_of_u(u):
    # h(tanh u) = log 2cosh(u) - u tanh(u)
    return log2cosh(u) - u * np.tanh(u)


def _solve_stationary(a, gamma, nu, u0=None, tol=1e-14, max_iter=200):
    """Root of a + gamma tanh(u) - nu u by bracketed Newton (vectorized)."""
    a = np.asarray(a, dtype=float)
    gamma = np.broadcast_to(np.asarray(gamma, dtype=float), a.shape)
    spread = np.abs(gamma) / nu
    lo = a / nu - spread
    hi = a / nu + spread
    u = a / nu if u0 is None else np.clip(u0, lo, hi)
    scale = np.maximum(np.maximum(1.0, np.abs(a)), np.abs(gamma))
    f_prev = np.full(a.shape, np.inf)
    for _ in range(max_iter):
        t = np.tanh(u)
        f = a + gamma * t - nu * u
        done = np.abs(f) <= tol * scale
        if np.all(done):
            return u
        # f is strictly decreasing in u
        lo = np.where(f > 0, u, lo)
        hi = np.where(f < 0, u, hi)
        fp = gamma * (1 - t * t) - nu
        step = u - f / fp
        # bisect when Newton leaves the bracket or fails to halve |f|
        bad = ~((step > lo) & (step < hi)) | (np.abs(f) > 0.5 * f_prev)
        f_prev = np.abs(f)
        step = np.where(bad, 0.5 * (lo + hi), step)
        u = np.where(done, u, step)
        if np.all((hi - lo) <= 4 * np.finfo(float).eps * np.maximum(1.0, np.abs(u))):
            return u
    raise ConvergenceError("inner stationarity solve did not converge",
                           residual=float(np.max(np.abs(a + gamma * np.tanh(u) - nu * u))))


def _inner_value(coef_g, u, gamma, tau, nu):
    m = np.tanh(u)
    return coef_g * m + gamma * m * m / 2 + tau * m + nu * _entropy_of_u(u)


def inner_sup_m(g, q, gamma, tau, nu, lam):
    """Maximizer and maximum of lam sqrt(q) g m + gamma m^2/2 + tau m + nu h(m) over (-1, 1)."""
    if not q > 0:
        raise DomainError("q must be positive")
    if not nu > max(gamma, 0.0):
        raise DomainError("need nu > max(gamma, 0) for strict concavity")
    coef = lam * math.sqrt(q) * np.asarray(g, dtype=float)
    u = _solve_stationary(coef + tau, gamma, nu)
    val = _inner_value(coef, u, gamma, tau, nu)
    m = np.tanh(u)
    if np.ndim(m) == 0:
        return float(m), float(val)
    return m, val


def E_lambda(q, phi, h, gamma, tau, nu, lam, quad=None):
    """E_lambda(q, phi, h; gamma, tau, nu)."""
    quad = quad or default_quadrature()
    if not q > 0:
        raise DomainError("q must be positive")
    if not nu > max(gamma, 0.0):
        raise DomainError("need nu > max(gamma, 0) for strict concavity")
    coef = lam * math.sqrt(q) * quad.nodes
    u = _solve_stationary(coef + tau, gamma, nu)
    sup_mean = float(quad.weights @ _inner_value(coef, u, gamma, tau, nu))
    return (-(lam**2 / 2) * phi**2 - (lam**2 / 4) * (1 - q) ** 2 - h
            + q * gamma / 2 + phi * tau + nu * h - sup_mean)


# -- bar E(q, phi) = sup_gamma E_lambda(q, phi; gamma) with nu = 1, tau = lam^2 phi --

@dataclass
class _Batch:
    """Vectorized evaluation of E(q, phi; gamma) over many (q, phi) cells."""

    q: np.ndarray
    phi: np.ndarray
    lam: float
    quad: object

    def __post_init__(self):
        self.coef = self.lam * np.sqrt(self.q)[:, None] * self.quad.nodes[None, :]
        self.tau = (self.lam**2 * self.phi)[:, None]
        self.base = (self.lam**2 / 2) * self.phi**2 - (self.lam**2 / 4) * (1 - self.q) ** 2
        self.u = None

    def solve(self, gamma, warm=True):
        g = np.asarray(gamma, dtype=float)[:, None]
        u = _solve_stationary(self.coef + self.tau, g, 1.0, u0=self.u if warm else None)
        self.u = u
        return u

    def value(self, gamma, u=None):
        gamma = np.asarray(gamma, dtype=float)
        u = self.solve(gamma) if u is None else u
        inner = _inner_value(self.coef, u, gamma[:, None], self.tau, 1.0) @ self.quad.weights
        return self.base + self.q * gamma / 2 - inner

    def slope(self, gamma, u=None):
        """d/dgamma and d^2/dgamma^2 of E(q, phi; gamma) (envelope theorem)."""
        gamma = np.asarray(gamma, dtype=float)
        u = self.solve(gamma) if u is None else u
        m = np.tanh(u)
        m2 = m * m
        d1 = self.q / 2 - (m2 @ self.quad.weights) / 2
        with np.errstate(over="ignore"):
            curv = np.cosh(u) ** 2 - gamma[:, None]
        d2 = -((m2 / curv) @ self.quad.weights)
        return d1, d2


def _sup_gamma_newton(batch, tol=1e-13, max_iter=200):
    """Root of the gamma-derivative by Newton safeguarded with bisection.

    Returns (gamma_opt, value, boundary_hit mask).
    """
    C = batch.q.shape[0]
    hi = np.full(C, GAMMA_MAX)
    d_hi, _ = batch.slope(hi)
    at_cap = d_hi >= 0
    lo = np.full(C, GAMMA_MIN)
    d_lo, _ = batch.slope(lo)
    expand = 0
    while np.any((d_lo <= 0) & ~at_cap):
        lo = np.where((d_lo <= 0) & ~at_cap, lo * 10, lo)
        batch.u = None
        d_lo, _ = batch.slope(lo)
        expand += 1
        if expand > 6:
            raise ConvergenceError("could not bracket the optimal gamma from below")
    if expand:
        log.info("gamma lower bracket expanded %d times", expand)
    # start from gamma = 0 where admissible (it is optimal at (q*, q*))
    g = np.where(at_cap, hi, np.clip(0.0, lo, hi))
    batch.u = None
    for _ in range(max_iter):
        d1, d2 = batch.slope(g)
        d1 = np.where(at_cap, 0.0, d1)
        if np.all(np.abs(d1) <= tol):
            break
        lo = np.where(d1 > 0, g, lo)
        hi = np.where(d1 < 0, g, hi)
        with np.errstate(divide="ignore", invalid="ignore"):
            step = g - d1 / d2
        bad = ~((step > lo) & (step < hi)) | ~np.isfinite(step)
        g = np.where(np.abs(d1) <= tol, g, np.where(bad, 0.5 * (lo + hi), step))
        if np.all((hi - lo) <= 1e-15 * np.maximum(1.0, np.abs(g)) ):
            break
    else:
        raise ConvergenceError("gamma search did not converge")
    u = batch.solve(g)
    return g, batch.value(g, u), at_cap


def _sup_gamma_golden(batch, lo=GAMMA_MIN, hi=GAMMA_MAX, tol=1e-10, max_iter=300):
    """Golden-section maximization of the (concave) value in gamma."""
    C = batch.q.shape[0]
    a = np.full(C, float(lo))
    b = np.full(C, float(hi))
    r = (math.sqrt(5) - 1) / 2
    c = b - r * (b - a)
    d = a + r * (b - a)
    batch.u = None
    fc = batch.value(c)
    batch.u = None
    fd = batch.value(d)
    for _ in range(max_iter):
        if np.all(b - a <= tol * np.maximum(1.0, np.abs(a))):
            break
        left = fc > fd
        b = np.where(left, d, b)
        a = np.where(left, a, c)
        nc = np.where(left, b - r * (b - a), d)
        nd = np.where(left, c, a + r * (b - a))
        new_pts = np.where(left, nc, nd)
        batch.u = None
        fnew = batch.value(new_pts)
        fc, fd = np.where(left, fnew, fd), np.where(left, fc, fnew)
        c, d = nc, nd
    g = (a + b) / 2
    batch.u = None
    return g, batch.value(g)


def _feasible(q, phi):
    q = np.asarray(q, dtype=float)
    phi = np.asarray(phi, dtype=float)
    return (q > 0) & (q < 1) & (np.abs(phi) < np.sqrt(np.clip(q, 0, None)))


def bar_E_many(q, phi, lam, quad=None, method="newton"):
    """Vectorized bar E over arrays of feasible (q, phi); returns (values, gammas, capped)."""
    quad = quad or default_quadrature()
    q = np.atleast_1d(np.asarray(q, dtype=float))
    phi = np.atleast_1d(np.asarray(phi, dtype=float))
    if not np.all(_feasible(q, phi)):
        raise DomainError("infeasible (q, phi): need 0 < q < 1 and |phi| < sqrt(q)")
    batch = _Batch(q, phi, lam, quad)
    if method == "golden":
        g, val = _sup_gamma_golden(batch)
        return val, g, np.zeros(len(q), dtype=bool)
    try:
        g, val, capped = _sup_gamma_newton(batch)
    except ConvergenceError:
        log.warning("derivative search failed; falling back to golden section")
        g, val = _sup_gamma_golden(batch)
        capped = np.zeros(len(q), dtype=bool)
    if np.any(capped):
        log.info("%d cell(s) attain the sup at the gamma cap %.4g", int(capped.sum()), GAMMA_MAX)
    return val, g, capped


def bar_E(q, phi, lam, quad=None, method="newton"):
    """sup over gamma <= 1 - 1e-3 of E_lambda(q, phi; gamma) with nu = 1, tau = lam^2 phi."""
    val, _, _ = bar_E_many([q], [phi], lam, quad, method)
    return float(val[0])


@dataclass
class LandscapeGrid:
    lam: float
    q_values: np.ndarray
    phi_values: np.ndarray
    values: np.ndarray  # shape (nq, nphi); NaN where |phi| >= sqrt(q)
    gammas: np.ndarray
    capped: np.ndarray
    argmin: tuple

    @property
    def mask(self):
        return ~np.isfinite(self.values)

    def to_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["q", "phi", "value", "gamma", "gamma_capped"])
            for i, q in enumerate(self.q_values):
                for j, p in enumerate(self.phi_values):
                    if np.isfinite(self.values[i, j]):
                        w.writerow([repr(float(q)), repr(float(p)), repr(float(self.values[i, j])),
                                    repr(float(self.gammas[i, j])), int(self.capped[i, j])])


def landscape_grid(lam, nq=101, nphi=101, quad=None, q_range=(0.01, 0.99), phi_range=(-0.99, 0.99),
                   chunk=2048):
    """bar E on a (q, phi) grid.

    bar E is even in phi (flip g and m), so the minimizer comes in a pair
    (q, +-phi); ``argmin`` reports the representative with phi >= 0.
    """
    if nq < 2 or nphi < 2:
        raise DomainError("grid needs at least 2 points per axis")
    quad = quad or default_quadrature()
    qs = np.linspace(*q_range, nq)
    ps = np.linspace(*phi_range, nphi)
    Qg, Pg = np.meshgrid(qs, ps, indexing="ij")
    feas = _feasible(Qg, Pg)
    vals = np.full(Qg.shape, np.nan)
    gams = np.full(Qg.shape, np.nan)
    caps = np.zeros(Qg.shape, dtype=bool)
    idx = np.flatnonzero(feas)
    for start in range(0, len(idx), chunk):
        sel = idx[start:start + chunk]
        v, g, c = bar_E_many(Qg.flat[sel], Pg.flat[sel], lam, quad)
        vals.flat[sel], gams.flat[sel], caps.flat[sel] = v, g, c
    half = np.where(Pg >= 0, vals, np.inf)
    half = np.where(np.isfinite(half), half, np.inf)
    i, j = np.unravel_index(np.argmin(half), half.shape)
    return LandscapeGrid(float(lam), qs, ps, vals, gams, caps, (float(qs[i]), float(ps[j])))
