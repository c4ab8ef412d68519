"""Deterministic scalar quantities of the Z2 TAP theory.

All expectations are over G ~ N(0, 1) and use Gauss-Hermite quadrature in
the probabilists' normalization. For lam > 1, q_star is the nonzero fixed
point of ``q -> E tanh(lam^2 q + lam sqrt(q) G)^2`` and mu_star is the law
of ``tanh(lam^2 q_star + lam sqrt(q_star) G)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy.special import ndtri, roots_hermitenorm

from .errors import ConvergenceError, DomainError

DEFAULT_NODES = 201


@dataclass(frozen=True, eq=False)
class GaussQuadrature:
    """Nodes and weights with ``sum(w * f(x)) ~= E f(G)``, G ~ N(0, 1)."""

    nodes: np.ndarray
    weights: np.ndarray

    @classmethod
    def standard_normal(cls, n_nodes=DEFAULT_NODES):
        return _quadrature(int(n_nodes))

    def expect(self, f):
        return gauss_expectation(f, self)

    def self_check(self, f, tol=1e-10):
        """Compare against the doubled-node rule; returns the discrepancy."""
        doubled = GaussQuadrature.standard_normal(2 * len(self.nodes))
        err = abs(self.expect(f) - doubled.expect(f))
        if err > tol:
            raise ConvergenceError(f"quadrature self-check failed: {err:.3e}", residual=err)
        return err


@lru_cache(maxsize=16)
def _quadrature(n_nodes):
    x, w = roots_hermitenorm(n_nodes)
    w = w / math.sqrt(2 * math.pi)
    x.setflags(write=False)
    w.setflags(write=False)
    return GaussQuadrature(x, w)


def default_quadrature():
    return GaussQuadrature.standard_normal(DEFAULT_NODES)


def quadrature_for(lam, q, tol=1e-10, max_nodes=DEFAULT_NODES * 16):
    """Smallest doubling of the default rule that passes the doubled-node
    self-check for the integrands at (lam, q).

    For large lam the integrands have complex poles close to the real axis
    and 201 nodes are no longer accurate to 1e-10.
    """
    n_nodes = DEFAULT_NODES
    checks = (lambda g: np.tanh(_field(lam, q, g)) ** 2, lambda g: np.tanh(_field(lam, q, g)) ** 4,
              lambda g: log2cosh(_field(lam, q, g)))
    while True:
        quad = GaussQuadrature.standard_normal(n_nodes)
        try:
            for f in checks:
                quad.self_check(f, tol)
            return quad
        except ConvergenceError:
            if 2 * n_nodes > max_nodes:
                raise
            n_nodes *= 2


def gauss_expectation(f, quad=None):
    """E f(G) by quadrature. ``f`` must be vectorized over the node array."""
    quad = quad or default_quadrature()
    vals = np.asarray(f(quad.nodes), dtype=float)
    if not np.all(np.isfinite(vals)):
        raise DomainError("integrand is not finite at every quadrature node")
    return float(np.dot(quad.weights, vals))


def log2cosh(x):
    """log(2 cosh x) without overflow."""
    ax = np.abs(x)
    return ax + np.log1p(np.exp(-2.0 * ax))


def _tanh_sq_mean(gamma, quad):
    if gamma == 0:
        return 0.0
    s = math.sqrt(gamma)
    return gauss_expectation(lambda g: np.tanh(gamma + s * g) ** 2, quad)


def _field(lam, q, g):
    return lam * lam * q + lam * math.sqrt(q) * g


@dataclass(frozen=True)
class ScalarConstants:
    lam: float
    q_star: float
    h_star: float
    e_star: float
    b_star: float
    gammas: tuple = field(default=())

    def as_dict(self):
        return {
            "lambda": self.lam, "q_star": self.q_star, "h_star": self.h_star,
            "e_star": self.e_star, "b_star": self.b_star, "gammas": list(self.gammas),
        }


@dataclass(frozen=True)
class StateEvolution:
    lam: float
    gammas: tuple


def fixed_point_map(lam, q, quad=None):
    quad = quad or default_quadrature()
    return _tanh_sq_mean(lam * lam * q, quad)


def solve_q_star(lam, tol=1e-12, quad=None, damping=0.5, max_iter=100_000):
    """Nonzero fixed point of the q-map by damped iteration; 0 for lam <= 1."""
    if not tol > 0:
        raise DomainError("tol must be positive")
    if not lam > 0:
        raise DomainError("lambda must be positive")
    if lam <= 1:
        return 0.0
    adaptive = quad is None
    quad = quad or default_quadrature()
    q = max(1.0 - 1.0 / lam**2, 1e-3)
    resid = float("inf")
    while True:
        for _ in range(max_iter):
            tq = fixed_point_map(lam, q, quad)
            resid = abs(tq - q)
            if resid < tol:
                break
            q = (1 - damping) * q + damping * tq
        else:
            raise ConvergenceError(f"q_star({lam}) did not converge", residual=resid)
        if not adaptive:
            return tq
        better = quadrature_for(lam, tq)
        if better is quad:
            return tq
        quad, q = better, tq


def compute_h_star(lam, q_star, quad=None):
    if not 0 <= q_star < 1:
        raise DomainError("q_star must lie in [0, 1)")
    if q_star == 0:
        return math.log(2.0)
    return gauss_expectation(lambda g: log2cosh(_field(lam, q_star, g)), quad) - lam * lam * q_star


def compute_e_star(lam, q_star, quad=None):
    if not 0 <= q_star < 1:
        raise DomainError("q_star must lie in [0, 1)")
    tail = gauss_expectation(lambda g: log2cosh(_field(lam, q_star, g)), quad)
    return -(lam * lam / 4) * (1 - 2 * q_star - q_star**2) - tail


def compute_b_star(lam, q_star, quad=None):
    if not 0 <= q_star < 1:
        raise DomainError("q_star must lie in [0, 1)")
    if q_star == 0:
        return 0.0
    return gauss_expectation(lambda g: np.tanh(_field(lam, q_star, g)) ** 4, quad)


def state_evolution(lam, k_max, quad=None):
    """gamma_0 = lam^2 - 1, gamma_{k+1} = lam^2 E tanh(gamma_k + sqrt(gamma_k) G)^2."""
    if not lam > 1:
        raise DomainError("state evolution needs lambda > 1 (gamma_0 = lam^2 - 1 > 0)")
    if k_max < 1:
        raise DomainError("k_max must be >= 1")
    quad = quad or default_quadrature()
    gammas = [lam * lam - 1.0]
    for _ in range(int(k_max)):
        gammas.append(lam * lam * _tanh_sq_mean(gammas[-1], quad))
    return StateEvolution(lam=float(lam), gammas=tuple(gammas))


def mu_star_quantile(lam, q_star, u):
    """Quantile function of mu_star (vectorized over ``u``)."""
    u_arr = np.asarray(u, dtype=float)
    if np.any((u_arr <= 0) | (u_arr >= 1)):
        raise DomainError("quantile level must lie in (0, 1)")
    out = np.tanh(lam * lam * q_star + lam * math.sqrt(q_star) * ndtri(u_arr))
    return float(out) if out.ndim == 0 else out


def limiting_risks(lam, q_star=None):
    """Limiting matrix MSE (Bayes risk) and per-coordinate vector MSE."""
    if not lam > 0:
        raise DomainError("lambda must be positive")
    q = solve_q_star(lam) if q_star is None else q_star
    if lam <= 1:
        return {"matrix_mse": 1.0, "vector_mse": 1.0}
    return {"matrix_mse": 1.0 - q * q, "vector_mse": 1.0 - q}


def scalar_constants(lam, k_max=0, quad=None, tol=1e-12):
    """All scalar constants at ``lam``. Without an explicit ``quad`` the node
    count is raised until the doubled-node self-check passes at q*."""
    q = solve_q_star(lam, tol=tol, quad=quad)
    if quad is None:
        quad = quadrature_for(lam, q) if q > 0 else default_quadrature()
    gammas = state_evolution(lam, k_max, quad).gammas if (k_max and lam > 1) else ()
    return ScalarConstants(
        lam=float(lam), q_star=q,
        h_star=compute_h_star(lam, q, quad), e_star=compute_e_star(lam, q, quad),
        b_star=compute_b_star(lam, q, quad), gammas=gammas,
    )
