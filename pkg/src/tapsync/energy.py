"""TAP and naive mean-field free energies, their derivatives, Bethe Hessians
and the AMP Jacobian.

Gradients and Hessians are returned renormalized by n, i.e. ``g = n grad F``
and ``H = n hess F``, which keeps them O(1) per coordinate.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import xlogy

from .errors import DomainError

CLAMP = 1.0 - 1e-12


@dataclass(frozen=True)
class SummaryStats:
    Q: float
    M: float
    H_avg: float
    A: float


def binary_entropy(m):
    """-(1+m)/2 log((1+m)/2) - (1-m)/2 log((1-m)/2), in nats; 0 at m = +-1."""
    m = np.asarray(m, dtype=float)
    if np.any(np.abs(m) > 1):
        raise DomainError("binary entropy needs |m| <= 1")
    p, r = (1 + m) / 2, (1 - m) / 2
    out = -xlogy(p, p) - xlogy(r, r)
    return float(out) if out.ndim == 0 else out


def _check_interior(m):
    m = np.asarray(m, dtype=float)
    if not np.all(np.isfinite(m)):
        raise DomainError("non-finite magnetization")
    if np.any(np.abs(m) >= 1):
        raise DomainError("magnetization must lie in the open cube (-1, 1)^n")
    return m


def safe_arctanh(m):
    """arctanh after clamping to |m| <= 1 - 1e-12; returns (h, clamped)."""
    m = _check_interior(m)
    clamped = bool(np.any(np.abs(m) > CLAMP))
    return np.arctanh(np.clip(m, -CLAMP, CLAMP)), clamped


def Q_of(m):
    return float(np.dot(m, m)) / len(m)


def summary_stats(m, x=None):
    """Q, M, mean entropy and mean m*arctanh(m). M is taken against ``x``
    (all-ones if omitted)."""
    m = _check_interior(m)
    n = len(m)
    h, _ = safe_arctanh(m)
    M = float(np.mean(m)) if x is None else float(np.dot(x, m)) / n
    return SummaryStats(Q=Q_of(m), M=M, H_avg=float(np.mean(binary_entropy(m))), A=float(np.mean(m * h)))


def f_tap(inst, m):
    m = _check_interior(m)
    n, lam = inst.n, inst.lam
    Q = Q_of(m)
    return (-(lam / (2 * n)) * float(m @ (inst.Y @ m))
            - float(np.sum(binary_entropy(m))) / n
            - (lam**2 / 4) * (1 - Q) ** 2)


def f_vb(inst, m):
    m = _check_interior(m)
    n = inst.n
    return -float(np.sum(binary_entropy(m))) / n - (inst.lam / (2 * n)) * float(m @ (inst.Y @ m))


def grad_tap(inst, m, h=None):
    """g(m) = -lam Y m + arctanh(m) + lam^2 (1 - Q(m)) m.

    Pass ``h = arctanh(m)`` when it is known exactly (solvers carry it).
    """
    m = _check_interior(m)
    if h is None:
        h, _ = safe_arctanh(m)
    lam = inst.lam
    return -lam * (inst.Y @ m) + h + lam**2 * (1 - Q_of(m)) * m


def grad_vb(inst, m, h=None):
    m = _check_interior(m)
    if h is None:
        h, _ = safe_arctanh(m)
    return -inst.lam * (inst.Y @ m) + h


def hess_matvec(inst, m, v):
    """H(m) v with H = -lam Y + diag(1/(1-m^2)) + lam^2 (1-Q) I - (2 lam^2/n) m m^T."""
    m = _check_interior(m)
    v = np.asarray(v, dtype=float)
    lam, n = inst.lam, inst.n
    return (-lam * (inst.Y @ v) + v / (1 - m * m) + lam**2 * (1 - Q_of(m)) * v
            - (2 * lam**2 / n) * m * float(m @ v))


def hessian(inst, m):
    m = _check_interior(m)
    return bethe_hessian(inst, m, 1.0, +1)


def bethe_hessian(inst, m, r, sign=+1):
    """sign*r*(-lam Y - (2 lam^2/n) m m^T) + lam^2 (1-Q) I + r^2 diag(1/(1-m^2))."""
    m = _check_interior(m)
    if not r > 0:
        raise DomainError("r must be positive")
    if sign not in (1, -1):
        raise DomainError("sign must be +1 or -1")
    lam, n = inst.lam, inst.n
    A = (sign * r) * (-lam * inst.Y - (2 * lam**2 / n) * np.outer(m, m))
    A[np.diag_indices(n)] += lam**2 * (1 - Q_of(m)) + r * r / (1 - m * m)
    return (A + A.T) / 2


def amp_map(inst, m, m_minus):
    """T_AMP(m, m_-) = (tanh(lam Y m - lam^2 (1-Q(m)) m_-), m)."""
    lam = inst.lam
    h_plus = lam * (inst.Y @ m) - lam**2 * (1 - Q_of(m)) * m_minus
    return np.tanh(h_plus), np.array(m, dtype=float)


def amp_jacobian(inst, m, m_minus):
    """Dense 2n x 2n Jacobian of T_AMP at (m, m_-)."""
    m = _check_interior(m)
    m_minus = _check_interior(m_minus)
    lam, n = inst.lam, inst.n
    m_plus, _ = amp_map(inst, m, m_minus)
    d = 1 - m_plus * m_plus
    J = np.zeros((2 * n, 2 * n))
    J[:n, :n] = d[:, None] * (lam * inst.Y + (2 * lam**2 / n) * np.outer(m_minus, m))
    J[:n, n:] = np.diag(-d * lam**2 * (1 - Q_of(m)))
    J[n:, :n] = np.eye(n)
    return J
