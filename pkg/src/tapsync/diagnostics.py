"""Local-landscape diagnostics at a candidate TAP minimizer.

Set membership and the W2 distance are defined for the planted vector
x = 1. For a general signal the magnetization is first gauge-transformed,
``m_i -> s x_i m_i`` with the global sign ``s`` chosen so that M >= 0;
the TAP energy is invariant under this map.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.linalg
from scipy.special import ndtri

from .energy import _check_interior, amp_jacobian, bethe_hessian, f_tap, grad_tap, safe_arctanh, summary_stats
from .errors import ConvergenceError, DomainError

DEFAULT_DELTA = 0.05
DEFAULT_ETA = 0.3


@dataclass
class DiagnosticsReport:
    lambda_min_hessian: float
    spectral_radius: float
    bethe_pass_plus: bool
    bethe_pass_minus: bool
    bethe_lambda_min_plus: float
    bethe_lambda_min_minus: float
    w2_to_mu_star: float
    in_B_delta: bool
    in_D_eta: bool
    f_tap_value: float
    grad_sq_norm: float
    clamped: bool = False
    jacobian_spectrum: np.ndarray | None = field(default=None, repr=False)

    def to_dict(self, include_spectrum=False):
        d = asdict(self)
        spec = d.pop("jacobian_spectrum")
        if include_spectrum and spec is not None:
            d["jacobian_spectrum"] = [[float(z.real), float(z.imag)] for z in spec]
        return d

    def to_json(self, path, include_spectrum=False):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(include_spectrum), fh, indent=2)


# -- eigen-solvers -------------------------------------------------------------

def _as_dense(A, n=None):
    if callable(A):
        if n is None:
            raise DomainError("n is required for a matvec operator")
        return np.column_stack([A(e) for e in np.eye(n)])
    return np.asarray(A, dtype=float)


def min_eig_symmetric(A, n=None, sym_tol=1e-10):
    """Smallest eigenpair of a symmetric matrix (or matvec callable)."""
    A = _as_dense(A, n)
    scale = max(1.0, float(np.max(np.abs(A))))
    if float(np.max(np.abs(A - A.T))) > sym_tol * scale:
        raise DomainError("operator is not symmetric")
    A = (A + A.T) / 2
    w, V = scipy.linalg.eigh(A, subset_by_index=[0, 0])
    theta, v = float(w[0]), V[:, 0]
    resid = float(np.linalg.norm(A @ v - theta * v))
    if resid > 1e-8 * scale * np.linalg.norm(v):
        raise ConvergenceError("eigenpair residual too large", residual=resid)
    return theta, v


def real_schur_eigenvalues(A):
    """Eigenvalues read off the quasi-triangular factor of a real Schur form."""
    T, _ = scipy.linalg.schur(np.asarray(A, dtype=float), output="real")
    n = T.shape[0]
    out = np.empty(n, dtype=complex)
    i = 0
    while i < n:
        if i + 1 < n and T[i + 1, i] != 0.0:
            a, b, c, d = T[i, i], T[i, i + 1], T[i + 1, i], T[i + 1, i + 1]
            tr, det = (a + d) / 2, a * d - b * c
            disc = complex(tr * tr - det)
            root = np.sqrt(disc)
            out[i], out[i + 1] = tr + root, tr - root
            i += 2
        else:
            out[i] = T[i, i]
            i += 1
    return out


def spectral_radius_power(B, iters=2000, seed=0):
    """Crude ``||B^k v||^(1/k)`` radius estimate; a cross-check only."""
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(B.shape[0])
    v /= np.linalg.norm(v)
    log_growth = 0.0
    burn = iters // 2
    for k in range(iters):
        v = B @ v
        nv = np.linalg.norm(v)
        if nv == 0:
            return 0.0
        v /= nv
        if k >= burn:
            log_growth += math.log(nv)
    return math.exp(log_growth / (iters - burn))


def jacobian_spectrum(inst, m_star, m_minus=None):
    """All 2n eigenvalues of dT_AMP(m, m_-) (m_- defaults to m) and the radius."""
    m_star = _check_interior(m_star)
    B = amp_jacobian(inst, m_star, m_star if m_minus is None else m_minus)
    eig = real_schur_eigenvalues(B)
    return eig, float(np.max(np.abs(eig)))


@dataclass(frozen=True)
class BetheCheck:
    pass_plus: bool
    pass_minus: bool
    lambda_min_plus: float
    lambda_min_minus: float


def bethe_stability_check(inst, m, r=1.0):
    if not 0 < r <= 1:
        raise DomainError("r must lie in (0, 1]")
    lp, _ = min_eig_symmetric(bethe_hessian(inst, m, r, +1))
    lm, _ = min_eig_symmetric(bethe_hessian(inst, m, r, -1))
    return BetheCheck(lp > 0, lm > 0, lp, lm)


# -- distributional checks --------------------------------------------------------

def gauge(m, x=None):
    """Map m to the x = 1 frame with nonnegative overlap."""
    m = np.asarray(m, dtype=float)
    if x is not None:
        m = m * np.asarray(x, dtype=float)
    return -m if m.sum() < 0 else m


def w2_to_quantiles(samples, quantile_fn):
    """Empirical W2 against a target law given by its quantile function,
    coupling sorted samples with target quantiles at (i - 1/2)/n."""
    s = np.sort(np.asarray(samples, dtype=float))
    n = len(s)
    u = (np.arange(1, n + 1) - 0.5) / n
    return float(np.sqrt(np.mean((s - quantile_fn(u)) ** 2)))


def w2_empirical(a, b):
    """W2 between two equal-size empirical laws (sorted coupling)."""
    a, b = np.sort(np.asarray(a, dtype=float)), np.sort(np.asarray(b, dtype=float))
    if a.shape != b.shape:
        raise DomainError("two-sample W2 needs equal sizes")
    return float(np.sqrt(np.mean((a - b) ** 2)))


def w2_arctanh(m, constants, x=None):
    """W2 between the empirical law of arctanh(m_i) and N(lam^2 q*, lam^2 q*)."""
    h, _ = safe_arctanh(gauge(_check_interior(m), x))
    s2 = constants.lam**2 * constants.q_star
    return w2_to_quantiles(h, lambda u: s2 + math.sqrt(s2) * ndtri(u))


def set_membership(m, constants, delta=DEFAULT_DELTA, eta=DEFAULT_ETA, x=None):
    """(m in B_delta, m in D_eta)."""
    mg = gauge(_check_interior(m), x)
    st = summary_stats(mg)
    q, h = constants.q_star, constants.h_star
    in_b = max(abs(st.Q - q), abs(st.M - q), abs(st.H_avg - h)) < delta
    in_d = w2_arctanh(mg, constants) < eta
    return bool(in_b), bool(in_d)


def diagnose(inst, m, constants, delta=DEFAULT_DELTA, eta=DEFAULT_ETA, spectrum=True, use_signal=True):
    """Full DiagnosticsReport at ``m``."""
    m = _check_interior(m)
    x = inst.x if use_signal else None
    _, clamped = safe_arctanh(m)
    lam_min, _ = min_eig_symmetric(bethe_hessian(inst, m, 1.0, +1))
    lm_minus, _ = min_eig_symmetric(bethe_hessian(inst, m, 1.0, -1))
    eig, rho = jacobian_spectrum(inst, m) if spectrum else (None, float("nan"))
    g = grad_tap(inst, m)
    in_b, in_d = set_membership(m, constants, delta, eta, x=x)
    return DiagnosticsReport(
        lambda_min_hessian=lam_min,
        spectral_radius=rho,
        bethe_pass_plus=lam_min > 0,
        bethe_pass_minus=lm_minus > 0,
        bethe_lambda_min_plus=lam_min,
        bethe_lambda_min_minus=lm_minus,
        w2_to_mu_star=w2_arctanh(m, constants, x=x),
        in_B_delta=in_b,
        in_D_eta=in_d,
        f_tap_value=f_tap(inst, m),
        grad_sq_norm=float(g @ g) / inst.n,
        clamped=clamped,
        jacobian_spectrum=eig,
    )
