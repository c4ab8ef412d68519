"""Spectral initialization, AMP and natural-gradient (mirror descent) solvers.

Every solver carries the pre-activation ``h`` as primary state so that
``arctanh(m) == h`` exactly and the gradient never sees a clamped arctanh.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
import scipy.linalg

from .energy import Q_of, binary_entropy
from .errors import ConvergenceError, DomainError

log = logging.getLogger(__name__)

# period-2 detector: ||m^k - m^{k-2}||^2/n tiny while ||m^k - m^{k-1}||^2/n is not
OSC_PERIOD2_TOL = 1e-10
OSC_STEP_TOL = 1e-4
OSC_WINDOW = 50


class Method(str, Enum):
    AMP = "amp"
    NGD = "ngd"
    NGD_VB = "ngd-vb"


class Status(str, Enum):
    CONVERGED = "Converged"
    MAX_ITERS = "MaxIters"
    OSCILLATING = "Oscillating"


@dataclass(frozen=True)
class SolverConfig:
    method: Method = Method.AMP
    eta: float = 0.1
    max_iters: int = 1000
    grad_tol: float = 1e-10
    residual_tol: float = 1e-4
    record_every_after: int = 1000
    stop_on_grad: bool = True
    stop_on_residual: bool = True

    def __post_init__(self):
        object.__setattr__(self, "method", Method(self.method))
        if self.max_iters < 1:
            raise DomainError("max_iters must be >= 1")
        if not (self.grad_tol > 0 and self.residual_tol > 0):
            raise DomainError("tolerances must be positive")
        if self.method is not Method.AMP and not 0 < self.eta <= 1:
            raise DomainError("eta must lie in (0, 1]")


@dataclass(frozen=True)
class MagnetizationState:
    h: np.ndarray
    m: np.ndarray

    @classmethod
    def from_h(cls, h):
        h = np.asarray(h, dtype=float)
        return cls(h=h, m=np.tanh(h))


@dataclass
class TraceRecord:
    k: int
    f_tap: float
    grad_sq: float
    Q: float
    M: float
    overlap: float
    residual: float | None = None


@dataclass
class SolverTrace:
    records: list = field(default_factory=list)
    status: Status = Status.MAX_ITERS
    iterations: int = 0

    COLUMNS = ("k", "f_tap", "grad_sq", "Q", "M", "overlap", "residual")

    def column(self, name):
        return np.array([np.nan if getattr(r, name) is None else getattr(r, name) for r in self.records])

    def to_csv(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(",".join(self.COLUMNS) + "\n")
            for r in self.records:
                row = [r.k, r.f_tap, r.grad_sq, r.Q, r.M, r.overlap, r.residual]
                fh.write(",".join("" if v is None else repr(v) if isinstance(v, float) else str(v) for v in row) + "\n")


# -- building blocks ---------------------------------------------------------

def top_eigenpair(Y):
    """Largest eigenvalue/eigenvector of a symmetric matrix (dense LAPACK)."""
    n = Y.shape[0]
    w, V = scipy.linalg.eigh(Y, subset_by_index=[n - 1, n - 1])
    return float(w[0]), V[:, 0]


def power_iteration(A, v0, tol=1e-10, max_iter=100_000):
    """Dominant eigenpair of a symmetric positive semi-definite operator.

    ``A`` is a matrix or a matvec callable. Stops when the Rayleigh residual
    ``||Av - theta v|| / ||v||`` falls below ``tol``.
    """
    apply = A if callable(A) else (lambda v: A @ v)
    v = np.asarray(v0, dtype=float)
    v = v / np.linalg.norm(v)
    resid = np.inf
    for _ in range(max_iter):
        Av = apply(v)
        theta = float(v @ Av)
        resid = float(np.linalg.norm(Av - theta * v))
        if resid <= tol:
            return theta, v
        v = Av / np.linalg.norm(Av)
    raise ConvergenceError("power iteration did not converge", residual=resid)


SPECTRAL_MEMORY = ("literal", "state-evolution")


def spectral_init(inst, memory="literal"):
    """h0 along the top eigenvector of Y with ||h0||^2 = n lam^2 (lam^2 - 1).

    ``memory="literal"`` sets m_{-1} = lam h0. ``"state-evolution"`` uses
    m_{-1} = h0 / lam instead, which removes the large transient of the first
    AMP steps; NGD ignores m_{-1} either way.
    """
    lam, n = inst.lam, inst.n
    if not lam > 1:
        raise DomainError("spectral initialization needs lambda > 1")
    if memory not in SPECTRAL_MEMORY:
        raise DomainError(f"memory must be one of {SPECTRAL_MEMORY}")
    _, v = top_eigenpair(inst.Y)
    # deterministic sign: largest-magnitude coordinate positive
    if v[np.argmax(np.abs(v))] < 0:
        v = -v
    h0 = v * (math.sqrt(n * lam**2 * (lam**2 - 1)) / np.linalg.norm(v))
    return MagnetizationState.from_h(h0), (lam * h0 if memory == "literal" else h0 / lam)


def amp_step(inst, m, m_minus):
    """One AMP step; returns (h_plus, m_plus). m_minus may lie outside the cube."""
    m = np.asarray(m, dtype=float)
    m_minus = np.asarray(m_minus, dtype=float)
    if not (np.all(np.isfinite(m)) and np.all(np.isfinite(m_minus))):
        raise DomainError("non-finite AMP input")
    lam = inst.lam
    h_plus = lam * (inst.Y @ m) - lam**2 * (1 - Q_of(m)) * m_minus
    return h_plus, np.tanh(h_plus)


def ngd_step(inst, h, eta, vb=False):
    """h <- (1 - eta) h + eta (lam Y m - lam^2 (1 - Q) m), m = tanh h.

    With ``vb=True`` the Onsager correction is dropped (mean-field VB energy).
    """
    h = np.asarray(h, dtype=float)
    if not np.all(np.isfinite(h)):
        raise DomainError("non-finite NGD input")
    if not 0 < eta <= 1:
        raise DomainError("eta must lie in (0, 1]")
    m = np.tanh(h)
    lam = inst.lam
    target = lam * (inst.Y @ m)
    if not vb:
        target = target - lam**2 * (1 - Q_of(m)) * m
    return (1 - eta) * h + eta * target


def align_sign(m, ref):
    """Sign s minimizing ||m - s ref||^2 and the residual min_s ||m - s ref||^2 / n."""
    m = np.asarray(m, dtype=float)
    ref = np.asarray(ref, dtype=float)
    if m.shape != ref.shape:
        raise DomainError("length mismatch")
    plus = float(np.sum((m - ref) ** 2))
    minus = float(np.sum((m + ref) ** 2))
    n = len(m)
    return (1, plus / n) if plus <= minus else (-1, minus / n)


# -- driver ------------------------------------------------------------------

def _grad(inst, m, h, Ym, vb):
    lam = inst.lam
    g = -lam * Ym + h
    if not vb:
        g = g + lam**2 * (1 - Q_of(m)) * m
    return g


def _energy(inst, m, Ym, vb):
    n, lam = inst.n, inst.lam
    val = -(lam / (2 * n)) * float(m @ Ym) - float(np.sum(binary_entropy(m))) / n
    if not vb:
        val -= (lam**2 / 4) * (1 - Q_of(m)) ** 2
    return val


def run_solver(inst, config, init="spectral", ref=None):
    """Iterate AMP / NGD / NGD-VB and record a trace.

    ``init`` is ``"spectral"``, an ``h`` vector, or a ``(MagnetizationState,
    m_minus)`` pair. Returns ``(final_state, trace)``. Stops on
    ``||g||^2/n < grad_tol``, on ``residual < residual_tol`` when ``ref`` is
    given, on a detected period-2 oscillation, or at ``max_iters``.
    """
    cfg = config
    vb = cfg.method is Method.NGD_VB
    lam, n, x, Y = inst.lam, inst.n, inst.x, inst.Y
    if isinstance(init, str):
        if init != "spectral":
            raise DomainError(f"unknown init {init!r}")
        state, m_minus = spectral_init(inst)
    elif isinstance(init, tuple):
        state, m_minus = init
    else:
        state = MagnetizationState.from_h(init)
        m_minus = np.zeros(n)
    h, m = state.h, state.m
    if not np.all(np.isfinite(h)):
        raise DomainError("non-finite initial state")
    trace = SolverTrace()

    def check_and_record(k, h, m, Ym, force=False):
        g = _grad(inst, m, h, Ym, vb)
        g2 = float(g @ g) / n
        res = align_sign(m, ref)[1] if ref is not None else None
        conv = (cfg.stop_on_grad and g2 < cfg.grad_tol) or (
            res is not None and cfg.stop_on_residual and res < cfg.residual_tol)
        if force or conv or k <= cfg.record_every_after or k % 10 == 0:
            fv = _energy(inst, m, Ym, vb) if np.all(np.abs(m) < 1) else float("nan")
            trace.records.append(TraceRecord(
                k=k, f_tap=fv, grad_sq=g2, Q=Q_of(m), M=float(np.mean(m)),
                overlap=float(x @ m) / n, residual=res))
        return conv

    Ym = Y @ m
    if check_and_record(0, h, m, Ym):
        trace.status = Status.CONVERGED
        return MagnetizationState(h, m), trace

    m_back = None  # iterate two steps behind the new one
    osc_run = 0
    for k in range(1, cfg.max_iters + 1):
        Q = Q_of(m)
        if cfg.method is Method.AMP:
            h_new = lam * Ym - lam**2 * (1 - Q) * m_minus
            m_minus = m
        elif vb:
            h_new = (1 - cfg.eta) * h + cfg.eta * (lam * Ym)
        else:
            h_new = (1 - cfg.eta) * h + cfg.eta * (lam * Ym - lam**2 * (1 - Q) * m)
        if not np.all(np.isfinite(h_new)):
            raise ConvergenceError("iterate became non-finite", details={"k": k})
        m_new = np.tanh(h_new)
        step1 = float(np.sum((m_new - m) ** 2)) / n
        if (m_back is not None and step1 > OSC_STEP_TOL
                and float(np.sum((m_new - m_back) ** 2)) / n < OSC_PERIOD2_TOL):
            osc_run += 1
        else:
            osc_run = 0
        m_back = m
        h, m = h_new, m_new
        Ym = Y @ m
        trace.iterations = k
        oscillating = osc_run >= OSC_WINDOW
        last = k == cfg.max_iters
        if check_and_record(k, h, m, Ym, force=oscillating or last):
            trace.status = Status.CONVERGED
            return MagnetizationState(h, m), trace
        if oscillating:
            trace.status = Status.OSCILLATING
            return MagnetizationState(h, m), trace
    trace.status = Status.MAX_ITERS
    return MagnetizationState(h, m), trace


@dataclass
class MStarResult:
    state: MagnetizationState
    grad_sq: float
    method: str
    amp_status: Status
    iterations: int


def find_m_star(inst, grad_tol=1e-13, amp_iters=5000, ngd_eta=0.05, ngd_iters=100_000):
    """High-accuracy TAP critical point: AMP from the spectral start, falling
    back to NGD from AMP's last iterate when AMP oscillates or stalls."""
    if not inst.lam > 1:
        raise DomainError("find_m_star needs lambda > 1")
    state, tr = run_solver(inst, SolverConfig(Method.AMP, max_iters=amp_iters, grad_tol=grad_tol))
    if tr.status is Status.CONVERGED:
        return MStarResult(state, tr.records[-1].grad_sq, "amp", tr.status, tr.iterations)
    log.info("AMP ended with %s after %d iterations; switching to NGD(eta=%g)",
             tr.status.value, tr.iterations, ngd_eta)
    cfg = SolverConfig(Method.NGD, eta=ngd_eta, max_iters=ngd_iters, grad_tol=grad_tol)
    state2, tr2 = run_solver(inst, cfg, init=state.h)
    if tr2.status is Status.CONVERGED:
        return MStarResult(state2, tr2.records[-1].grad_sq, "ngd", tr.status, tr.iterations + tr2.iterations)
    raise ConvergenceError(
        "neither AMP nor NGD reached the gradient tolerance",
        residual=tr2.records[-1].grad_sq,
        details={"amp_status": tr.status.value, "amp_grad_sq": tr.records[-1].grad_sq,
                 "ngd_status": tr2.status.value},
    )
