import math

import mpmath as mp
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from tapsync.energy import (
    amp_jacobian,
    amp_map,
    bethe_hessian,
    binary_entropy,
    f_tap,
    f_vb,
    grad_tap,
    grad_vb,
    hess_matvec,
    hessian,
    safe_arctanh,
    summary_stats,
)
from tapsync.errors import DomainError
from tapsync.model import sample_instance
from tapsync.solvers import find_m_star

from .conftest import interior


def rel_err(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300)


def test_binary_entropy_values():
    assert binary_entropy(0.0) == pytest.approx(math.log(2), abs=1e-16)
    assert binary_entropy(1.0) == 0.0 and binary_entropy(-1.0) == 0.0
    assert binary_entropy(0.5) == pytest.approx(0.75 * math.log(4 / 3) + 0.25 * math.log(4), abs=1e-15)
    with pytest.raises(DomainError):
        binary_entropy(1.5)


def test_closed_forms_at_origin(inst50):
    z = np.zeros(50)
    lam = inst50.lam
    assert f_tap(inst50, z) == pytest.approx(-math.log(2) - lam**2 / 4, abs=1e-15)
    assert f_vb(inst50, z) == pytest.approx(-math.log(2), abs=1e-15)
    assert np.all(grad_tap(inst50, z) == 0)
    H0 = -lam * inst50.Y + (1 + lam**2) * np.eye(50)
    assert np.max(np.abs(hessian(inst50, z) - H0)) < 1e-14
    v = np.arange(50.0)
    assert np.allclose(hess_matvec(inst50, z, v), H0 @ v, rtol=0, atol=1e-12)


def _f_tap_mp(inst, m):
    mp.mp.dps = 40
    n, lam = inst.n, mp.mpf(inst.lam)
    M = [mp.mpf(float(v)) for v in m]
    quad = mp.fsum(mp.mpf(float(inst.Y[i, j])) * M[i] * M[j] for i in range(n) for j in range(n))
    ent = mp.fsum(-(1 + v) / 2 * mp.log((1 + v) / 2) - (1 - v) / 2 * mp.log((1 - v) / 2) for v in M)
    Q = mp.fsum(v * v for v in M) / n
    return float(-(lam / (2 * n)) * quad - ent / n - lam**2 / 4 * (1 - Q) ** 2)


def test_f_tap_extended_precision(inst50, rng):
    m = interior(rng, 50, 0.95)
    assert abs(f_tap(inst50, m) - _f_tap_mp(inst50, m)) < 1e-12


def test_tap_vb_difference(inst50, rng):
    for _ in range(5):
        m = interior(rng, 50)
        Q = float(m @ m) / 50
        assert f_tap(inst50, m) - f_vb(inst50, m) == pytest.approx(-(inst50.lam**2 / 4) * (1 - Q) ** 2, abs=1e-14)


def _fd_grad(f, m, eps=1e-6):
    g = np.empty_like(m)
    for i in range(len(m)):
        e = np.zeros_like(m)
        e[i] = eps
        g[i] = (f(m + e) - f(m - e)) / (2 * eps)
    return g


@pytest.mark.parametrize("which", ["tap", "vb"])
def test_gradient_finite_differences(inst50, rng, which):
    f, g = (f_tap, grad_tap) if which == "tap" else (f_vb, grad_vb)
    n = inst50.n
    for _ in range(5):
        m = interior(rng, n)
        fd = n * _fd_grad(lambda v: f(inst50, v), m)
        assert rel_err(g(inst50, m), fd) < 1e-6


def test_hessian_matvec_finite_differences(inst50, rng):
    eps = 1e-6
    for _ in range(5):
        m, v = interior(rng, 50), rng.standard_normal(50)
        fd = (grad_tap(inst50, m + eps * v) - grad_tap(inst50, m - eps * v)) / (2 * eps)
        assert rel_err(hess_matvec(inst50, m, v), fd) < 1e-5


def test_hessian_symmetric_and_dense_matches_matvec(inst50, rng):
    m, u, v = interior(rng, 50), rng.standard_normal(50), rng.standard_normal(50)
    assert abs(u @ hess_matvec(inst50, m, v) - v @ hess_matvec(inst50, m, u)) < 1e-12
    H = hessian(inst50, m)
    assert np.allclose(H @ v, hess_matvec(inst50, m, v), rtol=0, atol=1e-12)


def test_bethe_hessian_identities(inst50, rng):
    m = interior(rng, 50)
    lam, n = inst50.lam, 50
    assert np.array_equal(bethe_hessian(inst50, m, 1.0, +1), hessian(inst50, m))
    Q = float(m @ m) / n
    Hm = lam * inst50.Y + (2 * lam**2 / n) * np.outer(m, m) + np.diag(lam**2 * (1 - Q) + 1 / (1 - m * m))
    assert np.max(np.abs(bethe_hessian(inst50, m, 1.0, -1) - Hm)) < 1e-13
    z = np.zeros(n)
    B = 0.5 * (-lam * inst50.Y) + lam**2 * np.eye(n) + 0.25 * np.eye(n)
    assert np.max(np.abs(bethe_hessian(inst50, z, 0.5, +1) - B)) < 1e-14
    with pytest.raises(DomainError):
        bethe_hessian(inst50, m, 1.0, 0)


def test_amp_jacobian_at_origin(inst50):
    z = np.zeros(50)
    lam = inst50.lam
    J = amp_jacobian(inst50, z, z)
    ref = np.block([[lam * inst50.Y, -lam**2 * np.eye(50)], [np.eye(50), np.zeros((50, 50))]])
    assert np.max(np.abs(J - ref)) < 1e-14


def test_amp_jacobian_directional_fd(rng):
    inst = sample_instance(80, 1.5, seed=2)
    m = find_m_star(inst).state.m
    v, w = rng.standard_normal(80), rng.standard_normal(80)
    J = amp_jacobian(inst, m, m)
    errs = []
    for eps in (1e-3, 5e-4):
        p, q = amp_map(inst, m + eps * v, m + eps * w)
        lin = np.concatenate([m, m]) + eps * (J @ np.concatenate([v, w]))
        errs.append(np.linalg.norm(np.concatenate([p, q]) - lin))
    # second-order remainder: halving eps divides the error by about 4
    assert errs[1] < errs[0] / 3
    assert errs[0] < 1e-3


def test_continuity_bound(inst50, rng):
    lam, n = inst50.lam, 50
    op = np.max(np.abs(np.linalg.eigvalsh(inst50.Y)))
    for _ in range(20):
        m, mp_ = interior(rng, n, 0.99), interior(rng, n, 0.99)
        d = np.linalg.norm(m - mp_)
        bound = (lam * op + lam**2 * math.sqrt(2) / 2) * d / math.sqrt(n) + (math.log(2) + 1) * (d * d / n) ** 0.25
        assert abs(f_tap(inst50, m) - f_tap(inst50, mp_)) <= bound


def test_stationarity_identity():
    inst = sample_instance(200, 1.5, seed=4)
    res = find_m_star(inst)
    m = res.state.m
    lam = inst.lam
    Q = float(m @ m) / 200
    assert np.max(np.abs(m - np.tanh(lam * inst.Y @ m - lam**2 * (1 - Q) * m))) < 1e-6
    g = grad_tap(inst, m, h=res.state.h)
    assert float(g @ g) / 200 < 1e-13


def test_boundary_inputs_rejected(inst50):
    m = np.zeros(50)
    m[3] = 1.0
    for fn in (f_tap, grad_tap, f_vb):
        with pytest.raises(DomainError):
            fn(inst50, m)
    m[3] = np.nan
    with pytest.raises(DomainError):
        f_tap(inst50, m)


def test_clamp_flag():
    h, clamped = safe_arctanh(np.array([0.0, 1 - 1e-14]))
    assert clamped and np.isfinite(h).all()
    _, clamped = safe_arctanh(np.array([0.5, -0.5]))
    assert not clamped


def test_summary_stats():
    m = np.array([0.5, -0.5, 0.0, 0.2])
    s = summary_stats(m)
    assert s.Q == pytest.approx(np.mean(m**2))
    assert s.M == pytest.approx(np.mean(m))
    assert s.A == pytest.approx(np.mean(m * np.arctanh(m)))


_inst_h = sample_instance(20, 1.3, seed=5)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, 20, elements=st.floats(-0.999, 0.999)))
def test_sign_symmetry(m):
    assert f_tap(_inst_h, m) == f_tap(_inst_h, -m)
    assert np.array_equal(grad_tap(_inst_h, -m), -grad_tap(_inst_h, m))
    assert np.array_equal(hessian(_inst_h, -m), hessian(_inst_h, m))
