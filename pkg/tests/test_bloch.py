import numpy as np
import pytest
import scipy.linalg
from hypothesis import given, settings
from hypothesis import strategies as st

from blochtorrey.bloch import (Numeric, SingularFixedPointError, affine_expm, explicit_state, pulse_matrix,
                               pulse_propagator, solve_bloch, solve_bloch_linearized)
from blochtorrey.core import CoeffFields, Grid, MagState
from blochtorrey.seq import cartesian_readout, make_sequence


def _expm_oracle(a1, a2, b, f, dt):
    aug = np.zeros((4, 4), complex)
    aug[:3, :3] = -pulse_matrix(a1, a2, b) * dt
    aug[2, 3] = f * dt
    E = scipy.linalg.expm(aug)
    return E[:3, :3], E[:3, 3]


@settings(max_examples=200, deadline=None)
@given(st.floats(0, 3), st.floats(0, 3), st.floats(-3, 3), st.floats(-3, 3), st.floats(0, 2), st.floats(0.01, 1))
def test_propagator_matches_matrix_exponential(a1, a2, br, bi, f, dt):
    if br**2 + bi**2 + a1 * a2 == 0 and f != 0:
        with pytest.raises(SingularFixedPointError):
            pulse_propagator(a1, a2, br + 1j * bi, f, dt)
        return
    pp = pulse_propagator(a1, a2, br + 1j * bi, f, dt)
    P, q = _expm_oracle(a1, a2, br + 1j * bi, f, dt)
    assert np.abs(pp.P - P).max() <= 1e-10 * np.abs(P).max()
    assert np.abs(pp.q - q).max() <= 1e-10 * max(np.abs(q).max(), 1e-300) + 1e-15


def test_propagator_degenerate_branch():
    a1, a2 = 0.4, 1.6
    b = abs(a2 - a1) / 2 * (1 + 1e-10) * np.exp(0.3j)
    pp = pulse_propagator(a1, a2, b, 0.7, 0.5)
    P, q = _expm_oracle(a1, a2, b, 0.7, 0.5)
    assert np.abs(pp.P - P).max() <= 1e-9 and np.abs(pp.q - q).max() <= 1e-9
    assert np.allclose(np.sort_complex(pp.eigenvalues), np.sort_complex(np.linalg.eigvals(pulse_matrix(a1, a2, b))))


@settings(max_examples=30, deadline=None)
@given(st.floats(-10, 10), st.floats(-10, 10), st.floats(0.01, 2))
def test_pure_rotation_preserves_norm(br, bi, dt):
    pp = pulse_propagator(0.0, 0.0, br + 1j * bi, 0.0, dt)
    assert np.allclose(pp.P.T @ pp.P, np.eye(3), atol=1e-12)


def test_affine_expm_fixed_point():
    A = np.array([[2.0, -1, 0], [1, 2.0, 0], [0, 0, 1.5]])
    f = np.array([0, 0, 3.0])
    P, q = affine_expm(A, f, 50.0)
    assert np.allclose(q, np.linalg.solve(A, f))


def _setup(N=32):
    g = Grid((N,), (1.0,))
    x = g.r3[:, 0]
    co = CoeffFields(g, 1 + 0.3 * np.sin(2 * np.pi * x), 1.0 + 0.2 * x, 3 + 0.5 * x)
    ro = cartesian_readout(g, 2 * np.pi, 0.72, 0.01, 0.1, oversample=2)
    return g, co, ro


@pytest.mark.parametrize("kind", ["ninety", "inversion"])
def test_exact_matches_explicit_as_pulses_shorten(kind):
    g, co, ro = _setup()
    gaps = []
    for tp in (4e-3, 2e-3, 1e-3):
        s = make_sequence(kind, 1.0, tp, ro.t_end, G=ro.G, tau=0.3, gamma=2 * np.pi)
        gaps.append(np.abs(solve_bloch(s, co, ro.clock).Mperp - explicit_state(s, co, ro.clock).Mperp).max())
    ratios = np.array(gaps[:-1]) / np.array(gaps[1:])
    assert np.all((ratios > 1.7) & (ratios < 2.3))


def test_numeric_mode_converges_to_exact():
    g, co, ro = _setup(8)
    co.R2star = co.R2star + 0.4j
    s = make_sequence("inversion", 1.0, 5e-3, ro.t_end, G=ro.G, tau=0.3, gamma=2 * np.pi)
    ex = solve_bloch(s, co, ro.clock[::8])
    errs = [np.abs(ex.Mperp - solve_bloch(s, co, ro.clock[::8], mode=Numeric(dt)).Mperp).max()
            for dt in (2e-4, 1e-4)]
    assert errs[1] < 1e-5
    assert 12 < errs[0] / errs[1] < 20  # RK4


def test_ninety_explicit_state():
    g = Grid((4,), (1.0,))
    co = CoeffFields(g, [1, 2, 3, 4], 1.0, 2.0)
    s = make_sequence("ninety", tau_p=1e-3, horizon=1.0, gamma=1.0)
    tr = explicit_state(s, co, [s.t_ref])
    assert np.allclose(tr.Mperp[0], -1j * co.Meq)
    assert np.allclose(tr.Mz[0], 0.0)
    # an on-resonance pulse from equilibrium reaches the same state up to O(tau_p)
    b = solve_bloch(s, co, [s.t_ref])
    assert np.abs(b.Mperp[0] + 1j * co.Meq).max() < 1e-2


def test_initial_state_is_respected():
    g = Grid((2,), (1.0,))
    co = CoeffFields(g, 0.0, 1.0, 2.0)
    s = make_sequence("ninety", tau_p=1e-3, horizon=2.0, gamma=1e6)
    init = MagState(g, [1.0, 0.5j], [0.0, 0.0])
    tr = solve_bloch(s, co, [1e-3, 1.0], initial=init)
    decay = np.exp(-2.0 * (1.0 - 1e-3))
    assert np.allclose(np.abs(tr.Mperp[1]) / np.abs(tr.Mperp[0]), decay)


@pytest.mark.parametrize("imag", [0.0, 0.3])
def test_linearized_matches_finite_differences(imag):
    g, co, ro = _setup(8)
    co.R2star = co.R2star + 1j * imag
    rng = np.random.default_rng(1)
    d = CoeffFields(g, rng.standard_normal(8), rng.standard_normal(8), rng.standard_normal(8) + 0.5j)
    s = make_sequence("inversion", 1.0, 2e-3, ro.t_end, G=ro.G, tau=0.3, gamma=2 * np.pi)
    t = ro.clock[::16]
    lin = solve_bloch_linearized(s, co, d, t)
    eps = 1e-6
    fd = (solve_bloch(s, co + d.scaled(eps), t).Mperp - solve_bloch(s, co + d.scaled(-eps), t).Mperp) / (2 * eps)
    assert np.abs(fd - lin.Mperp).max() <= 1e-6 * np.abs(lin.Mperp).max()
