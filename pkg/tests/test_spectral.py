import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from blochtorrey.core import AdmissibilityError, CoeffFields, DomainError, Grid, PreconditionError
from blochtorrey.measure import CoilSet
from blochtorrey.recon import AnsatzSpace
from blochtorrey.spectral import (DefectiveEigenvalueError, ReferenceState, assemble_generators, coeffs_AB,
                                  contour_projector, det_condition, det_factored, eigen_projectors,
                                  laplace_quadrature, laplace_reference, mu_bar, mu_I, mz_reference,
                                  semigroup_E, semigroup_Etilde, uniqueness_rank_test)


def test_dirichlet_eigenvalues_converge():
    errs = []
    for N in (32, 64):
        g = Grid((N,), (1.0,))
        w = np.linalg.eigvalsh(assemble_generators(CoeffFields(g, 1.0, 0.3, 0.3), 0.5).A_z)[:5]
        errs.append(np.abs(w / (0.5 * (np.pi * np.arange(1, 6)) ** 2 + 0.3) - 1).max())
    assert errs[1] < 0.01 and 3.5 < errs[0] / errs[1] < 4.5


def test_generator_structure():
    g = Grid((16,), (1.0,))
    co = CoeffFields(g, 1.0, 1.0, 2.0 + 0.5j + 0.3 * np.linspace(0, 1, 16))
    gp = assemble_generators(co, 0.1, (3.0, 0, 0))
    assert gp.skew_defect() == 0
    assert gp.symmetric_part_min_eig() > 0
    # the complex form and the real block form share their spectrum
    lc = np.sort_complex(np.linalg.eigvals(gp.A_perp_c))
    lr = np.linalg.eigvals(gp.A_perp)
    assert all(np.min(np.abs(lr - v)) < 1e-8 for v in lc)


def test_generator_admissibility():
    g = Grid((8,), (1.0,))
    with pytest.raises(AdmissibilityError):
        assemble_generators(CoeffFields(g, 1.0, 1.0, 1.0), 0.0)
    with pytest.raises(AdmissibilityError):
        assemble_generators(CoeffFields(g, 1.0, 1.0, -1.0), 0.1)
    with pytest.warns(UserWarning):
        assemble_generators(CoeffFields(g, 1.0, 1.0, 0.0), 0.1)


def test_eigenprojectors_complete_and_match_contour():
    g = Grid((16,), (1.0,))
    rng = np.random.default_rng(0)
    co = CoeffFields(g, 1.0, 1.0, 2.0 + 0.5j + 0.3 * rng.random(16))
    A = assemble_generators(co, 0.1, (3.0, 0, 0)).A_perp
    es = eigen_projectors(A)
    assert es.completeness_defect() < 1e-12
    assert max(np.abs(P @ P - P).max() for P in es.projectors) < 1e-12
    lam = es.eigenvalues
    gap = np.min(np.abs(lam[1:] - lam[0]))
    assert np.abs(contour_projector(A, lam[0], gap / 3, 128) - es.projectors[0]).max() < 1e-12


def test_defective_eigenvalue_is_reported():
    J = np.array([[1.0, 1.0], [0.0, 1.0]])
    with pytest.raises(DefectiveEigenvalueError):
        eigen_projectors(J)


@settings(max_examples=200, deadline=None)
@given(st.floats(-2, 3), st.floats(0.01, 1.0), st.floats(0.01, 2.0), st.floats(-1, 1), st.floats(-1, 1))
def test_determinant_factorisation(loglam, t1, dt, logR, logRt):
    d = det_condition([10**loglam], t1, t1 + dt, 10**logR, 10**logRt)
    assert d.max_mismatch() <= 1e-10


def test_determinant_remark_and_equal_delays():
    g = Grid((64,), (1.0,))
    lz = np.linalg.eigvalsh(assemble_generators(CoeffFields(g, 1.0, 1.0, 1.0), 1e-2).A_z)[:10]
    assert det_condition(lz, 0.3, 0.7, 1.0, 1.0).all_nonzero
    assert not np.any(det_condition(lz, 0.5, 0.5, 1.0, 1.0).nonzero)
    assert det_factored(1.0, 0.3, 0.7, 1.0, 1.0) == 0.0


def test_AB_closed_form_against_quadrature():
    pr = mz_reference(1.3)
    for lam, tau in [(0.7, 0.4), (1.3, 0.5), (50.0, 0.2)]:
        A, B = coeffs_AB(lam, tau, 1.0, mu_bar(tau, 1.3), pr)
        A2, B2 = coeffs_AB(lam, tau, 1.0, mu_bar(tau, 1.3), pr, quad=True)
        assert abs(B - B2) < 1e-12 and abs(A - A2) < 1e-12
    with pytest.raises(DomainError):
        coeffs_AB(0.0, 0.3, 1.0, 0.2, pr)


def test_regrouped_A_matches_plain_formula():
    pr = mz_reference(1.3)
    lam = np.array([0.2, 1.0, 1.3, 7.0])
    A, B = coeffs_AB(lam, 0.4, 1.0, None, pr)
    A2, B2 = coeffs_AB(lam, 0.4, 1.0, mu_bar(0.4, 1.3), pr)
    assert np.allclose(A, A2, rtol=0, atol=1e-14) and np.array_equal(B, B2)
    # lam = R10 = R1t makes A vanish identically
    assert coeffs_AB(2.0, 0.7, 2.0, None, mz_reference(2.0))[0] == 0.0


def test_laplace_transform_of_reference_state():
    Meq, R2t, om, s = 1.3, 3 + 1j, 5.0, 4 + 2j
    f = lambda t: -1j * Meq * np.exp(-(R2t + 1j * om) * t)  # noqa: E731
    assert abs(laplace_reference(s, Meq, R2t, om) - laplace_quadrature(f, s, (R2t + s).real)) < 1e-12
    assert mu_I(s, Meq, R2t, om) == laplace_reference(-s, Meq, R2t, om)


@settings(max_examples=30, deadline=None)
@given(st.floats(0.05, 2.0), st.floats(0.1, 3.0))
def test_semigroups_act_diagonally_on_eigenvectors(tau, R10):
    g = Grid((12,), (1.0,))
    Az = assemble_generators(CoeffFields(g, 1.0, R10, 1.0), 0.05).A_z
    w, V = np.linalg.eigh(Az)
    E = semigroup_E(Az, tau, R10)
    expected = -np.exp(-w * tau) + (1 - np.exp(-w * tau)) * R10 / w
    assert np.allclose(E @ V, V * expected, atol=1e-10)
    pr = mz_reference(R10)
    Et = semigroup_Etilde(Az, tau, pr)
    s = np.linspace(0, tau, 4001)
    lam = w[0]
    quad = np.trapezoid(-2 * np.exp(-R10 * s) * np.exp(-lam * (tau - s)), s)
    assert np.isclose(V[:, 0] @ Et @ V[:, 0], quad, rtol=1e-6)


def _ref(**kw):
    g = Grid((32,), (1.0,))
    return ReferenceState(g, kw.pop("Meq", 1.0), 1.0, kw.pop("R2t", 3.0), 1e-2, 0.3, 0.7, **kw)


def test_rank_test_matched_and_counterexample(tmp_path):
    ref = _ref()
    g = ref.grid
    _, V = np.linalg.eigh(assemble_generators(ref.coeffs(), ref.D).A_z)
    V = V / np.sqrt(g.cell_volume)
    good = uniqueness_rank_test(ref, V[:, 0], V[:, 0])
    bad = uniqueness_rank_test(ref, V[:, 0], V[:, 1])
    assert good.injective and good.sigma_min > 1e-8
    assert not bad.injective and bad.sigma_min <= 1e-10
    assert set(good.conditions) == {"spacetime-sep", "assmperp", "det_ell", "muIell", "injective"}
    good.write_json(tmp_path / "r.json")
    assert json.loads((tmp_path / "r.json").read_text())["conditions"]["injective"] is True


def test_rank_test_preconditions():
    g = Grid((8,), (1.0,))
    with pytest.raises(DomainError):
        ReferenceState(g, 1.0, 1.0, 3.0, 1e-2, 0.7, 0.3)
    ref = ReferenceState(g, 0.0, 1.0, 3.0, 1e-2, 0.3, 0.7)
    with pytest.raises(PreconditionError):
        uniqueness_rank_test(ref, np.ones(8), np.ones(8))


def test_rank_test_is_invariant_under_rebasing():
    g = Grid((32,), (1.0,))
    ref = ReferenceState(g, 1 + 0.5 * np.cos(3 * g.coords[:, 0]), 1.0, 3.0 + 0.5j, 1e-2, 0.3, 0.7, G0=(20.0, 0, 0))
    X = AnsatzSpace(g, np.array([[0.0, 0, 0], [1, 0, 0], [-1, 0, 0]]))
    C = CoilSet(g, np.stack([np.ones(32), np.exp(-g.coords[:, 0] ** 2)]))
    base = uniqueness_rank_test(ref, X, C, nt=80)
    Q = np.linalg.qr(np.random.default_rng(1).standard_normal((3, 3)))[0]
    other = uniqueness_rank_test(ref, X.real_basis() @ Q, C, nt=80)
    assert base.sigma_min > 1e-8
    assert np.isclose(base.sigma_min, other.sigma_min, rtol=1e-8)
