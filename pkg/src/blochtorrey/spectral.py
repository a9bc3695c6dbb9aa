"""Spectral certificates for linearised uniqueness with diffusion.

With the pulses treated as instantaneous and a constant readout gradient
``G0``, the transverse and longitudinal increments evolve under the
generators

    A_z    = -div(D grad) + R1ref
    A_perp = -div(D grad) + R2ref + i gamma r.G0      (complex form)

with homogeneous Dirichlet conditions. This module builds both on the
torrey grid, computes eigenprojectors, the per-mode 2x2 determinant
systems for ``(dMeq, dR1)``, and a rank test for the full linearised
observation map on a finite ansatz space.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import integrate, linalg

from .core import (AdmissibilityError, BoundarySpec, CoeffFields, DomainError, Grid, ModelError,
                   PreconditionError, as_tensor_field)
from .measure import CoilSet
from .torrey import diffusion_matrix


class DefectiveEigenvalueError(ModelError):
    def __init__(self, msg, index: int):
        super().__init__(msg)
        self.index = index


# ---------------------------------------------------------------------------
# scalar helpers


def _phi1(z):
    """``(exp(z) - 1)/z`` with its removable singularity at 0 (real or complex)."""
    z = np.asarray(z)
    small = np.abs(z) < 1e-3
    zs = np.where(small, 1.0, z)
    big = np.expm1(zs) / zs if not np.iscomplexobj(zs) else (np.exp(zs) - 1.0) / zs
    series = 1.0 + z / 2 + z**2 / 6 + z**3 / 24 + z**4 / 120
    return np.where(small, series, big)


def _dd(tau, a, b):
    """``(exp(-a tau) - exp(-b tau))/(b - a)``, finite at ``a = b``."""
    return np.exp(-a * tau) * tau * _phi1(-(b - a) * tau)


@dataclass(frozen=True)
class ExpProfile:
    """Time profile ``amplitude * exp(-rate * t)``."""

    amplitude: float
    rate: float

    def __call__(self, t):
        return self.amplitude * np.exp(-self.rate * np.asarray(t))


def mz_reference(R1t: float) -> ExpProfile:
    """Longitudinal profile after an inversion pulse: ``Mz - Meq = -2 exp(-R1 t) Meq``."""
    return ExpProfile(-2.0, R1t)


def mu_bar(tau, R1t: float):
    """Fraction of ``Meq`` left in ``Mz`` after inversion and recovery for ``tau``."""
    return 1.0 - 2.0 * np.exp(-R1t * np.asarray(tau))


# ---------------------------------------------------------------------------
# generators


@dataclass
class GeneratorPair:
    """Dense discrete generators on ``grid``.

    ``A_perp`` acts on ``(Mx, My)`` stacked; ``A_perp_c`` is the same
    operator acting on ``Mx + i My``.
    """

    grid: Grid
    K: np.ndarray
    A_z: np.ndarray
    A_perp: np.ndarray
    A_perp_c: np.ndarray
    omega: np.ndarray
    bc: BoundarySpec

    def skew_defect(self) -> float:
        n = self.grid.npts
        return float(np.abs(self.A_perp[:n, n:] + self.A_perp[n:, :n]).max())

    def symmetric_part_min_eig(self) -> float:
        S = 0.5 * (self.A_perp + self.A_perp.T)
        return float(np.linalg.eigvalsh(S)[0])


def _check_D(grid: Grid, D) -> np.ndarray:
    Dt = as_tensor_field(grid, D)
    w = np.linalg.eigvalsh(Dt[:, : grid.dim, : grid.dim])
    if np.any(w <= 0):
        raise AdmissibilityError("diffusion tensor must be uniformly positive definite")
    return Dt


def assemble_generators(coeffs_ref: CoeffFields, D, G0=(0.0, 0.0, 0.0), gamma: float = 1.0,
                        bc: BoundarySpec | None = None) -> GeneratorPair:
    grid = coeffs_ref.grid
    bc = bc or BoundarySpec("dirichlet")
    Dt = _check_D(grid, D)
    R2 = coeffs_ref.R2star
    if np.any(R2.real < 0):
        raise AdmissibilityError("Re R2* must be non-negative")
    if np.any(R2.real == 0):
        warnings.warn("Re R2* vanishes somewhere; coercivity of A_perp is not guaranteed", stacklevel=2)
    K = diffusion_matrix(grid, Dt, bc, bc.beta).toarray()
    omega = gamma * grid.r3 @ np.resize(np.asarray(G0, float), 3)
    n = grid.npts
    A_z = K + np.diag(coeffs_ref.R1)
    diag = K + np.diag(R2.real)
    off = np.diag(R2.imag + omega)
    # d/dt (Mx, My) = -A_perp (Mx, My) reproduces d/dt M = -(K + R2 + i omega) M
    A_perp = np.block([[diag, -off], [off, diag]])
    A_perp_c = K + np.diag(R2 + 1j * omega)
    return GeneratorPair(grid, K, A_z, A_perp, A_perp_c, omega, bc)


# ---------------------------------------------------------------------------
# eigenprojectors


@dataclass
class EigenSystem:
    eigenvalues: np.ndarray
    projectors: np.ndarray  # (count, n, n)
    multiplicities: np.ndarray

    def completeness_defect(self) -> float:
        n = self.projectors.shape[-1]
        return float(np.abs(self.projectors.sum(axis=0) - np.eye(n)).max())


def _clusters(lam, tol):
    order = np.lexsort((lam.imag, lam.real))
    groups, cur = [], [order[0]]
    for i in order[1:]:
        if abs(lam[i] - lam[cur[0]]) <= tol:
            cur.append(i)
        else:
            groups.append(cur)
            cur = [i]
    groups.append(cur)
    return groups


def eigen_projectors(A, count: int | None = None, cluster_tol: float = 1e-9,
                     defect_tol: float = 1e-8) -> EigenSystem:
    """Eigenvalues sorted by real part and the matching spectral projectors.

    ``P = V (W^H V)^{-1} W^H`` from right and left eigenvectors of each
    eigenvalue cluster; a near-singular ``W^H V`` means the eigenvalue is
    defective.
    """
    A = np.asarray(A)
    lam, W, V = linalg.eig(A, left=True, right=True)
    scale = max(1.0, float(np.abs(lam).max()))
    groups = _clusters(lam, cluster_tol * scale)
    if count is not None:
        groups = groups[:count]
    vals, projs, mult = [], [], []
    for ell, g in enumerate(groups):
        Vg = V[:, g] / np.linalg.norm(V[:, g], axis=0)
        Wg = W[:, g] / np.linalg.norm(W[:, g], axis=0)
        C = Wg.conj().T @ Vg
        s = np.linalg.svd(C, compute_uv=False)
        if s[-1] < defect_tol:
            raise DefectiveEigenvalueError(
                f"eigenvalue {ell} ({lam[g[0]]:.6g}) is defective to tolerance: left/right overlap {s[-1]:.2e}", ell)
        P = Vg @ np.linalg.solve(C, Wg.conj().T)
        if not np.iscomplexobj(A) and np.all(np.abs(lam[g].imag) <= cluster_tol * scale):
            P = P.real
        vals.append(np.mean(lam[g]))
        projs.append(P)
        mult.append(len(g))
    P = np.array(projs) if any(np.iscomplexobj(p) for p in projs) else np.array(projs, float)
    return EigenSystem(np.array(vals), P, np.array(mult))


def contour_projector(A, lam: complex, radius: float, nquad: int = 64) -> np.ndarray:
    """``(1/2 pi i) oint (s + A)^{-1} ds`` over a circle around ``-lam`` (trapezoidal rule)."""
    A = np.asarray(A, complex)
    n = A.shape[0]
    I = np.eye(n)
    P = np.zeros((n, n), complex)
    for th in 2 * np.pi * np.arange(nquad) / nquad:
        e = radius * np.exp(1j * th)
        P += np.linalg.solve((-lam + e) * I + A, I) * e
    return P / nquad


# ---------------------------------------------------------------------------
# 2x2 determinant systems


def coeffs_AB(lam, tau, R10: float, mu_barJ, mz_ref: ExpProfile | Callable, quad: bool = False):
    """Per-mode coefficients ``(A, B)`` of the longitudinal elimination.

    ``A = exp(-lam tau) - R10/lam (1 - exp(-lam tau)) + mu_bar`` and
    ``B = int_0^tau m_z(s) exp(-lam (tau - s)) ds``; ``B`` is closed form for
    an :class:`ExpProfile` unless ``quad`` is set.

    ``mu_barJ=None`` takes ``mu_bar = 1 + m_z(tau)``; for an :class:`ExpProfile`
    ``A`` is then regrouped so the O(1) terms cancel analytically.
    """
    lam = np.asarray(lam, float)
    if np.any(lam <= 0):
        raise DomainError("longitudinal eigenvalues must be positive")
    e = np.exp(-lam * tau)
    if mu_barJ is None and isinstance(mz_ref, ExpProfile) and not quad:
        a, r = mz_ref.amplitude, mz_ref.rate
        A = (2.0 + a) * e + (lam - R10) * tau * _phi1(-lam * tau) + a * (lam - r) * _dd(tau, r, lam)
    else:
        if mu_barJ is None:
            mu_barJ = 1.0 + mz_ref(tau)
        A = e - R10 * tau * _phi1(-lam * tau) + mu_barJ
    if isinstance(mz_ref, ExpProfile) and not quad:
        B = mz_ref.amplitude * _dd(tau, mz_ref.rate, lam)
    else:
        def one(l):
            v, _ = integrate.quad(lambda s: mz_ref(s) * np.exp(-l * (tau - s)), 0.0, tau,
                                  epsabs=0.0, epsrel=1e-13, limit=200)
            return v
        B = np.vectorize(one)(lam) if tau > 0 else np.zeros_like(lam)
    return A, B


@dataclass
class DetReport:
    eigenvalues: np.ndarray
    direct: np.ndarray
    factored: np.ndarray
    scale: np.ndarray
    nonzero: np.ndarray
    rel_tol: float

    @property
    def all_nonzero(self) -> bool:
        return bool(np.all(self.nonzero))

    def max_mismatch(self) -> float:
        """Largest ``|direct - factored|`` relative to the row-norm product."""
        return float(np.max(np.abs(self.direct - self.factored) / self.scale))


def det_factored(lam, tau1, tau2, R10, R1t):
    """Factored determinant for the inversion-recovery reference states."""
    lam = np.asarray(lam, float)
    r1, r2 = np.exp(-R1t * tau1), np.exp(-R1t * tau2)
    d1, d2 = _dd(tau1, R1t, lam), _dd(tau2, R1t, lam)
    return 2.0 * (lam - R10) / lam * (d1 * (1.0 - r2) - d2 * (1.0 - r1))


def det_condition(eigs, tau1: float, tau2: float, R10: float, R1t: float, rel_tol: float = 1e-12) -> DetReport:
    """``A^(II) B^(III) - A^(III) B^(II)`` per mode, direct and factored."""
    if not 0 < tau1 <= tau2:
        raise DomainError("need 0 < tau1 <= tau2")
    lam = np.atleast_1d(np.asarray(eigs, float))
    prof = mz_reference(R1t)
    A1, B1 = coeffs_AB(lam, tau1, R10, None, prof)
    A2, B2 = coeffs_AB(lam, tau2, R10, None, prof)
    direct = A1 * B2 - A2 * B1
    scale = np.hypot(A1, B1) * np.hypot(A2, B2)
    fact = det_factored(lam, tau1, tau2, R10, R1t)
    return DetReport(lam, direct, fact, scale, np.abs(direct) > rel_tol * scale, rel_tol)


# ---------------------------------------------------------------------------
# reference states and Laplace transforms


def laplace_reference(s, Meq, R2t: complex, omega):
    """Laplace transform at ``s`` of ``t -> -i exp(-(R2t + i omega) t) Meq``.

    Closed form valid for ``Re(s + R2t) > 0`` and its analytic continuation
    elsewhere.
    """
    return -1j * np.asarray(Meq) / (s + R2t + 1j * np.asarray(omega))


def mu_I(lam_perp, Meq, R2t: complex, omega):
    """Laplace transform of the 90-degree reference state at ``s = -lam_perp``."""
    return laplace_reference(-lam_perp, Meq, R2t, omega)


def laplace_quadrature(f: Callable, s: complex, rate: float, tail: float = 1e-14) -> complex:
    """``int_0^inf f(t) exp(-s t) dt`` truncated where ``exp(-rate T) = tail``."""
    if rate <= 0:
        raise DomainError("Laplace quadrature needs a positive decay rate")
    T = -np.log(tail) / rate
    val, _ = integrate.quad(lambda t: f(t) * np.exp(-s * t), 0.0, T, complex_func=True,
                            epsabs=0.0, epsrel=1e-12, limit=1000)
    return complex(val)


# ---------------------------------------------------------------------------
# semigroup operators


def _matfun(A, f):
    if np.allclose(A, A.T.conj(), rtol=0, atol=1e-12 * np.abs(A).max()):
        w, V = np.linalg.eigh(A)
        return (V * f(w)) @ V.conj().T
    w, V = np.linalg.eig(A)
    return (V * f(w)) @ np.linalg.inv(V)


def semigroup_E(A_z, tau: float, R1ref) -> np.ndarray:
    """``-exp(-A tau) + (1 - exp(-A tau)) A^{-1} [R1ref .]``."""
    n = A_z.shape[0]
    S = linalg.expm(-A_z * tau)
    return -S + (np.eye(n) - S) @ np.linalg.solve(A_z, np.diag(np.broadcast_to(R1ref, (n,))))


def semigroup_Etilde(A_z, tau: float, mz_ref: ExpProfile) -> np.ndarray:
    """``int_0^tau m_z(s) exp(-A (tau - s)) ds`` for an exponential profile."""
    return _matfun(A_z, lambda lam: mz_ref.amplitude * _dd(tau, mz_ref.rate, lam))


# ---------------------------------------------------------------------------
# rank test


@dataclass
class ReferenceState:
    """Reference point with constant ``R1 = R10``, ``R2* = R2t`` and inversion-recovery states."""

    grid: Grid
    Meq: np.ndarray
    R10: float
    R2t: complex
    D: object
    tau1: float
    tau2: float
    G0: tuple = (0.0, 0.0, 0.0)
    gamma: float = 1.0
    bc: BoundarySpec = field(default_factory=lambda: BoundarySpec("dirichlet"))

    def __post_init__(self):
        self.Meq = self.grid.field(self.Meq, float)
        if not 0 < self.tau1 < self.tau2:
            raise DomainError("need 0 < tau1 < tau2")

    def coeffs(self) -> CoeffFields:
        return CoeffFields(self.grid, self.Meq, self.R10, self.R2t)


@dataclass
class RankReport:
    sigma_min: float
    singular_values: np.ndarray
    eig_z: np.ndarray
    eig_perp: np.ndarray
    det: DetReport
    mu_min: float
    E_leakage: float
    threshold: float

    @property
    def injective(self) -> bool:
        return self.sigma_min > self.threshold

    @property
    def conditions(self) -> dict:
        return {
            "spacetime-sep": True,
            "assmperp": True,
            "det_ell": self.det.all_nonzero,
            "muIell": self.mu_min > 0,
            "injective": self.injective,
        }

    def to_dict(self) -> dict:
        return {
            "sigma_min": self.sigma_min,
            "threshold": self.threshold,
            "singular_values": self.singular_values.tolist(),
            "eigenvalues_z": self.eig_z.tolist(),
            "eigenvalues_perp": [[float(v.real), float(v.imag)] for v in self.eig_perp],
            "determinants": self.det.direct.tolist(),
            "determinants_factored": self.det.factored.tolist(),
            "mu_min": self.mu_min,
            "E_leakage": self.E_leakage,
            "conditions": self.conditions,
        }

    def write_json(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=1, sort_keys=True)


def _orthonormal(grid: Grid, X) -> np.ndarray:
    B = X.real_basis() if hasattr(X, "real_basis") else np.asarray(X, float)
    if B.ndim == 1:
        B = B[:, None]
    h = grid.cell_volume
    Q, R = np.linalg.qr(B * np.sqrt(h))
    keep = np.abs(np.diag(R)) > 1e-12 * np.abs(np.diag(R)).max()
    return Q[:, keep] / np.sqrt(h)


def _perp_response(lam, V, Vinv, cV, u0, g, rho, s):
    """Observed ``h c^T u(s)`` for ``u' + A u = g exp(-rho s)``, ``u(0) = u0``; shape ``(nt, ncoils)``."""
    a = Vinv @ u0
    Wg = Vinv * g[None, :]
    out = np.empty((s.size, cV.shape[0]), complex)
    for k, sk in enumerate(s):
        Phi = _dd(sk, rho[None, :], lam[:, None])
        coef = np.exp(-lam * sk) * a + np.sum(Wg * Phi, axis=1)
        out[k] = cV @ coef
    return out


def uniqueness_rank_test(ref: ReferenceState, X, coils: CoilSet | np.ndarray, T: float | None = None,
                         nt: int = 200, threshold: float = 1e-8, mu_tol: float = 1e-12) -> RankReport:
    """Smallest singular value of the linearised observation map on ``X``.

    Unknowns are ``(dMeq, dR1, dR2*)`` with all three in ``X`` (``dR2*``
    complex). Transverse increments are propagated by eigen-expansion of
    ``A_perp`` with the exact Duhamel integral against the reference
    decay; the longitudinal increment at ``tau`` uses the semigroup
    operators. Observations are sampled on a uniform clock over ``(0, T]``
    and weighted for the time ``L2`` norm.
    """
    grid = ref.grid
    h = grid.cell_volume
    c = coils.c if isinstance(coils, CoilSet) else np.atleast_2d(np.asarray(coils, complex))
    gens = assemble_generators(ref.coeffs(), ref.D, ref.G0, ref.gamma, ref.bc)
    T = 2.0 * ref.tau2 if T is None else float(T)
    t = T * np.arange(1, nt + 1) / nt
    wt = np.sqrt(T / nt)

    lam_z = np.linalg.eigvalsh(gens.A_z)
    lam, V = np.linalg.eig(gens.A_perp_c)
    Vinv = np.linalg.inv(V)
    cV = h * c @ V
    rho = ref.R2t + 1j * gens.omega

    det = det_condition(lam_z, ref.tau1, ref.tau2, ref.R10, ref.R10)
    mu = mu_I(lam[:, None], ref.Meq[None, :], ref.R2t, gens.omega[None, :])
    mu_abs = np.abs(mu)
    rel = mu_abs.min(axis=1) / np.maximum(mu_abs.max(axis=1), np.finfo(float).tiny)
    if np.any(rel <= mu_tol):
        ell = int(np.argmin(rel))
        raise PreconditionError(f"reference Laplace transform vanishes on mode {ell}")

    Q = _orthonormal(grid, X)
    m = Q.shape[1]
    taus = (ref.tau1, ref.tau2)
    mbar = [float(mu_bar(tau, ref.R10)) for tau in taus]
    prof = mz_reference(ref.R10)
    Es = [semigroup_E(gens.A_z, tau, ref.R10) for tau in taus]
    Ets = [semigroup_Etilde(gens.A_z, tau, prof) for tau in taus]

    # E-preimage check: does E map X x X back into X
    P = Q @ Q.T * h
    leak = 0.0
    for E, Et in zip(Es, Ets):
        for Y in (E @ Q, Et @ (ref.Meq[:, None] * Q)):
            leak = max(leak, float(np.linalg.norm(Y - P @ Y) / max(np.linalg.norm(Y), 1e-300)))

    def column(dMeq, dR1, dR2):
        blocks = []
        y = _perp_response(lam, V, Vinv, cV, -1j * dMeq, 1j * dR2 * ref.Meq, rho, t)
        blocks.append(y)
        for E, Et, tau, mb in zip(Es, Ets, taus, mbar):
            dMz = E @ dMeq - Et @ (dR1 * ref.Meq)
            sel = t > tau
            y = np.zeros((nt, c.shape[0]), complex)
            y[sel] = _perp_response(lam, V, Vinv, cV, -1j * dMz, 1j * mb * dR2 * ref.Meq, rho, t[sel] - tau)
            blocks.append(y)
        y = np.concatenate(blocks).ravel() * wt
        return np.concatenate([y.real, y.imag])

    zero = np.zeros(grid.npts)
    cols = []
    for i in range(m):
        q = Q[:, i]
        cols += [column(q, zero, zero), column(zero, q, zero), column(zero, zero, q + 0j),
                 column(zero, zero, 1j * q)]
    M = np.stack(cols, axis=1)
    s = np.linalg.svd(M, compute_uv=False)
    return RankReport(float(s[-1]), s, lam_z, lam, det, float(rel.min()), leak, threshold)
