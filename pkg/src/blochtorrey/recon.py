"""Reconstruction of Meq, R1 and R2* from explicit-model signals.

The ansatz space ``X`` is spanned by the dual-lattice Fourier modes met by
the k-space trajectory. Inversion on ``X`` is a least-squares solve of the
sampled transform, so its stability constant is the reciprocal smallest
singular value of the sampling matrix.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import brentq

from .core import DomainError, Grid, ModelError, PreconditionError
from .kspace import ft_matrix
from .measure import CoilSet, Measurement, demodulate
from .seq import PulseSequence


class RankDeficiencyError(PreconditionError):
    def __init__(self, msg, sigma):
        super().__init__(f"{msg} (smallest singular value {sigma:.3e})")
        self.sigma = sigma


class ConvergenceError(ModelError):
    def __init__(self, msg, history):
        super().__init__(msg)
        self.history = history


@dataclass
class AnsatzSpace:
    grid: Grid
    freqs: np.ndarray
    C_I: float = np.nan
    sigma_min: float = np.nan

    @property
    def dim(self) -> int:
        return len(self.freqs)

    def basis(self) -> np.ndarray:
        """Orthonormal complex basis ``exp(2 pi i xi.r)/sqrt(V)``, shape ``(npts, dim)``."""
        return np.exp(2j * np.pi * self.grid.r3 @ self.freqs.T) / np.sqrt(self.grid.volume)

    def real_basis(self) -> np.ndarray:
        """Orthonormal basis of the real parts of members of ``X``."""
        Phi = self.basis()
        M = np.concatenate([Phi.real, Phi.imag], axis=1) * np.sqrt(self.grid.cell_volume)
        U, s, _ = np.linalg.svd(M, full_matrices=False)
        rank = int(np.sum(s > 1e-10 * s[0]))
        return U[:, :rank] / np.sqrt(self.grid.cell_volume)

    def project(self, x) -> np.ndarray:
        Phi = self.basis()
        return Phi @ (Phi.conj().T @ np.asarray(x) * self.grid.cell_volume)

    @classmethod
    def full(cls, grid: Grid) -> "AnsatzSpace":
        return cls(grid, grid.lattice(), 1.0, 1.0)


def build_ansatz(grid: Grid, k, tol: float | None = None) -> AnsatzSpace:
    """Lattice frequencies within ``tol`` of a sample, with the stability constant."""
    k = np.atleast_2d(np.asarray(k, float))
    lat = grid.lattice()
    if tol is None:
        tol = 1e-9 / max(grid.extent)
    dist = np.full(len(lat), np.inf)
    for i0 in range(0, len(k), 512):
        d = np.linalg.norm(lat[:, None, :] - k[None, i0 : i0 + 512, :], axis=-1)
        dist = np.minimum(dist, d.min(axis=1))
    freqs = lat[dist <= tol]
    if len(freqs) == 0:
        raise RankDeficiencyError("no lattice frequency lies on the trajectory", 0.0)
    X = AnsatzSpace(grid, freqs)
    S = ft_matrix(grid, k) @ X.basis() / np.sqrt(grid.volume)
    s = np.linalg.svd(S, compute_uv=False)
    if s[-1] < 1e-8:
        raise RankDeficiencyError("sampling matrix is rank deficient on the ansatz space", s[-1])
    X.sigma_min = float(s[-1])
    X.C_I = float(1.0 / s[-1])
    return X


def interp_inverse(y, k, coils: CoilSet, X: AnsatzSpace, weights=None, rcond: float = 1e-10):
    """Least-squares ``x`` in ``X`` with ``F[c_j w x](k_i) = y_j(k_i)``.

    ``y`` has shape ``(ncoils, M)``; optional ``weights`` of shape ``(M, npts)``
    multiply the integrand sample by sample. Returns ``(x, report)``; the
    report carries the stability constant ``C_I`` for data measured in
    :func:`measure.data_norm`.
    """
    grid = X.grid
    y = np.atleast_2d(np.asarray(y, complex))
    E = ft_matrix(grid, k)
    if weights is not None:
        E = E * weights
    Phi = X.basis()
    A = np.concatenate([E @ (c[:, None] * Phi) for c in coils.c], axis=0)
    U, s, Vh = np.linalg.svd(A, full_matrices=False)
    if s[-1] < rcond * s[0]:
        raise RankDeficiencyError("interpolation problem is rank deficient", s[-1])
    b = y.reshape(-1)
    coef = Vh.conj().T @ ((U.conj().T @ b) / s)
    x = Phi @ coef
    res = A @ coef - b
    report = {
        "residual": float(np.linalg.norm(res) / np.sqrt(grid.volume)),
        "sigma_min": float(s[-1]),
        "C_I": float(np.sqrt(grid.volume) / s[-1]),
    }
    return x, report


def _relative_k(seq: PulseSequence, t):
    return seq.k(t) - seq.k(seq.t_ref)


def recon_Meq(meas: Measurement, seq: PulseSequence, R2ref: complex, X: AnsatzSpace, coils: CoilSet):
    """Meq from 90-degree data, exact when R2* equals ``R2ref`` everywhere."""
    d = demodulate(meas, R2ref, seq.t_ref, +1)
    x, rep = interp_inverse(d.y, _relative_k(seq, meas.t), coils, X)
    rep["imag_part"] = float(np.abs(x.imag).max())
    return x.real, rep


def recon_Phi(meas: Measurement, seq: PulseSequence, R2ref: complex, X: AnsatzSpace, coils: CoilSet):
    """``Phi_tau = (1 - 2 exp(-R1 tau)) Meq`` from 180-tau-90 data."""
    d = demodulate(meas, R2ref, seq.t_ref, +1)
    x, rep = interp_inverse(d.y, _relative_k(seq, meas.t), coils, X)
    rep["imag_part"] = float(np.abs(x.imag).max())
    return x.real, rep


# ---------------------------------------------------------------------------
# R1


def psi(x, tau1, tau2):
    """(1 - 2 e^{tau1 x}) / (1 - 2 e^{tau2 x}); at x = -R1 this is Phi_tau1 / Phi_tau2."""
    x = np.asarray(x, float)
    return (1 - 2 * np.exp(tau1 * x)) / (1 - 2 * np.exp(tau2 * x))


def psi_tilde(x, tau1, tau2):
    x = np.asarray(x, float)
    return (tau2 - tau1) * (1 - 2 * np.exp(tau2 * x)) + tau2 * (np.exp((tau2 - tau1) * x) - 1)


def psi_prime(x, tau1, tau2):
    x = np.asarray(x, float)
    return 2 * np.exp(tau1 * x) * psi_tilde(x, tau1, tau2) / (1 - 2 * np.exp(tau2 * x)) ** 2


def psi_pole(tau2) -> float:
    return -np.log(2) / tau2


def invert_psi(val, tau1: float, tau2: float, R1max: float | None = None):
    """Solve ``psi(x) = val`` for ``x <= 0``; ``psi`` is strictly decreasing on each branch.

    Values ``>= 1`` lie on the branch right of the pole ``-ln 2/tau2``, values
    ``< 1`` on the branch left of it, so the sign of ``val`` is required to
    pick the root. Brackets stay a relative distance away from the pole.
    Returns ``(x, branch)`` arrays with branch +1 (right) or -1 (left).
    """
    if not 0 < tau1 < tau2:
        raise PreconditionError("need 0 < tau1 < tau2")
    vals = np.atleast_1d(np.asarray(val, float))
    pole = psi_pole(tau2)
    xmin = -np.inf if R1max is None else -float(R1max)
    xs = np.full(vals.shape, np.nan)
    branch = np.zeros(vals.shape, int)
    for i, v in np.ndenumerate(vals):
        if not np.isfinite(v):
            continue
        f = lambda x: psi(x, tau1, tau2) - v  # noqa: E731
        if v >= 1:
            if v == 1:
                xs[i], branch[i] = 0.0, 1
                continue
            hi = 0.0
            eps = 1e-3 * abs(pole)
            while f(pole + eps) <= 0:
                eps *= 0.5
                if eps < 1e-15 * abs(pole):
                    raise DomainError(f"psi value {v:g} too close to the pole")
            lo = pole + eps
            if lo < xmin:
                lo = xmin
                if f(lo) < 0:
                    raise DomainError(f"psi value {v:g} implies R1 above {-xmin:g}")
            xs[i], branch[i] = brentq(f, lo, hi, xtol=1e-15, rtol=1e-15), 1
        else:
            eps = 1e-3 * abs(pole)
            while f(pole - eps) >= 0:
                eps *= 0.5
                if eps < 1e-15 * abs(pole):
                    raise DomainError(f"psi value {v:g} too close to the pole")
            hi = pole - eps
            lo = pole - 1.0
            while f(lo) <= 0:
                lo = pole - 2 * (pole - lo)
                if lo < xmin or lo < -1e6:
                    raise DomainError(f"psi value {v:g} is outside the range on [-R1max, 0]")
            if lo < xmin:
                raise DomainError(f"psi value {v:g} is outside the range on [-R1max, 0]")
            xs[i], branch[i] = brentq(f, lo, hi, xtol=1e-15, rtol=1e-15), -1
    if xmin > -np.inf and np.any(xs < xmin):
        raise DomainError(f"psi inversion implies R1 above {-xmin:g}")
    return xs, branch


def recon_R1(mode: str, tau, Phi, Meq=None, Phi2=None, tau2=None, signed: bool = True,
             floor_rel: float = 1e-8, R1max: float | None = None, floor_R1: float = 1e-6):
    """R1 from recovered inversion-recovery magnetisations.

    ``mode='known_meq'``: ``R1 = (ln 2 - ln(1 - Phi/Meq)) / tau``.
    ``mode='two_tau'``: ``R1 = -psi^{-1}(Phi_tau / Phi_tau2)``.

    With ``signed=True`` the real ratio keeps its sign, which resolves the
    two branches that a magnitude ratio cannot tell apart. Points where the
    denominator is below ``floor_rel`` times its maximum are returned as NaN.
    """
    Phi = np.asarray(Phi)
    if mode == "known_meq":
        if Meq is None:
            raise PreconditionError("known_meq mode needs Meq")
        Meq = np.asarray(Meq)
        mask = np.abs(Meq) >= floor_rel * np.abs(Meq).max()
        rho = np.full(Phi.shape, np.nan)
        rho[mask] = np.real(Phi[mask] / Meq[mask])
        if not signed:
            rho = np.abs(rho)
        bad = np.flatnonzero(mask & (np.abs(rho) >= 1))
        if bad.size:
            i = int(bad[0])
            raise DomainError(f"|Phi/Meq| = {abs(rho[i]):g} >= 1 at index {i}")
        R1 = (np.log(2) - np.log(1 - rho)) / tau
    elif mode == "two_tau":
        if Phi2 is None or tau2 is None:
            raise PreconditionError("two_tau mode needs a second delay")
        Phi2 = np.asarray(Phi2)
        mask = np.abs(Phi2) >= floor_rel * np.abs(Phi2).max()
        ratio = np.full(Phi.shape, np.nan)
        ratio[mask] = np.real(Phi[mask] / Phi2[mask])
        if not signed:
            ratio = np.abs(ratio)
        x, _ = invert_psi(ratio, tau, tau2, R1max)
        R1 = -x
    else:
        raise PreconditionError(f"unknown R1 mode {mode!r}")
    low = np.flatnonzero(np.isfinite(R1) & (R1 < floor_R1))
    if low.size:
        i = int(low[0])
        raise DomainError(f"recovered R1 = {R1[i]:g} below floor at index {i}")
    return R1


# ---------------------------------------------------------------------------
# R2*


def fd4(y, dt: float):
    """Fourth-order finite-difference derivative along the last axis."""
    y = np.asarray(y)
    n = y.shape[-1]
    if n < 5:
        raise PreconditionError("need at least five samples")
    d = np.empty_like(y)
    d[..., 2:-2] = (-y[..., 4:] + 8 * y[..., 3:-1] - 8 * y[..., 1:-3] + y[..., :-4]) / (12 * dt)
    d[..., 0] = (-25 * y[..., 0] + 48 * y[..., 1] - 36 * y[..., 2] + 16 * y[..., 3] - 3 * y[..., 4]) / (12 * dt)
    d[..., 1] = (-3 * y[..., 0] - 10 * y[..., 1] + 18 * y[..., 2] - 6 * y[..., 3] + y[..., 4]) / (12 * dt)
    d[..., -1] = (25 * y[..., -1] - 48 * y[..., -2] + 36 * y[..., -3] - 16 * y[..., -4] + 3 * y[..., -5]) / (12 * dt)
    d[..., -2] = (3 * y[..., -1] + 10 * y[..., -2] - 18 * y[..., -3] + 6 * y[..., -4] - y[..., -5]) / (12 * dt)
    return d


def fit_R20(a, b, rhs, s, R0: complex, maxit: int = 100, tol: float = 1e-13):
    """Gauss-Newton for ``R a + exp(R s) b = rhs`` in one complex unknown."""
    R = complex(R0)
    hist = []
    for it in range(maxit):
        e = np.exp(R * s)
        r = R * a + e * b - rhs
        J = a + s * e * b
        step = -np.vdot(J, r) / np.vdot(J, J).real
        R += step
        hist.append(float(np.linalg.norm(r)))
        if abs(step) <= tol * max(1.0, abs(R)):
            return R, hist
    raise ConvergenceError("R2* regression did not converge", hist)


def recon_R2star(meas: Measurement, seq: PulseSequence, Meq, X: AnsatzSpace, coils: CoilSet,
                 R20: complex | None = None, refine: int = 0, floor_rel: float = 1e-8):
    """R2* from 90-degree data and a recovered ``Meq``.

    The time derivative of ``i y`` is taken by fourth-order differences on a
    uniform clock. A constant ``R20`` is fitted first; the transform of
    ``R2* c Meq`` along ``k(t)`` is then inverted on ``X``. With
    ``refine > 0`` that many Gauss-Newton steps are taken on the
    undifferentiated model ``i y = F[exp(-R2* (t - t_ref)) c Meq](k)``, which
    removes the factor ``exp(-(R2* - R20)(t - t_ref))`` the one-shot formula drops.
    """
    grid = X.grid
    t = meas.t
    dt = np.diff(t)
    if not np.allclose(dt, dt[0], rtol=1e-9):
        raise PreconditionError("R2* reconstruction needs a uniform clock")
    dt = dt[0]
    Meq = grid.field(Meq, float)
    s = t - seq.t_ref
    k = _relative_k(seq, t)
    E = ft_matrix(grid, k)
    G = seq.G(t)
    r = grid.r3
    ytil = 1j * meas.y
    dy = fd4(ytil, dt)
    g = seq.gamma / (2 * np.pi)
    a = np.stack([E @ (c * Meq) for c in coils.c])
    grad = np.stack([np.stack([E @ (-2j * np.pi * r[:, ax] * c * Meq) for ax in range(3)], -1) for c in coils.c])
    rhs = g * np.einsum("jta,ta->jt", grad, G)
    if R20 is None:
        j, i = np.unravel_index(np.argmax(np.abs(a) * (s > 0)), a.shape)
        R20 = -np.log(ytil[j, i] / a[j, i]) / s[i]
    S = np.broadcast_to(s, a.shape)
    R20, hist = fit_R20(a.ravel(), dy.ravel(), rhs.ravel(), S.ravel(), R20)

    mask = np.abs(Meq) >= floor_rel * np.abs(Meq).max()
    data = rhs - np.exp(R20 * s)[None, :] * dy
    u, rep = interp_inverse(data, k, coils, X)
    R2 = np.full(grid.npts, np.nan + 0j)
    R2[mask] = u[mask] / Meq[mask]
    rep.update({"R20": R20, "gauss_newton": hist})
    if refine:
        R2, rep["refine"] = _refine_R2star(ytil, s, E, coils, Meq, X, R2, R20, mask, refine)
    return R2, rep


def _refine_R2star(ytil, s, E, coils, Meq, X, R2, R20, mask, iters):
    """Gauss-Newton on ``i y = F[exp(-R2* s) c Meq](k)`` with ``R2*`` in ``X``."""
    Phi = X.basis()
    h = X.grid.cell_volume
    b = ytil.reshape(-1)

    def model(a):
        R = Phi @ a
        w = np.exp(-np.outer(s, R))
        pred = np.concatenate([(E * w) @ (c * Meq) for c in coils.c])
        return R, w, pred

    def coef_of(R):
        return Phi.conj().T @ R * h

    start = [coef_of(np.full(X.grid.npts, R20))]
    if np.all(np.isfinite(R2[mask])):
        start.append(coef_of(np.where(mask, R2, R20)))
    res = [np.linalg.norm(model(a)[2] - b) for a in start]
    a = start[int(np.argmin(res))]
    hist = [float(min(res))]
    for _ in range(iters):
        R, w, pred = model(a)
        J = np.concatenate([(E * w * (-s[:, None])) @ ((c * Meq)[:, None] * Phi) for c in coils.c])
        step = np.linalg.lstsq(J, b - pred, rcond=None)[0]
        lam = 1.0
        while True:
            new = np.linalg.norm(model(a + lam * step)[2] - b)
            if new <= hist[-1] or lam < 1e-4:
                break
            lam *= 0.5
        a = a + lam * step
        hist.append(float(new))
    R = Phi @ a
    out = np.full(X.grid.npts, np.nan + 0j)
    out[mask] = R[mask]
    return out, hist
