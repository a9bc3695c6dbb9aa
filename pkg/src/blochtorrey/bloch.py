"""Pointwise Bloch dynamics in the rotating frame.

State at each grid point is ``m = (Re Mperp, Im Mperp, Mz)``. The evolution is
``dm/dt + A m = (0, 0, R1 Meq)`` with

    A = [[R2,     -(w+dw),  -b_y],
         [ w+dw,   R2,       b_x],
         [ b_y,   -b_x,      R1 ]]

where ``R2 + i dw = R2*``, ``w = gamma r.G`` and ``b = gamma cplus p``. With
this orientation a pulse of flip angle pi/2 along the real axis takes
``Mz = Meq`` to ``Mperp = -i Meq``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .core import CoeffFields, MagState, ModelError, PreconditionError, Trajectory
from .seq import INVERSION, NINETY, Free, Pulse, PulseSequence, intervals


class SingularFixedPointError(ModelError, ZeroDivisionError):
    """``|b|^2 + alpha1 alpha2 = 0``: the pulse system has no fixed point."""


@dataclass
class PulsePropagator:
    """Affine map ``m -> P m + q`` over one constant-coefficient interval."""

    P: np.ndarray
    q: np.ndarray
    eigenvalues: np.ndarray

    def apply(self, m):
        return np.einsum("...ij,...j->...i", self.P, m) + self.q


@dataclass(frozen=True)
class ExactPiecewise:
    pass


@dataclass(frozen=True)
class Numeric:
    dt: float | None = None


# ---------------------------------------------------------------------------
# closed-form pulse propagator


def _phi_cos_sinc(z):
    """cos(sqrt z) and sin(sqrt z)/sqrt z, entire in z, series near 0."""
    z = np.asarray(z, dtype=complex)
    small = np.abs(z) < 1e-3
    s = np.sqrt(np.where(small, 1.0, z))
    c = np.where(small, 1.0, np.cos(s))
    sn = np.where(small, 1.0, np.sin(s) / s)
    zs = np.where(small, z, 0.0)
    c_series = 1 - zs / 2 + zs**2 / 24 - zs**3 / 720 + zs**4 / 40320
    s_series = 1 - zs / 6 + zs**2 / 120 - zs**3 / 5040 + zs**4 / 362880
    return np.where(small, c_series, c), np.where(small, s_series, sn)


def pulse_propagator(alpha1, alpha2, b, f, dt, degenerate_tol: float = 1e-8) -> PulsePropagator:
    """Exact propagator of ``dm/dt + A m = (0, 0, f)`` on an interval of length ``dt``.

    ``A = [[a2, 0, -by], [0, a2, bx], [by, -bx, a1]]`` with ``b = bx + i by``.
    All arguments broadcast; ``alpha1`` and ``alpha2`` may be complex, in which
    case ``P`` is the exponential of the complex matrix.

    The (transverse-along-b, longitudinal) block is diagonalised with
    eigenvalues ``(a1+a2)/2 +- i sqrt(|b|^2 - ((a2-a1)/2)^2)``; when the
    discriminant is below ``degenerate_tol * |b|^2``, or ``|theta dt| <= 1``,
    the equivalent entire cos/sinc form is used instead.
    """
    a1, a2, b, f, dt = np.broadcast_arrays(*(np.asarray(x, dtype=complex) for x in (alpha1, alpha2, b, f, dt)))
    B = np.abs(b)
    ang = np.angle(b)
    c, s = np.cos(ang), np.sin(ang)
    mu = 0.5 * (a1 + a2)
    delta = 0.5 * (a2 - a1)
    disc = B**2 - delta**2
    theta = np.sqrt(disc)
    lam_p, lam_m = mu + 1j * theta, mu - 1j * theta

    # rotated frame: b along x, block acts on (y', z)
    # series route near the double eigenvalue and for |theta dt| <= 1, eigen route elsewhere
    degenerate = np.abs(disc) < degenerate_tol * np.maximum(B**2, np.finfo(float).tiny)
    degenerate |= np.abs(theta * dt) <= 1.0
    # eigenvectors (B, u+), (B, u-) with u+- = lam_pm - a2 and u+ u- = B^2; the
    # smaller root is taken from the product to avoid cancellation
    up, um = -delta + 1j * theta, -delta - 1j * theta
    swap = np.abs(up) < np.abs(um)
    big = np.where(swap, um, up)
    small = B**2 / np.where(big == 0, 1.0, big)
    up, um = np.where(swap, small, big), np.where(swap, big, small)
    ep, em = np.exp(-dt * lam_p), np.exp(-dt * lam_m)
    d2 = np.where(degenerate, 1.0, -2j * theta)
    K_eig = np.empty(a1.shape + (2, 2), dtype=complex)
    K_eig[..., 0, 0] = (um * ep - up * em) / d2
    K_eig[..., 0, 1] = B * (em - ep) / d2
    K_eig[..., 1, 0] = B * (ep - em) / d2
    K_eig[..., 1, 1] = (um * em - up * ep) / d2
    # series route: exp(-dt(mu I + N)) with N = [[delta, B], [-B, -delta]], N^2 = -theta^2 I
    cz, sz = _phi_cos_sinc(disc * dt**2)
    emu = np.exp(-dt * mu)
    K_ser = np.empty_like(K_eig)
    K_ser[..., 0, 0] = emu * (cz - dt * sz * delta)
    K_ser[..., 0, 1] = -emu * dt * sz * B
    K_ser[..., 1, 0] = emu * dt * sz * B
    K_ser[..., 1, 1] = emu * (cz + dt * sz * delta)
    K = np.where(degenerate[..., None, None], K_ser, K_eig)

    Pr = np.zeros(a1.shape + (3, 3), dtype=complex)
    Pr[..., 0, 0] = np.exp(-dt * a2)
    Pr[..., 1:, 1:] = K
    R = np.zeros(a1.shape + (3, 3))
    R[..., 0, 0], R[..., 0, 1], R[..., 1, 0], R[..., 1, 1], R[..., 2, 2] = c, -s, s, c, 1.0
    P = R @ Pr @ np.swapaxes(R, -1, -2)

    den = B**2 + a1 * a2
    singular = np.abs(den) == 0
    if np.any(singular & (f != 0)):
        raise SingularFixedPointError("|b|^2 + alpha1*alpha2 = 0 with nonzero forcing")
    den = np.where(singular, 1.0, den)
    ft = np.stack([f * b.imag, -f * b.real, f * a2], axis=-1) / den[..., None]
    ft = np.where(singular[..., None], 0.0, ft)
    q = ft - np.einsum("...ij,...j->...i", P, ft)
    # q = ft - P ft cancels when the fixed point is far larger than the response
    scale = np.maximum(np.maximum(B, np.abs(a2)), np.abs(a1))
    ill = (f != 0) & ~singular & (scale > 1e4 * np.abs(den) * np.abs(dt))
    if np.any(ill):
        fz = np.zeros(f[ill].shape + (3,), complex)
        fz[..., 2] = f[ill]
        dti = dt[ill]
        Ai = pulse_matrix(a1[ill], a2[ill], b[ill]) * dti[..., None, None]
        q[ill] = affine_expm(Ai, fz * dti[..., None], 1.0)[1]
    eig = np.stack([a2, lam_p, lam_m], axis=-1)
    if all(np.all(x.imag == 0) for x in (a1, a2, f, dt)):
        P, q = P.real, q.real
    return PulsePropagator(P, q, eig)


def pulse_matrix(alpha1, alpha2, b) -> np.ndarray:
    """The 3x3 generator ``A`` of :func:`pulse_propagator` (for oracles)."""
    a1, a2, b = np.broadcast_arrays(*(np.asarray(x, dtype=complex) for x in (alpha1, alpha2, b)))
    A = np.zeros(a1.shape + (3, 3), dtype=complex)
    A[..., 0, 0] = a2
    A[..., 1, 1] = a2
    A[..., 2, 2] = a1
    A[..., 0, 2] = -b.imag
    A[..., 1, 2] = b.real
    A[..., 2, 0] = b.imag
    A[..., 2, 1] = -b.real
    return A


def bloch_generator(R1, R2star, b, omega) -> np.ndarray:
    """Real 3x3 generator including off-resonance and gradient precession."""
    R1, R2star, b, omega = np.broadcast_arrays(np.asarray(R1, float), np.asarray(R2star, complex),
                                               np.asarray(b, complex), np.asarray(omega, float))
    A = np.zeros(R1.shape + (3, 3))
    w = R2star.imag + omega
    A[..., 0, 0] = A[..., 1, 1] = R2star.real
    A[..., 2, 2] = R1
    A[..., 0, 1] = -w
    A[..., 1, 0] = w
    A[..., 0, 2] = -b.imag
    A[..., 1, 2] = b.real
    A[..., 2, 0] = b.imag
    A[..., 2, 1] = -b.real
    return A


def affine_expm(A, f, dt):
    """Propagator of ``dm/dt + A m = f`` via the augmented matrix exponential."""
    A = np.asarray(A)
    n = A.shape[-1]
    aug = np.zeros(A.shape[:-2] + (n + 1, n + 1), dtype=A.dtype)
    aug[..., :n, :n] = -A * dt
    aug[..., :n, n] = np.asarray(f) * dt
    E = scipy.linalg.expm(aug)
    return E[..., :n, :n], E[..., :n, n]


# ---------------------------------------------------------------------------
# free precession and explicit states


def free_precession(state: MagState, coeffs: CoeffFields, k_start, k_end, dt: float) -> MagState:
    """Exact relaxation and gradient phase over a pulse-free interval."""
    r = coeffs.grid.r3
    dk = np.asarray(k_end, float) - np.asarray(k_start, float)
    phase = np.exp(-(coeffs.R2star * dt + 2j * np.pi * (r @ dk)))
    Mz = coeffs.Meq + np.exp(-coeffs.R1 * dt) * (state.Mz - coeffs.Meq)
    return MagState(coeffs.grid, phase * state.Mperp, Mz)


def explicit_state(seq: PulseSequence, coeffs: CoeffFields, times) -> Trajectory:
    """Zero-pulse-length states after a 90 or 180-tau-90 sequence.

    ``Mperp(t) = -i exp(-(R2*(t - t_ref) + 2 pi i (k(t) - k(t_ref)).r)) Phi`` with
    ``Phi = Meq`` (90) or ``(1 - 2 exp(-R1 tau)) Meq`` (180-tau-90), and
    ``t_ref`` the end of the last pulse.
    """
    times = np.atleast_1d(np.asarray(times, float))
    t_ref = seq.t_ref
    r = coeffs.grid.r3
    if seq.kind == NINETY:
        phi = coeffs.Meq
    else:
        phi = (1 - 2 * np.exp(-coeffs.R1 * seq.tau)) * coeffs.Meq
    dk = seq.k(times) - seq.k(t_ref)
    dt = (times - t_ref)[:, None]
    Mperp = -1j * np.exp(-(coeffs.R2star[None, :] * dt + 2j * np.pi * dk @ r.T)) * phi[None, :]
    Mz = coeffs.Meq[None, :] * (1 - np.exp(-coeffs.R1[None, :] * dt))
    return Trajectory(coeffs.grid, times, Mperp, Mz, {"model": "explicit", "kind": seq.kind})


# ---------------------------------------------------------------------------
# solvers


def _as_vec(state: MagState) -> np.ndarray:
    return np.stack([state.Mperp.real, state.Mperp.imag, state.Mz], axis=-1)


def _interval_data(seq, coeffs, cplus, seg):
    """Generator ``A`` (npts, 3, 3) and forcing (npts, 3) on one segment."""
    n = coeffs.grid.npts
    if isinstance(seg, Pulse):
        b = seq.gamma * cplus * seg.amplitude
        omega = np.zeros(n)
    else:
        b = np.zeros(n, complex)
        G = np.zeros(3) if seg is None else seg.gradient
        omega = seq.gamma * (coeffs.grid.r3 @ G)
    A = bloch_generator(coeffs.R1, coeffs.R2star, b, omega)
    f = np.zeros((n, 3))
    f[:, 2] = coeffs.R1 * coeffs.Meq
    return A, f, b


def _rk4_linear(A, f, m, h, nsteps):
    def rhs(x):
        return np.einsum("...ij,...j->...i", -A, x) + f
    for _ in range(nsteps):
        k1 = rhs(m)
        k2 = rhs(m + 0.5 * h * k1)
        k3 = rhs(m + 0.5 * h * k2)
        k4 = rhs(m + h * k3)
        m = m + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
    return m


def _numeric_steps(seq, seg, length, dt):
    if dt is None:
        dt = seq.tau_p / 50 if isinstance(seg, Pulse) else (seg.duration / 1000 if seg is not None else length)
    return max(1, int(np.ceil(length / dt - 1e-9)))


def solve_bloch(seq: PulseSequence, coeffs: CoeffFields, times, cplus=1.0, mode=ExactPiecewise(),
                initial: MagState | None = None) -> Trajectory:
    """Integrate the pointwise Bloch system and sample at ``times`` (sorted)."""
    times = np.atleast_1d(np.asarray(times, float))
    if np.any(np.diff(times) < 0):
        raise PreconditionError("sample times must be sorted")
    grid = coeffs.grid
    cplus = grid.field(cplus, complex)
    state = initial or MagState.equilibrium(coeffs)
    m = _as_vec(state)
    out = np.zeros((times.size, grid.npts, 3))
    out[times == 0] = m
    real_r2 = np.all(coeffs.R2star.imag == 0)
    t_now = 0.0
    for a, b_, seg in intervals(seq, times):
        h = b_ - a
        if isinstance(mode, Numeric):
            A, f, _ = _interval_data(seq, coeffs, cplus, seg)
            n = _numeric_steps(seq, seg, h, mode.dt)
            m = _rk4_linear(A, f, m, h / n, n)
        elif isinstance(seg, Pulse):
            if real_r2:
                prop = pulse_propagator(coeffs.R1, coeffs.R2star.real, seq.gamma * cplus * seg.amplitude,
                                        coeffs.R1 * coeffs.Meq, h)
                m = prop.apply(m)
            else:
                A, f, _ = _interval_data(seq, coeffs, cplus, seg)
                P, q = affine_expm(A, f, h)
                m = np.einsum("...ij,...j->...i", P, m) + q
        else:
            st = MagState(grid, m[:, 0] + 1j * m[:, 1], m[:, 2])
            st = free_precession(st, coeffs, seq.k(a), seq.k(b_), h)
            m = _as_vec(st)
        t_now = b_
        out[times == t_now] = m
    return Trajectory(grid, times, out[..., 0] + 1j * out[..., 1], out[..., 2],
                      {"model": "bloch", "mode": type(mode).__name__, "kind": seq.kind})


def _linear_generators(seq, coeffs, dcoeffs, cplus, seg):
    A, f, b = _interval_data(seq, coeffs, cplus, seg)
    n = coeffs.grid.npts
    dA = bloch_generator(dcoeffs.R1, dcoeffs.R2star, np.zeros(n, complex), np.zeros(n))
    df = np.zeros((n, 3))
    df[:, 2] = dcoeffs.R1 * coeffs.Meq + coeffs.R1 * dcoeffs.Meq
    Z = np.zeros_like(A)
    big = np.block([[A, Z], [dA, A]])
    return big, np.concatenate([f, df], axis=-1)


def solve_bloch_linearized(seq: PulseSequence, coeffs: CoeffFields, dcoeffs: CoeffFields, times,
                           cplus=1.0, mode=ExactPiecewise()) -> Trajectory:
    """Directional derivative of :func:`solve_bloch` with respect to ``(Meq, R1, R2*)``.

    The base and tangent states are propagated together. Free segments use
    the closed-form variation-of-constants solution; pulse segments use the
    block-triangular affine exponential. ``Numeric`` mode runs the same RK4
    scheme as the forward solver on the joint system, which makes it the
    exact derivative of the discrete forward map.
    """
    times = np.atleast_1d(np.asarray(times, float))
    grid = coeffs.grid
    cplus = grid.field(cplus, complex)
    m = _as_vec(MagState.equilibrium(coeffs))
    dm = np.zeros_like(m)
    dm[:, 2] = dcoeffs.Meq
    z = np.concatenate([m, dm], axis=-1)
    out = np.zeros((times.size, grid.npts, 6))
    out[times == 0] = z
    r = grid.r3
    for a, b_, seg in intervals(seq, times):
        h = b_ - a
        if isinstance(mode, Numeric):
            big, F = _linear_generators(seq, coeffs, dcoeffs, cplus, seg)
            n = _numeric_steps(seq, seg, h, mode.dt)
            z = _rk4_linear(big, F, z, h / n, n)
        elif isinstance(seg, Pulse):
            big, F = _linear_generators(seq, coeffs, dcoeffs, cplus, seg)
            P, q = affine_expm(big, F, h)
            z = np.einsum("...ij,...j->...i", P, z) + q
        else:
            Mp = z[:, 0] + 1j * z[:, 1]
            dMp = z[:, 3] + 1j * z[:, 4]
            dk = seq.k(b_) - seq.k(a)
            rate = coeffs.R2star * h + 2j * np.pi * (r @ dk)
            e = np.exp(-rate)
            dMp = e * (dMp - dcoeffs.R2star * h * Mp)
            Mp = e * Mp
            w0 = z[:, 2] - coeffs.Meq
            v0 = z[:, 5] - dcoeffs.Meq
            e1 = np.exp(-coeffs.R1 * h)
            Mz = coeffs.Meq + e1 * w0
            dMz = dcoeffs.Meq + e1 * (v0 - dcoeffs.R1 * h * w0)
            z = np.stack([Mp.real, Mp.imag, Mz, dMp.real, dMp.imag, dMz], axis=-1)
        out[times == b_] = z
    return Trajectory(grid, times, out[..., 3] + 1j * out[..., 4], out[..., 5],
                      {"model": "bloch-linearized", "base_Mperp": out[..., 0] + 1j * out[..., 1],
                       "base_Mz": out[..., 2]})
