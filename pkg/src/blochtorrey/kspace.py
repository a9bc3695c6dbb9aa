"""Fourier-domain solver for constant-coefficient Bloch-Torrey dynamics.

Convention: ``F[u](xi) = sum_n u(r_n) exp(-2 pi i xi.r_n) h`` (midpoint rule on
the grid, zero extension outside the box). On the dual lattice ``m / L`` this
is an FFT with a phase correction; off the lattice it is evaluated directly,
which is trigonometric interpolation of the lattice values.

With ``-div(D0 grad)`` the diffusion symbol is ``4 pi^2 xi.D0 xi``. The gradient
term transports along characteristics ``xi + k(t) - k(s)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .bloch import affine_expm, bloch_generator, pulse_propagator
from .core import CoeffFields, Grid, PreconditionError, Trajectory
from .seq import INVERSION, NINETY, Pulse, PulseSequence, intervals


@dataclass
class SpectralField:
    """Values on the dual lattice in FFT order (see :meth:`Grid.lattice`)."""

    grid: Grid
    values: np.ndarray

    def to_grid(self) -> np.ndarray:
        return idft_grid(self.values, self.grid)


def _phase(grid: Grid) -> np.ndarray:
    # exp(-2 pi i xi_m . r_0) for the first cell centre r_0
    r0 = np.array(grid.origin) + 0.5 * grid.spacing
    xi = grid.lattice()[:, : grid.dim]
    return np.exp(-2j * np.pi * xi @ r0)


def dft_grid(x, grid: Grid) -> np.ndarray:
    x = np.asarray(x).reshape(grid.shape)
    return np.fft.fftn(x).ravel() * _phase(grid) * grid.cell_volume


def idft_grid(xhat, grid: Grid) -> np.ndarray:
    xhat = np.asarray(xhat) / (_phase(grid) * grid.cell_volume)
    return np.fft.ifftn(xhat.reshape(grid.shape)).ravel()


def ft_matrix(grid: Grid, k) -> np.ndarray:
    """Rows ``exp(-2 pi i k_i.r_n) h`` for arbitrary frequencies ``k`` (M, 3)."""
    k = np.atleast_2d(np.asarray(k, float))
    return np.exp(-2j * np.pi * k @ grid.r3.T) * grid.cell_volume


def ft_at(x, grid: Grid, k) -> np.ndarray:
    """``F[x](k)`` at arbitrary frequencies; ``x`` may carry leading batch axes."""
    k = np.atleast_2d(np.asarray(k, float))
    out = []
    for i0 in range(0, len(k), 1024):
        out.append(np.asarray(x) @ ft_matrix(grid, k[i0 : i0 + 1024]).T)
    return np.concatenate(out, axis=-1)


def diffusion_symbol(grid: Grid, D0, xi=None) -> np.ndarray:
    xi = grid.lattice() if xi is None else np.atleast_2d(xi)
    D0 = _const_tensor(D0)
    return 4 * np.pi**2 * np.einsum("ni,ij,nj->n", xi, D0, xi)


def _const_tensor(D0) -> np.ndarray:
    D0 = np.asarray(D0, float)
    if D0.ndim == 0:
        return D0 * np.eye(3)
    if D0.shape != (3, 3) or not np.allclose(D0, D0.T):
        raise PreconditionError("D0 must be a scalar or a symmetric 3x3 tensor")
    return D0


def characteristic_integral(seq: PulseSequence, D0, xi, a: float, t: float) -> np.ndarray:
    """``int_a^t 4 pi^2 (xi + k(t) - k(s)).D0 (xi + k(t) - k(s)) ds`` (exact)."""
    D0 = _const_tensor(D0)
    xi = np.atleast_2d(np.asarray(xi, float))
    if t <= a:
        return np.zeros(len(xi))
    cuts = np.concatenate([[a], seq.G.breaks[(seq.G.breaks > a) & (seq.G.breaks < t)], [t]])
    kt = seq.k(t)
    total = np.zeros(len(xi))
    for s0, s1 in zip(cuts[:-1], cuts[1:]):
        d = s1 - s0
        g = seq.gamma / (2 * np.pi) * np.asarray(seq.G(0.5 * (s0 + s1)))
        u = xi + (kt - seq.k(s1))
        uDu = np.einsum("ni,ij,nj->n", u, D0, u)
        uDg = u @ D0 @ g
        gDg = g @ D0 @ g
        total += uDu * d + uDg * d**2 + gDg * d**3 / 3
    return 4 * np.pi**2 * total


def _check_constant(name, v):
    v = np.asarray(v)
    if v.ndim and not np.allclose(v, v.flat[0], rtol=1e-12, atol=0):
        raise PreconditionError(f"{name} must be spatially constant for the k-space solver")
    return v.flat[0] if v.ndim else v[()]


@dataclass
class KTrajectory:
    """Fourier-domain trajectory stored in the frame moving with ``k(t)``.

    ``U_hat[i]`` is the lattice transform of ``u = exp(2 pi i k(t_i).r) Mperp``,
    which stays band-limited while the gradient phase winds up. The
    transverse transform itself is ``Mperp_hat(t, xi) = U_hat(t, xi + k(t))``.
    """

    grid: Grid
    times: np.ndarray
    U_hat: np.ndarray
    Mz_hat: np.ndarray
    k: np.ndarray

    def mperp_hat(self, i: int, xi) -> np.ndarray:
        u = idft_grid(self.U_hat[i], self.grid)
        return ft_at(u, self.grid, np.atleast_2d(xi) + self.k[i])

    def to_space(self) -> Trajectory:
        r = self.grid.r3
        Mp = np.array([np.exp(-2j * np.pi * r @ k) * idft_grid(u, self.grid) for u, k in zip(self.U_hat, self.k)])
        Mz = np.array([idft_grid(m, self.grid).real for m in self.Mz_hat])
        return Trajectory(self.grid, self.times, Mp, Mz, {"model": "kspace"})

    def signal(self, c0=1.0) -> np.ndarray:
        """Constant-coil signal ``c0 * Mperp_hat(t, 0)``."""
        return c0 * np.array([self.mperp_hat(i, np.zeros(3))[0] for i in range(self.times.size)])


def solve_kspace(seq: PulseSequence, grid: Grid, Meq, R1, R2star, D0, times, cplus=1.0) -> KTrajectory:
    """Constant-coefficient dynamics on the dual lattice.

    ``R1``, ``R2star`` and ``cplus`` must be spatially constant, ``Meq`` may
    vary. In the moving frame a free segment only multiplies each lattice
    mode by its exact relaxation and diffusion factor along the
    characteristic; pulses use the 3x3 propagator per lattice frequency
    acting on ``(F[Re Mperp], F[Im Mperp], F[Mz])``.
    """
    times = np.atleast_1d(np.asarray(times, float))
    R1 = float(np.real(_check_constant("R1", R1)))
    R2 = complex(_check_constant("R2*", R2star))
    cp = complex(_check_constant("cplus", cplus))
    D0 = _const_tensor(D0)
    lat = grid.lattice()
    lamD = diffusion_symbol(grid, D0, lat)
    Meq_hat = dft_grid(grid.field(Meq, float), grid)
    lam1 = lamD + R1
    Mz_star = R1 * Meq_hat / lam1
    U = np.zeros(grid.npts, complex)
    Mz = Meq_hat.astype(complex)
    out_u = np.zeros((times.size, grid.npts), complex)
    out_z = np.zeros((times.size, grid.npts), complex)
    out_u[times == 0], out_z[times == 0] = U, Mz
    r = grid.r3
    for a, b_, seg in intervals(seq, times):
        h = b_ - a
        if isinstance(seg, Pulse):
            ph = np.exp(-2j * np.pi * r @ seq.k(a))
            mp = ph * idft_grid(U, grid)
            vec = np.stack([dft_grid(mp.real, grid), dft_grid(mp.imag, grid), Mz], axis=-1)
            bb = seq.gamma * cp * seg.amplitude
            f = R1 * Meq_hat
            if R2.imag == 0:
                vec = pulse_propagator(lam1, lamD + R2.real, bb, f, h).apply(vec)
            else:
                A = bloch_generator(lam1, lamD + R2, bb, 0.0)
                ff = np.zeros((grid.npts, 3), complex)
                ff[:, 2] = f
                P, q = affine_expm(A.astype(complex), ff, h)
                vec = np.einsum("...ij,...j->...i", P, vec) + q
            mp = idft_grid(vec[:, 0], grid) + 1j * idft_grid(vec[:, 1], grid)
            U = dft_grid(np.conj(ph) * mp, grid)
            Mz = vec[:, 2]
        else:
            Q = characteristic_integral(seq, D0, lat - seq.k(b_), a, b_)
            U = np.exp(-R2 * h - Q) * U
            Mz = Mz_star + np.exp(-lam1 * h) * (Mz - Mz_star)
        out_u[times == b_], out_z[times == b_] = U, Mz
    return KTrajectory(grid, times, out_u, out_z, seq.k(times))


def lattice_L(grid: Grid, D0, R1, tau) -> np.ndarray:
    """Symbol of ``L_tau = R1 A1^{-1}(1 - exp(-tau A1)) - exp(-tau A1)``, ``A1 = -div D0 grad + R1``."""
    lam = diffusion_symbol(grid, D0) + R1
    e = np.exp(-lam * tau)
    return (R1 - (lam + R1) * e) / lam


def _phi(seq, grid, Meq, R1, D0):
    if seq.kind == NINETY:
        return Meq.astype(complex)
    return idft_grid(lattice_L(grid, D0, R1, seq.tau) * dft_grid(Meq, grid), grid)


def _moving_ref(seq, grid, phi, R2, D0, t):
    """Moving-frame lattice values of the zero-pulse-length state at time ``t``."""
    lat = grid.lattice()
    t_ref = seq.t_ref
    phi_hat = dft_grid(np.exp(2j * np.pi * grid.r3 @ seq.k(t_ref)) * phi, grid)
    I = characteristic_integral(seq, D0, lat - seq.k(t), t_ref, t)
    return -1j * np.exp(-I - R2 * (t - t_ref)) * phi_hat


def kspace_explicit_state(seq: PulseSequence, grid: Grid, Meq, R1, R2star, D0, times) -> KTrajectory:
    """Zero-pulse-length Fourier states after a 90 or 180-tau-90 sequence."""
    times = np.atleast_1d(np.asarray(times, float))
    R1 = float(np.real(_check_constant("R1", R1)))
    R2 = complex(_check_constant("R2*", R2star))
    if np.any(times < seq.t_ref):
        raise PreconditionError("explicit states are defined after the last pulse")
    phi = _phi(seq, grid, grid.field(Meq, float), R1, D0)
    U = np.array([_moving_ref(seq, grid, phi, R2, D0, t) for t in times])
    return KTrajectory(grid, times, U, np.full((times.size, grid.npts), np.nan + 0j), seq.k(times))


def _gauss_nodes(a, b, breaks, n):
    cuts = np.concatenate([[a], breaks[(breaks > a) & (breaks < b)], [b]])
    x, w = np.polynomial.legendre.leggauss(n)
    nodes, weights = [], []
    for s0, s1 in zip(cuts[:-1], cuts[1:]):
        nodes.append(0.5 * (s1 - s0) * x + 0.5 * (s1 + s0))
        weights.append(0.5 * (s1 - s0) * w)
    return np.concatenate(nodes), np.concatenate(weights)


def kspace_jacobian(seq: PulseSequence, grid: Grid, Meq, R1, R2star, D0, dx: CoeffFields, times,
                    c0=1.0, nquad: int = 24) -> np.ndarray:
    """Directional derivative of the constant-coil signal ``c0 * Mperp_hat(t, 0)``.

    Evaluated for the zero-pulse-length model at a reference with constant
    ``R1``, ``R2*`` and ``D0``. ``dx`` may vary in space in all three fields.
    The ``dR2*`` contribution is the time convolution of the reference state
    against ``dR2*`` along the characteristic; the ``dR1`` contribution acts
    through the relaxation during the inversion delay.
    """
    times = np.atleast_1d(np.asarray(times, float))
    R1 = float(np.real(_check_constant("R1", R1)))
    R2 = complex(_check_constant("R2*", R2star))
    lat = grid.lattice()
    lam1 = diffusion_symbol(grid, D0, lat) + R1
    Meq = grid.field(Meq, float)
    Meq_hat = dft_grid(Meq, grid)
    t_ref = seq.t_ref
    zero = np.zeros((1, 3))

    phi_ref = _phi(seq, grid, Meq, R1, D0)
    if seq.kind == NINETY:
        dphi = dx.Meq.astype(complex)
    else:
        tau = seq.tau
        acc = lattice_L(grid, D0, R1, tau) * dft_grid(dx.Meq, grid)
        s, w = _gauss_nodes(0.0, tau, np.array([]), nquad)
        for sk, wk in zip(s, w):
            inner = idft_grid((lattice_L(grid, D0, R1, sk) - 1) * Meq_hat, grid)
            acc = acc - wk * np.exp(-lam1 * (tau - sk)) * dft_grid(dx.R1 * inner, grid)
        dphi = idft_grid(acc, grid)

    # reference states in the moving frame at the quadrature nodes are reused
    cache = {}

    def ref_u(a):
        if a not in cache:
            cache[a] = idft_grid(_moving_ref(seq, grid, phi_ref, R2, D0, a), grid)
        return cache[a]

    out = np.zeros(times.size, complex)
    for i, t in enumerate(times):
        kt = seq.k(t)
        I0 = characteristic_integral(seq, D0, zero, t_ref, t)[0]
        first = -1j * np.exp(-I0 - R2 * (t - t_ref)) * ft_at(dphi, grid, kt - seq.k(t_ref))[0]
        conv = 0.0
        if t > t_ref:
            nodes, wts = _gauss_nodes(t_ref, t, seq.G.breaks, nquad)
            for a, wa in zip(nodes, wts):
                Ia = characteristic_integral(seq, D0, zero, a, t)[0]
                # F[dR2* Mref(a)](k(t) - k(a)) with Mref(a) = exp(-2 pi i k(a).r) u(a)
                S = ft_at(dx.R2star * ref_u(a), grid, kt)[0]
                conv += wa * np.exp(-Ia - R2 * (t - a)) * S
        out[i] = c0 * (first - conv)
    return out
