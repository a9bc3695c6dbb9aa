"""Finite-difference Bloch-Torrey solver on a box with energy diagnostics.

The state at each point is ``u = (Re Mperp, Im Mperp, Mz)`` and the system
reads ``du/dt + K u + R u + W(t) u = f`` where ``K`` is diffusion plus
advection, ``R = diag(R2, R2, R1)`` and ``W(t)`` is the pointwise skew part
(off-resonance, gradient precession and pulse coupling, see
:mod:`blochtorrey.bloch`). One step is Strang splitting:

    half rotation exp(-W h/2)  ->  Crank-Nicolson for K + R and f  ->  half rotation

The rotation is exact and norm preserving, so the skew terms drop out of the
energy balance exactly, as they do for the continuous problem.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .core import CoeffFields, Grid, MagState, ModelParams, PreconditionError, Trajectory
from .seq import Pulse, PulseSequence, intervals


# ---------------------------------------------------------------------------
# operators


def _harmonic(a, b):
    s = a + b
    return np.where(s > 0, 2 * a * b / np.where(s > 0, s, 1.0), 0.0)


def _neighbours(grid: Grid, axis: int):
    """Flat index pairs ``(i, j)`` of interior faces and the low/high boundary cells."""
    idx = np.arange(grid.npts).reshape(grid.shape)
    lo = np.take(idx, np.arange(grid.shape[axis] - 1), axis=axis).ravel()
    hi = np.take(idx, np.arange(1, grid.shape[axis]), axis=axis).ravel()
    first = np.take(idx, [0], axis=axis).ravel()
    last = np.take(idx, [grid.shape[axis] - 1], axis=axis).ravel()
    return lo, hi, first, last


def diffusion_matrix(grid: Grid, D, bc, beta: float = 0.0) -> sp.csr_matrix:
    """Sparse ``-div(D grad .)`` with harmonic face averages and ghost-point boundaries.

    ``bc`` is a :class:`BoundarySpec`; ``beta`` is the impedance coefficient
    used for this component. Mixed second derivatives use the symmetric
    form ``sum_{a != b} G_a^T diag(D_ab) G_b`` with central differences.
    """
    n = grid.npts
    h = grid.spacing
    rows, cols, vals = [], [], []
    for a in range(grid.dim):
        lo, hi, first, last = _neighbours(grid, a)
        d = D[:, a, a]
        df = _harmonic(d[lo], d[hi]) / h[a] ** 2
        rows += [lo, hi, lo, hi]
        cols += [lo, hi, hi, lo]
        vals += [df, df, -df, -df]
        for face, cells in ((2 * a, first), (2 * a + 1, last)):
            dc = d[cells] / h[a]
            if bc.face_kind(face) == "dirichlet":
                w = 2 * dc / h[a]
            else:
                den = dc + 0.5 * beta
                w = np.where(den > 0, dc * beta / np.where(den > 0, den, 1.0), 0.0) / h[a]
            rows.append(cells)
            cols.append(cells)
            vals.append(w)
    K = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n))
    off = [(a, b) for a in range(grid.dim) for b in range(grid.dim) if a != b and np.any(D[:, a, b] != 0)]
    if off:
        Gs = [_central_difference(grid, a) for a in range(grid.dim)]
        for a, b in off:
            K = K + Gs[a].T @ sp.diags(D[:, a, b]) @ Gs[b]
    return K.tocsr()


def _central_difference(grid: Grid, axis: int) -> sp.csr_matrix:
    lo, hi, _, _ = _neighbours(grid, axis)
    n = grid.npts
    c = 0.5 / grid.spacing[axis]
    return sp.csr_matrix((np.concatenate([np.full(lo.size, c), np.full(lo.size, -c)]),
                          (np.concatenate([lo, hi]), np.concatenate([hi, lo]))), shape=(n, n))


def advection_matrix(grid: Grid, v, bc) -> tuple[sp.csr_matrix, np.ndarray]:
    """First-order upwind ``v . grad``, written as a conservative flux minus ``div_h(v)``.

    Returns the matrix and the discrete divergence. Inflow through a
    Dirichlet face carries zero; impedance faces extrapolate the cell value.
    """
    n = grid.npts
    h = grid.spacing
    rows, cols, vals = [], [], []
    div = np.zeros(n)
    for a in range(grid.dim):
        lo, hi, first, last = _neighbours(grid, a)
        va = v[:, a]
        vf = 0.5 * (va[lo] + va[hi])
        p, m = np.maximum(vf, 0) / h[a], np.minimum(vf, 0) / h[a]
        # flux F = v+ u_lo + v- u_hi leaves lo and enters hi
        rows += [lo, lo, hi, hi]
        cols += [lo, hi, lo, hi]
        vals += [p, m, -p, -m]
        np.add.at(div, lo, vf / h[a])
        np.add.at(div, hi, -vf / h[a])
        for face, cells, sgn in ((2 * a, first, -1.0), (2 * a + 1, last, 1.0)):
            vb = va[cells]
            out = np.maximum(sgn * vb, 0) / h[a]
            inn = np.minimum(sgn * vb, 0) / h[a]
            diag = out + (inn if bc.face_kind(face) == "impedance" else 0.0)
            rows.append(cells)
            cols.append(cells)
            vals.append(diag)
            div[cells] += sgn * vb / h[a]
    C = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n))
    return (C - sp.diags(div)).tocsr(), div


@dataclass
class DiscreteOperator:
    """Transport part ``K`` of the scheme for the transverse and longitudinal components."""

    K_perp: sp.csr_matrix
    K_z: sp.csr_matrix
    Kd_perp: sp.csr_matrix
    Kd_z: sp.csr_matrix
    div_v: np.ndarray | None = None

    @staticmethod
    def assemble(params: ModelParams, t: float = 0.0) -> "DiscreteOperator":
        grid, bc = params.grid, params.boundary
        Kp = diffusion_matrix(grid, params.D, bc, bc.beta)
        Kz = Kp if bc.beta_z == bc.beta else diffusion_matrix(grid, params.D, bc, bc.beta_z)
        v = params.velocity(t)
        if v is None:
            return DiscreteOperator(Kp, Kz, Kp, Kz)
        A, div = advection_matrix(grid, v, bc)
        return DiscreteOperator((Kp + A).tocsr(), (Kz + A).tocsr(), Kp, Kz, div)


def divergence_check(params: ModelParams, times) -> dict:
    """Split ``div v`` into its nonpositive part and the rest, and integrate the rest in time."""
    times = np.asarray(times, float)
    if params.v is None:
        return {"ok": True, "excess": 0.0}
    grid = params.grid
    vals = []
    for t in times:
        _, div = advection_matrix(grid, params.velocity(t), params.boundary)
        vals.append(np.max(np.maximum(div, 0.0)))
    excess = float(np.trapezoid(vals, times)) if times.size > 1 else 0.0
    return {"ok": excess < 1.0, "excess": excess}


# ---------------------------------------------------------------------------
# pointwise rotation


def skew_axis(seq: PulseSequence, seg, coeffs: CoeffFields, cplus) -> np.ndarray:
    """Axis ``w`` with ``W m = w x m`` for the skew generator on ``seg``."""
    n = coeffs.grid.npts
    omega = coeffs.R2star.imag.copy()
    if isinstance(seg, Pulse):
        b = seq.gamma * cplus * seg.amplitude
    else:
        b = np.zeros(n, complex)
        if seg is not None:
            omega = omega + seq.gamma * (coeffs.grid.r3 @ seg.gradient)
    return np.stack([-b.real, -b.imag, omega], axis=-1)


def rotate(u: np.ndarray, axis: np.ndarray, s: float) -> np.ndarray:
    """``exp(-W s) u``: rotation by ``-|w| s`` about ``w`` (Rodrigues)."""
    norm = np.linalg.norm(axis, axis=-1)
    safe = np.where(norm > 0, norm, 1.0)
    k = axis / safe[:, None]
    th = -norm * s
    c, sn = np.cos(th)[:, None], np.sin(th)[:, None]
    kd = np.sum(k * u, axis=-1, keepdims=True)
    out = u * c + np.cross(k, u) * sn + k * kd * (1 - c)
    return np.where(norm[:, None] > 0, out, u)


def _skew(axis):
    W = np.zeros(axis.shape[:-1] + (3, 3))
    W[..., 0, 1], W[..., 0, 2] = -axis[..., 2], axis[..., 1]
    W[..., 1, 0], W[..., 1, 2] = axis[..., 2], -axis[..., 0]
    W[..., 2, 0], W[..., 2, 1] = -axis[..., 1], axis[..., 0]
    return W


def rotate_derivative(u, axis, daxis, s: float) -> np.ndarray:
    """Derivative of ``exp(-W s) u`` with respect to the axis in direction ``daxis``."""
    n = axis.shape[0]
    W, dW = _skew(axis), _skew(daxis)
    big = np.zeros((n, 6, 6))
    big[:, :3, :3] = big[:, 3:, 3:] = -W * s
    big[:, :3, 3:] = -dW * s
    E = scipy.linalg.expm(big)
    return np.einsum("nij,nj->ni", E[:, :3, 3:], u)


# ---------------------------------------------------------------------------
# stepping


class _Scheme:
    """Step machinery bound to one coefficient set."""

    def __init__(self, seq, coeffs: CoeffFields, params: ModelParams):
        self.seq, self.coeffs, self.params = seq, coeffs, params
        self.grid = coeffs.grid
        self.cplus = params.cplus
        self.time_dependent = callable(params.v)
        self._ops = None
        self._lu = {}
        self.R = np.stack([coeffs.R2star.real, coeffs.R2star.real, coeffs.R1], axis=-1)
        self.forcing = np.zeros((self.grid.npts, 3))
        self.forcing[:, 2] = coeffs.R1 * coeffs.Meq

    def ops(self, t):
        if self.time_dependent:
            return DiscreteOperator.assemble(self.params, t)
        if self._ops is None:
            self._ops = DiscreteOperator.assemble(self.params)
        return self._ops

    def L(self, t):
        op = self.ops(t)
        return op.K_perp, op.K_z

    def apply_L(self, u, t):
        Kp, Kz = self.L(t)
        return np.stack([Kp @ u[:, 0], Kp @ u[:, 1], Kz @ u[:, 2]], axis=-1) + self.R * u

    def solve(self, rhs, h, t):
        key = (round(h, 18), None if not self.time_dependent else t)
        lu = self._lu.get(key)
        if lu is None:
            Kp, Kz = self.L(t)
            eye = sp.identity(self.grid.npts, format="csc")
            lu = (spla.splu((eye + 0.5 * h * (Kp + sp.diags(self.R[:, 0]))).tocsc()),
                  spla.splu((eye + 0.5 * h * (Kz + sp.diags(self.R[:, 2]))).tocsc()))
            if not self.time_dependent:
                self._lu[key] = lu
        return np.stack([lu[0].solve(rhs[:, 0]), lu[0].solve(rhs[:, 1]), lu[1].solve(rhs[:, 2])], axis=-1)

    def cn(self, u1, h, t, f):
        """Crank-Nicolson stage; returns ``(u2, u_mid)``."""
        rhs = u1 - 0.5 * h * self.apply_L(u1, t) + h * f
        u2 = self.solve(rhs, h, t)
        return u2, 0.5 * (u1 + u2)

    def sym_form(self, u, t, diffusion_only=False):
        """``<(sym K + R) u, u>`` in the discrete L2 inner product."""
        op = self.ops(t)
        Kp, Kz = (op.Kd_perp, op.Kd_z) if diffusion_only else (op.K_perp, op.K_z)
        q = sum(float(u[:, c] @ (K @ u[:, c])) for c, K in ((0, Kp), (1, Kp), (2, Kz)))
        return (q + float(np.sum(self.R * u * u))) * self.grid.cell_volume


def _source_at(source, t, n):
    f = np.zeros((n, 3))
    if source is not None:
        fp, fz = source(t)
        fp = np.asarray(fp, complex)
        f[:, 0], f[:, 1], f[:, 2] = fp.real, fp.imag, np.asarray(fz, float)
    return f


def _steps(seq, times, dt, dt_pulse):
    for a, b, seg in intervals(seq, times):
        step = dt_pulse if isinstance(seg, Pulse) else dt
        n = max(1, int(np.ceil((b - a) / step - 1e-9)))
        h = (b - a) / n
        for i in range(n):
            yield a + i * h, h, seg, (i == n - 1)


def _defaults(seq, dt, dt_pulse):
    if dt is None:
        dt = 1e-3
    if dt_pulse is None:
        dt_pulse = min(dt, seq.tau_p / 20)
    return dt, dt_pulse


def _vec(state: MagState):
    return np.stack([state.Mperp.real, state.Mperp.imag, state.Mz], axis=-1)


def _record(out, times, t, u):
    out[np.isclose(times, t, rtol=0, atol=1e-13 * max(1.0, abs(t)))] = u


def solve_bt(seq: PulseSequence, coeffs: CoeffFields, params: ModelParams, times, dt: float | None = None,
             dt_pulse: float | None = None, source=None, initial: MagState | None = None,
             energy: bool = True) -> Trajectory:
    """Integrate the Bloch-Torrey system and sample at ``times``.

    ``source(t) -> (f_perp, f_z)`` adds to the ``R1 Meq`` forcing. With
    ``energy=True`` the run record ``info['energy']`` carries the per-step
    terms used by :func:`energy_residual`.
    """
    times = np.atleast_1d(np.asarray(times, float))
    if np.any(np.diff(times) < 0):
        raise PreconditionError("sample times must be sorted")
    grid = coeffs.grid
    for name, a in (("Meq", coeffs.Meq), ("R1", coeffs.R1), ("R2*", coeffs.R2star)):
        if not np.all(np.isfinite(a)):
            raise PreconditionError(f"{name} has non-finite entries")
    dt, dt_pulse = _defaults(seq, dt, dt_pulse)
    sch = _Scheme(seq, coeffs, params)
    u = _vec(initial or MagState.equilibrium(coeffs))
    out = np.zeros((times.size, grid.npts, 3))
    _record(out, times, 0.0, u)
    hv = grid.cell_volume
    rec = {"t": [0.0], "half_norm2": [0.5 * hv * float(np.sum(u * u))], "diss": [0.0], "forc": [0.0],
           "q_end": [sch.sym_form(u, 0.0)], "f_end": [hv * float(np.sum((sch.forcing + _source_at(source, 0.0, grid.npts)) * u))]}
    axis_cache = {}
    for t0, h, seg, last in _steps(seq, times, dt, dt_pulse):
        key = id(seg)
        if key not in axis_cache:
            axis_cache[key] = skew_axis(seq, seg, coeffs, sch.cplus)
        ax = axis_cache[key]
        tm = t0 + 0.5 * h
        f = sch.forcing + _source_at(source, tm, grid.npts)
        u1 = rotate(u, ax, 0.5 * h)
        u2, um = sch.cn(u1, h, tm, f)
        u = rotate(u2, ax, 0.5 * h)
        t1 = t0 + h
        if energy:
            rec["t"].append(t1)
            rec["half_norm2"].append(0.5 * hv * float(np.sum(u * u)))
            rec["diss"].append(h * sch.sym_form(um, tm))
            rec["forc"].append(h * hv * float(np.sum(f * um)))
            rec["q_end"].append(sch.sym_form(u, t1))
            rec["f_end"].append(hv * float(np.sum((sch.forcing + _source_at(source, t1, grid.npts)) * u)))
        if last:
            _record(out, times, t1, u)
    info = {"model": "torrey", "dt": dt, "dt_pulse": dt_pulse, "scheme": "strang-rotation/crank-nicolson"}
    if energy:
        info["energy"] = {k: np.asarray(v) for k, v in rec.items()}
    if params.v is not None:
        info["divergence"] = divergence_check(params, np.unique(np.concatenate([[0.0], times])))
    return Trajectory(grid, times, out[..., 0] + 1j * out[..., 1], out[..., 2], info)


def energy_residual(traj: Trajectory, mode: str = "scheme") -> np.ndarray:
    """Defect of the energy identity at every step time.

    ``mode='scheme'`` integrates dissipation and forcing with the midpoint
    states of each Crank-Nicolson stage, for which the identity holds to
    round-off. ``mode='trapezoid'`` uses the trapezoidal rule on the stored
    states, which is second order in the step.
    """
    e = traj.info.get("energy")
    if e is None:
        raise PreconditionError("trajectory was produced without energy records")
    if mode == "scheme":
        diss, forc = np.cumsum(e["diss"]), np.cumsum(e["forc"])
    elif mode == "trapezoid":
        dt = np.diff(e["t"])
        diss = np.concatenate([[0.0], np.cumsum(0.5 * dt * (e["q_end"][1:] + e["q_end"][:-1]))])
        forc = np.concatenate([[0.0], np.cumsum(0.5 * dt * (e["f_end"][1:] + e["f_end"][:-1]))])
    else:
        raise PreconditionError(f"unknown energy mode {mode!r}")
    lhs = e["half_norm2"] + diss
    rhs = e["half_norm2"][0] + forc
    return np.abs(lhs - rhs)


# ---------------------------------------------------------------------------
# tangent and difference runs


def _pert_forcing(x: CoeffFields, dx: CoeffFields):
    f = np.zeros((x.grid.npts, 3))
    f[:, 2] = dx.R1 * x.Meq + x.R1 * dx.Meq
    return f


def solve_bt_linearized(seq: PulseSequence, coeffs: CoeffFields, dcoeffs: CoeffFields, params: ModelParams,
                        times, dt: float | None = None, dt_pulse: float | None = None) -> Trajectory:
    """Exact derivative of the discrete map of :func:`solve_bt` in direction ``dcoeffs``.

    The tangent is the same scheme driven by the linearised source: rate
    increments act on the base state, ``dR1 Meq + R1 dMeq`` enters the
    longitudinal forcing, and ``d Im R2*`` perturbs the rotation.
    """
    times = np.atleast_1d(np.asarray(times, float))
    grid = coeffs.grid
    dt, dt_pulse = _defaults(seq, dt, dt_pulse)
    sch = _Scheme(seq, coeffs, params)
    u = _vec(MagState.equilibrium(coeffs))
    du = np.zeros_like(u)
    du[:, 2] = dcoeffs.Meq
    dR = np.stack([dcoeffs.R2star.real, dcoeffs.R2star.real, dcoeffs.R1], axis=-1)
    dax = np.zeros((grid.npts, 3))
    dax[:, 2] = dcoeffs.R2star.imag
    has_dw = np.any(dax != 0)
    df = _pert_forcing(coeffs, dcoeffs)
    out = np.zeros((times.size, grid.npts, 3))
    base = np.zeros_like(out)
    _record(out, times, 0.0, du)
    _record(base, times, 0.0, u)
    for t0, h, seg, last in _steps(seq, times, dt, dt_pulse):
        ax = skew_axis(seq, seg, coeffs, sch.cplus)
        tm = t0 + 0.5 * h

        def drot(v):
            if not has_dw:
                return 0.0
            if isinstance(seg, Pulse):
                return rotate_derivative(v, ax, dax, 0.5 * h)
            # free segments: the rotation is about the z axis, exp(-w J s) with dw commuting
            r = rotate(v, ax, 0.5 * h)
            return -0.5 * h * dax[:, 2:3] * np.stack([-r[:, 1], r[:, 0], np.zeros(len(r))], axis=-1)

        u1 = rotate(u, ax, 0.5 * h)
        du1 = rotate(du, ax, 0.5 * h) + drot(u)
        u2, _ = sch.cn(u1, h, tm, sch.forcing)
        rhs = du1 - 0.5 * h * sch.apply_L(du1, tm) - 0.5 * h * dR * (u1 + u2) + h * df
        du2 = sch.solve(rhs, h, tm)
        u = rotate(u2, ax, 0.5 * h)
        du = rotate(du2, ax, 0.5 * h) + drot(u2)
        if last:
            _record(out, times, t0 + h, du)
            _record(base, times, t0 + h, u)
    return Trajectory(grid, times, out[..., 0] + 1j * out[..., 1], out[..., 2],
                      {"model": "torrey-linearized", "base_Mperp": base[..., 0] + 1j * base[..., 1],
                       "base_Mz": base[..., 2]})


@dataclass
class DifferenceRun:
    traj: Trajectory
    linf_l2: float
    l2_h1: float

    @property
    def v_norm(self) -> float:
        return self.linf_l2 + self.l2_h1


def solve_bt_difference(seq: PulseSequence, x: CoeffFields, x_tilde: CoeffFields, params: ModelParams, times,
                        dt: float | None = None, dt_pulse: float | None = None) -> DifferenceRun:
    """``S(x) - S(x_tilde)`` computed as one run of the difference system.

    The difference state obeys the scheme for ``x`` with a source built from
    the coefficient differences acting on the ``x_tilde`` state, so it equals
    the difference of two forward runs up to round-off.
    """
    times = np.atleast_1d(np.asarray(times, float))
    grid = x.grid
    dt, dt_pulse = _defaults(seq, dt, dt_pulse)
    sx, st = _Scheme(seq, x, params), _Scheme(seq, x_tilde, params)
    ut = _vec(MagState.equilibrium(x_tilde))
    d = np.zeros_like(ut)
    d[:, 2] = x.Meq - x_tilde.Meq
    dR = sx.R - st.R
    df = sx.forcing - st.forcing
    out = np.zeros((times.size, grid.npts, 3))
    _record(out, times, 0.0, d)
    hv = grid.cell_volume
    linf = np.sqrt(hv * np.sum(d * d))
    h1 = 0.0
    for t0, h, seg, last in _steps(seq, times, dt, dt_pulse):
        ax = skew_axis(seq, seg, x, sx.cplus)
        axt = skew_axis(seq, seg, x_tilde, st.cplus)
        tm = t0 + 0.5 * h
        ut1 = rotate(ut, axt, 0.5 * h)
        d1 = rotate(d, ax, 0.5 * h) + rotate(ut, ax, 0.5 * h) - ut1
        ut2, _ = st.cn(ut1, h, tm, st.forcing)
        rhs = d1 - 0.5 * h * sx.apply_L(d1, tm) - 0.5 * h * dR * (ut1 + ut2) + h * df
        d2 = sx.solve(rhs, h, tm)
        h1 += h * sx.sym_form(0.5 * (d1 + d2), tm, diffusion_only=True)
        ut = rotate(ut2, axt, 0.5 * h)
        d = rotate(d2, ax, 0.5 * h) + rotate(ut2, ax, 0.5 * h) - ut
        linf = max(linf, np.sqrt(hv * np.sum(d * d)))
        if last:
            _record(out, times, t0 + h, d)
    traj = Trajectory(grid, times, out[..., 0] + 1j * out[..., 1], out[..., 2], {"model": "torrey-difference"})
    return DifferenceRun(traj, float(linf), float(np.sqrt(max(h1, 0.0))))


def lipschitz_probe(x: CoeffFields, x_tilde: CoeffFields, seq: PulseSequence, params: ModelParams, times,
                    dt: float | None = None) -> float:
    """``|S(x) - S(x_tilde)|_V / |x - x_tilde|_X``, zero when the two coincide.

    ``V`` is discrete ``L^inf(L2) + L2(H1_D)``; ``X`` is discrete L2 over all
    three coefficients.
    """
    diff = (x - x_tilde).to_vector()
    den = float(np.linalg.norm(diff) * np.sqrt(x.grid.cell_volume))
    if den == 0:
        return 0.0
    return solve_bt_difference(seq, x, x_tilde, params, times, dt).v_norm / den
