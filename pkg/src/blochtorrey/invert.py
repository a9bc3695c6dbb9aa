"""Stacked forward operator, its Jacobian, linearised elimination and Newton solvers.

Data are complex arrays of shape ``(3, ncoils, nt)``: one block per sequence
(90, 180-tau1-90, 180-tau2-90) on a common clock. Unknowns are
:class:`CoeffFields`; increments live in a real subspace spanned by the
columns of a basis matrix ``B`` (identity by default) per coefficient.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .bloch import ExactPiecewise, Numeric, explicit_state, solve_bloch, solve_bloch_linearized
from .core import CoeffFields, Grid, ModelError, PreconditionError
from .kspace import kspace_explicit_state, kspace_jacobian
from .measure import CoilSet, observe
from .recon import AnsatzSpace, RankDeficiencyError, interp_inverse
from .seq import INVERSION, NINETY, PulseSequence, make_sequence

ENGINES = ("explicit", "bloch_exact", "bloch_numeric", "kspace", "torrey")
COMPONENTS = ("Meq", "R1", "R2re", "R2im")


class DivergenceError(ModelError):
    def __init__(self, msg, history):
        super().__init__(msg)
        self.history = history


class DegenerateConfigError(PreconditionError):
    pass


@dataclass
class ForwardConfig:
    seqs: list
    coils: CoilSet
    clock: np.ndarray
    engine: str = "explicit"
    cplus: complex = 1.0
    D0: float = 0.0
    dt: float | None = None
    model: object = None  # ModelParams for the torrey engine

    def __post_init__(self):
        self.clock = np.asarray(self.clock, float)
        if self.engine not in ENGINES:
            raise PreconditionError(f"unknown engine {self.engine!r}; choose from {ENGINES}")
        if len(self.seqs) != 3 or self.seqs[0].kind != NINETY or any(s.kind != INVERSION for s in self.seqs[1:]):
            raise PreconditionError("need a 90 sequence followed by two 180-tau-90 sequences")
        if not 0 < self.seqs[1].tau < self.seqs[2].tau:
            raise PreconditionError("need 0 < tau1 < tau2")
        if self.clock.size and self.clock.min() < max(s.t_ref for s in self.seqs):
            raise PreconditionError("the sample clock must start after the last pulse")
        if self.engine == "torrey" and self.model is None:
            raise PreconditionError("the torrey engine needs model parameters")

    @property
    def grid(self) -> Grid:
        return self.coils.grid

    @property
    def taus(self):
        return [s.tau for s in self.seqs]


def make_config(grid: Grid, coils: CoilSet, tau1: float, tau2: float, readout, tau_p: float = 1e-4,
                engine: str = "explicit", gamma: float = 2.6752218744e8, **kw) -> ForwardConfig:
    """Three sequences sharing one gradient waveform ``readout.G`` in absolute time."""
    horizon = float(readout.t_end) * (1 + 1e-12) + 1e-12
    seqs = [make_sequence(NINETY, tau_p=tau_p, horizon=horizon, G=readout.G, gamma=gamma)]
    seqs += [make_sequence(INVERSION, tau_p=tau_p, horizon=horizon, G=readout.G, tau=t, gamma=gamma)
             for t in (tau1, tau2)]
    return ForwardConfig(seqs, coils, readout.clock, engine, **kw)


# ---------------------------------------------------------------------------
# forward map


def _observe(Mperp, coils: CoilSet, h: float) -> np.ndarray:
    return (Mperp @ coils.c.T * h).T


def _constant_coils(cfg: ForwardConfig) -> np.ndarray:
    if not cfg.coils.is_constant():
        raise PreconditionError("the k-space engine needs constant coil sensitivities")
    return cfg.coils.c[:, 0]


def forward_single(x: CoeffFields, seq: PulseSequence, cfg: ForwardConfig) -> np.ndarray:
    grid, t = x.grid, cfg.clock
    if cfg.engine == "explicit":
        traj = explicit_state(seq, x, t)
    elif cfg.engine == "bloch_exact":
        traj = solve_bloch(seq, x, t, cfg.cplus, ExactPiecewise())
    elif cfg.engine == "bloch_numeric":
        traj = solve_bloch(seq, x, t, cfg.cplus, Numeric(cfg.dt))
    elif cfg.engine == "kspace":
        c0 = _constant_coils(cfg)
        # zero-pulse-length k-space state, the model whose derivative kspace_jacobian evaluates
        sig = kspace_explicit_state(seq, grid, x.Meq, x.R1, x.R2star, cfg.D0, t).signal()
        return c0[:, None] * sig[None, :]
    else:
        from .torrey import solve_bt
        traj = solve_bt(seq, x, cfg.model, t, dt=cfg.dt)
    return observe(traj, cfg.coils).y


def forward_F(x: CoeffFields, cfg: ForwardConfig) -> np.ndarray:
    """Stacked data ``(3, ncoils, nt)`` for the three sequences."""
    out = []
    for J, seq in enumerate(cfg.seqs):
        try:
            out.append(forward_single(x, seq, cfg))
        except ModelError as exc:
            raise type(exc)(f"sequence {J}: {exc}") from exc
    return np.stack(out)


def forward_reduced(Meq, R1, R2star_frozen, cfg: ForwardConfig) -> np.ndarray:
    """Forward map over ``(Meq, R1)`` with ``R2*`` held fixed."""
    return forward_F(CoeffFields(cfg.grid, Meq, R1, R2star_frozen), cfg)


# ---------------------------------------------------------------------------
# derivative


def explicit_derivative(seq: PulseSequence, x: CoeffFields, dx: CoeffFields, times) -> np.ndarray:
    """Pointwise derivative of the explicit transverse state, shape ``(nt, npts)``."""
    times = np.atleast_1d(np.asarray(times, float))
    r = x.grid.r3
    s = (times - seq.t_ref)[:, None]
    dk = seq.k(times) - seq.k(seq.t_ref)
    E = -1j * np.exp(-(x.R2star[None, :] * s + 2j * np.pi * dk @ r.T))
    if seq.kind == NINETY:
        phi, dphi = x.Meq, dx.Meq
    else:
        e = np.exp(-x.R1 * seq.tau)
        phi = (1 - 2 * e) * x.Meq
        dphi = (1 - 2 * e) * dx.Meq + 2 * seq.tau * e * dx.R1 * x.Meq
    return E * (dphi[None, :] - dx.R2star[None, :] * s * phi[None, :])


def jacobian_single(x: CoeffFields, dx: CoeffFields, seq: PulseSequence, cfg: ForwardConfig) -> np.ndarray:
    grid, t, h = x.grid, cfg.clock, x.grid.cell_volume
    if cfg.engine == "explicit":
        return _observe(explicit_derivative(seq, x, dx, t), cfg.coils, h)
    if cfg.engine in ("bloch_exact", "bloch_numeric"):
        mode = ExactPiecewise() if cfg.engine == "bloch_exact" else Numeric(cfg.dt)
        return _observe(solve_bloch_linearized(seq, x, dx, t, cfg.cplus, mode).Mperp, cfg.coils, h)
    if cfg.engine == "kspace":
        c0 = _constant_coils(cfg)
        d = kspace_jacobian(seq, grid, x.Meq, x.R1, x.R2star, cfg.D0, dx, t)
        return c0[:, None] * d[None, :]
    from .torrey import solve_bt_linearized
    return _observe(solve_bt_linearized(seq, x, dx, cfg.model, t, dt=cfg.dt).Mperp, cfg.coils, h)


def jacobian_apply(x: CoeffFields, dx: CoeffFields, cfg: ForwardConfig) -> np.ndarray:
    """Directional derivative ``F'(x) dx``, shape ``(3, ncoils, nt)``."""
    return np.stack([jacobian_single(x, dx, seq, cfg) for seq in cfg.seqs])


def _unit(grid: Grid, comp: str, values) -> CoeffFields:
    z = np.zeros(grid.npts)
    d = {"Meq": z, "R1": z, "R2star": z.astype(complex)}
    if comp == "Meq":
        d["Meq"] = values
    elif comp == "R1":
        d["R1"] = values
    elif comp == "R2re":
        d["R2star"] = np.asarray(values, complex)
    else:
        d["R2star"] = 1j * np.asarray(values)
    return CoeffFields(grid, **d)


def _realify(a: np.ndarray) -> np.ndarray:
    a = a.reshape(-1, *a.shape[3:]) if a.ndim > 3 else a.reshape(-1)
    return np.concatenate([a.real, a.imag])


def jacobian_matrix(x: CoeffFields, cfg: ForwardConfig, B: np.ndarray | None = None) -> np.ndarray:
    """Real Jacobian, rows ``[Re; Im]`` of the flattened data, columns ``[Meq, R1, Re R2*, Im R2*]`` x basis.

    Pointwise engines (explicit and Bloch) need one tangent solve per
    coefficient because the response at each grid point depends only on the
    increment there; the other engines are assembled column by column.
    """
    grid = x.grid
    n = grid.npts
    B = np.eye(n) if B is None else np.asarray(B, float)
    nb = B.shape[1]
    h = grid.cell_volume
    blocks = []
    for comp in COMPONENTS:
        if cfg.engine in ("explicit", "bloch_exact", "bloch_numeric"):
            dx = _unit(grid, comp, np.ones(n))
            resp = []
            for seq in cfg.seqs:
                if cfg.engine == "explicit":
                    dM = explicit_derivative(seq, x, dx, cfg.clock)
                else:
                    mode = ExactPiecewise() if cfg.engine == "bloch_exact" else Numeric(cfg.dt)
                    dM = solve_bloch_linearized(seq, x, dx, cfg.clock, cfg.cplus, mode).Mperp
                # (ncoils, nt, nb)
                resp.append(np.einsum("jn,tn,nm->jtm", cfg.coils.c, dM, B) * h)
            cols = np.stack(resp)
        else:
            cols = np.stack([jacobian_apply(x, _unit(grid, comp, B[:, m]), cfg) for m in range(nb)], axis=-1)
        blocks.append(_realify(cols))
    return np.concatenate(blocks, axis=1)


def _apply_step(x: CoeffFields, delta: np.ndarray, B: np.ndarray) -> CoeffFields:
    nb = B.shape[1]
    d = [B @ delta[i * nb : (i + 1) * nb] for i in range(4)]
    return CoeffFields(x.grid, x.Meq + d[0], x.R1 + d[1], x.R2star + d[2] + 1j * d[3])


# ---------------------------------------------------------------------------
# elimination at a reference point


def _ref_constants(x_ref: CoeffFields):
    if not x_ref.is_reference():
        raise PreconditionError("elimination needs spatially constant R1 and R2* at the reference point")
    return float(x_ref.R1[0]), complex(x_ref.R2star[0])


def _psi_coeffs(R1: float, taus, t_refs):
    tI = t_refs[0]
    a = [1 - 2 * np.exp(-R1 * tau) for tau in taus[1:]]
    psi = [np.exp(R1 * tau) * aJ * (tJ - tI) / tau for tau, aJ, tJ in zip(taus[1:], a, t_refs[1:])]
    return a, psi


def eliminate_linear(dy, t, R1ref: float, R2ref: complex, taus, t_refs):
    """Transforms of ``c dR2* Mref``, ``c dR1 Mref`` and ``c dMeq`` along ``k(t)``.

    ``dy`` holds derivative data ``(3, ncoils, nt)`` at a reference point
    with constant ``R1ref``, ``R2ref``; ``t_refs`` are the ends of the last
    pulse of each sequence.
    """
    dy = np.asarray(dy, complex)
    t = np.asarray(t, float)
    tI = t_refs[0]
    a, psi = _psi_coeffs(R1ref, taus, t_refs)
    if abs(psi[1] - psi[0]) <= 1e-12 * max(abs(psi[0]), abs(psi[1]), 1e-300):
        raise DegenerateConfigError("psi(tau2) equals psi(tau1); the elimination collapses")
    base = 1j * np.exp(R2ref * (t - tI)) * dy[0]
    yJI = [1j * np.exp(R2ref * (t - tJ)) * dy[J] - aJ * base
           for J, aJ, tJ in zip((1, 2), a, t_refs[1:])]
    w = [np.exp(R1ref * tau) / tau for tau in taus[1:]]
    A = (w[1] * yJI[1] - w[0] * yJI[0]) / (psi[1] - psi[0])
    Bs = 0.5 * (w[0] * yJI[0] - psi[0] * A)
    C = base + (t - tI) * A
    return A, Bs, C


def reassemble_linear(A, Bs, C, t, R1ref: float, R2ref: complex, taus, t_refs):
    """Inverse of :func:`eliminate_linear`."""
    t = np.asarray(t, float)
    tI = t_refs[0]
    out = [-1j * np.exp(-R2ref * (t - tI)) * (C - (t - tI) * A)]
    for tau, tJ in zip(taus[1:], t_refs[1:]):
        aJ = 1 - 2 * np.exp(-R1ref * tau)
        e = 2 * tau * np.exp(-R1ref * tau)
        out.append(-1j * np.exp(-R2ref * (t - tJ)) * (aJ * (C - (t - tJ) * A) + e * Bs))
    return np.stack(out)


def invert_linearized(dy, x_ref: CoeffFields, cfg: ForwardConfig, X: AnsatzSpace):
    """Recover ``dx`` from ``F'(x_ref) dx`` by elimination and interpolation on ``X``."""
    R1, R2 = _ref_constants(x_ref)
    seq0 = cfg.seqs[0]
    k0 = [seq.k(seq.t_ref) for seq in cfg.seqs]
    if any(np.any(k != k0[0]) for k in k0[1:]):
        raise PreconditionError("elimination needs the same k-space trajectory for all sequences")
    k = seq0.k(cfg.clock) - k0[0]
    A, Bs, C = eliminate_linear(dy, cfg.clock, R1, R2, cfg.taus, [s.t_ref for s in cfg.seqs])
    Mref = x_ref.Meq
    floor = 1e-8 * np.abs(Mref).max()
    if np.any(np.abs(Mref) < floor):
        raise PreconditionError("Meq at the reference point must be bounded away from zero")
    uA, repA = interp_inverse(A, k, cfg.coils, X)
    uB, repB = interp_inverse(Bs, k, cfg.coils, X)
    uC, repC = interp_inverse(C, k, cfg.coils, X)
    dx = CoeffFields(x_ref.grid, uC.real, (uB / Mref).real, uA / Mref)
    return dx, {"C_I": repA["C_I"], "residual": max(repA["residual"], repB["residual"], repC["residual"])}


def stability_constant(x_ref: CoeffFields, cfg: ForwardConfig, X: AnsatzSpace | None = None) -> dict:
    """Empirical ``C'``: reciprocal smallest singular value of ``F'(x_ref)`` on ``X``.

    Increments are measured in discrete L2 over the grid, data in discrete
    L2 over the clock.
    """
    grid = x_ref.grid
    B = (X or AnsatzSpace.full(grid)).real_basis()
    J = jacobian_matrix(x_ref, cfg, B)
    dt = np.diff(cfg.clock).mean() if cfg.clock.size > 1 else 1.0
    s = np.linalg.svd(J * np.sqrt(dt), compute_uv=False)
    return {"sigma_min": float(s[-1]), "sigma_max": float(s[0]), "C_prime": float(1 / s[-1]) if s[-1] > 0 else np.inf}


# ---------------------------------------------------------------------------
# Newton


@dataclass
class NewtonResult:
    x: CoeffFields
    history: list = field(default_factory=list)
    converged: bool = False

    @property
    def errors(self) -> np.ndarray:
        return np.array([h["error"] for h in self.history if h.get("error") is not None])


def coeff_norm(x: CoeffFields) -> float:
    return float(np.linalg.norm(x.to_vector()) * np.sqrt(x.grid.cell_volume))


def newton_solve(y, x0: CoeffFields, cfg: ForwardConfig, variant: str = "full", tol: float = 1e-10,
                 max_iter: int = 20, X: AnsatzSpace | None = None, truth: CoeffFields | None = None,
                 step_tol: float = 1e-14, elimination: str | bool = "auto") -> NewtonResult:
    """Newton (``variant='full'``) or frozen Newton (``'frozen'``) for ``F(x) = y``.

    Linear systems are solved in the least-squares sense over the real basis
    of ``X``. With ``variant='frozen'`` at a reference point of the explicit
    engine, the Jacobian is inverted by elimination (``elimination='auto'``).
    Stops when the residual is at most ``tol`` relative to ``|y|``, when the
    step is below ``step_tol`` relative to ``|x|``, or after ``max_iter``.
    """
    if variant not in ("full", "frozen"):
        raise PreconditionError(f"unknown Newton variant {variant!r}")
    grid = x0.grid
    X = X or AnsatzSpace.full(grid)
    B = X.real_basis()
    y = np.asarray(y, complex)
    ynorm = np.linalg.norm(y)
    x = x0.copy()
    use_elim = elimination is True or (elimination == "auto" and variant == "frozen"
                                       and cfg.engine == "explicit" and x0.is_reference())
    frozen = None
    hist = []
    increases = 0

    def record(n, res, step):
        err = None if truth is None else coeff_norm(x - truth)
        hist.append({"n": n, "residual": res, "error": err, "step": step})

    r = y - forward_F(x, cfg)
    res = float(np.linalg.norm(r) / max(ynorm, 1e-300))
    record(0, res, 0.0)
    for n in range(1, max_iter + 1):
        if res <= tol:
            return NewtonResult(x, hist, True)
        if use_elim:
            dx, _ = invert_linearized(r, x0, cfg, X)
            x_new = x + dx
            step = coeff_norm(dx)
        else:
            if variant == "full" or frozen is None:
                J = jacobian_matrix(x, cfg, B)
                U, s, Vh = np.linalg.svd(J, full_matrices=False)
                if s[-1] <= 1e-13 * s[0]:
                    raise RankDeficiencyError("Jacobian is rank deficient", s[-1])
                frozen = (U, s, Vh)
            U, s, Vh = frozen
            delta = Vh.T @ ((U.T @ _realify(r)) / s)
            x_new = _apply_step(x, delta, B)
            step = coeff_norm(x_new - x)
        x = x_new
        r = y - forward_F(x, cfg)
        new = float(np.linalg.norm(r) / max(ynorm, 1e-300))
        increases = increases + 1 if new > res * (1 + 1e-6) else 0
        res = new
        record(n, res, step)
        if increases >= 3:
            raise DivergenceError("residual grew in three consecutive steps", hist)
        if step <= step_tol * max(coeff_norm(x), 1e-300):
            return NewtonResult(x, hist, True)
    return NewtonResult(x, hist, res <= tol)


def convergence_order(errors, floor: float = 1e-13) -> float:
    """Slope of ``log e_{n+1}`` against ``log e_n`` over pairs above ``floor``."""
    e = np.asarray(errors, float)
    pairs = [(a, b) for a, b in zip(e[:-1], e[1:]) if a > floor and b > floor]
    if len(pairs) < 2:
        raise PreconditionError("need at least two error pairs above the floor")
    a, b = np.log(np.array(pairs)).T
    return float(np.polyfit(a, b, 1)[0])


def write_history_csv(path, result: NewtonResult) -> None:
    import csv
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["n", "residual", "error", "step"])
        for h in result.history:
            w.writerow([h["n"], repr(h["residual"]), "" if h["error"] is None else repr(h["error"]), repr(h["step"])])
