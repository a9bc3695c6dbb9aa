"""Acceptance criteria 1-10, each printing one PASS/FAIL line."""

import time

import numpy as np
import pytest

from blochtorrey import invert as I
from blochtorrey import torrey as T
from blochtorrey.bloch import explicit_state, pulse_propagator, solve_bloch
from blochtorrey.cli import main as cli_main
from blochtorrey.core import CoeffFields, Grid, MagState, ModelParams
from blochtorrey.kspace import dft_grid, solve_kspace
from blochtorrey.measure import CoilSet, observe
from blochtorrey.recon import (AnsatzSpace, build_ansatz, invert_psi, psi, recon_Meq, recon_Phi, recon_R1,
                               recon_R2star)
from blochtorrey.seq import cartesian_readout, make_sequence
from blochtorrey.spectral import (ReferenceState, assemble_generators, det_condition, uniqueness_rank_test)


@pytest.fixture
def verdict(capsys):
    def _report(n, ok, detail):
        with capsys.disabled():
            print(f"\ncriterion {n}: {'PASS' if ok else 'FAIL'} {detail}")
        assert ok, detail
    return _report


def _slope(x, y):
    return float(np.polyfit(np.log(x), np.log(y), 1)[0])


# ---------------------------------------------------------------------------


def test_c1_rotation_error_law(verdict):
    t0 = time.perf_counter()
    g = Grid((64,), (1.0,))
    x = g.r3[:, 0]
    co = CoeffFields(g, 1 + 0.3 * np.sin(2 * np.pi * x), 1.0 + 0.2 * x, 3 + 0.5 * x)
    gam = 2 * np.pi
    ro = cartesian_readout(g, gam, 0.72, 0.01, 0.1, oversample=2)
    taus = np.array([1e-2, 5e-3, 2.5e-3, 1.25e-3])
    slopes = {}
    for kind in ("ninety", "inversion"):
        gaps = []
        for tp in taus:
            seq = make_sequence(kind, 1.0, tp, ro.t_end, G=ro.G, tau=0.3, gamma=gam)
            a, b = solve_bloch(seq, co, ro.clock), explicit_state(seq, co, ro.clock)
            gaps.append(max(np.abs(a.Mperp - b.Mperp).max(), np.abs(a.Mz - b.Mz).max()))
        slopes[kind] = _slope(taus, gaps)
    dt = time.perf_counter() - t0
    ok = all(0.8 <= s <= 1.2 for s in slopes.values()) and dt < 10
    verdict(1, ok, f"slopes {slopes} runtime {dt:.2f}s")


def test_c2_flip_angle_exactness(verdict):
    gam, tp = 2.6752218744e8, 1e-3
    errs = []
    for kind, phi in (("ninety", np.pi / 2), ("inversion", np.pi)):
        seq = make_sequence(kind, 1.0, tp, 1.0, tau=0.1, gamma=gam)
        b = gam * seq.pulses[0].amplitude
        P = pulse_propagator(0.0, 0.0, b, 0.0, tp).P
        rot = np.array([[np.cos(phi), -np.sin(phi)], [np.sin(phi), np.cos(phi)]])
        errs.append(max(np.abs(P[1:, 1:] - rot).max(), abs(P[0, 0] - 1)))
    verdict(2, max(errs) <= 1e-10, f"max rotation error {max(errs):.2e}")


def test_c3_energy_identity(verdict):
    g = Grid((32,), (1.0,))
    x = g.r3[:, 0]
    ro = cartesian_readout(g, 1.0, 0.3, 0.1, 0.4)
    seq = make_sequence("inversion", tau_p=0.01, tau=0.2, horizon=ro.t_end, G=ro.G, gamma=1.0)
    co = CoeffFields(g, np.exp(-(x / 0.15) ** 2), 1.0 + 0.2 * x, 3.0 + 0.5 * x + 0.3j)
    pr = ModelParams(g, D=1e-3)
    times = np.linspace(0, ro.t_end, 9)
    scheme = T.energy_residual(T.solve_bt(seq, co, pr, times, dt=1e-3)).max()
    dts = np.array([4e-3, 2e-3, 1e-3])
    trap = [T.energy_residual(T.solve_bt(seq, co, pr, times, dt=d, dt_pulse=d / 8), "trapezoid").max()
            for d in dts]
    order = _slope(dts, trap)
    # no forcing (Meq = 0), compressive flow: the norm must not grow
    rng = np.random.default_rng(3)
    zero = CoeffFields(g, 0.0, 1.0, 2.0 + 0.2j)
    pv = ModelParams(g, D=1e-3, v=np.stack([-x, 0 * x, 0 * x], axis=1))
    init = MagState(g, rng.standard_normal(32) + 1j * rng.standard_normal(32), rng.standard_normal(32))
    tr = T.solve_bt(seq, zero, pv, times, dt=1e-3, initial=init)
    e = np.asarray(tr.info["energy"]["half_norm2"])
    growth = float(np.max(np.diff(e)) / e[0])
    ok = scheme <= 1e-10 and 1.7 <= order <= 2.3 and growth <= 1e-13
    verdict(3, ok, f"scheme residual {scheme:.1e}, trapezoid order {order:.2f}, max growth {growth:.1e}")


def test_c4_cross_solver(verdict):
    t0 = time.perf_counter()
    g0 = Grid((32,), (1.0,))
    ro = cartesian_readout(g0, 1.0, 0.2, 0.1, 0.4)
    seq = make_sequence("ninety", tau_p=0.005, horizon=ro.t_end, G=ro.G, gamma=1.0)
    D0, R2 = 5e-5, 4.0 + 0.5j
    gaps = {}
    for N in (32, 64, 128):
        g = Grid((N,), (1.0,))
        Meq = np.exp(-(g.r3[:, 0] / 0.08) ** 2)
        co = CoeffFields(g, Meq, 1.5, R2)
        times = np.array([0.0, ro.t_end])
        tr = T.solve_bt(seq, co, ModelParams(g, D=D0), times, dt=2e-4, energy=False)
        kt = solve_kspace(seq, g, Meq, 1.5, R2, D0, times).to_space()
        a, b = dft_grid(tr.Mperp[-1], g), dft_grid(kt.Mperp[-1], g)
        gaps[N] = float(np.linalg.norm(a - b) / np.linalg.norm(b))
    dt = time.perf_counter() - t0
    ok = gaps[64] <= 0.02 and gaps[128] < gaps[64] < gaps[32] and dt < 30
    verdict(4, ok, f"relative L2 gaps {gaps} runtime {dt:.1f}s")


def test_c5_closed_form_round_trips(verdict):
    g = Grid((32,), (0.1,))
    x = g.r3[:, 0] / 0.1
    Meq = 1 + 0.3 * (np.cos(2 * np.pi * x) + 0.5 * (x > 0.1) - 0.3 * (x < -0.25))
    R1 = 1.2 * (1 + 0.3 * (np.sin(2 * np.pi * x) - 0.4 * (x > -0.05)))
    R2 = 5.0 + 0.0j
    truth = CoeffFields(g, Meq, R1, R2)
    gam = 2.6752218744e8
    ro = cartesian_readout(g, gam, 0.71, 0.01, 0.5, oversample=32)
    coils = CoilSet.constant(g)
    seqs = [make_sequence("ninety", tau_p=1e-6, horizon=ro.t_end, G=ro.G, gamma=gam)]
    seqs += [make_sequence("inversion", tau_p=1e-6, horizon=ro.t_end, G=ro.G, tau=t, gamma=gam) for t in (0.3, 0.7)]
    meas = [observe(explicit_state(s, truth, ro.clock), coils) for s in seqs]
    X = build_ansatz(g, ro.k - seqs[0].k(seqs[0].t_ref))
    M, _ = recon_Meq(meas[0], seqs[0], R2, X, coils)
    P1, _ = recon_Phi(meas[1], seqs[1], R2, X, coils)
    P2, _ = recon_Phi(meas[2], seqs[2], R2, X, coils)
    r1a = recon_R1("known_meq", 0.3, P1, Meq=M)
    r1b = recon_R1("two_tau", 0.3, P1, Phi2=P2, tau2=0.7)
    r2, _ = recon_R2star(meas[0], seqs[0], M, X, coils)

    def rel(a, b):
        return float(np.linalg.norm(a - b) / np.linalg.norm(b))

    errs = {"Meq": rel(M, Meq), "R1_known": rel(r1a, R1), "R1_two_tau": rel(r1b, R1), "R2": rel(r2, R2 + 0 * x)}
    xs = np.linspace(-6, 0, 61)
    xs = xs[np.abs(xs + np.log(2) / 0.7) > 0.05]
    back = np.array([invert_psi(psi(v, 0.3, 0.7), 0.3, 0.7)[0][0] for v in xs])
    errs["psi"] = float(np.max(np.abs(back - xs)))
    ok = max(errs["Meq"], errs["R1_known"], errs["R1_two_tau"]) <= 1e-6 and errs["R2"] <= 1e-4 and errs["psi"] <= 1e-10
    verdict(5, ok, " ".join(f"{k}={v:.1e}" for k, v in errs.items()))


def _desk():
    g = Grid((16,), (0.1,))
    x = g.r3[:, 0]
    ro = cartesian_readout(g, 2.675e8, 0.72, 0.02, 0.1, oversample=2)
    cfg = I.make_config(g, CoilSet.constant(g), 0.3, 0.7, ro, tau_p=1e-4)
    truth = CoeffFields(g, 1 + 0.3 * np.cos(2 * np.pi * x / 0.1), 1.5 + 0.3 * np.sin(2 * np.pi * x / 0.1),
                        8 + np.cos(4 * np.pi * x / 0.1) + 0.5j)
    return g, cfg, truth


def test_c6_linearized_stability(verdict):
    g, cfg, truth = _desk()
    ref = CoeffFields(g, truth.Meq, 1.5, 8 + 0.5j)
    rng = np.random.default_rng(0)
    dx = CoeffFields(g, rng.standard_normal(16), rng.standard_normal(16),
                     rng.standard_normal(16) + 1j * rng.standard_normal(16))
    dy = I.jacobian_apply(ref, dx, cfg)
    rec, _ = I.invert_linearized(dy, ref, cfg, AnsatzSpace.full(g))
    err = I.coeff_norm(rec - dx) / I.coeff_norm(dx)
    C = I.stability_constant(ref, cfg)["C_prime"]
    verdict(6, err <= 1e-6 and np.isfinite(C), f"relative error {err:.1e}, C' = {C:.3g}")


def test_c7_newton(verdict):
    t0 = time.perf_counter()
    g, cfg, truth = _desk()
    y = I.forward_F(truth, cfg)
    x0 = CoeffFields(g, truth.Meq * 1.1, truth.R1 * 0.9, truth.R2star * 1.1)
    full = I.newton_solve(y, x0, cfg, truth=truth)
    q_full = I.convergence_order(full.errors)
    frozen = I.newton_solve(y, x0, cfg, variant="frozen", truth=truth, max_iter=40)
    q_frozen = I.convergence_order(frozen.errors)
    Cs = []
    for delta in (1e-3, 1e-4):
        rng = np.random.default_rng(1)
        n = rng.standard_normal(y.shape) + 1j * rng.standard_normal(y.shape)
        n *= delta * np.linalg.norm(y) / np.linalg.norm(n)
        res = I.newton_solve(y + n, x0, cfg, truth=truth, tol=1e-12)
        Cs.append(res.history[-1]["error"] / np.linalg.norm(n))
    dt = time.perf_counter() - t0
    ok = (q_full >= 1.7 and len(full.history) - 1 >= 3 and 0.8 <= q_frozen <= 1.3
          and 0.5 <= Cs[0] / Cs[1] <= 2.0 and dt < 120)
    verdict(7, ok, f"full order {q_full:.2f} ({len(full.history) - 1} its), frozen order {q_frozen:.2f}, "
                   f"C = {Cs[0]:.4g}/{Cs[1]:.4g}, runtime {dt:.1f}s")


def test_c8_jacobian(verdict):
    g, cfg, truth = _desk()
    rng = np.random.default_rng(0)
    dirs = {
        "Meq": CoeffFields(g, rng.standard_normal(16), 0.0, 0.0),
        "R1": CoeffFields(g, 0.0, rng.standard_normal(16), 0.0),
        "R2": CoeffFields(g, 0.0, 0.0, rng.standard_normal(16) + 1j * rng.standard_normal(16)),
    }
    worst, lines = 0.0, []
    ok = True
    for eng in ("explicit", "bloch_exact"):
        cfg.engine = eng
        for name, d in dirs.items():
            J = I.jacobian_apply(truth, d, cfg)
            errs = []
            for eps in (1e-3, 1e-4, 1e-5):
                fd = (I.forward_F(truth + d.scaled(eps), cfg) - I.forward_F(truth + d.scaled(-eps), cfg)) / (2 * eps)
                errs.append(np.linalg.norm(fd - J) / np.linalg.norm(J))
            worst = max(worst, errs[2])
            # quadratic in eps until round-off; Meq enters linearly so only round-off remains
            quad = errs[0] < 1e-9 or errs[1] / errs[0] < 0.02
            ok &= errs[2] <= 1e-6 and quad
            lines.append(f"{eng}/{name}:{errs[0]:.0e},{errs[1]:.0e},{errs[2]:.0e}")
    verdict(8, ok, f"worst rel error at 1e-5 {worst:.1e}; " + " ".join(lines))


def test_c9_spectral_certificate(verdict):
    rng = np.random.default_rng(7)
    mismatch = 0.0
    for _ in range(1000):
        lam = 10 ** rng.uniform(-2, 3)
        t1 = rng.uniform(0.01, 1.0)
        t2 = t1 + rng.uniform(0.01, 2.0)
        d = det_condition([lam], t1, t2, 10 ** rng.uniform(-1, 1), 10 ** rng.uniform(-1, 1))
        mismatch = max(mismatch, d.max_mismatch())
    g = Grid((64,), (1.0,))
    lz = np.linalg.eigvalsh(assemble_generators(CoeffFields(g, 1.0, 1.0, 1.0), 1e-2).A_z)[:10]
    remark = det_condition(lz, 0.3, 0.7, 1.0, 1.0)
    g = Grid((32,), (1.0,))
    ref = ReferenceState(g, 1.0, 1.0, 3.0, 1e-2, 0.3, 0.7)
    _, V = np.linalg.eigh(assemble_generators(ref.coeffs(), ref.D).A_z)
    V = V / np.sqrt(g.cell_volume)
    matched = uniqueness_rank_test(ref, V[:, 0], V[:, 0]).sigma_min
    counter = uniqueness_rank_test(ref, V[:, 0], V[:, 1]).sigma_min
    ok = mismatch <= 1e-10 and remark.all_nonzero and matched > 1e-8 and counter <= 1e-10
    verdict(9, ok, f"det mismatch {mismatch:.1e}, remark dets nonzero={remark.all_nonzero}, "
                   f"sigma_min matched {matched:.2e} counterexample {counter:.1e}")


def test_c10_determinism(verdict, tmp_path):
    spec = tmp_path / "noisy.yaml"
    spec.write_text(
        "kind: forward\nseed: 5\ngrid: {shape: [16], extent: [0.1]}\n"
        "readout: {t_start: 0.72, prephase: 0.02, duration: 0.1}\nnoise: {sigma: 1.0e-3}\n"
    )
    outs = []
    for spec_name in ("examples/phantom1d_recon", str(spec)):
        pair = []
        for rep in range(2):
            out = tmp_path / f"{len(outs)}_{rep}"
            assert cli_main(["run", spec_name, "--out", str(out), "--seed", "5"]) == 0
            pair.append({p.relative_to(out): p.read_bytes() for p in sorted(out.rglob("*")) if p.is_file()})
        outs.append(pair)
    same = all(a == b for a, b in outs)
    nfiles = sum(len(a) for a, _ in outs)
    verdict(10, same, f"{nfiles} files compared byte for byte")
