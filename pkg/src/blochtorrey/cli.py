"""Config-driven experiment runner.

    blochtorrey run <spec.yaml> [--out DIR] [--seed K] [--threads N]
    blochtorrey sweep <spec.yaml> --param NAME --values a,b,c [--out DIR]

A spec names an experiment ``kind`` (forward, recon, newton, spectral,
sweep) plus the sections it needs; see ``examples/phantom1d_recon.yaml``
for the full layout. Outputs are CSV and JSON only, written without
timestamps so that a rerun with the same spec and seed is byte-identical.
Exit codes: 0 ok, 2 config error, 3 runtime error.
"""

from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import json
import platform
import re
import sys
from concurrent.futures import ThreadPoolExecutor
from importlib import resources
from pathlib import Path

import numpy as np
import scipy
import yaml

from . import __version__
from .bloch import explicit_state, solve_bloch
from .core import BoundarySpec, CoeffFields, ConfigError, Grid, ModelParams
from .measure import CoilSet, Measurement, add_noise
from .recon import AnsatzSpace, build_ansatz, recon_Meq, recon_Phi, recon_R1, recon_R2star
from .seq import cartesian_readout

KINDS = ("forward", "recon", "newton", "spectral", "sweep")
SEQ_NAMES = ("ninety", "ir_tau1", "ir_tau2")
SWEEP_ALIASES = {
    "tau_p": "sequence.tau_p",
    "dt": "engine.dt",
    "sigma": "noise.sigma",
    "N": "grid.shape.0",
}

DEFAULTS = {
    "seed": 0,
    "gamma": 2.6752218744e8,
    "phantom": {"kind": "smooth", "Meq": 1.0, "R1": 1.5, "R2": 8.0, "R2_imag": 0.5,
                "contrast": 0.3, "R2_contrast": 0.0},
    "sequence": {"tau_p": 1e-4, "tau1": 0.3, "tau2": 0.7},
    "coils": {"kind": "constant", "values": [1.0]},
    "engine": {"name": "explicit", "dt": None, "D0": 0.0},
    "noise": {"sigma": 0.0},
    "recon": {"refine": 0},
    "newton": {"variant": "full", "perturbation": 0.1, "tol": 1e-10, "max_iter": 20},
}


# ---------------------------------------------------------------------------
# spec handling


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        out[k] = _merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out


def resolve_spec_path(name: str) -> Path:
    """A file path, or ``examples/<name>`` for a bundled spec."""
    p = Path(name)
    if p.exists():
        return p
    stem = p.name if p.suffix else p.name + ".yaml"
    if p.parent.name == "examples" or str(p.parent) == ".":
        res = resources.files("blochtorrey") / "examples" / stem
        if res.is_file():
            return Path(str(res))
    raise ConfigError(f"spec file {name!r} not found")


class _Loader(yaml.SafeLoader):
    """Safe loader that also reads ``1e-3`` style floats (no exponent sign)."""


_Loader.add_implicit_resolver(
    "tag:yaml.org,2002:float",
    re.compile(r"^[-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?$|^[-+]?\.(?:inf|Inf|INF)$|^\.(?:nan|NaN|NAN)$"),
    list("-+0123456789."),
)


def load_spec(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            raw = yaml.load(fh, Loader=_Loader)
    except yaml.MarkedYAMLError as exc:
        mark = exc.problem_mark
        raise ConfigError(f"line {mark.line + 1}: {exc.problem}") from exc
    except OSError as exc:
        raise ConfigError(f"cannot read spec: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("spec must be a mapping")
    return validate_spec(raw)


def _need(d: dict, key: str, where: str):
    if not isinstance(d, dict) or key not in d or d[key] is None:
        raise ConfigError(f"{where}{key}: missing field")
    return d[key]


def validate_spec(raw: dict) -> dict:
    kind = _need(raw, "kind", "")
    if kind not in KINDS:
        raise ConfigError(f"kind: must be one of {KINDS}, got {kind!r}")
    spec = _merge(DEFAULTS, raw)
    if kind == "sweep":
        sw = _need(spec, "sweep", "")
        _need(sw, "param", "sweep.")
        _need(sw, "values", "sweep.")
        inner = _need(sw, "experiment", "sweep.")
        if inner not in KINDS or inner == "sweep":
            raise ConfigError("sweep.experiment: must name a non-sweep experiment kind")
        validate_spec(dict(raw, kind=inner))
        return spec
    if kind == "spectral":
        sp = _need(spec, "spectral", "")
        for key in ("N", "L", "D0", "R10", "R2", "tau1", "tau2"):
            _need(sp, key, "spectral.")
        return spec
    g = _need(spec, "grid", "")
    shape, extent = _need(g, "shape", "grid."), _need(g, "extent", "grid.")
    if len(np.atleast_1d(shape)) != len(np.atleast_1d(extent)):
        raise ConfigError("grid.extent: length must match grid.shape")
    ro = _need(spec, "readout", "")
    for key in ("t_start", "prephase", "duration"):
        _need(ro, key, "readout.")
    if spec["coils"]["kind"] not in ("constant", "gaussian"):
        raise ConfigError("coils.kind: must be 'constant' or 'gaussian'")
    return spec


def config_hash(spec: dict) -> str:
    return hashlib.sha256(json.dumps(spec, sort_keys=True, default=str).encode()).hexdigest()


def set_path(spec: dict, path: str, value):
    path = SWEEP_ALIASES.get(path, path)
    keys = path.split(".")
    d = spec
    for k in keys[:-1]:
        d = d[int(k)] if isinstance(d, list) else d.setdefault(k, {})
    last = keys[-1]
    if isinstance(d, list):
        d[int(last)] = value
    else:
        d[last] = value


# ---------------------------------------------------------------------------
# building blocks


def make_grid(spec) -> Grid:
    g = spec["grid"]
    return Grid(tuple(int(n) for n in np.atleast_1d(g["shape"])), tuple(np.atleast_1d(g["extent"])))


def make_phantom(grid: Grid, ph: dict) -> CoeffFields:
    """Desk phantom: smooth cosines, or the same with steps (``piecewise``)."""
    x = grid.r3[:, 0] / grid.extent[0]
    f1, f2 = np.cos(2 * np.pi * x), np.sin(2 * np.pi * x)
    if ph["kind"] == "piecewise":
        f1 = f1 + 0.5 * (x > 0.1) - 0.3 * (x < -0.25)
        f2 = f2 - 0.4 * (x > -0.05)
    elif ph["kind"] != "smooth":
        raise ConfigError(f"phantom.kind: unknown phantom {ph['kind']!r}")
    c = float(ph["contrast"])
    Meq = ph["Meq"] * (1 + c * f1)
    R1 = ph["R1"] * (1 + c * f2)
    R2 = ph["R2"] * (1 + float(ph["R2_contrast"]) * np.cos(4 * np.pi * x)) + 1j * ph["R2_imag"]
    return CoeffFields(grid, Meq, R1, R2).validate()


def make_coils(grid: Grid, spec) -> CoilSet:
    cs = spec["coils"]
    if cs["kind"] == "constant":
        return CoilSet.constant(grid, cs.get("values", [1.0]))
    n, w = int(cs.get("count", 2)), float(cs.get("width", 0.5))
    x = grid.r3[:, 0] / grid.extent[0]
    centres = np.linspace(-0.5, 0.5, n)
    return CoilSet(grid, np.stack([np.exp(-((x - c) / w) ** 2) for c in centres]))


def make_forward_config(spec, grid: Grid, coils: CoilSet):
    from .invert import make_config

    sq, ro, eng = spec["sequence"], spec["readout"], spec["engine"]
    readout = cartesian_readout(grid, spec["gamma"], ro["t_start"], ro["prephase"], ro["duration"],
                                int(ro.get("oversample", 1)))
    kw = {"dt": eng.get("dt"), "D0": float(eng.get("D0", 0.0))}
    if eng["name"] == "torrey":
        kw["model"] = ModelParams(grid, D=kw["D0"], boundary=BoundarySpec(eng.get("boundary", "dirichlet")))
    return make_config(grid, coils, sq["tau1"], sq["tau2"], readout, tau_p=sq["tau_p"], engine=eng["name"],
                       gamma=spec["gamma"], **kw), readout


def _rel(a, b) -> float:
    return float(np.linalg.norm(np.ravel(a - b)) / np.linalg.norm(np.ravel(b)))


# ---------------------------------------------------------------------------
# experiments


def _measurements(spec, truth, cfg):
    from .invert import forward_F

    y = forward_F(truth, cfg)
    meas = [Measurement(cfg.clock, y[J], {"sequence": SEQ_NAMES[J], "engine": cfg.engine}) for J in range(3)]
    sigma = float(spec["noise"]["sigma"])
    if sigma > 0:
        meas = [add_noise(m, sigma, int(spec["seed"]) + J) for J, m in enumerate(meas)]
    return meas


def exp_forward(spec, out: Path) -> dict:
    grid = make_grid(spec)
    truth = make_phantom(grid, spec["phantom"])
    coils = make_coils(grid, spec)
    cfg, _ = make_forward_config(spec, grid, coils)
    meas = _measurements(spec, truth, cfg)
    for name, m in zip(SEQ_NAMES, meas):
        m.write(out / f"measurement_{name}.csv")
    report = {"engine": cfg.engine, "samples": int(cfg.clock.size)}
    eng = cfg.engine
    if eng.startswith("bloch"):
        gap = 0.0
        for seq in cfg.seqs:
            a = explicit_state(seq, truth, cfg.clock)
            b = solve_bloch(seq, truth, cfg.clock, cfg.cplus)
            gap = max(gap, float(np.abs(a.Mperp - b.Mperp).max()), float(np.abs(a.Mz - b.Mz).max()))
        report["explicit_gap"] = gap
        report["metric"] = "explicit_gap"
    elif eng == "torrey":
        from .torrey import energy_residual, solve_bt

        ratio = spec["engine"].get("dt_pulse_ratio")
        dt_pulse = None if ratio is None or cfg.dt is None else cfg.dt * float(ratio)
        traj = solve_bt(cfg.seqs[0], truth, cfg.model, cfg.clock, dt=cfg.dt, dt_pulse=dt_pulse)
        report["energy_residual"] = float(energy_residual(traj, "trapezoid").max())
        report["energy_residual_scheme"] = float(energy_residual(traj, "scheme").max())
        report["metric"] = "energy_residual"
    else:
        report["data_norm"] = float(np.linalg.norm([m.y for m in meas]))
        report["metric"] = "data_norm"
    return report


def exp_recon(spec, out: Path) -> dict:
    grid = make_grid(spec)
    truth = make_phantom(grid, spec["phantom"])
    coils = make_coils(grid, spec)
    cfg, readout = make_forward_config(spec, grid, coils)
    meas = _measurements(spec, truth, cfg)
    for name, m in zip(SEQ_NAMES, meas):
        m.write(out / f"measurement_{name}.csv")
    s90 = cfg.seqs[0]
    X = build_ansatz(grid, readout.k - s90.k(s90.t_ref))
    R2ref = complex(np.mean(truth.R2star))
    Meq, rep = recon_Meq(meas[0], s90, R2ref, X, coils)
    Phi1, _ = recon_Phi(meas[1], cfg.seqs[1], R2ref, X, coils)
    Phi2, _ = recon_Phi(meas[2], cfg.seqs[2], R2ref, X, coils)
    tau1, tau2 = cfg.taus[1], cfg.taus[2]
    R1a = recon_R1("known_meq", tau1, Phi1, Meq=Meq)
    R1b = recon_R1("two_tau", tau1, Phi1, Phi2=Phi2, tau2=tau2)
    R2, rep2 = recon_R2star(meas[0], s90, Meq, X, coils, refine=int(spec["recon"]["refine"]))
    with open(out / "reconstruction.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "Meq", "R1_known_meq", "R1_two_tau", "R2_re", "R2_im"])
        for row in zip(grid.r3[:, 0], Meq, R1a, R1b, R2.real, R2.imag):
            w.writerow([repr(float(v)) for v in row])
    return {
        "metric": "Meq_rel_error",
        "Meq_rel_error": _rel(Meq, truth.Meq),
        "R1_known_meq_rel_error": _rel(R1a, truth.R1),
        "R1_two_tau_rel_error": _rel(R1b, truth.R1),
        "R2star_rel_error": _rel(R2, truth.R2star),
        "R20": [float(np.real(rep2["R20"])), float(np.imag(rep2["R20"]))],
        "ansatz_dim": X.dim,
        "C_I": rep["C_I"],
    }


def exp_newton(spec, out: Path) -> dict:
    from .invert import convergence_order, newton_solve, write_history_csv

    grid = make_grid(spec)
    truth = make_phantom(grid, spec["phantom"])
    coils = make_coils(grid, spec)
    cfg, _ = make_forward_config(spec, grid, coils)
    y = np.stack([m.y for m in _measurements(spec, truth, cfg)])
    nw = spec["newton"]
    p = float(nw["perturbation"])
    x0 = CoeffFields(grid, truth.Meq * (1 + p), truth.R1 * (1 - p), truth.R2star * (1 + p))
    res = newton_solve(y, x0, cfg, variant=nw["variant"], tol=float(nw["tol"]), max_iter=int(nw["max_iter"]),
                       X=AnsatzSpace.full(grid), truth=truth)
    write_history_csv(out / "newton_history.csv", res)
    errs = res.errors
    return {
        "metric": "final_error",
        "variant": nw["variant"],
        "converged": bool(res.converged),
        "iterations": len(res.history),
        "final_error": float(errs[-1]) if len(errs) else float("nan"),
        "order": convergence_order(errs) if len(errs) >= 3 else None,
    }


def exp_spectral(spec, out: Path) -> dict:
    from .spectral import ReferenceState, assemble_generators, uniqueness_rank_test

    sp = spec["spectral"]
    grid = Grid((int(sp["N"]),), (float(sp["L"]),))
    R2 = sp["R2"]
    R2t = complex(R2[0], R2[1]) if isinstance(R2, (list, tuple)) else complex(R2)
    ref = ReferenceState(grid, sp.get("Meq", 1.0), float(sp["R10"]), R2t, float(sp["D0"]),
                         float(sp["tau1"]), float(sp["tau2"]), G0=(float(sp.get("G0", 0.0)), 0.0, 0.0),
                         gamma=float(sp.get("gamma", 1.0)))
    gens = assemble_generators(ref.coeffs(), ref.D)
    _, V = np.linalg.eigh(gens.A_z)
    V = V / np.sqrt(grid.cell_volume)
    modes = [int(m) for m in sp.get("modes", [0])]
    coil_modes = [int(m) for m in sp.get("coil_modes", modes)]
    rep = uniqueness_rank_test(ref, V[:, modes], V[:, coil_modes].T, T=sp.get("T"), nt=int(sp.get("nt", 200)))
    rep.write_json(out / "certificate.json")
    d = rep.to_dict()
    return {"metric": "sigma_min", "sigma_min": rep.sigma_min, "injective": rep.injective,
            "conditions": d["conditions"], "det_min_abs": float(np.abs(rep.det.direct).min())}


EXPERIMENTS = {"forward": exp_forward, "recon": exp_recon, "newton": exp_newton, "spectral": exp_spectral}


# ---------------------------------------------------------------------------
# driver


def _sha(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_json(path: Path, obj) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True, default=_jsonable)
        fh.write("\n")


def _jsonable(o):
    if isinstance(o, (np.floating, np.integer, np.bool_)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, complex):
        return [o.real, o.imag]
    return str(o)


def write_manifest(out: Path, spec: dict) -> None:
    files = sorted(p for p in out.rglob("*") if p.is_file() and p.name != "manifest.json")
    _write_json(out / "manifest.json", {
        "config_sha256": config_hash(spec),
        "seed": spec.get("seed"),
        "spec": spec,
        "versions": {"blochtorrey": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
                     "python": platform.python_version()},
        "outputs": {str(p.relative_to(out)): _sha(p) for p in files},
    })


def run_experiment(spec: dict, out: Path) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    (out / "error.json").unlink(missing_ok=True)
    report = EXPERIMENTS[spec["kind"]](spec, out)
    report["kind"] = spec["kind"]
    _write_json(out / "report.json", report)
    write_manifest(out, spec)
    return report


def log_slope(values, metrics):
    v, m = np.asarray(values, float), np.asarray(metrics, float)
    ok = (v > 0) & (m > 0) & np.isfinite(m)
    if ok.sum() < 2:
        return None
    return float(np.polyfit(np.log(v[ok]), np.log(m[ok]), 1)[0])


def run_sweep(spec: dict, param: str, values, out: Path, threads: int = 1) -> dict:
    base = dict(spec)
    base["kind"] = spec["sweep"]["experiment"] if spec["kind"] == "sweep" else spec["kind"]
    out.mkdir(parents=True, exist_ok=True)

    def one(i_v):
        i, v = i_v
        s = copy.deepcopy(base)
        set_path(s, param, v)
        rep = run_experiment(s, out / f"point_{i:03d}")
        return rep[rep["metric"]]

    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        metrics = list(pool.map(one, enumerate(values)))
    slope = log_slope(values, metrics)
    with open(out / "sweep.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([param, "metric", "slope"])
        for v, m in zip(values, metrics):
            w.writerow([repr(v), repr(float(m)), "" if slope is None else repr(slope)])
    summary = {"param": param, "values": list(values), "metrics": [float(m) for m in metrics], "slope": slope}
    _write_json(out / "sweep.json", summary)
    write_manifest(out, dict(spec, sweep={"param": param, "values": list(values),
                                          "experiment": base["kind"]}))
    return summary


def _parse_values(text: str):
    vals = []
    for tok in text.split(","):
        tok = tok.strip()
        try:
            vals.append(int(tok))
        except ValueError:
            try:
                vals.append(float(tok))
            except ValueError as exc:
                raise ConfigError(f"--values: cannot parse {tok!r}") from exc
    return vals


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="blochtorrey", description="Bloch-Torrey forward and inverse experiments")
    sub = p.add_subparsers(dest="command", required=True)
    for name in ("run", "sweep"):
        s = sub.add_parser(name)
        s.add_argument("spec")
        s.add_argument("--out", default=None)
        s.add_argument("--threads", type=int, default=1)
        s.add_argument("--seed", type=int, default=None)
        if name == "sweep":
            s.add_argument("--param", default=None)
            s.add_argument("--values", default=None)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    out = None
    try:
        spec = load_spec(resolve_spec_path(args.spec))
        if args.seed is not None:
            spec["seed"] = args.seed
        out = Path(args.out or spec.get("output", {}).get("dir", "out"))
        if args.command == "sweep" or spec["kind"] == "sweep":
            sw = spec.get("sweep", {})
            param = getattr(args, "param", None) or sw.get("param")
            values = _parse_values(args.values) if getattr(args, "values", None) else sw.get("values")
            if not param or not values:
                raise ConfigError("sweep: --param and --values are required")
            if spec["kind"] != "sweep":
                spec = dict(spec, sweep={"experiment": spec["kind"]})
            summary = run_sweep(spec, param, values, out, args.threads)
            print(json.dumps(summary, sort_keys=True, default=_jsonable))
        else:
            report = run_experiment(spec, out)
            print(json.dumps(report, sort_keys=True, default=_jsonable))
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - every runtime failure maps to exit code 3
        err = {"error": type(exc).__name__, "message": str(exc)}
        print(json.dumps(err), file=sys.stderr)
        if out is not None and out.is_dir():
            _write_json(out / "error.json", err)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
