"""Shared types: grids, coefficient fields, model parameters, waveforms.

Everything is SI. Spatial fields live on a cell-centred tensor grid and are
stored flat (C order) with shape ``(npts,)``; vector and tensor fields carry
trailing axes of length 3 so that ``r . G`` and ``xi . D xi`` work the same
way in one, two and three dimensions.
"""

from __future__ import annotations

import csv
import dataclasses
import json
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

FLOOR_R1 = 1e-6
FLOOR_R2 = 1e-6


class ModelError(Exception):
    """Base class for errors raised by this package."""


class AdmissibilityError(ModelError, ValueError):
    """A coefficient field violates its positivity floor."""


class ConfigError(ModelError, ValueError):
    """A configuration file or table is malformed."""


class DomainError(ModelError, ValueError):
    """A closed-form inversion is evaluated outside its domain."""


class PreconditionError(ModelError, ValueError):
    """Inputs do not satisfy the documented preconditions."""


# ---------------------------------------------------------------------------
# physical constants


@dataclass(frozen=True)
class PhysicalConstants:
    gamma: float = 2.6752218744e8  # rad s^-1 T^-1 (proton)
    hbar: float = 1.054571817e-34
    kB: float = 1.380649e-23
    B0: float = 3.0
    temperature: float = 310.0

    def meq_from_density(self, rho):
        """Curie-law equilibrium magnetisation for a proton density ``rho``."""
        rho = np.asarray(rho, dtype=float)
        if np.any(rho < 0):
            raise PreconditionError("proton density must be non-negative")
        return rho * self.gamma**2 * self.hbar**2 / (4.0 * self.kB * self.temperature) * self.B0


# ---------------------------------------------------------------------------
# grid


@dataclass(frozen=True)
class Grid:
    """Cell-centred tensor grid on a box ``origin + [0, extent)``.

    By default the box is centred on the origin of coordinates, which keeps
    ``|r|`` small in Fourier phases.
    """

    shape: tuple
    extent: tuple
    origin: tuple = None

    def __post_init__(self):
        shape = tuple(int(n) for n in np.atleast_1d(self.shape))
        extent = tuple(float(a) for a in np.atleast_1d(self.extent))
        if not 1 <= len(shape) <= 3 or len(shape) != len(extent):
            raise ConfigError("grid shape and extent must have matching length 1..3")
        if min(shape) < 1 or min(extent) <= 0:
            raise ConfigError("grid needs positive sizes")
        origin = self.origin
        if origin is None:
            origin = tuple(-0.5 * a for a in extent)
        origin = tuple(float(o) for o in np.atleast_1d(origin))
        if len(origin) != len(shape):
            raise ConfigError("grid origin has wrong length")
        object.__setattr__(self, "shape", shape)
        object.__setattr__(self, "extent", extent)
        object.__setattr__(self, "origin", origin)

    @property
    def dim(self) -> int:
        return len(self.shape)

    @property
    def npts(self) -> int:
        return int(np.prod(self.shape))

    @property
    def spacing(self) -> np.ndarray:
        return np.array(self.extent) / np.array(self.shape)

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.spacing))

    @property
    def volume(self) -> float:
        return float(np.prod(self.extent))

    def axis_coords(self, a: int) -> np.ndarray:
        h = self.extent[a] / self.shape[a]
        return self.origin[a] + (np.arange(self.shape[a]) + 0.5) * h

    @property
    def coords(self) -> np.ndarray:
        """Cell centres, shape ``(npts, dim)``."""
        mesh = np.meshgrid(*[self.axis_coords(a) for a in range(self.dim)], indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)

    @property
    def r3(self) -> np.ndarray:
        """Cell centres padded with zeros to three components."""
        out = np.zeros((self.npts, 3))
        out[:, : self.dim] = self.coords
        return out

    @property
    def index_triples(self) -> np.ndarray:
        idx = np.indices(self.shape).reshape(self.dim, -1).T
        out = np.zeros((self.npts, 3), dtype=int)
        out[:, : self.dim] = idx
        return out

    def lattice(self) -> np.ndarray:
        """Dual-lattice frequencies in FFT order, shape ``(npts, 3)``."""
        axes = [np.fft.fftfreq(n, d=L / n) for n, L in zip(self.shape, self.extent)]
        mesh = np.meshgrid(*axes, indexing="ij")
        out = np.zeros((self.npts, 3))
        for a, m in enumerate(mesh):
            out[:, a] = m.ravel()
        return out

    def field(self, values, dtype=float) -> np.ndarray:
        """Broadcast a scalar or array to a flat grid field."""
        arr = np.asarray(values, dtype=dtype)
        if arr.ndim == 0:
            return np.full(self.npts, arr, dtype=dtype)
        arr = arr.reshape(-1)
        if arr.size != self.npts:
            raise ConfigError(f"field has {arr.size} values, grid has {self.npts} points")
        return arr.copy()

    def inner(self, u, w) -> complex:
        return complex(np.sum(np.conj(w) * u) * self.cell_volume)

    def norm(self, u) -> float:
        return float(np.sqrt(np.sum(np.abs(u) ** 2) * self.cell_volume))


# ---------------------------------------------------------------------------
# coefficient fields


@dataclass
class CoeffFields:
    """Imaging parameters: equilibrium magnetisation and relaxation rates."""

    grid: Grid
    Meq: np.ndarray
    R1: np.ndarray
    R2star: np.ndarray

    def __post_init__(self):
        self.Meq = self.grid.field(self.Meq, float)
        self.R1 = self.grid.field(self.R1, float)
        self.R2star = self.grid.field(self.R2star, complex)

    def validate(self, floor_R1: float = FLOOR_R1, floor_R2: float = FLOOR_R2) -> "CoeffFields":
        bad = np.flatnonzero(~(self.R1 >= floor_R1))
        if bad.size:
            i = int(bad[0])
            raise AdmissibilityError(f"R1[{i}] = {self.R1[i]:g} below floor {floor_R1:g}")
        bad = np.flatnonzero(~(self.R2star.real >= floor_R2))
        if bad.size:
            i = int(bad[0])
            raise AdmissibilityError(f"Re R2*[{i}] = {self.R2star[i].real:g} below floor {floor_R2:g}")
        if not np.all(np.isfinite(self.Meq)):
            raise AdmissibilityError("Meq has non-finite entries")
        return self

    def copy(self) -> "CoeffFields":
        return CoeffFields(self.grid, self.Meq.copy(), self.R1.copy(), self.R2star.copy())

    def is_reference(self, rtol: float = 1e-12) -> bool:
        """True when R1 and R2* are spatially constant."""
        def const(a):
            return np.all(np.abs(a - a[0]) <= rtol * max(abs(a[0]), 1.0))
        return bool(const(self.R1) and const(self.R2star))

    # flat real parametrisation used by the Newton solvers
    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.Meq, self.R1, self.R2star.real, self.R2star.imag])

    @classmethod
    def from_vector(cls, grid: Grid, vec) -> "CoeffFields":
        n = grid.npts
        vec = np.asarray(vec, dtype=float)
        return cls(grid, vec[:n], vec[n : 2 * n], vec[2 * n : 3 * n] + 1j * vec[3 * n : 4 * n])

    def __add__(self, other: "CoeffFields") -> "CoeffFields":
        return CoeffFields(self.grid, self.Meq + other.Meq, self.R1 + other.R1, self.R2star + other.R2star)

    def __sub__(self, other: "CoeffFields") -> "CoeffFields":
        return CoeffFields(self.grid, self.Meq - other.Meq, self.R1 - other.R1, self.R2star - other.R2star)

    def scaled(self, s: float) -> "CoeffFields":
        return CoeffFields(self.grid, s * self.Meq, s * self.R1, s * self.R2star)


@dataclass(frozen=True)
class BoundarySpec:
    """``dirichlet`` or ``impedance`` (``D dM/dn + beta M = 0``).

    ``kind`` is one string for all faces or a sequence with one entry per
    face, ordered (axis 0 low, axis 0 high, axis 1 low, ...). ``beta`` acts
    on the transverse components and ``beta_z`` (default ``beta``) on ``Mz``.
    """

    kind: Any = "dirichlet"
    beta: float = 0.0
    beta_z: float | None = None

    def __post_init__(self):
        kinds = [self.kind] if isinstance(self.kind, str) else list(self.kind)
        for k in kinds:
            if k not in ("dirichlet", "impedance"):
                raise ConfigError(f"unknown boundary kind {k!r}")
        if self.beta_z is None:
            object.__setattr__(self, "beta_z", self.beta)
        if np.any(np.asarray(self.beta) < 0) or np.any(np.asarray(self.beta_z) < 0):
            raise ConfigError("impedance coefficient must be non-negative")

    def face_kind(self, face: int) -> str:
        return self.kind if isinstance(self.kind, str) else self.kind[face]


@dataclass
class ModelParams:
    """Modelling parameters of the Bloch-Torrey system.

    ``D`` may be a scalar, a per-point scalar field or a ``(npts, 3, 3)``
    tensor field. ``v`` is ``None``, an ``(npts, 3)`` array or a callable
    ``t -> (npts, 3)``. ``cplus`` is the complex transmit coil sensitivity.
    """

    grid: Grid
    D: Any = 0.0
    v: Any = None
    cplus: Any = 1.0
    boundary: BoundarySpec = field(default_factory=BoundarySpec)

    def __post_init__(self):
        self.D = as_tensor_field(self.grid, self.D)
        w = np.linalg.eigvalsh(self.D)
        if np.any(w < -1e-14 * max(1.0, float(np.abs(w).max(initial=0.0)))):
            raise AdmissibilityError("diffusion tensor must be positive semidefinite")
        self.cplus = self.grid.field(self.cplus, complex)
        if self.v is not None and not callable(self.v):
            v = np.asarray(self.v, dtype=float)
            if v.ndim == 1 and v.size == 3:
                v = np.broadcast_to(v, (self.grid.npts, 3)).copy()
            if v.shape != (self.grid.npts, 3):
                raise ConfigError("velocity field must have shape (npts, 3)")
            self.v = v

    def velocity(self, t: float):
        if self.v is None:
            return None
        return np.asarray(self.v(t), dtype=float) if callable(self.v) else self.v


def as_tensor_field(grid: Grid, D) -> np.ndarray:
    D = np.asarray(D, dtype=float)
    if D.ndim == 0 or (D.ndim == 1 and D.size == grid.npts):
        d = grid.field(D, float)
        out = np.zeros((grid.npts, 3, 3))
        for a in range(grid.dim):
            out[:, a, a] = d
        return out
    if D.shape == (3, 3):
        D = np.broadcast_to(D, (grid.npts, 3, 3))
    if D.shape != (grid.npts, 3, 3):
        raise ConfigError("diffusion tensor field must have shape (npts, 3, 3)")
    if not np.allclose(D, np.swapaxes(D, 1, 2)):
        raise AdmissibilityError("diffusion tensor must be symmetric")
    return np.array(D, dtype=float)


@dataclass
class MagState:
    grid: Grid
    Mperp: np.ndarray
    Mz: np.ndarray

    def __post_init__(self):
        self.Mperp = self.grid.field(self.Mperp, complex)
        self.Mz = self.grid.field(self.Mz, float)

    @classmethod
    def equilibrium(cls, coeffs: CoeffFields) -> "MagState":
        return cls(coeffs.grid, np.zeros(coeffs.grid.npts, complex), coeffs.Meq.copy())


@dataclass
class Trajectory:
    """Sampled magnetisation: ``Mperp`` and ``Mz`` have shape ``(nt, npts)``."""

    grid: Grid
    times: np.ndarray
    Mperp: np.ndarray
    Mz: np.ndarray
    info: dict = field(default_factory=dict)

    def state(self, i: int) -> MagState:
        return MagState(self.grid, self.Mperp[i], self.Mz[i])

    def write_csv(self, path) -> None:
        idx = np.arange(self.grid.npts)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "index", "re_mperp", "im_mperp", "mz"])
            for i, t in enumerate(self.times):
                for n in idx:
                    m = self.Mperp[i, n]
                    w.writerow([repr(float(t)), int(n), repr(float(m.real)), repr(float(m.imag)),
                                repr(float(self.Mz[i, n]))])


# ---------------------------------------------------------------------------
# piecewise-constant waveforms


@dataclass(frozen=True)
class Waveform:
    """Piecewise-constant function of time; zero outside ``[breaks[0], breaks[-1])``.

    ``values`` has shape ``(nseg,)`` for scalar envelopes or ``(nseg, 3)`` for
    gradients.
    """

    breaks: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        b = np.asarray(self.breaks, dtype=float)
        v = np.asarray(self.values)
        if b.ndim != 1 or b.size != len(v) + 1 or np.any(np.diff(b) <= 0):
            raise ConfigError("waveform breaks must be increasing with one more entry than values")
        object.__setattr__(self, "breaks", b)
        object.__setattr__(self, "values", v.copy())

    @classmethod
    def zero(cls, shape=(3,), t_end: float = 1.0) -> "Waveform":
        return cls(np.array([0.0, t_end]), np.zeros((1,) + tuple(shape)))

    @classmethod
    def from_segments(cls, segments: Sequence, vector: bool = True) -> "Waveform":
        """Build from ``(t_start, t_end, value)`` triples; gaps are filled with zeros."""
        segs = sorted(segments, key=lambda s: s[0])
        breaks, values = [], []
        zero = np.zeros(3) if vector else 0.0
        for t0, t1, val in segs:
            if breaks and t0 < breaks[-1] - 1e-15:
                raise ConfigError("waveform segments overlap")
            if breaks and t0 > breaks[-1]:
                values.append(zero)
                breaks.append(t0)
            if not breaks:
                breaks.append(t0)
            values.append(np.asarray(val, dtype=float if vector else complex))
            breaks.append(t1)
        return cls(np.array(breaks), np.array(values))

    @property
    def is_vector(self) -> bool:
        return self.values.ndim == 2

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        i = np.searchsorted(self.breaks, t, side="right") - 1
        inside = (i >= 0) & (i < len(self.values))
        out = self.values[np.clip(i, 0, len(self.values) - 1)]
        mask = inside.reshape(inside.shape + (1,) * (out.ndim - inside.ndim))
        return np.where(mask, out, 0)

    def integral(self, t):
        """Exact ``int_0^t`` of the waveform (assumes ``breaks[0] >= 0``)."""
        t = np.asarray(t, dtype=float)
        widths = np.diff(self.breaks)
        cum = np.concatenate([np.zeros((1,) + self.values.shape[1:]),
                              np.cumsum(self.values * widths.reshape((-1,) + (1,) * (self.values.ndim - 1)),
                                        axis=0)])
        tc = np.clip(t, self.breaks[0], self.breaks[-1])
        i = np.clip(np.searchsorted(self.breaks, tc, side="right") - 1, 0, len(self.values) - 1)
        dt = (tc - self.breaks[i]).reshape(tc.shape + (1,) * (self.values.ndim - 1))
        return cum[i] + self.values[i] * dt

    def shifted(self, dt: float) -> "Waveform":
        return Waveform(self.breaks + dt, self.values)


def k_trajectory(G: Waveform, t, gamma: float):
    """k(t) = gamma/(2 pi) int_0^t G, shape ``t.shape + (3,)``."""
    return gamma / (2 * np.pi) * G.integral(t)


# ---------------------------------------------------------------------------
# serialisation


def to_jsonable(obj):
    """Convert dataclasses and arrays to plain JSON values (round-trip exact)."""
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        out = {"__type__": type(obj).__name__}
        for f in dataclasses.fields(obj):
            val = getattr(obj, f.name)
            if callable(val):
                raise ConfigError(f"field {f.name} is a callable and cannot be serialised")
            out[f.name] = to_jsonable(val)
        return out
    if isinstance(obj, np.ndarray):
        if np.iscomplexobj(obj):
            return {"__complex__": True, "shape": list(obj.shape),
                    "re": obj.real.ravel().tolist(), "im": obj.imag.ravel().tolist()}
        return {"__array__": str(obj.dtype), "shape": list(obj.shape), "data": obj.ravel().tolist()}
    if isinstance(obj, complex):
        return {"__complex__": True, "shape": [], "re": [obj.real], "im": [obj.imag]}
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(x) for x in obj]
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    return obj


_TYPES = {}


def _register(*classes):
    for c in classes:
        _TYPES[c.__name__] = c


_register(PhysicalConstants, Grid, CoeffFields, BoundarySpec, ModelParams, MagState, Trajectory, Waveform)


def register_type(cls):
    _register(cls)
    return cls


def from_jsonable(obj):
    if isinstance(obj, dict):
        if "__complex__" in obj:
            arr = np.array(obj["re"], float) + 1j * np.array(obj["im"], float)
            return complex(arr[0]) if obj["shape"] == [] else arr.reshape(obj["shape"])
        if "__array__" in obj:
            return np.array(obj["data"], dtype=obj["__array__"]).reshape(obj["shape"])
        if "__type__" in obj:
            cls = _TYPES[obj["__type__"]]
            kwargs = {k: from_jsonable(v) for k, v in obj.items() if k != "__type__"}
            if cls is Grid:
                kwargs = {k: tuple(v) for k, v in kwargs.items()}
            return cls(**kwargs)
        return {k: from_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [from_jsonable(x) for x in obj]
    return obj


def dumps(obj) -> str:
    return json.dumps(to_jsonable(obj), sort_keys=True)


def loads(text: str):
    return from_jsonable(json.loads(text))


# ---------------------------------------------------------------------------
# grid-function tables


def write_grid_csv(path, grid: Grid, columns: dict) -> None:
    """One row per grid point: ``i, j, k`` followed by the named columns."""
    names = list(columns)
    cols = [grid.field(columns[n], np.asarray(columns[n]).dtype) for n in names]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["i", "j", "k"] + names)
        for n, ijk in enumerate(grid.index_triples):
            w.writerow(list(map(int, ijk)) + [repr(float(c[n])) for c in cols])


def read_grid_csv(path, grid: Grid) -> dict:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][:3] != ["i", "j", "k"]:
        raise ConfigError(f"{path}: expected header starting with i,j,k")
    names = rows[0][3:]
    data = {n: np.full(grid.shape, np.nan) for n in names}
    for line, row in enumerate(rows[1:], start=2):
        if len(row) != 3 + len(names):
            raise ConfigError(f"{path}:{line}: expected {3 + len(names)} columns")
        try:
            ijk = tuple(int(v) for v in row[:3])[: grid.dim]
            vals = [float(v) for v in row[3:]]
        except ValueError as exc:
            raise ConfigError(f"{path}:{line}: {exc}") from None
        if any(not 0 <= i < n for i, n in zip(ijk, grid.shape)):
            raise ConfigError(f"{path}:{line}: index {ijk} outside grid {grid.shape}")
        for n, v in zip(names, vals):
            data[n][ijk] = v
    for n, arr in data.items():
        if np.isnan(arr).any():
            raise ConfigError(f"{path}: column {n} does not cover every grid point")
    return {n: arr.ravel() for n, arr in data.items()}
