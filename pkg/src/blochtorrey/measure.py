"""Receive coils, sampled signals, demodulation and noise."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from .core import Grid, PreconditionError, Trajectory, register_type


@register_type
@dataclass
class CoilSet:
    """Receive sensitivities, shape ``(ncoils, npts)``."""

    grid: Grid
    c: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.c, dtype=complex)
        if c.ndim == 0:
            c = np.full((1, self.grid.npts), c)
        elif c.ndim == 1:
            c = c.reshape(1, -1) if c.size == self.grid.npts else np.repeat(c[:, None], self.grid.npts, axis=1)
        if c.shape[1] != self.grid.npts:
            raise PreconditionError("coil sensitivities must cover every grid point")
        self.c = c

    @property
    def ncoils(self) -> int:
        return self.c.shape[0]

    @classmethod
    def constant(cls, grid: Grid, values=(1.0,)) -> "CoilSet":
        return cls(grid, np.repeat(np.atleast_1d(np.asarray(values, complex))[:, None], grid.npts, axis=1))

    def is_constant(self) -> bool:
        return bool(np.all(self.c == self.c[:, :1]))


@register_type
@dataclass
class Measurement:
    """Complex samples ``y`` of shape ``(ncoils, nt)`` on clock ``t``."""

    t: np.ndarray
    y: np.ndarray
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        self.t = np.asarray(self.t, float)
        self.y = np.atleast_2d(np.asarray(self.y, complex))
        if self.y.shape[1] != self.t.size:
            raise PreconditionError("measurement length does not match its clock")

    def copy(self) -> "Measurement":
        return Measurement(self.t.copy(), self.y.copy(), dict(self.info))

    def write(self, path) -> None:
        """CSV ``t, coil, re, im`` plus a JSON sidecar with ``info``."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "coil", "re", "im"])
            for j, row in enumerate(self.y):
                for t, v in zip(self.t, row):
                    w.writerow([repr(float(t)), j, repr(float(v.real)), repr(float(v.imag))])
        with open(str(path) + ".json", "w") as fh:
            json.dump(self.info, fh, sort_keys=True, indent=1, default=str)

    @classmethod
    def read(cls, path) -> "Measurement":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))[1:]
        arr = np.array([[float(v) for v in r] for r in rows])
        coils = arr[:, 1].astype(int)
        t = arr[coils == 0, 0]
        y = np.zeros((coils.max() + 1, t.size), complex)
        for j in range(coils.max() + 1):
            sel = arr[coils == j]
            y[j] = sel[:, 2] + 1j * sel[:, 3]
        try:
            with open(str(path) + ".json") as fh:
                info = json.load(fh)
        except FileNotFoundError:
            info = {}
        return cls(t, y, info)


def observe(traj: Trajectory, coils: CoilSet, clock=None) -> Measurement:
    """``y_j(t) = sum_r c_j(r) Mperp(t, r) h``; linear interpolation onto ``clock``."""
    grid = traj.grid
    y = traj.Mperp @ coils.c.T * grid.cell_volume  # (nt, ncoils)
    t = traj.times
    if clock is not None:
        clock = np.asarray(clock, float)
        if clock.size and (clock.min() < t.min() - 1e-14 or clock.max() > t.max() + 1e-14):
            raise PreconditionError("clock extends outside the trajectory")
        if not (clock.shape == t.shape and np.array_equal(clock, t)):
            y = np.stack([np.interp(clock, t, y[:, j].real) + 1j * np.interp(clock, t, y[:, j].imag)
                          for j in range(coils.ncoils)], axis=1)
        t = clock
    return Measurement(t, y.T, {"model": traj.info.get("model", "")})


def demodulate(meas: Measurement, R2ref: complex, t_offset: float, sign: int = 1) -> Measurement:
    """``sign * i * exp(R2ref (t - t_offset)) * y``."""
    if sign not in (1, -1):
        raise PreconditionError("sign must be +1 or -1")
    fac = sign * 1j * np.exp(R2ref * (meas.t - t_offset))
    return Measurement(meas.t, meas.y * fac[None, :], dict(meas.info, demodulated=True))


def add_noise(meas: Measurement, sigma: float, seed: int) -> Measurement:
    """Add complex Gaussian noise with ``E|n|^2 = sigma^2`` per sample."""
    if sigma < 0:
        raise PreconditionError("noise level must be non-negative")
    rng = np.random.default_rng(seed)
    n = rng.standard_normal(meas.y.shape) + 1j * rng.standard_normal(meas.y.shape)
    return Measurement(meas.t, meas.y + sigma / np.sqrt(2) * n, dict(meas.info, sigma=sigma, seed=seed))


def data_norm(y, grid: Grid) -> float:
    """l2 norm of samples scaled by ``1/sqrt(volume)`` (matches the ansatz normalisation)."""
    return float(np.linalg.norm(np.ravel(y)) / np.sqrt(grid.volume))
