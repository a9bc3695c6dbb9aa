"""Pulse sequences: rectangular excitation pulses, gradient waveforms, clocks.

A sequence is an ordered list of segments. On a :class:`Pulse` the gradient
vanishes and the envelope is constant; on a :class:`Free` segment the
envelope vanishes and the gradient is constant. Amplitudes are chosen so
that a pulse played through the reference coil ``cplus0`` has flip angle
exactly pi/2 (or pi).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import ConfigError, Grid, PreconditionError, Waveform, k_trajectory, register_type

NINETY = "ninety"
INVERSION = "inversion"

_ALIASES = {
    "ninety": NINETY, "90": NINETY, "i": NINETY,
    "inversion": INVERSION, "180-tau-90": INVERSION, "invrec": INVERSION, "ii": INVERSION, "iii": INVERSION,
}


@register_type
@dataclass(frozen=True)
class Pulse:
    t0: float
    duration: float
    amplitude: complex

    @property
    def t1(self) -> float:
        return self.t0 + self.duration


@register_type
@dataclass(frozen=True)
class Free:
    t0: float
    duration: float
    gradient: np.ndarray

    @property
    def t1(self) -> float:
        return self.t0 + self.duration


@register_type
@dataclass
class PulseSequence:
    kind: str
    gamma: float
    tau_p: float
    tau: float
    horizon: float
    cplus0: complex
    G: Waveform
    segments: list = field(default_factory=list)

    @property
    def pulses(self) -> list:
        return [s for s in self.segments if isinstance(s, Pulse)]

    @property
    def t_ref(self) -> float:
        """End of the last pulse; the explicit states are referenced to it."""
        return self.pulses[-1].t1

    @property
    def envelope(self) -> Waveform:
        return Waveform.from_segments([(p.t0, p.t1, p.amplitude) for p in self.pulses], vector=False)

    def k(self, t):
        return k_trajectory(self.G, t, self.gamma)

    def segment_at(self, t: float):
        for s in self.segments:
            if s.t0 <= t < s.t1:
                return s
        return None


def canonical_kind(kind: str) -> str:
    try:
        return _ALIASES[str(kind).lower()]
    except KeyError:
        raise ConfigError(f"unknown sequence kind {kind!r}") from None


def make_sequence(kind: str, cplus0: complex = 1.0, tau_p: float = 1e-3, horizon: float = 1.0,
                  G: Waveform | None = None, tau: float | None = None,
                  gamma: float = 2.6752218744e8) -> PulseSequence:
    """Rectangular 90 or 180-tau-90 sequence with gradient waveform ``G``."""
    kind = canonical_kind(kind)
    if not tau_p > 0:
        raise PreconditionError("pulse duration must be positive")
    if cplus0 == 0:
        raise PreconditionError("reference coil sensitivity must be nonzero")
    unit = 1.0 / (cplus0 * gamma * tau_p)
    if kind == NINETY:
        pulses = [Pulse(0.0, tau_p, 0.5 * np.pi * unit)]
        tau = 0.0
    else:
        if tau is None or not tau > 0:
            raise PreconditionError("inversion delay tau must be positive")
        pulses = [Pulse(0.0, tau_p, np.pi * unit), Pulse(tau + tau_p, tau_p, 0.5 * np.pi * unit)]
    if not horizon > pulses[-1].t1:
        raise PreconditionError("horizon must extend past the last pulse")
    if G is None:
        G = Waveform.zero((3,), horizon)
    for p in pulses:
        probe = np.concatenate([[p.t0], G.breaks[(G.breaks > p.t0) & (G.breaks < p.t1)]])
        if np.any(G(probe) != 0):
            raise PreconditionError(f"gradient must vanish on the pulse interval [{p.t0:g}, {p.t1:g}]")
    segments = []
    edges = [p for p in pulses]
    t = 0.0
    for i, p in enumerate(edges):
        segments.append(p)
        t_next = edges[i + 1].t0 if i + 1 < len(edges) else horizon
        segments.extend(_free_segments(G, p.t1, t_next))
        t = t_next
    return PulseSequence(kind, float(gamma), float(tau_p), float(tau), float(horizon),
                         complex(cplus0), G, segments)


def _free_segments(G: Waveform, a: float, b: float) -> list:
    cuts = np.concatenate([[a], G.breaks[(G.breaks > a) & (G.breaks < b)], [b]])
    out = []
    for t0, t1 in zip(cuts[:-1], cuts[1:]):
        if t1 - t0 <= 1e-15 * max(1.0, abs(t1)):
            continue
        out.append(Free(float(t0), float(t1 - t0), np.asarray(G(t0), dtype=float)))
    return out


def flip_angle(envelope: Waveform, cplus, gamma: float, t) -> np.ndarray:
    """phi(t) = gamma cplus int_0^t p."""
    return gamma * np.asarray(cplus) * envelope.integral(t)


def intervals(seq: PulseSequence, times) -> list:
    """Split ``[0, max(times)]`` at segment boundaries and sample times.

    Returns ``(a, b, segment)`` triples in order; every sample time is the
    right end of some interval or equals zero.
    """
    times = np.asarray(times, dtype=float)
    if times.size and (times.min() < 0 or times.max() > seq.horizon * (1 + 1e-12)):
        raise PreconditionError("sample times must lie in [0, horizon]")
    t_end = float(times.max()) if times.size else seq.horizon
    cuts = set([0.0])
    for s in seq.segments:
        if s.t0 < t_end:
            cuts.add(s.t0)
            cuts.add(min(s.t1, t_end))
    cuts.update(float(t) for t in times)
    cuts = np.array(sorted(cuts))
    out = []
    for a, b in zip(cuts[:-1], cuts[1:]):
        if b - a <= 0:
            continue
        seg = seq.segment_at(0.5 * (a + b))
        out.append((float(a), float(b), seg))
    return out


# ---------------------------------------------------------------------------
# Cartesian line readout


@dataclass
class Readout:
    G: Waveform
    clock: np.ndarray
    k: np.ndarray
    t_start: float
    t_end: float


def cartesian_readout(grid: Grid, gamma: float, t_start: float, prephase: float, duration: float,
                      oversample: int = 1, axis: int = 0) -> Readout:
    """Prephase to ``-N/(2L)`` then sweep the lattice line along ``axis``.

    Samples fall on ``-N/(2L) + i/(L*oversample)``, so every ``oversample``-th
    sample hits a dual-lattice frequency.
    """
    if prephase <= 0 or duration <= 0 or oversample < 1:
        raise PreconditionError("readout needs positive prephase, duration and oversampling")
    N, L = grid.shape[axis], grid.extent[axis]
    k0 = -(N // 2) / L
    e = np.zeros(3)
    e[axis] = 1.0
    g_pre = 2 * np.pi * k0 / (gamma * prephase)
    g_ro = 2 * np.pi * (N / L) / (gamma * duration)
    t_ro = t_start + prephase
    G = Waveform(np.array([t_start, t_ro, t_ro + duration]), np.array([g_pre * e, g_ro * e]))
    n = N * oversample
    clock = t_ro + np.arange(n) * duration / n
    return Readout(G, clock, k_trajectory(G, clock, gamma), t_ro, t_ro + duration)
