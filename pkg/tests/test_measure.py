import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from blochtorrey.core import Grid, PreconditionError, Trajectory
from blochtorrey.measure import CoilSet, Measurement, add_noise, data_norm, demodulate, observe

g = Grid((6,), (1.0,))


def _traj(nt=5, seed=0):
    rng = np.random.default_rng(seed)
    t = np.linspace(0, 1, nt)
    Mp = rng.standard_normal((nt, 6)) + 1j * rng.standard_normal((nt, 6))
    return Trajectory(g, t, Mp, np.zeros((nt, 6)))


def test_coil_shapes():
    assert CoilSet(g, 2.0).c.shape == (1, 6)
    assert CoilSet.constant(g, (1.0, 2j)).ncoils == 2
    assert CoilSet.constant(g).is_constant()
    with pytest.raises(PreconditionError):
        CoilSet(g, np.ones((2, 5)))


def test_observe_is_weighted_sum():
    tr = _traj()
    c = CoilSet(g, np.stack([np.ones(6), np.arange(6.0)]))
    m = observe(tr, c)
    assert m.y.shape == (2, 5)
    assert np.allclose(m.y[1], tr.Mperp @ np.arange(6.0) * g.cell_volume)


def test_observe_interpolates_and_checks_clock():
    tr = _traj()
    c = CoilSet.constant(g)
    m = observe(tr, c, clock=[0.125])
    full = observe(tr, c)
    assert np.allclose(m.y[0, 0], 0.5 * (full.y[0, 0] + full.y[0, 1]))
    with pytest.raises(PreconditionError):
        observe(tr, c, clock=[1.5])


@settings(max_examples=30, deadline=None)
@given(st.complex_numbers(max_magnitude=5, allow_nan=False, allow_infinity=False), st.floats(-1, 1))
def test_demodulation_inverts_known_decay(R2, t0):
    t = np.linspace(0, 1, 7)
    y = -1j * np.exp(-R2 * (t - t0))
    d = demodulate(Measurement(t, y), R2, t0)
    assert np.allclose(d.y, 1.0)
    assert np.allclose(demodulate(Measurement(t, y), R2, t0, -1).y, -1.0)


def test_demodulate_sign_check():
    with pytest.raises(PreconditionError):
        demodulate(Measurement([0.0], [1.0]), 1.0, 0.0, sign=2)


def test_noise_is_seeded():
    m = observe(_traj(200), CoilSet.constant(g))
    a, b = add_noise(m, 0.1, 3), add_noise(m, 0.1, 3)
    assert np.array_equal(a.y, b.y)
    assert not np.array_equal(a.y, add_noise(m, 0.1, 4).y)
    n = (add_noise(m, 0.5, 0).y - m.y).ravel()
    assert abs(np.mean(np.abs(n) ** 2) - 0.25) < 0.1
    with pytest.raises(PreconditionError):
        add_noise(m, -1.0, 0)


def test_measurement_file_round_trip(tmp_path):
    m = observe(_traj(), CoilSet.constant(g, (1.0, 0.5j)))
    m.info["note"] = "x"
    m.write(tmp_path / "m.csv")
    back = Measurement.read(tmp_path / "m.csv")
    assert np.array_equal(back.y, m.y) and np.array_equal(back.t, m.t)
    assert back.info["note"] == "x"


def test_data_norm():
    assert np.isclose(data_norm(np.ones((2, 8)), Grid((4,), (4.0,))), 2.0)
