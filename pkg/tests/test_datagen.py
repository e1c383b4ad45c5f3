import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sparsebif import datagen
from sparsebif.analysis import amplitude, steady_state_time
from sparsebif.errors import InvalidInput
from sparsebif.numkit import Rng, TimeGrid, central_diff

PF = datagen.FomSystem("pitchfork", mu_star=0.96)
HOPF = datagen.FomSystem("hopf", mu_star=1.0, omega=1.0)


def test_system_validation():
    with pytest.raises(InvalidInput):
        datagen.FomSystem("saddle")
    with pytest.raises(InvalidInput):
        datagen.FomSystem("pitchfork", transverse_rate=0.0)
    with pytest.raises(InvalidInput):
        datagen.FomSystem("hopf", omega=0.0)
    assert datagen.FomSystem.from_dict(HOPF.to_dict()) == HOPF


def test_pitchfork_rhs_examples():
    y = np.zeros(PF.dim)
    assert datagen.latent_rhs(PF, 0.0, y, 0.5)[0] == 0.0
    y[0] = 1.0
    assert datagen.latent_rhs(PF, 0.0, y, PF.mu_star - 1.0)[0] == 0.0
    y[1:] = 1.0
    assert np.allclose(datagen.latent_rhs(PF, 0.0, y, 0.5)[1:], -10.0)


def test_hopf_rhs_on_cycle():
    r = 0.5
    for th in np.linspace(0, 2 * np.pi, 7):
        y = np.zeros(HOPF.dim)
        y[:2] = r * np.cos(th), r * np.sin(th)
        f = datagen.latent_rhs(HOPF, 0.0, y, HOPF.mu_star + 0.25)
        assert abs(y[0] * f[0] + y[1] * f[1]) < 1e-15


def test_rhs_rejects_bad_input():
    with pytest.raises(InvalidInput):
        datagen.latent_rhs(PF, 0.0, np.zeros(2), 0.5)
    with pytest.raises(InvalidInput):
        datagen.latent_rhs(PF, 0.0, np.full(PF.dim, np.nan), 0.5)


def test_pitchfork_simulations():
    g = TimeGrid(0.0, 0.05, 8001)
    y0 = np.zeros(PF.dim)
    y0[0] = 0.01
    tr, _ = datagen.simulate_fom(PF, 1.2, g, y0)
    assert abs(tr[-1, 0]) < 1e-6
    tr, _ = datagen.simulate_fom(PF, PF.mu_star - 0.64, g, y0)
    assert abs(tr[-1, 0] - 0.8) < 1e-6


def test_hopf_amplitude():
    g = TimeGrid(0.0, 0.05, 6001)
    y0 = np.zeros(HOPF.dim)
    y0[0] = 0.01
    tr, _ = datagen.simulate_fom(HOPF, HOPF.mu_star + 0.25, g, y0)
    assert abs(amplitude(tr[-1000:, 0]) - 1.0) < 0.02


def test_branch_values_on_grid():
    g = TimeGrid(0.0, 0.1, 4001)
    y0 = np.zeros(PF.dim)
    y0[0] = -0.01
    for mu in np.linspace(0.75, 0.93, 6):
        tr, _ = datagen.simulate_fom(PF, mu, g, y0, stop_tol=1e-10)
        assert abs(abs(tr[-1, 0]) - np.sqrt(PF.mu_star - mu)) < 1e-5


def test_stop_rule_fires_on_bifurcated_branch():
    # 20 decay time constants of the slowest branch on the grid
    mus = np.linspace(0.75, 0.90, 5)
    t_end = 20.0 / (2 * (PF.mu_star - mus.max()))
    g = TimeGrid(0.0, 0.1, int(t_end / 0.1) + 1)
    y0 = np.zeros(PF.dim)
    y0[0] = 0.01
    for mu in mus:
        tr, stop = datagen.simulate_fom(PF, mu, g, y0, stop_tol=1e-7)
        assert stop is not None and stop < g.count - 1
        assert tr.shape[0] == stop + 1
        # the recorded stop is where the relative criterion first holds
        assert steady_state_time(tr, 1e-7) == stop - 1


def test_stop_index_none_when_never_met():
    g = TimeGrid(0.0, 0.1, 200)
    y0 = np.zeros(HOPF.dim)
    y0[0] = 0.5
    _, stop = datagen.simulate_fom(HOPF, HOPF.mu_star + 0.25, g, y0, stop_tol=1e-7)
    assert stop is None


def test_lift_identity_and_isometry():
    y = Rng(0).normal((5, 3))
    lm = datagen.LiftMap(np.eye(3))
    assert np.array_equal(datagen.lift(y, lm), y)
    lm = datagen.make_lift(50, 3, Rng(1))
    x = datagen.lift(y, lm)
    assert np.allclose(np.linalg.norm(x, axis=1), np.linalg.norm(y, axis=1))
    assert np.allclose(datagen.unlift(x, lm), y)


def test_lift_quadratic_by_hand():
    lm = datagen.make_lift(20, 2, Rng(2), nonlinear_gain=0.1)
    y = np.array([[0.3, -2.0]])
    expect = lm.q @ y[0] + 0.1 * lm.q2 @ (y[0] ** 2)
    assert np.allclose(datagen.lift(y, lm)[0], expect)
    with pytest.raises(InvalidInput):
        datagen.lift(np.zeros((2, 3)), lm)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_lift_rank_without_gain(seed):
    lm = datagen.make_lift(60, 4, Rng(seed))
    y = Rng(seed + 1).normal((40, 4))
    s = np.linalg.svd(datagen.lift(y, lm), compute_uv=False)
    assert s[4] < 1e-10 * s[0]


def test_pad_to_final():
    g = TimeGrid(0.0, 0.1, 5)
    tr = np.arange(6.0).reshape(3, 2)
    out = datagen.pad_to_final(tr, g, 5)
    assert np.array_equal(out[3], tr[2]) and np.array_equal(out[4], tr[2])
    assert np.array_equal(datagen.pad_to_final(out, g, 5), out)
    assert np.all(central_diff(out, 0.1)[3:] == 0.0)
    with pytest.raises(InvalidInput):
        datagen.pad_to_final(out, g, 4)


def _dataset(seed=4, params=(0.8, 0.9, 1.0, 1.05), count=400):
    lm = datagen.make_lift(30, PF.dim, Rng(99), nonlinear_gain=0.1)
    return datagen.generate_dataset(PF, list(params), TimeGrid(0.0, 0.1, count), lm, Rng(seed),
                                    stop_tol=1e-7)


def test_generate_dataset_paper_grid():
    params = np.linspace(0.75, 1.05, 20)
    lm = datagen.make_lift(40, PF.dim, Rng(0))
    ds = datagen.generate_dataset(PF, params, TimeGrid(0.0, 0.1, 50), lm, Rng(1))
    assert len(ds.trajectories) == 20 and ds.n_h == 40
    assert np.any(np.asarray(ds.params) < 0.96) and np.any(np.asarray(ds.params) > 0.96)
    assert set(ds.field_layout) == {"u1", "u2", "p"}


def test_generate_minimal_and_deterministic():
    lm = datagen.make_lift(10, PF.dim, Rng(0))
    ds = datagen.generate_dataset(PF, [0.5], TimeGrid(0.0, 0.1, 2), lm, Rng(1))
    assert ds.trajectories[0].shape == (2, 10)
    a, b = _dataset(), _dataset()
    assert a.digest() == b.digest()
    assert a.stop_indices == b.stop_indices


def test_branch_sign_is_seeded():
    signs = set()
    for seed in range(8):
        ds = _dataset(seed, params=(0.8,), count=600)
        lm = datagen.make_lift(30, PF.dim, Rng(99), nonlinear_gain=0.1)
        signs.add(np.sign(datagen.unlift(ds.trajectories[0][-1], lm)[0]))
        assert _dataset(seed, params=(0.8,), count=600).digest() == ds.digest()
    assert signs == {-1.0, 1.0}


def test_padding_recorded():
    ds = _dataset(count=3000)
    m = 0
    s = ds.stop_indices[m]
    assert s is not None
    assert ds.last_valid_index(m) == s
    assert np.all(ds.trajectories[m][s:] == ds.trajectories[m][s])


def test_snapshot_set_validation():
    ds = _dataset()
    with pytest.raises(InvalidInput):
        datagen.SnapshotSet(ds.params[::-1], ds.grid, ds.trajectories, ds.field_layout)
    with pytest.raises(InvalidInput):
        datagen.SnapshotSet(ds.params, ds.grid, ds.trajectories, {"a": (0, 10)})


def test_full_order_system_tracks_lift():
    lm = datagen.make_lift(40, HOPF.dim, Rng(3), nonlinear_gain=0.1, offset_norm=0.5)
    y0 = np.zeros(HOPF.dim)
    y0[:2] = 0.3, 0.0
    g = TimeGrid(0.0, 0.01, 501)
    tr, _ = datagen.simulate_fom(HOPF, 1.2, g, y0)
    xf = datagen.simulate_full_order(HOPF, lm, 1.2, g, datagen.lift(y0, lm)[0])
    assert np.max(np.abs(xf - datagen.lift(tr, lm))) < 1e-8
