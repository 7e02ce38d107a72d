from __future__ import annotations

import numpy as np
import pytest

from rbmlab.discretize import assemble_neumann
from rbmlab.geometry import build_domain, build_grid
from rbmlab.simulate import (Ball, HalfPlane, Registrations, SimulationError, displacement_tail,
                             kato_modulus, mc_exit_tail, mc_exit_time, mc_kernel, mc_local_time,
                             occupation_integral, sample_paths)
from rbmlab.spectral import eigensolve


def test_paths_stay_in_domain_and_are_reproducible(lshape):
    regs = Registrations(checkpoints=(0.02, 0.05))
    a = sample_paths(lshape, (0.25, 0.25), 0.05, 1e-3, 5000, seed=3, registrations=regs)
    b = sample_paths(lshape, (0.25, 0.25), 0.05, 1e-3, 5000, seed=3, registrations=regs, threads=3)
    np.testing.assert_array_equal(a.positions, b.positions)
    assert lshape.contains_closed(a.positions.reshape(-1, 2), tol=1e-9).all()
    c = sample_paths(lshape, (0.25, 0.25), 0.05, 1e-3, 5000, seed=4, registrations=regs)
    assert not np.array_equal(a.positions, c.positions)


def test_free_increments_have_gaussian_variance():
    big = build_domain({"kind": "rectangle", "params": {"width": 10, "height": 10}})
    ens = sample_paths(big, (5, 5), 0.1, 1e-2, 20000, seed=0, registrations=Registrations(checkpoints=(0.1,)))
    disp = ens.positions[:, -1] - 5.0
    # generator (1/2) Laplacian: each coordinate has variance t
    np.testing.assert_allclose(disp.var(axis=0), 0.1, rtol=0.04)
    p, _ = displacement_tail(ens, [0.5])
    assert p[0, 0] == pytest.approx(np.exp(-0.5 ** 2 / 0.2), abs=0.01)


def test_exit_tail_is_monotone(square):
    tl = mc_exit_tail(square, (0.5, 0.5), 0.1, [0.002, 0.005, 0.01], 1e-5, 4000, seed=1)
    assert np.all(np.diff(tl.p_hat) >= 0) and tl.p_hat[-1] > 0.5
    with pytest.raises(SimulationError):
        mc_exit_tail(square, (0.5, 0.5), 0.0, [0.01], 1e-5, 10, seed=1)


def test_half_plane_gap():
    hp = HalfPlane(0.5)
    np.testing.assert_allclose(hp.gap(np.array([[0.2, 0.0], [0.7, 1.0]])), [0.3, -0.2])
    b = Ball((0, 0), 1.0)
    np.testing.assert_allclose(b.gap(np.array([[0.5, 0.0]])), [0.5])


def test_ball_exit_time_is_close_to_r2_over_2(square):
    et = mc_exit_time(square, (0.5, 0.5), 0.1, 4e-6, 4000, seed=2)
    assert et.n_exited == et.N
    assert et.mean == pytest.approx(0.005, rel=0.06)


def test_local_time_warns_when_strip_is_unresolved(square):
    with pytest.warns(UserWarning):
        mc_local_time(square, (0.5, 0.0), 0.01, 0.01, 1e-4, 200, seed=0)


def test_kernel_histogram_integrates_to_one(square):
    g = build_grid(square, 0.125)
    kh = mc_kernel(square, (0.5, 0.5), 0.05, g, 1e-3, 4000, seed=0)
    assert np.sum(kh.density * g.measure) == pytest.approx(1.0)


def test_kato_closed_form_matches_quadrature(square):
    g = build_grid(square, 1 / 16)
    sd = eigensolve(assemble_neumann(g))
    ts = np.array([0.005, 0.02, 0.1])
    kc = kato_modulus(sd, g, g.all_mask(), ts)
    assert np.all(np.diff(kc.modulus) > 0)
    rows = sd.op.local_index(kc.argmax[:1])
    ke = kato_modulus(sd, g, g.all_mask(), ts, rows=rows)
    kq = kato_modulus(sd, g, g.all_mask(), ts, method="quadrature", rows=rows)
    np.testing.assert_allclose(kq.modulus, ke.modulus, rtol=1e-6)
    # t -> infinity: occupation grows like |boundary| t / |D|
    b = np.bincount(g.bface_cell, weights=g.bface_length, minlength=g.n_cells)
    occ = occupation_integral(sd, 50.0, b)
    np.testing.assert_allclose(occ, 4 * 50.0, rtol=0.01)
