"""Acceptance criteria at their stated tolerances; one verdict line per criterion.

Monte Carlo seeds are fixed constants chosen before the runs.
"""
from __future__ import annotations

import filecmp
import math
import time

import numpy as np
import pytest
import yaml

from conftest import rect_kernel, record
from rbmlab.cli import main as cli_main
from rbmlab.discretize import assemble_neumann, assemble_part
from rbmlab.exhaust import build_ladder, certified_kernel, limit_kernel
from rbmlab.geometry import TruncationScheme, build_domain, build_grid
from rbmlab.simulate import (HalfPlane, Registrations, displacement_tail, kato_modulus,
                             mc_exit_tail, mc_exit_time, mc_local_time, region_exit_tail,
                             sample_paths)
from rbmlab.spectral import eigensolve, heat_kernel, kernel_matrix, survival
from rbmlab.verify import fit_exit_bound, fit_kato_rate, quarter_time, sobolev_scan

THREADS = 4


def test_c01_rectangle_oracle(square):
    t0 = time.perf_counter()
    g = build_grid(square, 1 / 64)
    sd = eigensolve(assemble_neumann(g), K=600)
    rng = np.random.default_rng(101)
    worst = 0.0
    for _ in range(50):
        t = float(rng.uniform(0.05, 1.0))
        i, j = rng.integers(g.n_cells, size=2)
        val = heat_kernel(sd, t, i, j).scalar()
        ref = float(rect_kernel(t, g.centers[i], g.centers[j]))
        worst = max(worst, abs(val - ref) / ref)
    elapsed = time.perf_counter() - t0
    ok = worst <= 0.02 and elapsed <= 120
    record(1, ok, f"max rel err {worst:.2e} (<= 2e-2), {elapsed:.0f}s (<= 120s), {sd.method}")
    assert ok


def test_c02_conservation_and_semigroup(square, lshape):
    ladder = (0.01, 0.02, 0.05, 0.1, 0.2)
    mass = ck = 0.0
    for d, K in ((square, None), (lshape, None), (square, 300)):
        g = build_grid(d, 1 / 32)
        sd = eigensolve(assemble_neumann(g), K=K)
        if not sd.complete:
            # truncated series: mass is carried by the constant mode alone
            ladder_k = tuple(t for t in ladder if t >= sd.t_min)
        else:
            ladder_k = ladder
        P = {t: kernel_matrix(sd, t) for t in ladder_k}
        for t in ladder_k:
            mass = max(mass, float(np.abs(P[t] @ sd.M - 1.0).max()))
        for s, t in zip(ladder_k, ladder_k[1:]):
            lhs = kernel_matrix(sd, s + t)
            ck = max(ck, float(np.abs((P[s] * sd.M[None, :]) @ P[t] - lhs).max()))
    ok = mass <= 1e-8 and ck <= 1e-10
    record(2, ok, f"mass err {mass:.1e} (<= 1e-8), Chapman-Kolmogorov {ck:.1e} (<= 1e-10)")
    assert ok


def test_c03_positivity_and_refinement(lshape):
    sds = []
    for h in (1 / 32, 1 / 64):
        g = build_grid(lshape, h)
        sds.append((g, eigensolve(assemble_neumann(g))))
    pos_times = (0.05, 0.1, 0.2, 0.5, 1.0)
    min_val = min(float(kernel_matrix(sd, t).min()) for _, sd in sds for t in pos_times)
    rng = np.random.default_rng(303)
    pts = []
    while len(pts) < 40:
        p = rng.uniform(0, 1, 2)
        if lshape.contains(p) and lshape.distance_to_boundary(p[None])[0] > 0.03:
            pts.append(p)
    pts = np.array(pts)
    worst = 0.0
    for t in (0.1, 0.2, 0.5, 1.0):
        vals = []
        for g, sd in sds:
            c, w = g.interpolation(pts)
            P = kernel_matrix(sd, t, c.ravel(), c.ravel()).reshape(40, 4, 40, 4)
            vals.append(np.einsum("ia,iajb,jb->ij", w, P, w))
        worst = max(worst, float(np.max(np.abs(vals[0] - vals[1]) / vals[1])))
    ok = min_val > 0 and worst <= 0.03
    record(3, ok, f"min kernel {min_val:.2e} (> 0, t >= 0.05), max change under h/2 "
                  f"{worst:.2%} (<= 3%, t >= 0.1)")
    assert ok


def test_c04_exhaustion_certificate():
    t0 = time.perf_counter()
    horn = build_domain({"kind": "horn", "params": {"p": 1, "c": 1, "x_max": 33}})
    g = build_grid(horn, 0.02)
    lad = build_ladder(g, TruncationScheme("cut", (4, 8, 16, 32)), 3.0, 0.2, t_target=0.1)
    rng = np.random.default_rng(404)
    win = lad.window_cells()
    mono = cert = reached = 0
    n = 400
    for _ in range(n):
        t = float(np.exp(rng.uniform(np.log(0.1), np.log(0.5))))
        x, y = rng.choice(win, 2)
        cks = [certified_kernel(lad, k, t, x, y) for k in range(1, lad.n_levels + 1)]
        m_ok = c_ok = True
        for a, b in zip(cks, cks[1:]):
            inc, slack = b.value - a.value, a.error + b.error
            m_ok &= inc >= -slack
            c_ok &= inc <= a.certificate + slack
        mono += m_ok
        cert += c_ok
        lk = limit_kernel(lad, t, x, y, 1e-3)
        reached += not lk.flag
    elapsed = time.perf_counter() - t0
    ok = mono == n and cert == n and reached == n and elapsed <= 600
    record(4, ok, f"monotone {mono}/{n}, certified {cert}/{n}, limit reached {reached}/{n}, "
                  f"{elapsed:.0f}s (<= 600s)")
    assert ok


def test_c05_exit_tails(square):
    t0 = time.perf_counter()
    N, delta = 100_000, 1e-4
    # majorant fit of ball exit tails, interior and boundary-touching starts
    times = np.geomspace(1e-3, 5e-2, 10)
    rr, tt, pp, ss = [], [], [], []
    for k, (x, r) in enumerate((((0.5, 0.5), 0.1), ((0.5, 0.5), 0.2), ((0.1, 0.5), 0.2))):
        tl = mc_exit_tail(square, x, r, times, delta, N, seed=5000 + k, threads=THREADS)
        rr += [r] * len(times)
        tt += list(times)
        pp += list(tl.p_hat)
        ss += list(tl.stderr)
    fit = fit_exit_bound(rr, tt, pp, ss)
    gamma = fit.constants["gamma"]

    # numerical independence of the killed process: MC half-plane exit vs 1 - survival
    g = build_grid(square, 1 / 64)
    cut = 32.5 / 64
    op = assemble_part(g, g.cut_mask(cut))
    sd = eigensolve(op)
    ts = np.array([0.01, 0.02, 0.04, 0.07, 0.1, 0.15])
    starts = np.array([[0.1, 0.5], [0.3, 0.5], [0.45, 0.1], [0.45, 0.5], [0.25, 0.9], [0.4, 0.3]])
    worst_z = 0.0
    for k, p in enumerate(starts):
        i = op.local_index(g.locate(p[None]))[0]
        x = tuple(g.centers[op.cells[i]])
        spec = np.array([1.0 - float(survival(sd, t, i)) for t in ts])
        tl = region_exit_tail(square, x, HalfPlane(cut), ts, delta, N, seed=5100 + k,
                              threads=THREADS, bridge=True)
        se = np.maximum(tl.stderr, np.sqrt(spec * (1 - spec) / N))
        z = np.abs(tl.p_hat - spec) / np.where(se > 0, se, np.inf)
        worst_z = max(worst_z, float(z.max()))
    elapsed = time.perf_counter() - t0
    ok = fit.ok and gamma > 0 and worst_z <= 3.0 and elapsed <= 600
    record(5, ok, f"gamma {gamma:.3f} (> 0), majorant ok {fit.ok}, max |z| {worst_z:.2f} "
                  f"(<= 3) over 6x6, {elapsed:.0f}s (<= 600s)")
    assert ok


def test_c06_quarter_threshold(square):
    N = 100_000
    oracle = 1.0 / (2.0 * math.log(4.0))
    # near-free regime: interior start, small radius
    r = 0.05
    ratios = np.linspace(0.25, 0.45, 41)
    cks = tuple(ratios * r * r)
    ens = sample_paths(square, (0.5, 0.5), cks[-1], 1e-3 * r * r, N, 6000,
                       Registrations(checkpoints=cks), threads=THREADS)
    p, se = displacement_tail(ens, [r])
    free = quarter_time(np.full(len(cks), r), np.array(cks), p[:, 0], se[:, 0])
    est = free.constants["delta"]
    # general starts including boundary points
    rs, ts, ps, ses = [], [], [], []
    r = 0.1
    cks = tuple(np.geomspace(0.01, 1.0, 25) * r * r)
    for k, x in enumerate(((0.5, 0.5), (0.05, 0.5), (0.02, 0.02))):
        ens = sample_paths(square, x, cks[-1], 1e-3 * r * r, N // 4, 6100 + k,
                           Registrations(checkpoints=cks), threads=THREADS)
        p, se = displacement_tail(ens, [r])
        rs += [r] * len(cks)
        ts += list(cks)
        ps += list(p[:, 0])
        ses += list(se[:, 0])
    gen = quarter_time(rs, ts, ps, ses)
    rel = abs(est - oracle) / oracle
    ok = gen.constants["delta"] > 0 and rel <= 0.15
    record(6, ok, f"delta_R {gen.constants['delta']:.3f} (> 0), near-free {est:.4f} vs "
                  f"{oracle:.4f} ({rel:.1%} <= 15%)")
    assert ok


def test_c07_ball_exit_time(square):
    N = 40_000
    lines, ok = [], True
    for k, r in enumerate((0.05, 0.1)):
        delta = 4e-4 * r * r
        a = mc_exit_time(square, (0.5, 0.5), r, delta, N, 7000 + k, threads=THREADS)
        b = mc_exit_time(square, (0.5, 0.5), r, delta / 2, N, 7100 + k, threads=THREADS)
        ref = r * r / 2
        err = abs(b.mean - ref) / ref
        shift = abs(a.mean - b.mean) / b.mean
        ok &= err <= 0.05 and shift < 0.02
        lines.append(f"r={r}: {err:.2%} off r^2/2, halving shift {shift:.2%}")
    record(7, ok, "; ".join(lines) + " (<= 5%, < 2%)")
    assert ok


def test_c08_local_time():
    t0 = time.perf_counter()
    big = build_domain({"kind": "rectangle", "params": {"width": 4, "height": 4}})
    Ts = (0.05, 0.1)
    st = mc_local_time(big, (2.0, 0.0), Ts, (0.02, 0.01), 1e-5, 100_000, seed=8000,
                       threads=THREADS)
    oracle = 2.0 * np.sqrt(2.0 * np.asarray(Ts) / np.pi)
    rel = np.abs(st.mean[1] - oracle) / oracle
    gap = np.abs(st.mean[0] - st.mean[1])
    comb = np.sqrt(st.stderr[0] ** 2 + st.stderr[1] ** 2)
    elapsed = time.perf_counter() - t0
    oracle_ok = bool(np.all(rel <= 0.05))
    consistent = bool(np.all(gap <= 2 * comb))
    ok = oracle_ok and consistent and elapsed <= 600
    record(8, ok, f"eps=0.01 vs oracle {np.round(rel * 100, 2).tolist()}% (<= 5%): {oracle_ok}; "
                  f"eps pair gap {np.round(gap / comb, 1).tolist()} SE (<= 2): {consistent}; "
                  f"{elapsed:.0f}s")
    assert ok


def test_c09_local_kato(square):
    g = build_grid(square, 1 / 64)
    sd = eigensolve(assemble_neumann(g))
    ts = np.geomspace(1e-3, 1e-1, 11)
    kc = kato_modulus(sd, g, g.all_mask(), ts)
    fit = fit_kato_rate(ts, kc.modulus)
    alpha = fit.constants["alpha"]
    ok = fit.diagnostics["monotone"] and fit.diagnostics["decays"] and 0.4 <= alpha <= 0.6
    record(9, ok, f"alpha {alpha:.3f} in [0.4, 0.6], monotone {fit.diagnostics['monotone']}, "
                  f"decays {fit.diagnostics['decays']}")
    assert ok


def test_c10_sobolev_failure_on_horns(square):
    horn = build_domain({"kind": "horn", "params": {"p": 1, "c": 1, "x_max": 64}})
    parts, ok = [], True
    for h in (0.05, 0.025):
        fit = sobolev_scan(horn, [4, 16, 64], 4.0, h)
        ok &= fit.diagnostics["strictly_increasing"]
        parts.append(f"h={h}: " + ", ".join(f"{s:.3f}" for s in fit.constants["S"]))
    ctrl = [sobolev_scan(square, [1.0], 4.0, h).constants["S"][0] for h in (0.05, 0.025)]
    spread = max(ctrl) / min(ctrl) - 1.0
    ok &= spread <= 0.05
    record(10, ok, "horn S " + "; ".join(parts) + f"; square spread {spread:.2%} (<= 5%)")
    assert ok


def test_c11_thread_determinism(tmp_path):
    cfg = {
        "domain": "square",
        "mc": {"seed": 1111, "paths": 20_000, "delta": 2e-5, "x0": [0.5, 0.5],
               "radii": [0.1, 0.2],
               "exit_times": np.geomspace(1e-3, 5e-2, 10).round(6).tolist(),
               "eps_list": [0.02, 0.01], "checkpoint_times": [0.02, 0.05],
               "quarter_ratios": [0.2, 0.3, 0.35, 0.4, 0.5]},
        "grid": {"h": 0.0625},
    }
    path = tmp_path / "mc.yaml"
    path.write_text(yaml.safe_dump(cfg))
    cmds = ["simulate", "local-time", "verify-exit", "verify-quarter"]
    codes = [cli_main(["--config", str(path), "--out", str(tmp_path / f"t{n}"), "--threads", str(n)]
                      + cmds) for n in (1, 4)]
    same, total = 0, 0
    for c in cmds:
        names = sorted(p.name for p in (tmp_path / "t1" / c).iterdir())
        match, mismatch, errors = filecmp.cmpfiles(tmp_path / "t1" / c, tmp_path / "t4" / c,
                                                   names, shallow=False)
        same += len(match)
        total += len(names)
    ok = same == total and codes == [0, 0]
    record(11, ok, f"{same}/{total} files byte-identical across --threads 1 and 4")
    assert ok
