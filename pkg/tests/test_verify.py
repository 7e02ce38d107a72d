from __future__ import annotations

import math

import numpy as np
import pytest

from rbmlab.geometry import build_domain
from rbmlab.verify import (FitError, fit_exit_bound, fit_gaussian_bound, fit_kato_rate,
                           gaussian_bound, quarter_time, sobolev_scan, truncate_domain)


def free_kernel(t, r):
    return np.exp(-r * r / (2 * t)) / (2 * np.pi * t)


def test_gaussian_fit_recovers_free_kernel():
    rng = np.random.default_rng(0)
    t = rng.uniform(0.01, 0.2, 400)
    x = rng.uniform(0, 1, (400, 2))
    y = rng.uniform(0, 1, (400, 2))
    y[::4] = x[::4]                     # diagonal samples pin a to its infimum
    p = free_kernel(t, np.linalg.norm(x - y, axis=1))
    fit = fit_gaussian_bound(t, x, y, p)
    assert fit.ok and fit.max_violation < 1e-12
    # e^t t^-1 a exp(-r^2/(b t)) with a -> 1/(2 pi) and b -> 2
    assert fit.constants["a"] == pytest.approx(1 / (2 * np.pi), rel=0.02)
    assert fit.constants["b"] == pytest.approx(2.0, rel=0.02)
    assert np.all(p <= gaussian_bound(fit.constants["a"], fit.constants["b"], t,
                                      np.linalg.norm(x - y, axis=1)) * (1 + 1e-9))


def test_gaussian_fit_rejects_corrupt_samples():
    with pytest.raises(FitError, match="#1"):
        fit_gaussian_bound([0.1, 0.1], [[0, 0], [0, 0]], [[0, 0], [1, 0]], [1.0, -1.0])
    with pytest.raises(FitError):
        fit_gaussian_bound([0.1], [[0, 0]], [[0, 0]], [np.nan])


def test_exit_fit_recovers_constants():
    r = np.repeat([0.1, 0.2], 6)
    t = np.tile(np.geomspace(0.003, 0.05, 6), 2)
    p = 0.3 * np.exp(-1.7 * r * r / t)
    fit = fit_exit_bound(r, t, p, np.zeros_like(p), lo=1e-4)
    assert fit.constants["gamma"] == pytest.approx(1.7, rel=1e-6)
    assert fit.constants["c"] == pytest.approx(0.3, rel=1e-6)
    with pytest.raises(FitError):
        fit_exit_bound([0.1] * 3, [0.01] * 3, [0.1] * 3, [0.0] * 3)


def test_quarter_time_free_gaussian():
    # P(|B_t| >= r) = exp(-r^2 / (2t)) in the plane
    ratio = np.linspace(0.2, 0.5, 61)
    p = np.exp(-1 / (2 * ratio))
    fit = quarter_time(np.ones_like(ratio), ratio, p, np.zeros_like(p))
    assert fit.constants["delta"] == pytest.approx(1 / (2 * math.log(4)), rel=0.03)
    low = quarter_time([1.0], [0.9], [0.5], [0.0])
    assert not low.ok and low.diagnostics["flag"]


def test_kato_rate_fit():
    t = np.geomspace(1e-3, 1e-1, 9)
    fit = fit_kato_rate(t, 0.8 * t ** 0.5)
    assert fit.constants["alpha"] == pytest.approx(0.5)
    assert fit.constants["C"] == pytest.approx(0.8)
    assert fit.diagnostics["monotone"]
    with pytest.raises(FitError):
        fit_kato_rate(t[:4], t[:4])
    with pytest.raises(FitError):
        fit_kato_rate(np.linspace(0.01, 0.1, 6), np.ones(6))
    bad = fit_kato_rate(t, np.r_[t[:-1] ** 0.5, 0.01])
    assert not bad.ok and "error" in bad.diagnostics


def test_truncation_and_scan(square):
    horn = build_domain({"kind": "horn", "params": {"p": 1, "c": 1, "x_max": 16}})
    assert truncate_domain(horn, 4).params["x_max"] == 4
    assert truncate_domain(square, 0.5).area == pytest.approx(0.5)
    fit = sobolev_scan(horn, [2, 8], 4.0, 0.1, restarts=4, iters=600)
    assert fit.ok and fit.constants["S"][1] > fit.constants["S"][0]
    with pytest.raises(FitError):
        sobolev_scan(horn, [8, 2], 4.0, 0.1)
