"""Majorant fits of bound constants to computed kernels, tails and moduli.

Every fit returns a :class:`BoundFit` whose constants make the bound dominate
all input data; a regression, where used, only seeds the majorant.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .discretize import assemble_neumann, sobolev_constant
from .geometry import DomainSpec, build_grid


class FitError(ValueError):
    pass


@dataclass
class BoundFit:
    kind: str
    constants: dict
    window: dict = field(default_factory=dict)
    max_violation: float = 0.0
    frac_at_boundary: float = 0.0
    n_samples: int = 0
    ok: bool = True
    diagnostics: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return _jsonable(asdict(self))


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else str(v)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def _scan(data: np.ndarray, bound: np.ndarray, slack: float) -> tuple[float, float]:
    """Largest relative excess of data over the bound, and the tight fraction."""
    with np.errstate(divide="ignore", invalid="ignore"):
        rel = np.where(bound > 0, data / bound - 1.0, np.where(data > 0, np.inf, 0.0))
    return float(max(rel.max(), 0.0)), float(np.mean(rel >= -slack))


# ---------------------------------------------------------------------------
# Gaussian upper bound  p <= a e^t t^{-1} exp(-r^2 / (b t))


def gaussian_bound(a: float, b: float, t, r):
    t = np.asarray(t, dtype=float)
    r = np.asarray(r, dtype=float)
    return a * np.exp(t) / t * np.exp(-r * r / (b * t))


def fit_gaussian_bound(t, x, y, p, window: dict | None = None, rel_a: float = 1e-3,
                       slack: float = 0.05) -> BoundFit:
    """Smallest ``a``, then smallest ``b``, with ``p <= a e^t t^-1 exp(-|x-y|^2/(b t))``.

    ``a`` is held within ``rel_a`` of its infimum (attained as ``b -> inf``)
    and ``b`` is found by bisection; for fixed ``b`` the optimal ``a`` is a
    closed-form maximum over samples.
    """
    t = np.atleast_1d(np.asarray(t, dtype=float))
    p = np.atleast_1d(np.asarray(p, dtype=float))
    x = np.atleast_2d(np.asarray(x, dtype=float))
    y = np.atleast_2d(np.asarray(y, dtype=float))
    r2 = np.sum((x - y) ** 2, axis=1) * np.ones_like(t)
    if len(t) == 0:
        raise FitError("no samples")
    if np.any(~np.isfinite(p)) or np.any(p < 0) or np.any(t <= 0):
        k = int(np.argmax(~np.isfinite(p) | (p < 0) | (t <= 0)))
        raise FitError(f"infeasible: corrupt sample #{k} (t={t[k]}, p={p[k]})")
    q = p * t * np.exp(-t)
    pos = q > 0
    if not pos.any():
        raise FitError("all kernel samples are zero")
    a_inf = float(q.max())
    z = r2[pos] / t[pos]
    lq = np.log(q[pos])

    def a_of(b):
        with np.errstate(over="ignore"):
            return float(np.exp(np.max(lq + z / b)))

    target = a_inf * (1.0 + rel_a)
    if not (z > 0).any():
        # every sample on the diagonal: b is unconstrained
        b, a = 0.0, a_inf
        bound = a * np.exp(t) / t
    else:
        lo, hi = -12.0, 12.0
        while a_of(10.0 ** hi) > target:
            hi += 6.0
            if hi > 300:
                raise FitError("no finite b satisfies the bound")
        if a_of(10.0 ** lo) <= target:
            hi = lo
        for _ in range(200):
            if hi - lo < 1e-12:
                break
            mid = 0.5 * (lo + hi)
            if a_of(10.0 ** mid) <= target:
                hi = mid
            else:
                lo = mid
        b = 10.0 ** hi
        a = a_of(b)
        bound = gaussian_bound(a, b, t, np.sqrt(r2))
    viol, frac = _scan(p, bound, 1e-6)
    return BoundFit(kind="gaussian", constants={"a": a, "b": b}, window=dict(window or {}),
                    max_violation=viol, frac_at_boundary=frac, n_samples=len(t),
                    ok=bool(viol <= slack), diagnostics={"a_inf": a_inf, "rel_a": rel_a})


# ---------------------------------------------------------------------------
# exit tails  P(tau <= t) <= c exp(-gamma r^2 / t)


def fit_exit_bound(r, t, p_hat, stderr, window: dict | None = None, lo: float = 1e-3,
                   hi: float = 0.5, slack: float = 0.05) -> BoundFit:
    r = np.asarray(r, dtype=float) * np.ones(np.shape(t))
    t = np.asarray(t, dtype=float)
    p_hat = np.asarray(p_hat, dtype=float)
    stderr = np.asarray(stderr, dtype=float) * np.ones_like(p_hat)
    z = r * r / t
    use = (p_hat >= lo) & (p_hat <= hi)
    if use.sum() < 4:
        raise FitError(f"only {int(use.sum())} usable tail points (need 4 with p in [{lo}, {hi}])")
    zu = z[use]
    if np.ptp(zu) <= 1e-12 * max(1.0, abs(zu).max()):
        raise FitError("insufficient spread in r^2/t for the regression")
    slope, icpt = np.polyfit(zu, np.log(p_hat[use]), 1)
    gamma = -float(slope)
    c_reg = float(math.exp(icpt))
    need = (p_hat + 2.0 * stderr) * np.exp(gamma * z)
    c = max(c_reg, float(need.max()))
    bound = c * np.exp(-gamma * z)
    viol, frac = _scan(p_hat + 2.0 * stderr, bound, 1e-6)
    return BoundFit(kind="exit", constants={"c": c, "gamma": gamma}, window=dict(window or {}),
                    max_violation=viol, frac_at_boundary=frac, n_samples=len(t),
                    ok=bool(gamma > 0 and viol <= slack),
                    diagnostics={"c_regression": c_reg, "n_regression": int(use.sum())})


# ---------------------------------------------------------------------------
# quarter threshold


def quarter_time(r, t, p_hat, stderr, candidates: Sequence[float] | None = None,
                 window: dict | None = None, level: float = 0.25) -> BoundFit:
    """Largest candidate ``delta`` with ``p_hat + 2 se <= 1/4`` whenever ``t <= delta r^2``.

    A candidate passes only if at least one sample falls under it.
    """
    r = np.asarray(r, dtype=float) * np.ones(np.shape(t))
    t = np.asarray(t, dtype=float)
    upper = np.asarray(p_hat, dtype=float) + 2.0 * np.asarray(stderr, dtype=float)
    cand = np.geomspace(1e-3, 1.0, 301) if candidates is None else np.sort(np.asarray(candidates))
    ratio = t / (r * r)
    best = 0.0
    for dl in cand:
        cov = ratio <= dl * (1.0 + 1e-12)
        if cov.any() and np.all(upper[cov] <= level):
            best = float(dl)
    flag = "" if best > 0 else "below candidate grid floor"
    bad = ratio[upper > level]
    return BoundFit(kind="quarter", constants={"delta": best}, window=dict(window or {}),
                    n_samples=len(t), ok=best > 0,
                    diagnostics={"flag": flag, "grid_floor": float(cand[0]),
                                 "smallest_failing_ratio": float(bad.min()) if len(bad) else None})


# ---------------------------------------------------------------------------
# Kato modulus rate


def fit_kato_rate(t, modulus, slack: float = 0.05) -> BoundFit:
    t = np.asarray(t, dtype=float)
    m = np.asarray(modulus, dtype=float)
    if len(t) < 5:
        raise FitError("need at least 5 points")
    if np.log10(t.max() / t.min()) < 2.0 - 1e-9:
        raise FitError("time points must span at least two decades")
    order = np.argsort(t)
    t, m = t[order], m[order]
    monotone = bool(np.all(np.diff(m) >= -1e-12 * np.abs(m[1:])))
    to_zero = bool(m[0] <= m[-1] and m[0] < 0.5 * m[-1]) if m[-1] > 0 else True
    if np.any(m <= 0):
        raise FitError("modulus must be positive for a log-log fit")
    alpha, lc = np.polyfit(np.log(t), np.log(m), 1)
    C_reg = float(math.exp(lc))
    C = max(C_reg, float(np.max(m / t ** alpha)))
    viol, frac = _scan(m, C * t ** alpha, 1e-6)
    diag = {"monotone": monotone, "decays": to_zero, "C_regression": C_reg}
    if not monotone:
        diag["error"] = "modulus is not monotone in t"
    return BoundFit(kind="kato", constants={"C": C, "alpha": float(alpha)},
                    window={"t_min": float(t[0]), "t_max": float(t[-1])},
                    max_violation=viol, frac_at_boundary=frac, n_samples=len(t),
                    ok=bool(monotone and to_zero and viol <= slack), diagnostics=diag)


# ---------------------------------------------------------------------------
# Sobolev scan


def truncate_domain(d: DomainSpec, x_cut: float) -> DomainSpec:
    """Part of the domain with ``x < x_cut`` (horns and rectangles)."""
    if d.kind == "horn":
        return d.with_x_max(x_cut)
    x0, _, x1, _ = d.bbox
    if x_cut >= x1:
        return d
    if d.kind == "rectangle":
        params = dict(d.params, width=x_cut - x0)
        return DomainSpec("rectangle", params, name=f"{d.name}[x<{x_cut:g}]")
    raise FitError("polygon truncation is not supported")


def sobolev_scan(d: DomainSpec, truncations: Sequence[float], p: float, h: float,
                 seed: int = 0, restarts: int = 20, iters: int = 2000) -> BoundFit:
    """Sobolev-constant estimates on increasing truncations of ``d``."""
    xs = [float(v) for v in truncations]
    if any(b <= a for a, b in zip(xs, xs[1:])):
        raise FitError("truncations must increase")
    S, conv, cells = [], [], []
    for X in xs:
        g = build_grid(truncate_domain(d, X), h)
        est = sobolev_constant(assemble_neumann(g), p, iters=iters, seed=seed, restarts=restarts)
        S.append(est.S)
        conv.append(est.converged)
        cells.append(g.n_cells)
    S = np.asarray(S)
    increasing = bool(np.all(np.diff(S) > 0))
    spread = float(S.max() / S.min() - 1.0)
    return BoundFit(kind="sobolev", constants={"S": S.tolist(), "p": float(p)},
                    window={"truncations": xs, "h": float(h)}, n_samples=len(xs),
                    ok=increasing,
                    diagnostics={"strictly_increasing": increasing,
                                 "growth_ratio": float(S[-1] / S[0]), "relative_spread": spread,
                                 "converged": conv, "cells": cells})
