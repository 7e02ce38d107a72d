"""Monte Carlo reflecting Brownian motion and the spectral Kato modulus.

Paths follow an Euler scheme for the generator ``Delta/2`` (Gaussian
increments with per-coordinate variance ``delta``) and are folded back into
the domain by :func:`geometry.reflect_step`.  Paths are processed in blocks
of fixed size; block ``b`` draws from its own stream
``SeedSequence(seed, spawn_key=(b,))``, so results do not depend on how many
worker threads share the blocks.
"""
from __future__ import annotations

import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate

from .geometry import DomainSpec, Grid, SubdomainMask, reflect_step
from .spectral import SpectralDecomposition, kernel_matrix

BLOCK_SIZE = 4096


class SimulationError(ValueError):
    pass


# ---------------------------------------------------------------------------
# absorbing regions


@dataclass(frozen=True)
class Ball:
    """Region ``B(center, radius)`` intersected with the closed domain."""

    center: tuple[float, float]
    radius: float

    def gap(self, pts: np.ndarray) -> np.ndarray:
        """Distance to the absorbing sphere, negative outside."""
        c = np.asarray(self.center)
        return self.radius - np.sqrt((pts[:, 0] - c[0]) ** 2 + (pts[:, 1] - c[1]) ** 2)

    @property
    def label(self) -> str:
        return f"ball(x={self.center[0]:g},{self.center[1]:g};r={self.radius:g})"


@dataclass(frozen=True)
class HalfPlane:
    """Region ``{x[axis] < bound}`` intersected with the closed domain."""

    bound: float
    axis: int = 0

    def gap(self, pts: np.ndarray) -> np.ndarray:
        return self.bound - pts[:, self.axis]

    @property
    def label(self) -> str:
        return f"cut(x{self.axis}<{self.bound:g})"


@dataclass(frozen=True)
class Registrations:
    """What to record along each path.

    ``bridge`` enables the Brownian-bridge crossing correction for the
    absorbing regions: a step whose endpoints are at distances ``a`` and
    ``b`` inside the region counts as an exit with probability
    ``exp(-2ab/delta)``.
    """

    checkpoints: tuple[float, ...] = ()
    regions: tuple = ()
    eps: tuple[float, ...] = ()
    bridge: bool = False


@dataclass(eq=False)
class PathEnsemble:
    x0: np.ndarray
    T: float
    delta: float
    N: int
    seed: int
    checkpoints: np.ndarray
    positions: np.ndarray          # (N, n_checkpoints, 2)
    exit_times: np.ndarray         # (n_regions, N); inf = not exited by T
    local_time: np.ndarray         # (n_eps, N, n_checkpoints)
    regions: tuple = ()
    eps: tuple = ()
    flags: list = field(default_factory=list)


def _block_seed(seed: int, block: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(block,))))


def _run_block(d: DomainSpec, x0, n: int, n_steps: int, delta: float, ck_steps: np.ndarray,
               reg: Registrations, rng: np.random.Generator):
    n_ck = len(ck_steps)
    pos = np.empty((n, n_ck, 2))
    exits = np.full((len(reg.regions), n), np.inf)
    lt = np.zeros((len(reg.eps), n, n_ck))
    X = np.tile(np.asarray(x0, dtype=float), (n, 1))
    acc = np.zeros((len(reg.eps), n))
    need_paths = n_ck > 0 or len(reg.eps) > 0
    alive = np.arange(n)              # paths still needed (compaction for exit-only runs)
    sd = math.sqrt(delta)
    eps = np.asarray(reg.eps, dtype=float)
    gaps = [r.gap(X) for r in reg.regions]
    ck_ptr = 0
    while ck_ptr < n_ck and ck_steps[ck_ptr] == 0:
        pos[:, ck_ptr] = X
        ck_ptr += 1
    for k in range(1, n_steps + 1):
        if len(alive) == 0:
            break
        if len(eps):
            dist = d.distance_to_boundary(X)
            acc[:, alive] += (delta / eps)[:, None] * (dist[None, :] < eps[:, None])
        prop = X + sd * rng.standard_normal(X.shape)
        Xn = reflect_step(d, X, prop)
        for ri, region in enumerate(reg.regions):
            g_new = region.gap(Xn)
            hit = g_new <= 0.0
            if reg.bridge:
                u = rng.random(len(Xn))
                ok = ~hit
                p = np.exp(-2.0 * np.maximum(gaps[ri][ok], 0.0) * g_new[ok] / delta)
                hit[ok] = u[ok] < p
            row = exits[ri]
            fresh = hit & ~np.isfinite(row[alive])
            row[alive[fresh]] = k * delta
            gaps[ri] = g_new
        X = Xn
        while ck_ptr < n_ck and ck_steps[ck_ptr] == k:
            pos[alive, ck_ptr] = X
            lt[:, alive, ck_ptr] = acc[:, alive]
            ck_ptr += 1
        if not need_paths and reg.regions:
            done = np.all(np.isfinite(exits[:, alive]), axis=0)
            if done.any():
                keep = ~done
                alive = alive[keep]
                X = X[keep]
                gaps = [gp[keep] for gp in gaps]
    return pos, exits, lt


def sample_paths(d: DomainSpec, x0, T: float, delta: float, N: int, seed: int,
                 registrations: Registrations | None = None, threads: int = 1,
                 block_size: int = BLOCK_SIZE) -> PathEnsemble:
    """Simulate ``N`` reflected paths from ``x0`` over ``[0, T]`` with step ``delta``."""
    reg = registrations or Registrations()
    x0 = np.asarray(x0, dtype=float)
    if not d.contains_closed(x0[None, :], 1e-12)[0]:
        raise SimulationError(f"start point {tuple(x0)} is outside the closed domain")
    if N < 1:
        raise SimulationError("need at least one path")
    if T < 0:
        raise SimulationError("horizon must be non-negative")
    if T > 0 and not 0 < delta <= T:
        raise SimulationError(f"step delta={delta} must lie in (0, T]")
    if seed is None:
        raise SimulationError("a seed is required")
    n_steps = int(round(T / delta)) if T > 0 else 0
    cks = np.asarray(sorted(reg.checkpoints), dtype=float)
    if (cks < 0).any() or (cks > T + 1e-12).any():
        raise SimulationError("checkpoints must lie in [0, T]")
    ck_steps = np.rint(cks / delta).astype(np.int64) if T > 0 else np.zeros(len(cks), dtype=np.int64)
    flags = []
    for e in reg.eps:
        if delta >= e * e:
            flags.append(f"strip under-resolved: delta={delta:g} >= eps^2={e * e:g}")
            warnings.warn(flags[-1])

    sizes = [min(block_size, N - s) for s in range(0, N, block_size)]

    def job(b):
        return _run_block(d, x0, sizes[b], n_steps, delta, ck_steps, reg, _block_seed(int(seed), b))

    if threads > 1 and len(sizes) > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            parts = list(ex.map(job, range(len(sizes))))
    else:
        parts = [job(b) for b in range(len(sizes))]
    pos = np.concatenate([p[0] for p in parts], axis=0)
    exits = np.concatenate([p[1] for p in parts], axis=1)
    lt = np.concatenate([p[2] for p in parts], axis=1)
    return PathEnsemble(x0=x0, T=float(T), delta=float(delta), N=int(N), seed=int(seed),
                        checkpoints=cks, positions=pos, exit_times=exits, local_time=lt,
                        regions=tuple(reg.regions), eps=tuple(reg.eps), flags=flags)


# ---------------------------------------------------------------------------
# derived statistics


@dataclass(frozen=True)
class ExitTail:
    x: tuple[float, float]
    r: float
    times: np.ndarray
    p_hat: np.ndarray
    stderr: np.ndarray
    N: int


def _binomial(p: np.ndarray, N: int) -> np.ndarray:
    return np.sqrt(np.clip(p * (1.0 - p), 0.0, None) / N)


def region_exit_tail(d: DomainSpec, x, region, times, delta: float, N: int, seed: int,
                     threads: int = 1, bridge: bool = False) -> ExitTail:
    """Empirical ``P_x(tau_region <= t)`` for each ``t`` in ``times``."""
    times = np.asarray(times, dtype=float)
    ens = sample_paths(d, x, float(times.max()), delta, N, seed,
                       Registrations(regions=(region,), bridge=bridge), threads=threads)
    tau = ens.exit_times[0]
    p = np.array([(tau <= t + 1e-12 * delta).mean() for t in times])
    r = getattr(region, "radius", float("nan"))
    return ExitTail(x=tuple(map(float, x)), r=float(r), times=times, p_hat=p,
                    stderr=_binomial(p, N), N=N)


def mc_exit_tail(d: DomainSpec, x, r: float, times, delta: float, N: int, seed: int,
                 threads: int = 1, bridge: bool = False) -> ExitTail:
    """Exit tail of the ball ``B(x, r)`` (reflected at the physical boundary)."""
    if r <= 0:
        raise SimulationError("ball radius must be positive")
    return region_exit_tail(d, x, Ball(tuple(map(float, x)), float(r)), times, delta, N, seed,
                            threads=threads, bridge=bridge)


@dataclass(frozen=True)
class ExitTime:
    mean: float
    stderr: float
    var: float
    n_exited: int
    N: int


def mc_exit_time(d: DomainSpec, x, r: float, delta: float, N: int, seed: int,
                 threads: int = 1, horizon: float | None = None) -> ExitTime:
    """Mean exit time of ``B(x, r)``; paths are dropped once they have exited."""
    T = horizon if horizon is not None else 30.0 * r * r
    ens = sample_paths(d, x, T, delta, N, seed,
                       Registrations(regions=(Ball(tuple(map(float, x)), float(r)),)),
                       threads=threads)
    tau = ens.exit_times[0]
    done = np.isfinite(tau)
    tau = np.where(done, tau, T)
    return ExitTime(mean=float(tau.mean()), stderr=float(tau.std(ddof=1) / math.sqrt(N)),
                    var=float(tau.var(ddof=1)), n_exited=int(done.sum()), N=N)


def displacement_tail(ens: PathEnsemble, radii) -> tuple[np.ndarray, np.ndarray]:
    """``P(|X_t - x0| >= r)`` for every checkpoint (rows) and radius (columns)."""
    disp = np.linalg.norm(ens.positions - ens.x0[None, None, :], axis=2)
    radii = np.asarray(radii, dtype=float)
    p = (disp[:, :, None] >= radii[None, None, :]).mean(axis=0)
    return p, _binomial(p, ens.N)


@dataclass(frozen=True)
class KernelHistogram:
    t: float
    density: np.ndarray
    stderr: np.ndarray
    counts: np.ndarray
    N: int


def mc_kernel(d: DomainSpec, x0, t: float, g: Grid, delta: float, N: int, seed: int,
              threads: int = 1) -> KernelHistogram:
    """Histogram estimate of ``p_t(x0, .)`` over grid cells."""
    if t < 10 * delta:
        raise SimulationError(f"t={t:g} must be at least 10*delta")
    ens = sample_paths(d, x0, t, delta, N, seed, Registrations(checkpoints=(t,)), threads=threads)
    cells = g.locate(ens.positions[:, -1])
    counts = np.bincount(cells, minlength=g.n_cells).astype(float)
    dens = counts / (N * g.measure)
    q = counts / N
    se = np.sqrt(q * (1.0 - q) / N) / g.measure
    return KernelHistogram(t=float(t), density=dens, stderr=se, counts=counts, N=N)


@dataclass(frozen=True)
class LocalTimeStats:
    T: np.ndarray
    eps: np.ndarray
    mean: np.ndarray               # (n_eps, n_T)
    stderr: np.ndarray
    extrapolated: np.ndarray       # 2 L(eps/2) - L(eps) for consecutive pairs, (n_eps-1, n_T)
    extrapolated_se: np.ndarray
    flags: tuple = ()


def mc_local_time(d: DomainSpec, x0, T, eps: float | tuple, delta: float, N: int, seed: int,
                  threads: int = 1) -> LocalTimeStats:
    """Strip estimator ``(1/eps) * sum delta 1[dist(X, boundary) < eps]``.

    A scalar ``eps`` is evaluated together with ``eps/2`` on the same
    paths; ``T`` may be a list of horizons (one simulation up to the
    largest).
    """
    Ts = np.atleast_1d(np.asarray(T, dtype=float))
    eps_list = (float(eps), float(eps) / 2.0) if np.isscalar(eps) else tuple(map(float, eps))
    ens = sample_paths(d, x0, float(Ts.max()), delta, N, seed,
                       Registrations(checkpoints=tuple(Ts), eps=eps_list), threads=threads)
    order = np.argsort(np.argsort(Ts))
    L = ens.local_time[:, :, order] if len(Ts) > 1 else ens.local_time
    mean = L.mean(axis=1)
    se = L.std(axis=1, ddof=1) / math.sqrt(N)
    ext = 2.0 * L[1:] - L[:-1]
    return LocalTimeStats(T=Ts, eps=np.asarray(eps_list), mean=mean, stderr=se,
                          extrapolated=ext.mean(axis=1),
                          extrapolated_se=ext.std(axis=1, ddof=1) / math.sqrt(N),
                          flags=tuple(ens.flags))


# ---------------------------------------------------------------------------
# Kato modulus


@dataclass(frozen=True)
class KatoCurve:
    times: np.ndarray
    modulus: np.ndarray
    argmax: np.ndarray
    flags: tuple = ()


def _boundary_vector(sd: SpectralDecomposition, g: Grid, K: SubdomainMask) -> np.ndarray:
    w = np.bincount(g.bface_cell, weights=g.bface_length * K.cells[g.bface_cell],
                    minlength=g.n_cells)
    return w[sd.op.cells]


def occupation_integral(sd: SpectralDecomposition, t: float, b: np.ndarray, rows=None) -> np.ndarray:
    """``int_0^t sum_y p_s(x, y) b_y ds`` in closed form, mode by mode."""
    lam = sd.lam
    with np.errstate(divide="ignore", invalid="ignore"):
        g = np.where(lam > 1e-12, -np.expm1(-lam * t) / lam, t)
    coef = g * (sd.phi.T @ b)
    ph = sd.phi if rows is None else sd.phi[rows]
    return ph @ coef


def _quad_row(sd, t, b, row, rtol=1e-8):
    coef = sd.phi.T @ b
    prow = sd.phi[row]

    def f(u):
        return 2.0 * u * float(prow @ (np.exp(-sd.lam * u * u) * coef))

    val, _ = integrate.quad(f, 0.0, math.sqrt(t), epsrel=rtol, limit=200)
    return val


def kato_modulus(sd: SpectralDecomposition, g: Grid, K: SubdomainMask, times,
                 method: str = "exact", rows=None) -> KatoCurve:
    """``sup_x E_x[int_0^t 1_K(X_s) dL_s]`` from the spectral kernel.

    ``method="exact"`` integrates every mode in closed form; ``"quadrature"``
    uses adaptive quadrature in ``u = sqrt(s)`` (restricted to ``rows`` to
    keep the cost down).  Times below ``h^2`` are flagged because the grid
    cannot resolve the boundary layer there.
    """
    times = np.asarray(times, dtype=float)
    b = _boundary_vector(sd, g, K)
    flags = []
    if not sd.complete:
        flags.append(f"truncated spectrum (K={sd.K} of {sd.n}); small-time values are lower bounds")
    if (times < g.h ** 2).any():
        flags.append(f"times below h^2={g.h ** 2:.3g} are under-resolved")
    mod = np.zeros(len(times))
    arg = np.zeros(len(times), dtype=np.int64)
    if not b.any():
        return KatoCurve(times, mod, arg, tuple(flags))
    for k, t in enumerate(times):
        if method == "exact":
            v = occupation_integral(sd, t, b)
            if rows is not None:
                v = v[rows]
        elif method == "quadrature":
            rr = np.arange(sd.n) if rows is None else np.asarray(rows)
            v = np.array([_quad_row(sd, t, b, r) for r in rr])
        else:
            raise SimulationError(f"unknown Kato method {method!r}")
        j = int(np.argmax(v))
        mod[k] = v[j]
        arg[k] = sd.op.cells[j if rows is None else np.asarray(rows)[j]]
    return KatoCurve(times=times, modulus=mod, argmax=arg, flags=tuple(flags))
