"""Eigendecompositions of discrete generators and the heat-kernel series.

For an operator ``(A, M)`` the pencil ``A phi = lam M phi`` is reduced to the
symmetric matrix ``M^{-1/2} A M^{-1/2}``.  Small problems (or requests for a
large fraction of the spectrum) use a dense LAPACK solve; larger ones use
shift-invert Lanczos from ARPACK.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
from scipy.sparse.linalg import eigsh

from .discretize import Operator

DENSE_MAX = 2500
TMIN_RATIO = 1e-3
# relative allowance for floating-point error in eigenvector sums
ROUNDOFF = 1e-10


class SpectralError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class SpectralDecomposition:
    """Eigenpairs with ``phi`` M-orthonormal, columns ordered by eigenvalue."""

    lam: np.ndarray
    phi: np.ndarray
    op: Operator = field(repr=False)
    method: str = "dense"
    residual: float = 0.0
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def K(self) -> int:
        return len(self.lam)

    @property
    def n(self) -> int:
        return self.phi.shape[0]

    @property
    def complete(self) -> bool:
        return self.K == self.n

    @property
    def tag(self) -> str:
        return self.op.tag

    @property
    def M(self) -> np.ndarray:
        return self.op.M

    @property
    def t_min(self) -> float:
        if "t_min" not in self._cache:
            self._cache["t_min"] = _t_min(self)
        return self._cache["t_min"]

    def diagonal(self, t: float, rows=None) -> np.ndarray:
        ph = self.phi if rows is None else self.phi[rows]
        return (ph * ph) @ np.exp(-self.lam * t)

    def tail_bound(self, t: float, rows, cols) -> np.ndarray:
        """Bound on the omitted part of the series at ``(rows, cols)``."""
        rows = np.atleast_1d(rows)
        cols = np.atleast_1d(cols)
        if self.complete:
            return np.zeros(np.broadcast(rows, cols).shape)
        dr = self.diagonal(t / 2.0, rows)
        dc = self.diagonal(t / 2.0, cols)
        return math.exp(-self.lam[-1] * t / 2.0) * np.sqrt(dr * dc)


@dataclass(frozen=True)
class KernelEstimate:
    """Kernel values with attached error bounds (units 1/area)."""

    t: float
    rows: np.ndarray
    cols: np.ndarray
    value: np.ndarray
    tail: np.ndarray
    error: np.ndarray
    t_min: float
    provenance: str = "spectral"
    n_used: int | None = None
    flag: str = ""

    def scalar(self) -> float:
        return float(np.asarray(self.value).ravel()[0])


def _normalize_signs(phi: np.ndarray) -> None:
    s = phi[:, 0].sum()
    if s < 0:
        phi[:, 0] *= -1.0
    idx = np.argmax(np.abs(phi[:, 1:]), axis=0)
    signs = np.sign(phi[idx, np.arange(1, phi.shape[1])])
    signs[signs == 0] = 1.0
    phi[:, 1:] *= signs


def eigensolve(op: Operator, K: int | None = None, dense_max: int = DENSE_MAX,
               check: bool = True) -> SpectralDecomposition:
    """Lowest ``K`` eigenpairs of ``A phi = lam M phi`` (all of them if ``K`` is None)."""
    n = op.n
    K = n if K is None else int(K)
    if not 1 <= K <= n:
        raise SpectralError(f"requested K={K} eigenpairs for an operator with {n} cells")
    dinv = 1.0 / np.sqrt(op.M)
    B = sp.diags(dinv) @ op.A @ sp.diags(dinv)
    if n <= dense_max or K > n // 3 or n < 20:
        Bd = B.toarray()
        Bd = 0.5 * (Bd + Bd.T)
        if K == n:
            lam, vec = sla.eigh(Bd)
        else:
            lam, vec = sla.eigh(Bd, subset_by_index=[0, K - 1])
        method = "dense"
    else:
        B = 0.5 * (B + B.T)
        # shift below the spectrum so the shifted matrix is definite
        shift = -max(1.0, 1e-3 * abs(B).sum(axis=1).max())
        v0 = np.random.default_rng(12345).standard_normal(n)
        try:
            lam, vec = eigsh(B.tocsc(), k=K, sigma=shift, which="LM", v0=v0, tol=0.0)
        except Exception as exc:  # ARPACK breakdown
            raise SpectralError(f"Lanczos solve failed: {exc}") from exc
        order = np.argsort(lam)
        lam, vec = lam[order], vec[:, order]
        method = "lanczos"
    phi = vec * dinv[:, None]
    if op.tag == "neumann":
        lam[0] = max(lam[0], 0.0) if abs(lam[0]) < 1e-10 * max(1.0, lam[-1]) else lam[0]
    _normalize_signs(phi)
    phi = np.ascontiguousarray(phi)

    res = 0.0
    if check:
        R = op.A @ phi - (op.M[:, None] * phi) * lam[None, :]
        rn = np.linalg.norm(R, axis=0)
        mn = np.linalg.norm(op.M[:, None] * phi, axis=0)
        rel = rn / ((1.0 + np.abs(lam)) * mn)
        res = float(rel.max())
        if res > 1e-8:
            k = int(np.argmax(rel))
            raise SpectralError(f"eigenpair {k} (lambda={lam[k]:.6g}) has relative residual {res:.3g}")
    return SpectralDecomposition(lam=lam, phi=phi, op=op, method=method, residual=res)


def _t_min(sd: SpectralDecomposition) -> float:
    if sd.complete:
        return 0.0
    gap = sd.lam - sd.lam[0]
    sq = sd.phi * sd.phi

    def worst(t):
        # exp(-lam_1 t) factored out of both diagonals to avoid underflow
        num = sq @ np.exp(-gap * t / 2.0)
        den = sq @ np.exp(-gap * t)
        with np.errstate(divide="ignore", invalid="ignore"):
            r = math.exp(-gap[-1] * t / 2.0) * num / den
        r = np.where(np.isfinite(r), r, np.inf)
        return float(np.max(r))

    lo, hi = -12.0, 4.0
    if worst(10.0 ** hi) > TMIN_RATIO:
        return math.inf
    if worst(10.0 ** lo) <= TMIN_RATIO:
        return 10.0 ** lo
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        if worst(10.0 ** mid) <= TMIN_RATIO:
            hi = mid
        else:
            lo = mid
    return 10.0 ** hi


def _series(sd, t, rows, cols):
    w = np.exp(-sd.lam * t)
    a = sd.phi[rows]
    b = sd.phi[cols]
    val = np.einsum("...k,k,...k->...", a, w, b)
    mag = np.einsum("...k,k,...k->...", np.abs(a), w, np.abs(b))
    return val, mag


def heat_kernel(sd: SpectralDecomposition, t: float, i, j, *, strict: bool = True) -> KernelEstimate:
    """Truncated eigenfunction series ``sum_k exp(-lam_k t) phi_k(i) phi_k(j)``.

    ``i`` and ``j`` are row indices of the operator (broadcast together).
    Negative values are clamped to zero when they lie within the error
    bound; larger negative values raise, since they indicate ``K`` is too
    small.
    """
    if t <= 0:
        raise SpectralError(f"kernel time must be positive, got {t}")
    if strict and t < sd.t_min:
        raise SpectralError(f"t={t:g} is below t_min={sd.t_min:.3g} for K={sd.K}")
    rows, cols = np.broadcast_arrays(np.asarray(i, dtype=np.int64), np.asarray(j, dtype=np.int64))
    val, mag = _series(sd, t, rows, cols)
    tail = sd.tail_bound(t, rows, cols).reshape(val.shape)
    err = tail + ROUNDOFF * mag
    neg = val < 0
    if neg.any():
        if np.any(-val[neg] > err[neg]):
            k = np.argmax(np.where(neg, -val - err, -np.inf))
            raise SpectralError(f"negative kernel value {val.flat[k]:.3g} exceeds its error bound "
                                f"{err.flat[k]:.3g}; increase K")
        val = np.where(neg, 0.0, val)
    return KernelEstimate(t=float(t), rows=rows, cols=cols, value=val, tail=tail, error=err,
                          t_min=sd.t_min, provenance="spectral")


def kernel_matrix(sd: SpectralDecomposition, t: float, rows=None, cols=None) -> np.ndarray:
    """Dense block ``p_t(rows, cols)`` without clamping."""
    a = sd.phi if rows is None else sd.phi[rows]
    b = sd.phi if cols is None else sd.phi[cols]
    return (a * np.exp(-sd.lam * t)) @ b.T


def apply_semigroup(sd: SpectralDecomposition, t: float, f: np.ndarray) -> np.ndarray:
    """``sum_k exp(-lam_k t) (phi_k' M f) phi_k``."""
    if t < 0:
        raise SpectralError("semigroup time must be non-negative")
    f = np.asarray(f, dtype=float)
    coef = sd.phi.T @ (sd.M[:, None] * f if f.ndim == 2 else sd.M * f)
    w = np.exp(-sd.lam * t)
    return sd.phi @ (w[:, None] * coef if f.ndim == 2 else w * coef)


def survival(sd: SpectralDecomposition, t: float, i=None) -> np.ndarray | float:
    """``P_x(t < tau)`` for the killed process started at row ``i``."""
    if t == 0:
        s = np.ones(sd.n)
    elif sd.tag == "neumann" and sd.complete:
        s = np.ones(sd.n)
    else:
        s = np.clip(apply_semigroup(sd, t, np.ones(sd.n)), 0.0, 1.0)
    if i is None:
        return s
    out = s[np.asarray(i)]
    return float(out) if np.ndim(out) == 0 else out


def eigen_table(sd: SpectralDecomposition) -> list[tuple[int, float]]:
    return [(k + 1, float(v)) for k, v in enumerate(sd.lam)]
