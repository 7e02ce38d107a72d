"""Exhaustion by truncations and the certified increment bound.

Level ``n`` of a ladder is the operator killed outside the truncation
``K_n``.  By the strong Markov property at the exit time ``tau_n``,

    0 <= p^{n'}_t(x, y) - p^n_t(x, y) <= C * P_x(tau_n <= t),

where ``C`` bounds ``p^{n'}_s(x', y)`` over ``s <= t``, exit positions ``x'``
outside the ball ``D_R`` and targets ``y`` in the window ``D_{eps,R}``.  The
constant is estimated from the deepest level.  A discrete chain started
outside ``D_R`` reaches the window only through the layer of ``D_R`` cells
adjacent to the outside, so the supremum is evaluated on that layer and on
the matching outer layer.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .discretize import Operator, assemble_neumann, assemble_part
from .geometry import Grid, SubdomainMask, TruncationScheme, truncate
from .spectral import (KernelEstimate, SpectralDecomposition, eigensolve, heat_kernel,
                       kernel_matrix, survival)

POINTS_PER_DECADE = 16


class LadderError(ValueError):
    pass


@dataclass(frozen=True)
class CertifiedKernel:
    level: int
    t: float
    x: int
    y: int
    value: float
    error: float
    certificate: float
    c_hat: float
    exit_prob: float
    provenance: str = "deepest-level sup over layer cells, s-ladder 16/decade"


@dataclass(eq=False)
class ExhaustionLadder:
    grid: Grid
    scheme: TruncationScheme
    masks: list[SubdomainMask]
    ops: list[Operator]
    sds: list[SpectralDecomposition]
    R: float
    eps: float
    center: tuple[float, float]
    ball: SubdomainMask
    window: SubdomainMask
    _chat: dict = field(default_factory=dict, repr=False)

    @property
    def n_levels(self) -> int:
        return len(self.masks)

    @property
    def deepest(self) -> SpectralDecomposition:
        return self.sds[-1]

    @property
    def t_min(self) -> float:
        return max(sd.t_min for sd in self.sds)

    def window_cells(self) -> np.ndarray:
        return np.nonzero(self.window.cells)[0]


def weyl_count(area: float, t_target: float, perimeter: float = 0.0, ratio: float = 1e-3,
               safety: float = 1.3) -> int:
    """Eigenpair count whose tail rule is met at ``t_target`` (two-term Weyl estimate).

    For the Neumann Laplacian ``N(mu) ~ area mu / (4 pi) + perimeter sqrt(mu) / (4 pi)``;
    the generator ``Delta/2`` has ``lam = mu / 2``.
    """
    mu = 4.0 * math.log(2.0 / ratio) / t_target
    n = area * mu / (4.0 * math.pi) + perimeter * math.sqrt(mu) / (4.0 * math.pi)
    return int(math.ceil(safety * n)) + 10


def build_ladder(g: Grid, scheme: TruncationScheme, R: float, eps: float,
                 K: int | list[int] | None = None, *, t_target: float | None = None,
                 center=(0.0, 0.0), margin: float = 1.0,
                 dense_max: int | None = None) -> ExhaustionLadder:
    """Killed decompositions on every truncation of ``scheme``.

    ``K`` fixes the eigenpair count per level (``None`` = full spectrum);
    alternatively ``t_target`` sizes each level so that its ``t_min`` does
    not exceed the target.  Identical consecutive masks collapse into one
    level.  The ball ``D_{R+margin}`` must lie in the first truncation.
    """
    if not 0 < eps < 1:
        raise LadderError(f"eps must lie in (0, 1), got {eps}")
    if R <= 0:
        raise LadderError(f"R must be positive, got {R}")
    masks: list[SubdomainMask] = []
    for n in range(1, len(scheme) + 1):
        m = truncate(g, n, scheme)
        if masks and np.array_equal(m.cells, masks[-1].cells):
            continue
        if masks and not masks[-1] <= m:
            raise LadderError("truncation masks are not nested")
        masks.append(m)
    outer = g.ball_mask(R + margin, center)
    if not outer <= masks[0]:
        raise LadderError(f"D_(R+{margin:g}) is not contained in the first truncation {masks[0].name}")
    ball = g.ball_mask(R, center)
    window = g.window_mask(R, eps, center)
    if not window.cells.any():
        raise LadderError("evaluation window is empty; decrease eps or refine the grid")

    base = assemble_neumann(g)
    Ks = list(K) if isinstance(K, (list, tuple)) else [K] * len(masks)
    if len(Ks) < len(masks):
        Ks = Ks + [Ks[-1]] * (len(masks) - len(Ks))
    kw = {} if dense_max is None else {"dense_max": dense_max}
    ops, sds = [], []
    for m, k in zip(masks, Ks):
        op = assemble_part(g, m, base)
        if k is None and t_target is not None:
            per = float(g.bface_length[m.cells[g.bface_cell]].sum())
            k = weyl_count(float(op.M.sum()), t_target, per)
        while True:
            kk = None if k is None else min(int(k), op.n)
            sd = eigensolve(op, kk, **kw)
            if t_target is None or sd.t_min <= t_target or sd.complete:
                break
            k = int(1.5 * sd.K)
        ops.append(op)
        sds.append(sd)
    return ExhaustionLadder(grid=g, scheme=scheme, masks=masks, ops=ops, sds=sds, R=float(R),
                            eps=float(eps), center=tuple(center), ball=ball, window=window)


def _layers(l: ExhaustionLadder) -> np.ndarray:
    """Cells on either side of the boundary of ``D_R`` (grid indices)."""
    g = l.grid
    inside = l.ball.cells
    a, b = g.faces[:, 0], g.faces[:, 1]
    cross = inside[a] != inside[b]
    sel = np.zeros(g.n_cells, dtype=bool)
    sel[a[cross]] = True
    sel[b[cross]] = True
    return np.nonzero(sel)[0]


def s_ladder(t: float, floor: float) -> np.ndarray:
    """Geometric time ladder on ``[floor, t]`` with 16 points per decade."""
    if t <= floor:
        return np.array([t])
    k = int(math.ceil(POINTS_PER_DECADE * math.log10(t / floor)))
    return np.geomspace(floor, t, k + 1)


def c_hat(l: ExhaustionLadder, t: float, chunk: int = 2048) -> float:
    """Numerical sup of the deepest kernel over exits outside ``D_R`` and window targets."""
    key = round(float(t), 14)
    if key in l._chat:
        return l._chat[key]
    sd = l.deepest
    op = sd.op
    in_deep = np.zeros(l.grid.n_cells, dtype=bool)
    in_deep[op.cells] = True
    layer = _layers(l)
    layer = layer[in_deep[layer]]
    win = l.window_cells()
    if len(layer) == 0:
        l._chat[key] = 0.0
        return 0.0
    rows = op.local_index(layer)
    cols = op.local_index(win)
    far = np.nonzero(in_deep & ~l.ball.cells)[0]
    far_rows = op.local_index(far) if len(far) else np.zeros(0, dtype=np.int64)
    floor = sd.t_min if sd.t_min > 0 else 1e-3 * (l.eps * l.R) ** 2
    best = 0.0
    for s in s_ladder(t, floor):
        blocks = [rows]
        if s >= l.R ** 2 and len(far_rows):
            blocks.append(far_rows)
        for rr in blocks:
            for c0 in range(0, len(rr), chunk):
                r = rr[c0:c0 + chunk]
                P = kernel_matrix(sd, s, r, cols)
                if not sd.complete:
                    P = P + sd.tail_bound(s, r[:, None], cols[None, :])
                best = max(best, float(P.max()))
    l._chat[key] = best
    return best


def _check_window(l: ExhaustionLadder, y) -> None:
    y = np.atleast_1d(y)
    if not np.all(l.window.cells[y]):
        raise LadderError("target cell lies outside the evaluation window D_{eps,R}")


def certified_kernel(l: ExhaustionLadder, n: int, t: float, x: int, y: int) -> CertifiedKernel:
    """Level-``n`` kernel (1-based) with the bound on its distance to deeper levels."""
    if not 1 <= n <= l.n_levels:
        raise IndexError(f"level {n} outside ladder of {l.n_levels} levels")
    _check_window(l, y)
    sd = l.sds[n - 1]
    if t < sd.t_min:
        raise LadderError(f"t={t:g} is below level {n} t_min={sd.t_min:.3g}")
    op = sd.op
    ix, iy = op.local_index([x, y])
    ke = heat_kernel(sd, t, ix, iy)
    if op.tag == "neumann" and sd.complete:
        exit_p = 0.0
    else:
        exit_p = max(0.0, 1.0 - float(survival(sd, t, ix)))
    C = c_hat(l, t)
    return CertifiedKernel(level=n, t=float(t), x=int(x), y=int(y), value=ke.scalar(),
                           error=float(np.ravel(ke.error)[0]), certificate=C * exit_p,
                           c_hat=C, exit_prob=exit_p)


def limit_kernel(l: ExhaustionLadder, t: float, x: int, y: int, tol: float) -> KernelEstimate:
    """First level whose certificate is at most ``tol``; best effort otherwise.

    A zero tolerance is only met by a saturated level on a bounded domain,
    since every truncation of a horn misses part of the domain.
    """
    if tol < 0:
        raise LadderError("tolerance must be non-negative")
    ck = None
    for n in range(1, l.n_levels + 1):
        ck = certified_kernel(l, n, t, x, y)
        exact = l.sds[n - 1].op.tag == "neumann" and l.grid.domain.kind != "horn"
        if ck.certificate <= tol and (tol > 0 or exact):
            return KernelEstimate(t=float(t), rows=np.array(x), cols=np.array(y),
                                  value=np.array(ck.value), tail=np.array(0.0),
                                  error=np.array(ck.error + ck.certificate), t_min=l.t_min,
                                  provenance="exhaust-certified", n_used=n)
    return KernelEstimate(t=float(t), rows=np.array(x), cols=np.array(y),
                          value=np.array(ck.value), tail=np.array(0.0),
                          error=np.array(ck.error + ck.certificate), t_min=l.t_min,
                          provenance="exhaust-best-effort", n_used=l.n_levels,
                          flag="not-certified")


def exit_profile(l: ExhaustionLadder, t: float, compact: SubdomainMask) -> np.ndarray:
    """Per level, the largest exit probability ``P_x(tau_n <= t)`` over the compact mask."""
    cells = np.nonzero(compact.cells)[0]
    out = []
    for sd in l.sds:
        idx = sd.op.local_index(cells)
        s = survival(sd, t)
        out.append(float(np.max(1.0 - s[idx])) if len(idx) else 0.0)
    return np.array(out)


def part_kernel(g: Grid, U: SubdomainMask, t: float, x, y, K: int | None = None,
                sd: SpectralDecomposition | None = None) -> KernelEstimate:
    """Kernel of the process killed on leaving ``U`` (grid cell indices ``x``, ``y``)."""
    if sd is None:
        sd = eigensolve(assemble_part(g, U), K)
    ix = sd.op.local_index(x)
    iy = sd.op.local_index(y)
    ke = heat_kernel(sd, t, ix.reshape(np.shape(x)), iy.reshape(np.shape(y)))
    return KernelEstimate(t=ke.t, rows=np.asarray(x), cols=np.asarray(y), value=ke.value,
                          tail=ke.tail, error=ke.error, t_min=ke.t_min, provenance="spectral")
