"""Finite-volume generators for the energy form ``1/2 * int grad f . grad g dm``.

The Neumann operator is a weighted graph Laplacian scaled by one half; the
natural boundary condition needs no boundary-face terms.  Killed operators
are principal submatrices of the Neumann one, i.e. the process is absorbed
when it jumps to a cell outside the mask.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .geometry import Grid, SubdomainMask, grid_components


class OperatorError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Operator:
    """Symmetric generator ``A`` with diagonal mass ``M`` over a set of cells.

    ``cells`` lists the grid cell index of every row, so row ``k`` of a
    killed operator corresponds to grid cell ``cells[k]``.
    """

    A: sp.csr_matrix
    M: np.ndarray
    tag: str
    cells: np.ndarray
    grid: Grid = field(repr=False)
    mask_name: str = "all"

    @property
    def n(self) -> int:
        return len(self.M)

    @property
    def killed(self) -> bool:
        return self.tag == "killed"

    def energy(self, f: np.ndarray) -> float:
        return float(f @ (self.A @ f))

    def local_index(self, grid_cells) -> np.ndarray:
        """Row index of each grid cell; raises if a cell is outside the operator."""
        grid_cells = np.atleast_1d(np.asarray(grid_cells, dtype=np.int64))
        pos = np.full(self.grid.n_cells, -1, dtype=np.int64)
        pos[self.cells] = np.arange(self.n)
        out = pos[grid_cells]
        if (out < 0).any():
            raise OperatorError(f"cells {grid_cells[out < 0][:5].tolist()} are outside the operator")
        return out

    def embed(self, f: np.ndarray, fill: float = 0.0) -> np.ndarray:
        """Extend a row vector to all grid cells."""
        out = np.full(self.grid.n_cells, fill, dtype=float)
        out[self.cells] = f
        return out


def _laplacian(n: int, faces: np.ndarray, trans: np.ndarray) -> sp.csr_matrix:
    i, j = faces[:, 0], faces[:, 1]
    w = 0.5 * trans
    rows = np.concatenate([i, j, i, j])
    cols = np.concatenate([j, i, i, j])
    vals = np.concatenate([-w, -w, w, w])
    A = sp.coo_matrix((vals, (rows, cols)), shape=(n, n)).tocsr()
    A.sum_duplicates()
    return A


def assemble_neumann(g: Grid) -> Operator:
    """Reflecting-boundary generator: ``f'Af = 1/2 sum_faces w (f_i - f_j)^2``."""
    ncomp = grid_components(g)
    if ncomp != 1:
        raise OperatorError(f"grid graph has {ncomp} connected components; the domain must be connected")
    A = _laplacian(g.n_cells, g.faces, g.trans)
    return Operator(A=A, M=g.measure.copy(), tag="neumann",
                    cells=np.arange(g.n_cells), grid=g, mask_name="all")


def assemble_part(g: Grid, mask: SubdomainMask | np.ndarray, base: Operator | None = None) -> Operator:
    """Generator of the process killed on leaving ``mask``.

    Neumann behaviour is kept on the part of the physical boundary inside
    the mask; the rows and columns of excluded cells are dropped.
    """
    sel = mask.cells if isinstance(mask, SubdomainMask) else np.asarray(mask, dtype=bool)
    name = mask.name if isinstance(mask, SubdomainMask) else "mask"
    if sel.shape != (g.n_cells,):
        raise OperatorError(f"mask has shape {sel.shape}, expected ({g.n_cells},)")
    if not sel.any():
        raise OperatorError("cannot assemble a killed operator on an empty mask")
    if base is None:
        base = Operator(A=_laplacian(g.n_cells, g.faces, g.trans), M=g.measure,
                        tag="neumann", cells=np.arange(g.n_cells), grid=g)
    idx = np.nonzero(sel)[0]
    if len(idx) == g.n_cells:
        return Operator(A=base.A.copy(), M=base.M.copy(), tag="neumann", cells=idx, grid=g,
                        mask_name=name)
    A = base.A[idx][:, idx].tocsr()
    return Operator(A=A, M=g.measure[idx].copy(), tag="killed", cells=idx, grid=g, mask_name=name)


def check_operator(op: Operator, trials: int = 1000, seed: int = 0) -> dict:
    """Symmetry, positivity and (for Neumann) conservation probes."""
    rng = np.random.default_rng(seed)
    asym = abs(op.A - op.A.T).max() if op.n else 0.0
    F = rng.standard_normal((op.n, trials))
    quad = np.einsum("ij,ij->j", F, op.A @ F)
    norm2 = np.einsum("ij,ij->j", F, F)
    a_norm = sp.linalg.norm(op.A, 1)
    res = {
        "symmetric": bool(asym == 0.0),
        "min_rayleigh": float((quad / norm2).min()),
        "psd": bool(np.all(quad >= -1e-12 * norm2)),
    }
    if op.tag == "neumann":
        flux = np.abs(np.ones(op.n) @ (op.A @ F))
        res["conservative"] = bool(np.all(flux <= 1e-10 * a_norm * np.sqrt(norm2)))
    return res


def write_operator(op: Operator, path: str | Path) -> tuple[Path, Path]:
    """Dump ``A`` as ``row col value`` lines plus a mass-vector file."""
    path = Path(path)
    coo = op.A.tocoo()
    order = np.lexsort((coo.col, coo.row))
    with open(path, "w") as fh:
        fh.write(f"# {op.tag} {op.n} {coo.nnz}\n")
        for r, c, v in zip(coo.row[order], coo.col[order], coo.data[order]):
            fh.write(f"{r} {c} {v:.17g}\n")
    mpath = path.with_suffix(path.suffix + ".mass")
    np.savetxt(mpath, op.M, fmt="%.17g")
    return path, mpath


# ---------------------------------------------------------------------------
# Sobolev constant


@dataclass(frozen=True)
class SobolevEstimate:
    S: float
    p: float
    converged: bool
    iterations: int
    restarts: int
    constant_ratio: float
    argmax: np.ndarray = field(repr=False)


def _ratio(f, M, B, p):
    lp = np.sum(M * np.abs(f) ** p) ** (1.0 / p)
    h1 = np.sqrt(f @ (B @ f))
    return lp / h1


def sobolev_constant(op: Operator, p: float, iters: int = 2000, seed: int = 0,
                     restarts: int = 20, rtol: float = 1e-9) -> SobolevEstimate:
    """Lower bound on the discrete best constant in ``|f|_p <= S |f|_H1``.

    ``|f|_H1^2 = 2 f'Af + f'Mf``.  Each restart runs the fixed-point ascent
    ``f <- B^{-1}(M |f|^{p-2} f)`` with ``B = 2A + M``, which increases
    ``|f|_p`` on the unit ``B``-sphere monotonically.  Starting points are
    the constant function and localized bumps at random cells.
    """
    if not p > 2:
        raise OperatorError(f"Sobolev exponent must exceed 2, got {p}")
    if op.tag != "neumann":
        raise OperatorError("sobolev_constant needs a Neumann operator")
    M = op.M
    B = (2.0 * op.A + sp.diags(M)).tocsc()
    lu = splu(B)
    rng = np.random.default_rng(seed)
    centers = op.grid.centers[op.cells]
    h = op.grid.h

    starts = [np.ones(op.n)]
    picks = rng.choice(op.n, size=max(restarts - 1, 0), replace=op.n < restarts)
    for k in picks:
        width = h * rng.uniform(2.0, 20.0)
        r2 = np.sum((centers - centers[k]) ** 2, axis=1)
        starts.append(np.exp(-r2 / (2.0 * width * width)))

    best, best_f, all_conv, total = -np.inf, None, True, 0
    const_ratio = _ratio(np.ones(op.n), M, B, p)
    for f in starts:
        f = f / np.sqrt(f @ (B @ f))
        r_old = _ratio(f, M, B, p)
        conv = False
        for it in range(iters):
            g = lu.solve(M * np.abs(f) ** (p - 2.0) * f)
            nrm = np.sqrt(g @ (B @ g))
            if not np.isfinite(nrm) or nrm == 0:
                break
            f = g / nrm
            r_new = _ratio(f, M, B, p)
            total += 1
            if r_new > best:
                best, best_f = r_new, f.copy()
            if abs(r_new - r_old) <= rtol * r_new:
                conv = True
                break
            r_old = r_new
        all_conv &= conv
    return SobolevEstimate(S=float(best), p=float(p), converged=bool(all_conv),
                           iterations=total, restarts=len(starts),
                           constant_ratio=float(const_ratio), argmax=np.abs(best_f))
