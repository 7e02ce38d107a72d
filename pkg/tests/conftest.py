from __future__ import annotations

import numpy as np
import pytest

from rbmlab.geometry import build_domain

ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def record(criterion: int, ok: bool, detail: str) -> None:
    """Store one acceptance verdict; printed in the terminal summary."""
    ACCEPTANCE[criterion] = (bool(ok), detail)
    print(f"criterion {criterion:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


def rect_kernel_1d(t, x, y, L, n_terms=400):
    """Neumann heat kernel of (1/2) d^2/dx^2 on [0, L] by its cosine series."""
    k = np.arange(1, n_terms + 1)
    lam = 0.5 * (k * np.pi / L) ** 2
    terms = np.cos(np.multiply.outer(x, k) * np.pi / L) * np.cos(np.multiply.outer(y, k) * np.pi / L)
    return (1.0 + 2.0 * np.sum(terms * np.exp(-np.multiply.outer(t, lam)), axis=-1)) / L


def rect_kernel(t, x, y, W=1.0, H=1.0):
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    return rect_kernel_1d(t, x[..., 0], y[..., 0], W) * rect_kernel_1d(t, x[..., 1], y[..., 1], H)


@pytest.fixture(scope="session")
def square():
    return build_domain({"kind": "rectangle", "params": {"width": 1, "height": 1}, "name": "square"})


@pytest.fixture(scope="session")
def lshape():
    return build_domain({"kind": "polygon", "name": "lshape", "params": {
        "vertices": [[0, 0], [1, 0], [1, 0.5], [0.5, 0.5], [0.5, 1], [0, 1]]}})
