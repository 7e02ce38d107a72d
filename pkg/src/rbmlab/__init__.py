"""Numerical lab for reflecting Brownian motion on planar Lipschitz domains."""
from __future__ import annotations

__version__ = "0.1.0"
