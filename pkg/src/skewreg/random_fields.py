"""Seeded band-limited random inputs (truncated Fourier series)."""

from __future__ import annotations

import numpy as np

from .grid import DiscGrid, Field


def band_limited(grid: DiscGrid, rng: np.random.Generator, modes: int = 4, decay: float = 2.0,
                 components: int = 1) -> np.ndarray:
    """Sum of ``cos/sin(π(k₁x + k₂y))`` with normal coefficients ``~ (1 + |k|)^{-decay}``.

    Returns an array of shape (n, n) or (n, n, components).
    """
    X, Y = grid.X, grid.Y
    out = np.zeros(grid.shape + (components,))
    for c in range(components):
        for k1 in range(-modes, modes + 1):
            for k2 in range(0, modes + 1):
                if k2 == 0 and k1 <= 0:
                    continue
                a, b = rng.normal(size=2) / (1.0 + np.hypot(k1, k2)) ** decay
                ph = np.pi * (k1 * X + k2 * Y) / 2.0
                out[..., c] += a * np.cos(ph) + b * np.sin(ph)
    return out[..., 0] if components == 1 else out


def band_limited_field(grid: DiscGrid, seed: int, modes: int = 4, decay: float = 2.0) -> Field:
    return Field.scalar(grid, band_limited(grid, np.random.default_rng(seed), modes, decay))
