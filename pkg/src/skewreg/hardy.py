"""BMO seminorm, a grid Hardy norm, and div-curl / duality / Wente measurements.

The Hardy norm uses one radial bump ``φ₀(z) = c (1 − |z|²)³`` on the unit
disc with ``c`` chosen so that ``max |∇φ₀| = 1``, and dyadic scales
``t = 2^k h``.  This is equivalent to the grand maximal function up to a
fixed constant, which is all the measurements here need: every check
reports a ratio and its stability, never a sharp constant.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.signal import fftconvolve

from .elliptic import gradient, rotated_gradient, solve_poisson
from .grid import DiscGrid, Field, GridError, UNIT_DISC, cutoff_profile, pointwise_norm

__all__ = [
    "MaximalConfig", "bmo_seminorm", "hardy_norm", "maximal_function", "div_curl_hardy_check",
    "duality_check", "wente_check", "BatchReport", "WenteReport", "PHI0_CONSTANT", "lp_norm",
]

PHI0_CONSTANT = 25.0 * math.sqrt(5.0) / 96.0


def _disc_kernel(radius: float, h: float) -> np.ndarray:
    """Cell-fraction weights (in units of h²) of ``B_radius(0)`` on the node lattice."""
    k = int(math.ceil(radius / h + 1))
    off = np.arange(-k, k + 1) * h
    sub = (np.arange(4) + 0.5) / 4 - 0.5
    X, Y = np.meshgrid(off, off, indexing="ij")
    px = X[..., None, None] + sub[:, None] * h
    py = Y[..., None, None] + sub[None, :] * h
    K = (px * px + py * py < radius * radius).mean(axis=(-1, -2))
    return K


def _flat_values(f: Field) -> np.ndarray:
    return f.values.reshape(f.grid.shape + (-1,))


def bmo_seminorm(f: Field, max_radius: float, mode: str = "disc", min_radius: float | None = None,
                 return_argmax: bool = False):
    """``sup`` over node-centred discs of ``⨍_B |f − f_B|``.

    Radii are ``max_radius / 2^k`` down to twice the grid spacing.  In
    ``"disc"`` mode only discs inside the closed unit disc are sampled; in
    ``"plane"`` mode ``f`` is extended by zero outside ``D²`` and every disc
    centred at a (padded) node is sampled.
    """
    g = f.grid
    h = g.h
    if not max_radius > h:
        raise GridError(f"max_radius must exceed the grid spacing {h:g}")
    lo = 2 * h if min_radius is None else max(min_radius, 2 * h)
    v = _flat_values(f)
    radii = []
    r = float(max_radius)
    while r >= lo - 1e-12:
        radii.append(r)
        r /= 2
    if not radii:
        radii = [float(max_radius)]
    if mode == "plane":
        v = np.where(g.interior[..., None], v, 0.0)
    elif mode != "disc":
        raise GridError(f"unknown BMO mode {mode!r}")
    best, arg = 0.0, None
    for r in radii:
        K = _disc_kernel(r, h)
        k = (K.shape[0] - 1) // 2
        pad = k if mode == "plane" else 0
        vp = np.pad(v, [(k + pad, k + pad), (k + pad, k + pad), (0, 0)])
        nc = g.resolution + 2 * pad
        tot = K.sum()
        mean = np.zeros((nc, nc, v.shape[-1]))
        nz = np.argwhere(K > 0)
        for di, dj in nz:
            mean += K[di, dj] * vp[di:di + nc, dj:dj + nc]
        mean /= tot
        osc = np.zeros((nc, nc))
        for di, dj in nz:
            osc += K[di, dj] * np.sqrt(((vp[di:di + nc, dj:dj + nc] - mean) ** 2).sum(-1))
        osc /= tot
        if mode == "disc":
            valid = g.R + r <= 1.0 + 1e-12
        else:
            valid = np.ones((nc, nc), bool)
        if valid.any():
            val = float(osc[valid].max())
            if val > best:
                best = val
                idx = np.argwhere(valid & (osc == val))[0]
                arg = (idx, r)
    return (best, arg) if return_argmax else best


@dataclass
class MaximalConfig:
    """Bump profile, dyadic scale set and padded evaluation window."""

    h: float
    margin: float = 1.0
    scales: tuple = ()
    profile: str = "bump3"

    def __post_init__(self):
        if not self.scales:
            width = 2.0 + 2.0 * self.margin
            kmax = int(math.floor(math.log2(width / self.h)))
            self.scales = tuple(2.0**k * self.h for k in range(1, kmax + 1))
        if len(self.scales) == 0:
            raise GridError("MaximalConfig: scale set is empty")
        s = np.asarray(self.scales, dtype=float)
        if np.any(s <= 0) or np.any(np.diff(s) <= 0):
            raise GridError("MaximalConfig: scales must be positive and increasing")
        if self.profile != "bump3":
            raise GridError(f"unknown mollifier profile {self.profile!r}")

    @classmethod
    def for_grid(cls, grid: DiscGrid, margin: float = 1.0, scales=()) -> "MaximalConfig":
        return cls(grid.h, margin, tuple(scales))

    def pad_nodes(self) -> int:
        return int(round(self.margin / self.h))


def _bump(t: float, h: float) -> np.ndarray:
    k = int(math.floor(t / h))
    off = np.arange(-k, k + 1) * h
    X, Y = np.meshgrid(off, off, indexing="ij")
    z2 = (X * X + Y * Y) / (t * t)
    return np.where(z2 < 1.0, PHI0_CONSTANT * (1.0 - z2) ** 3, 0.0) * (h * h / (t * t))


def maximal_function(f: Field, cfg: MaximalConfig, interior_only: bool = True) -> np.ndarray:
    """``f*(x) = max_t |φ_t * f|(x)`` on the padded window (zero extension)."""
    g = f.grid
    if abs(cfg.h - g.h) > 1e-12:
        raise GridError("MaximalConfig spacing does not match the field grid")
    v = _flat_values(f)
    if interior_only:
        v = np.where(g.interior[..., None], v, 0.0)
    p = cfg.pad_nodes()
    vp = np.pad(v, [(p, p), (p, p), (0, 0)])
    best = np.zeros(vp.shape[:2])
    for t in cfg.scales:
        K = _bump(t, g.h)
        acc = np.zeros(vp.shape[:2])
        for c in range(vp.shape[-1]):
            acc += fftconvolve(vp[..., c], K, mode="same") ** 2
        best = np.maximum(best, np.sqrt(acc))
    return best


def hardy_norm(f: Field, cfg: MaximalConfig) -> float:
    """``‖f*‖_{L¹}`` over the evaluation window."""
    if len(cfg.scales) == 0:
        raise GridError("scale set is empty")
    fs = maximal_function(f, cfg)
    return float(fs.sum() * f.grid.h**2)


def lp_norm(values: np.ndarray, grid: DiscGrid, p: float) -> float:
    a = pointwise_norm(values)
    if math.isinf(p):
        return float(a[grid.interior].max())
    return float((grid.weights * a**p).sum() ** (1.0 / p))


# ---------------------------------------------------------------------------
# Measurements


@dataclass
class BatchReport:
    ratios: list = field(default_factory=list)
    notes: list = field(default_factory=list)

    @property
    def max_ratio(self) -> float:
        vals = [r for r in self.ratios if r is not None and np.isfinite(r)]
        return max(vals) if vals else 0.0

    def rows(self):
        return [(i, r, n) for i, (r, n) in enumerate(zip(self.ratios, self.notes))]


def _window(grid: DiscGrid) -> np.ndarray:
    """Smooth window equal to 1 on ``B_{2/3}`` and vanishing for ``|x| ≥ 1``."""
    return cutoff_profile(grid.R, 2.0 / 3.0)


def _windowed(a: Field) -> Field:
    g = a.grid
    w = g.weights
    mean = float((w * a.values[..., 0, 0, 0]).sum() / w.sum())
    return Field.scalar(g, _window(g) * (a.values[..., 0, 0, 0] - mean))


def div_curl_product(a: Field, b: Field) -> Field:
    ga = gradient(a).values[..., 0, 0, :]
    gb = rotated_gradient(b).values[..., 0, 0, :]
    return Field.scalar(a.grid, (ga * gb).sum(-1))


def div_curl_hardy_check(pairs, cfg: MaximalConfig) -> BatchReport:
    """Ratios ``‖∇a·∇⊥b‖_𝓗 / (‖∇a‖_{L²}‖∇b‖_{L²})`` after mean-subtracted windowing."""
    rep = BatchReport()
    for a, b in pairs:
        aw, bw = _windowed(a), _windowed(b)
        na = lp_norm(gradient(aw).values, a.grid, 2)
        nb = lp_norm(gradient(bw).values, a.grid, 2)
        if na == 0.0 or nb == 0.0:
            rep.ratios.append(0.0)
            rep.notes.append("degenerate")
            continue
        prod = div_curl_product(aw, bw)
        hn = hardy_norm(prod, cfg)
        rep.ratios.append(hn / (na * nb))
        rep.notes.append("ok")
    return rep


def duality_check(pairs, cfg: MaximalConfig, bmo_radius: float = 0.5, tiny: float = 1e-12) -> BatchReport:
    """Ratios ``|∫fg| / ([f]_BMO ‖g‖_𝓗)``; degenerate denominators are skipped."""
    rep = BatchReport()
    for f, g in pairs:
        grid = f.grid
        integral = float((grid.weights * f.values[..., 0, 0, 0] * g.values[..., 0, 0, 0]).sum())
        bmo = bmo_seminorm(f, bmo_radius)
        hn = hardy_norm(g, cfg)
        if bmo <= tiny or hn <= tiny:
            rep.ratios.append(None)
            rep.notes.append(f"skipped-degenerate (|∫fg| = {abs(integral):.2e})")
            continue
        rep.ratios.append(abs(integral) / (bmo * hn))
        rep.notes.append("ok")
    return rep


@dataclass
class WenteReport:
    ratio: float
    grad_u: float
    grad_a: float
    grad_b: float
    p: float
    u: Field | None = None


def wente_check(a: Field, b: Field, p: float = 2.0, keep_solution: bool = False) -> WenteReport:
    """Solve ``−Δu = ∇a·∇⊥b``, ``u = 0`` on ``∂D²``; report ``‖∇u‖_p / (‖∇a‖_2 ‖∇b‖_p)``."""
    if not 1.0 < p < math.inf:
        raise GridError(f"p must lie in (1, ∞), got {p}")
    grid = a.grid
    rhs = div_curl_product(a, b)
    u = solve_poisson(rhs, None, UNIT_DISC)
    gu = lp_norm(gradient(u).values, grid, p)
    ga = lp_norm(gradient(a).values, grid, 2)
    gb = lp_norm(gradient(b).values, grid, p)
    ratio = 0.0 if ga == 0.0 or gb == 0.0 else gu / (ga * gb)
    return WenteReport(ratio, gu, ga, gb, p, u if keep_solution else None)
