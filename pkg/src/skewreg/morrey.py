"""Morrey-type decay quantities, Dirichlet growth and boundary continuity probes.

``J_p(a, r; u) = r^{p−2} ∫_{B_r(a) ∩ D²} |∇u|^p`` and ``𝓜_p(a, r)`` is its
supremum over sub-discs ``B_ϱ(z)`` with ``z ∈ B_r(a)``, ``ϱ ≤ r − |a − z|``.
The sup is taken over one fixed global sample set (interior nodes as
centres, a geometric radius ladder), so ``𝓜_p(a, ·)`` is monotone.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.signal import fftconvolve
from scipy.spatial.distance import pdist
from scipy import ndimage

from .elliptic import gradient
from .grid import Disc, DiscGrid, Field, GridError, cutoff, mean_value, pointwise_norm, _clipped_fraction
from .hardy import bmo_seminorm

__all__ = [
    "j_p", "m_p", "radius_ladder", "smallness_radius", "SmallnessReport", "decay_fit",
    "MorreyReport", "decay_parameters", "v_rho_bmo_check", "VRhoReport",
    "modulus_of_continuity", "ContinuityReport", "boundary_probe", "BoundaryProbeReport",
    "annulus_energy",
]


def _grad_power(u: Field, p: float) -> np.ndarray:
    return pointwise_norm(gradient(u).values) ** p


def j_p(u: Field, a, r: float, p: float, _gp: np.ndarray | None = None) -> float:
    """``r^{p−2} ∫_{B_r(a) ∩ D²} |∇u|^p``."""
    if not 1.0 < p <= 2.0:
        raise GridError(f"p must lie in (1, 2], got {p}")
    g = u.grid
    d = Disc(tuple(a), r)
    if np.count_nonzero(g.members(d)) < 5:
        raise GridError(f"disc unresolved: B_{r:g}({a[0]:g}, {a[1]:g})")
    w = g.disc_weights(d)
    gp = _grad_power(u, p) if _gp is None else _gp
    return float(r ** (p - 2) * (w * gp).sum())


def radius_ladder(h: float, density: int = 2, rmax: float = 2.0) -> np.ndarray:
    """Global geometric ladder ``2^{−j/density}`` (descending), resolved radii only."""
    out = []
    j = 0
    while True:
        r = 2.0 ** (-j / density)
        if r < h - 1e-12:
            break
        if r <= rmax:
            out.append(r)
        j += 1
    return np.array(out)


class _JMaps:
    """``J_p(z, ϱ)`` at every node for ladder radii, computed by FFT correlation."""

    def __init__(self, u: Field, p: float):
        self.u, self.p = u, p
        g = u.grid
        self.gp = _grad_power(u, p)
        self.dens = g.weights / g.h**2 * self.gp     # |∇u|^p times D² cell fraction
        self.maps: dict[float, np.ndarray] = {}

    def get(self, rho: float) -> np.ndarray:
        m = self.maps.get(rho)
        if m is None:
            g = self.u.grid
            h = g.h
            k = int(math.ceil(rho / h + 1))
            off = np.arange(-k, k + 1) * h
            X, Y = np.meshgrid(off, off, indexing="ij")
            K = _clipped_fraction(X, Y, h, (0.0, 0.0), rho)
            m = fftconvolve(self.dens, K[::-1, ::-1], mode="same") * h * h * rho ** (self.p - 2)
            m = np.maximum(m, 0.0)
            self.maps[rho] = m
        return m


_MAP_CACHE: dict = {}


def _maps_for(u: Field, p: float) -> _JMaps:
    key = (id(u), p)
    hit = _MAP_CACHE.get(key)
    if hit is None or hit[0] is not u:
        if len(_MAP_CACHE) > 8:
            _MAP_CACHE.clear()
        hit = (u, _JMaps(u, p))
        _MAP_CACHE[key] = hit
    return hit[1]


def m_p(u: Field, a, r: float, p: float, sample_density: int = 2) -> float:
    """``max J_p(z, ϱ)`` over interior nodes ``z`` (and ``a``) with ``ϱ ≤ r − |a − z|``.

    ``ϱ`` runs over the global ladder ``2^{−j/sample_density}``.
    """
    g = u.grid
    maps = _maps_for(u, p)
    a = (float(a[0]), float(a[1]))
    dist = np.hypot(g.X - a[0], g.Y - a[1])
    best = 0.0
    for rho in radius_ladder(g.h, sample_density, rmax=r + 1e-12):
        ok = g.interior & (dist <= r - rho + 1e-12)
        if ok.any():
            best = max(best, float(maps.get(rho)[ok].max()))
        try:
            best = max(best, j_p(u, a, rho, p, maps.gp))
        except GridError:
            pass
    return best


# ---------------------------------------------------------------------------
# Smallness radius


@dataclass
class SmallnessReport:
    R0: float
    passed: bool
    worst_norm: float
    scanned: list


def smallness_radius(Omega: Field, delta: float, C: float = 1.0, min_radius: float | None = None) -> SmallnessReport:
    """Largest dyadic ``R₀ ≤ 1`` with ``(1 + C) ‖Ω‖_{L²(B_{2R₀}(a) ∩ D²)} ≤ δ`` at every node ``a``."""
    if not delta > 0:
        raise GridError("δ must be positive")
    g = Omega.grid
    h = g.h
    dens = g.weights / h**2 * pointwise_norm(Omega.values) ** 2
    lo = 2 * h if min_radius is None else min_radius
    R = 1.0
    scanned = []
    worst = math.inf
    while R >= lo / 2 - 1e-12:
        rr = 2 * R
        k = int(math.ceil(rr / h + 1))
        off = np.arange(-k, k + 1) * h
        X, Y = np.meshgrid(off, off, indexing="ij")
        K = _clipped_fraction(X, Y, h, (0.0, 0.0), rr)
        pad = k
        dp = np.pad(dens, pad)
        loc = fftconvolve(dp, K[::-1, ::-1], mode="same")[pad:-pad, pad:-pad] * h * h
        worst = float(math.sqrt(max(loc[g.interior].max(), 0.0)))
        scanned.append((R, worst))
        if (1 + C) * worst <= delta:
            return SmallnessReport(R, True, worst, scanned)
        R /= 2
    return SmallnessReport(scanned[-1][0], False, worst, scanned)


# ---------------------------------------------------------------------------
# Decay fit


def decay_parameters(p: float, s: float, gamma: float) -> dict:
    """``l = 2p(1 − 1/s)``, ``γ̃ = γ/2``, ``θ`` with ``γ̃^θ = ½`` and ``μ = θ l``."""
    l = 2 * p * (1 - 1 / s)
    gt = gamma / 2
    theta = math.log(0.5) / math.log(gt)
    return {"l": l, "gamma": gamma, "gamma_tilde": gt, "theta": theta, "mu_theory": theta * l}


@dataclass
class CenterFit:
    center: tuple
    radii: list
    J: list
    M: list
    mu: float
    r2: float
    j_exponent: float
    j_r2: float
    constant: float
    accepted: bool
    note: str = ""


@dataclass
class MorreyReport:
    p: float
    s: float
    fits: list = field(default_factory=list)
    params: dict = field(default_factory=dict)
    e_norm: float = 0.0

    @property
    def mu(self) -> float:
        vals = [f.mu for f in self.fits if f.accepted]
        return min(vals) if vals else float("nan")

    @property
    def samples(self):
        for f in self.fits:
            for r, J, M in zip(f.radii, f.J, f.M):
                yield f.center, r, J, M

    @property
    def degenerate(self) -> bool:
        return all(f.note == "skipped-degenerate" for f in self.fits)


def _fit(logr, logy):
    A = np.stack([np.ones_like(logr), logr], 1)
    coef, *_ = np.linalg.lstsq(A, logy, rcond=None)
    pred = A @ coef
    ss = ((logy - logy.mean()) ** 2).sum()
    r2 = 1.0 - ((logy - pred) ** 2).sum() / ss if ss > 0 else 1.0
    return float(coef[1]), float(r2)


def decay_fit(u: Field, e: Field | None, p: float = 1.5, s: float = 1.25, centers=((0.0, 0.0),),
              radii=(0.25, 0.125, 0.0625, 0.03125), gamma: float = 0.25, sample_density: int = 2,
              min_r2: float = 0.9) -> MorreyReport:
    """Log-log least squares of ``𝓜_p(x₀, r)`` (and ``J_p``) against ``r`` per centre."""
    radii = sorted((float(r) for r in radii), reverse=True)
    if len(radii) < 3:
        raise GridError("decay_fit needs at least 3 radii")
    if not 1.0 < p < 2.0:
        raise GridError(f"p must lie in (1, 2), got {p}")
    if not 1.0 < s:
        raise GridError(f"s must exceed 1, got {s}")
    g = u.grid
    ladder = radius_ladder(g.h, sample_density)
    if radii[-1] < ladder[-1] - 1e-12:
        raise GridError(f"radius {radii[-1]:g} is below the resolved ladder minimum {ladder[-1]:g}")
    e_norm = 0.0
    if e is not None:
        a = pointwise_norm(e.values)
        e_norm = float((g.weights * a**s).sum() ** (1 / s))
    rep = MorreyReport(p, s, params=decay_parameters(p, s, gamma), e_norm=e_norm)
    gp = _grad_power(u, p)
    for c in centers:
        c = (float(c[0]), float(c[1]))
        J = [j_p(u, c, r, p, gp) for r in radii]
        M = [m_p(u, c, r, p, sample_density) for r in radii]
        if max(M) <= 1e-300:
            rep.fits.append(CenterFit(c, radii, J, M, float("nan"), float("nan"), float("nan"),
                                      float("nan"), float("nan"), False, "skipped-degenerate"))
            continue
        lr = np.log(radii)
        mu, r2 = _fit(lr, np.log(np.maximum(M, 1e-300)))
        je, jr2 = _fit(lr, np.log(np.maximum(J, 1e-300)))
        R = radii[0]
        base = M[0] + e_norm**p
        const = max(Mr / (base * (r / R) ** mu) for r, Mr in zip(radii, M)) if mu > 0 else float("inf")
        ok = len(radii) >= 4 and r2 >= min_r2 and mu > 0
        note = "" if ok else ("too few radii" if len(radii) < 4 else "fit rejected")
        rep.fits.append(CenterFit(c, radii, J, M, mu, r2, je, jr2, const, ok, note))
    return rep


# ---------------------------------------------------------------------------
# v_ϱ BMO comparison


@dataclass
class VRhoReport:
    bmo: float
    morrey: float
    ratio: float | None
    note: str = "ok"


def v_rho_bmo_check(u: Field, x1, rho: float, p: float = 1.5, sample_density: int = 2,
                    bmo_radius: float | None = None) -> VRhoReport:
    """``[η(u − (u)_{x₁,ϱ})]_BMO / 𝓜_p(x₁, 2ϱ; u)^{1/p}``."""
    g = u.grid
    d = Disc(tuple(x1), rho)
    if math.hypot(*d.center) + 2 * rho > 1.0 + 1e-12:
        raise GridError("v_rho_bmo_check needs B_{2ϱ}(x₁) inside the unit disc")
    eta = cutoff(g, d).values[..., 0, 0, 0]
    avg = np.asarray(mean_value(u, d), dtype=float).reshape(-1)
    v = eta[..., None] * (u.flat() - avg)
    vf = Field(g, v.reshape(u.values.shape))
    bmo = bmo_seminorm(vf, bmo_radius or 2 * rho, mode="plane")
    M = m_p(u, d.center, 2 * rho, p, sample_density)
    if M <= 1e-300:
        return VRhoReport(bmo, M, None, "skipped-degenerate")
    return VRhoReport(bmo, M, bmo / M ** (1 / p))


# ---------------------------------------------------------------------------
# Dirichlet growth / modulus of continuity


@dataclass
class ContinuityReport:
    oscillation: float
    grad_l2: float
    e_ls: float
    rhs_plain: float
    rhs_root: float
    ratio_plain: float
    ratio_root: float
    sweep: list = field(default_factory=list)

    @property
    def sweep_decreasing(self) -> bool:
        vals = [o for _, o in self.sweep]
        return all(b <= a + 1e-12 for a, b in zip(vals, vals[1:]))


def _oscillation(u: Field, a, radius: float) -> float:
    g = u.grid
    sel = (np.hypot(g.X - a[0], g.Y - a[1]) <= radius * (1 + 1e-12)) & g.interior
    vals = u.flat()[sel]
    if len(vals) < 2:
        return 0.0
    return float(pdist(vals).max())


def modulus_of_continuity(u: Field, e: Field | None, a, rho: float, p: float, mu_fitted: float,
                          C: float = 1.0, s: float = 1.25, sweep=None) -> ContinuityReport:
    """Oscillation of ``u`` over ``B_{ϱ/2}(a)`` against the Dirichlet-growth bound.

    Both right-hand sides are reported: ``C(p/μ)(‖∇u‖_{L²} + ‖e‖_{Lˢ})`` and
    the same quantity raised to ``1/p``.
    """
    if not mu_fitted > 0:
        raise GridError("μ must be positive")
    g = u.grid
    d = Disc(tuple(a), rho)
    w = g.disc_weights(d)
    gl2 = float(math.sqrt((w * pointwise_norm(gradient(u).values) ** 2).sum()))
    els = 0.0
    if e is not None:
        els = float((w * pointwise_norm(e.values) ** s).sum() ** (1 / s))
    osc = _oscillation(u, d.center, rho / 2)
    base = gl2 + els
    plain = C * (p / mu_fitted) * base
    root = C * (p / mu_fitted) * base ** (1 / p)
    radii = sweep if sweep is not None else [rho / 2**k for k in range(5) if rho / 2**k >= 2 * g.h]
    sw = [(r, _oscillation(u, d.center, r / 2)) for r in radii]
    return ContinuityReport(osc, gl2, els, plain, root,
                            osc / plain if plain > 0 else 0.0, osc / root if root > 0 else 0.0, sw)


# ---------------------------------------------------------------------------
# Boundary probe


@dataclass
class BoundaryProbeReport:
    delta: float
    sigma: float
    theta1: float
    theta_good: float
    annulus_energy: float
    radial_energy: float
    threshold: float
    gap: float
    bound: float
    candidates: int

    @property
    def good_angle_ok(self) -> bool:
        return self.radial_energy <= self.threshold

    @property
    def gap_ok(self) -> bool:
        return self.gap <= self.bound


def annulus_energy(u: Field, delta: float) -> float:
    """``∫_{1−δ ≤ |x| ≤ 1} |∇u|²`` with interior quadrature."""
    g = u.grid
    sel = g.R >= 1 - delta
    return float((g.weights * sel * pointwise_norm(gradient(u).values) ** 2).sum())


def _filled(u: Field) -> np.ndarray:
    """Nodal values with exterior nodes replaced by the nearest interior/boundary value."""
    g = u.grid
    v = u.flat()
    have = g.interior | g.boundary
    _, (ni, nj) = ndimage.distance_transform_edt(~have, return_indices=True)
    return v[ni, nj]


def _bilinear(grid: DiscGrid, vals: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    h = grid.h
    n = grid.resolution
    fx = (x + 1.0) / h
    fy = (y + 1.0) / h
    i = np.clip(np.floor(fx).astype(int), 0, n - 2)
    j = np.clip(np.floor(fy).astype(int), 0, n - 2)
    tx = (fx - i)[..., None]
    ty = (fy - j)[..., None]
    return ((1 - tx) * (1 - ty) * vals[i, j] + tx * (1 - ty) * vals[i + 1, j]
            + (1 - tx) * ty * vals[i, j + 1] + tx * ty * vals[i + 1, j + 1])


def _psi_at(psi, grid: DiscGrid, theta: np.ndarray) -> np.ndarray:
    if callable(psi):
        out = np.asarray(psi(theta), dtype=float)
        return out.reshape(len(theta), -1)
    from .elliptic import _periodic_interp
    arr = np.asarray(psi, dtype=float)
    bi, bj = grid.boundary_indices()
    arr = arr.reshape(len(bi), -1)
    return _periodic_interp(grid.theta[bi, bj], arr, theta)


def boundary_probe(u: Field, psi, theta1: float, delta: float, max_refine: int = 6) -> BoundaryProbeReport:
    """Good-angle selection near ``x₁ = (1 − δ)e^{iθ₁}``.

    Candidate angles are the boundary-node angles in ``(θ₁, θ₁ + δ/4)``;
    when none of them is good the window is subdivided uniformly (up to
    ``max_refine`` doublings).  The radial slice is the piecewise-linear
    interpolant of bilinear samples of ``u`` on ``[1 − δ, 1)`` closed by
    ``ψ(θ̃)`` at radius 1, so ``|u(x′) − ψ(y′)| ≤ √δ · √E`` holds exactly.
    """
    if not 0 < delta < 1:
        raise GridError("δ must lie in (0, 1)")
    g = u.grid
    sigma = delta / 4
    I = annulus_energy(u, delta)
    thresh = I / (sigma * (1 - delta))
    vals = _filled(u)
    nr = max(int(math.ceil(2 * delta / g.h)), 4)
    radii = np.concatenate([np.linspace(1 - delta, 1.0, nr + 1)[:-1], [1.0]])
    dr = np.diff(radii)

    def energy(th):
        x = np.cos(th)[:, None] * radii[None, :-1]
        y = np.sin(th)[:, None] * radii[None, :-1]
        inner = _bilinear(g, vals, x, y)                       # (k, nr, m)
        outer = _psi_at(psi, g, th)[:, None, :]
        v = np.concatenate([inner, outer], axis=1)
        dv = np.diff(v, axis=1)
        E = ((dv**2).sum(-1) / dr[None, :]).sum(-1)
        return E, v[:, 0], v[:, -1]

    bth = g.theta[g.boundary]
    rel = np.mod(bth - theta1, 2 * np.pi)
    cands = np.sort(theta1 + rel[(rel > 0) & (rel < sigma)])
    tried = 0
    for level in range(max_refine + 1):
        if level > 0 or len(cands) == 0:
            k = 4 * 2**level
            cands = theta1 + sigma * (np.arange(1, k) / k)
        if len(cands) == 0:
            continue
        E, inner0, outer = energy(cands)
        tried += len(cands)
        good = np.nonzero(E <= thresh)[0]
        if len(good):
            k = good[np.argmin(E[good])]
            th = float(cands[k])
            gap = float(np.linalg.norm(inner0[k] - outer[k]))
            bound = 2.0 * math.sqrt(I / (1 - delta))
            return BoundaryProbeReport(delta, sigma, theta1, th, I, float(E[k]), thresh, gap, bound, tried)
    raise GridError(f"boundary_probe: no good angle in ({theta1:g}, {theta1 + sigma:g}) after refinement")
