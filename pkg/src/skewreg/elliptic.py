"""Finite-difference calculus on the disc grid.

The Dirichlet problem uses the Shortley-Weller five point stencil: when an
axis neighbour of an unknown node lies outside the working disc the stencil
arm is shortened to the point where the axis line crosses the circle, and the
boundary datum is imposed there.  The resulting matrix is not symmetric, so
it is factorised with SuperLU.

The Hodge split is computed in weak form with the zero-extended central
difference gradient ``G``.  Its normal matrix ``G^T G`` is the wide (2h)
Laplacian, and the harmonic remainder then has exactly vanishing discrete
divergence and curl at every unknown node.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .grid import Disc, DiscGrid, Field, GridError, UNIT_DISC, pointwise_norm

__all__ = [
    "SolverFailure", "WorkingDomain", "working_domain", "gradient", "rotated_gradient",
    "divergence", "curl", "solve_poisson", "HodgeTriple", "hodge_decompose",
    "harmonic_residual", "harmonic_decay_check", "wide_laplacian", "HarmonicDecayReport",
]


class SolverFailure(RuntimeError):
    def __init__(self, message, residual=float("nan")):
        super().__init__(f"solver failure: {message} (residual {residual:.3e})")
        self.residual = residual


# ---------------------------------------------------------------------------
# Pointwise differences


def _axis_diff(a: np.ndarray, axis: int, mask: np.ndarray, h: float) -> np.ndarray:
    """Derivative along ``axis`` of node data ``a`` (n, n, ...) using only ``mask`` nodes.

    Central where both neighbours are in the mask, second order one-sided
    where two nodes on one side are, first order one-sided otherwise.  Nodes
    outside the mask get zero.
    """
    n = a.shape[0]
    extra = a.ndim - 2
    m = np.pad(mask, 2, constant_values=False)
    ap = np.pad(a, [(2, 2), (2, 2)] + [(0, 0)] * extra)

    def sh(arr, k):
        sl = [slice(2, n + 2), slice(2, n + 2)]
        sl[axis] = slice(2 + k, n + 2 + k)
        return arr[tuple(sl)]

    mp1, mm1, mp2, mm2 = sh(m, 1), sh(m, -1), sh(m, 2), sh(m, -2)
    u0, up1, um1, up2, um2 = a, sh(ap, 1), sh(ap, -1), sh(ap, 2), sh(ap, -2)
    central = (up1 - um1) / (2 * h)
    fwd2 = (-3 * u0 + 4 * up1 - up2) / (2 * h)
    bwd2 = (3 * u0 - 4 * um1 + um2) / (2 * h)
    fwd1 = (up1 - u0) / h
    bwd1 = (u0 - um1) / h

    def b(c):
        return c.reshape(c.shape + (1,) * extra)

    out = np.zeros_like(a, dtype=float)
    done = np.zeros(mask.shape, dtype=bool)
    for cond, val in (
        (mp1 & mm1, central),
        (mp1 & mp2, fwd2),
        (mm1 & mm2, bwd2),
        (mp1, fwd1),
        (mm1, bwd1),
    ):
        sel = mask & cond & ~done
        out = np.where(b(sel), val, out)
        done |= sel
    return out


def _partials(u: Field):
    r, c, s = u.arity
    if s != 1:
        raise GridError(f"operator needs a field with one spatial slot, got arity {u.arity}")
    g = u.grid
    v = u.values[..., 0]
    return (_axis_diff(v, 0, g.interior, g.h), _axis_diff(v, 1, g.interior, g.h))


def gradient(u: Field) -> Field:
    """``∇u``: arity (r, c, 1) becomes (r, c, 2)."""
    d1, d2 = _partials(u)
    return Field(u.grid, np.stack([d1, d2], axis=-1))


def rotated_gradient(u: Field) -> Field:
    """``∇⊥u = (-∂₂u, ∂₁u)``."""
    d1, d2 = _partials(u)
    tag = "skew" if u.tag == "skew" else "general"
    return Field(u.grid, np.stack([-d2, d1], axis=-1), tag)


def _split_vector(w: Field):
    r, c, s = w.arity
    if s != 2:
        raise GridError(f"operator needs a field with two spatial slots, got arity {w.arity}")
    g = w.grid
    w1, w2 = w.values[..., 0], w.values[..., 1]
    return g, w1, w2


def divergence(w: Field) -> Field:
    g, w1, w2 = _split_vector(w)
    out = _axis_diff(w1, 0, g.interior, g.h) + _axis_diff(w2, 1, g.interior, g.h)
    return Field(g, out[..., None])


def curl(w: Field) -> Field:
    """Scalar curl ``∂₁w₂ − ∂₂w₁``."""
    g, w1, w2 = _split_vector(w)
    out = _axis_diff(w2, 0, g.interior, g.h) - _axis_diff(w1, 1, g.interior, g.h)
    return Field(g, out[..., None])


# ---------------------------------------------------------------------------
# Shortley-Weller working domain


@dataclass
class _Arm:
    node: int          # unknown index
    axis: int          # 0 or 1
    sign: int          # +1 or -1
    frac: float        # arm length / h, in (0, 1]
    point: tuple       # crossing point (x1, x2)
    outside: tuple     # (i, j) of the grid node beyond the crossing


class WorkingDomain:
    """Unknown nodes of ``B_r(a) ∩ D²`` with Shortley-Weller stencils.

    ``lap`` and ``lap_b`` give ``Δu ≈ lap @ u + lap_b @ g`` where ``g`` holds
    the boundary data at the crossing points ``self.points``; ``d1, d1_b`` and
    ``d2, d2_b`` do the same for first derivatives.
    """

    def __init__(self, grid: DiscGrid, disc: Disc):
        if not disc.inside_unit_disc(tol=grid.h) and disc != UNIT_DISC:
            raise GridError("working disc must lie inside the unit disc")
        self.grid, self.disc = grid, disc
        a1, a2 = disc.center
        r = disc.radius
        rho = np.hypot(grid.X - a1, grid.Y - a2)
        mask = grid.interior & (rho < r)
        if disc == UNIT_DISC:
            mask = grid.interior.copy()
        self.mask = mask
        self.index = np.full(grid.shape, -1, dtype=np.int64)
        ii, jj = np.nonzero(mask)
        self.ii, self.jj = ii, jj
        self.N = len(ii)
        if self.N < 5:
            raise GridError("disc unresolved: working disc has fewer than 5 nodes")
        self.index[ii, jj] = np.arange(self.N)
        self._build()

    def _crossing(self, x, y, axis, sign):
        """Distance from (x, y) along the axis direction to the working circle."""
        a1, a2 = self.disc.center
        r = self.disc.radius
        px, py = x - a1, y - a2
        if axis == 0:
            t = -sign * px + math.sqrt(max(r * r - py * py, 0.0))
        else:
            t = -sign * py + math.sqrt(max(r * r - px * px, 0.0))
        return t

    def _build(self):
        g, h, n = self.grid, self.grid.h, self.grid.resolution
        arms: list[_Arm] = []
        # per node and axis, arm lengths and neighbour references
        lens = np.ones((self.N, 2, 2))       # [node, axis, side(0:-,1:+)] as fraction of h
        refs = np.zeros((self.N, 2, 2), dtype=np.int64)  # unknown idx or -(arm idx)-1
        for k in range(self.N):
            i, j = self.ii[k], self.jj[k]
            x, y = g.X[i, j], g.Y[i, j]
            for axis in (0, 1):
                for side, sign in ((0, -1), (1, 1)):
                    ni, nj = (i + sign, j) if axis == 0 else (i, j + sign)
                    if 0 <= ni < n and 0 <= nj < n and self.mask[ni, nj]:
                        refs[k, axis, side] = self.index[ni, nj]
                        continue
                    t = self._crossing(x, y, axis, sign)
                    frac = min(max(t / h, 1e-6), 1.0)
                    pt = (x + sign * frac * h, y) if axis == 0 else (x, y + sign * frac * h)
                    arms.append(_Arm(k, axis, sign, frac, pt, (ni, nj)))
                    lens[k, axis, side] = frac
                    refs[k, axis, side] = -len(arms)
        self.arms = arms
        self.points = np.array([a.point for a in arms]) if arms else np.zeros((0, 2))
        self.n_b = len(arms)
        self._lens, self._refs = lens, refs

        lap_i, lap_j, lap_v, lb_i, lb_j, lb_v = [], [], [], [], [], []
        d_parts = [([], [], [], [], [], []) for _ in range(2)]
        for k in range(self.N):
            for axis in (0, 1):
                hm, hp = lens[k, axis, 0] * h, lens[k, axis, 1] * h
                cm = 2.0 / (hm * (hm + hp))
                cp = 2.0 / (hp * (hm + hp))
                dm = -hp / (hm * (hm + hp))
                dp = hm / (hp * (hm + hp))
                d0 = (hp - hm) / (hm * hp)
                lap_i.append(k); lap_j.append(k); lap_v.append(-(cm + cp))
                di, dj, dv, dbi, dbj, dbv = d_parts[axis]
                di.append(k); dj.append(k); dv.append(d0)
                for side, c, dc in ((0, cm, dm), (1, cp, dp)):
                    ref = refs[k, axis, side]
                    if ref >= 0:
                        lap_i.append(k); lap_j.append(ref); lap_v.append(c)
                        di.append(k); dj.append(ref); dv.append(dc)
                    else:
                        lb_i.append(k); lb_j.append(-ref - 1); lb_v.append(c)
                        dbi.append(k); dbj.append(-ref - 1); dbv.append(dc)
        N, B = self.N, self.n_b
        self.lap = sp.csr_matrix((lap_v, (lap_i, lap_j)), shape=(N, N))
        self.lap_b = sp.csr_matrix((lb_v, (lb_i, lb_j)), shape=(N, B))
        self.d = []
        for axis in (0, 1):
            di, dj, dv, dbi, dbj, dbv = d_parts[axis]
            self.d.append((sp.csr_matrix((dv, (di, dj)), shape=(N, N)),
                           sp.csr_matrix((dbv, (dbi, dbj)), shape=(N, B))))

        # ring: grid nodes outside the working set adjacent to it
        m = self.mask
        near = np.zeros_like(m)
        near[1:, :] |= m[:-1, :]
        near[:-1, :] |= m[1:, :]
        near[:, 1:] |= m[:, :-1]
        near[:, :-1] |= m[:, 1:]
        self.ring = near & ~m

    # -- boundary data ------------------------------------------------------

    def angles(self, xy) -> np.ndarray:
        xy = np.asarray(xy, dtype=float).reshape(-1, 2)
        return np.arctan2(xy[:, 1] - self.disc.center[1], xy[:, 0] - self.disc.center[0])

    def boundary_values(self, boundary, ncomp: int):
        """Data at the crossing points and at the ring nodes, shape (·, ncomp)."""
        g = self.grid
        ri, rj = np.nonzero(self.ring)
        ring_xy = np.stack([g.X[ri, rj], g.Y[ri, rj]], axis=1)
        if boundary is None:
            return np.zeros((self.n_b, ncomp)), np.zeros((len(ri), ncomp))
        if isinstance(boundary, Field):
            if boundary.grid != g:
                raise GridError("boundary field lives on a different grid")
            vals = boundary.flat()
            if vals.shape[-1] != ncomp:
                raise GridError("boundary field arity does not match right-hand side")
            cross = np.empty((self.n_b, ncomp))
            for b, arm in enumerate(self.arms):
                i, j = self.ii[arm.node], self.jj[arm.node]
                oi, oj = arm.outside
                if 0 <= oi < g.resolution and 0 <= oj < g.resolution:
                    cross[b] = (1 - arm.frac) * vals[i, j] + arm.frac * vals[oi, oj]
                else:
                    cross[b] = vals[i, j]
            return cross, vals[ri, rj]
        if callable(boundary):
            def ev(xy):
                out = np.asarray(boundary(self.angles(xy)), dtype=float)
                if out.ndim == 1:
                    out = out[:, None]
                elif out.shape[0] != len(xy) and out.shape[-1] == len(xy):
                    out = out.T
                if out.shape[1] != ncomp:
                    out = np.broadcast_to(out, (len(xy), ncomp))
                return out
            return ev(self.points) if self.n_b else np.zeros((0, ncomp)), ev(ring_xy)
        arr = np.asarray(boundary, dtype=float)
        if self.disc != UNIT_DISC:
            raise GridError("array boundary data is only supported on the unit disc")
        bi, bj = g.boundary_indices()
        if arr.shape[0] != len(bi):
            raise GridError(f"expected {len(bi)} boundary values, got {arr.shape[0]}")
        arr = arr.reshape(len(bi), -1)
        if arr.shape[1] != ncomp:
            arr = np.broadcast_to(arr, (len(bi), ncomp))
        th = g.theta[bi, bj]
        return (_periodic_interp(th, arr, self.angles(self.points)),
                _periodic_interp(th, arr, self.angles(ring_xy)))


def _periodic_interp(th, vals, q):
    th = np.asarray(th)
    order = np.argsort(th)
    th, vals = th[order], vals[order]
    thx = np.concatenate([th[-1:] - 2 * np.pi, th, th[:1] + 2 * np.pi])
    vx = np.concatenate([vals[-1:], vals, vals[:1]], axis=0)
    q = np.mod(q + np.pi, 2 * np.pi) - np.pi
    return np.stack([np.interp(q, thx, vx[:, c]) for c in range(vals.shape[1])], axis=1)


_DOMAIN_CACHE: dict = {}


def working_domain(grid: DiscGrid, disc: Disc = UNIT_DISC) -> WorkingDomain:
    key = (grid.resolution, disc.center, disc.radius)
    wd = _DOMAIN_CACHE.get(key)
    if wd is None:
        wd = WorkingDomain(grid, disc)
        if len(_DOMAIN_CACHE) > 64:
            _DOMAIN_CACHE.clear()
        _DOMAIN_CACHE[key] = wd
    return wd


def factorize(A):
    """SuperLU factorisation with a GMRES fallback (returns a solve callable)."""
    A = sp.csc_matrix(A)
    try:
        lu = spla.splu(A)
        return lu.solve
    except (RuntimeError, MemoryError):
        try:
            ilu = spla.spilu(A, drop_tol=1e-5)
        except RuntimeError as exc:
            raise SolverFailure(f"factorisation failed ({exc})") from None
        M = spla.LinearOperator(A.shape, ilu.solve)

        def solve(b):
            b = np.asarray(b)
            cols = b.reshape(b.shape[0], -1)
            out = np.empty_like(cols)
            for c in range(cols.shape[1]):
                x, info = spla.gmres(A, cols[:, c], M=M, rtol=1e-12, atol=0.0, maxiter=500)
                if info != 0:
                    raise SolverFailure("GMRES fallback did not converge")
                out[:, c] = x
            return out.reshape(b.shape)
        return solve


def _check_residual(A, x, b, tol, what):
    res = A @ x - b
    # normwise backward error
    scale = max(np.abs(b).max(initial=0.0), abs(A).max() * np.abs(x).max(initial=0.0), 1e-300)
    rel = float(np.abs(res).max(initial=0.0) / scale)
    if not np.isfinite(rel) or rel > tol:
        raise SolverFailure(f"{what} residual above tolerance {tol:g}", rel)
    return rel


def solve_poisson(rhs: Field, boundary=None, d: Disc = UNIT_DISC, tol: float = 1e-10) -> Field:
    """Solve ``−Δu = rhs`` in ``B_r(a)`` with Dirichlet data.

    Parameters
    ----------
    rhs : Field
        Right-hand side with a single spatial slot; each component is solved
        independently with one factorisation.
    boundary : None, callable, Field or array
        ``None`` is homogeneous data.  A callable is evaluated at the polar
        angle about ``d.center``.  A Field is interpolated along grid lines to
        the crossing points.  An array gives values at the unit-circle
        boundary nodes (sorted by angle) and is interpolated periodically.
    d : Disc
        Working disc.

    Returns
    -------
    Field
        Solution at unknown nodes, boundary data at ring nodes, zero elsewhere.
    """
    r_, c_, s_ = rhs.arity
    if s_ != 1:
        raise GridError("solve_poisson expects a field with one spatial slot")
    wd = working_domain(rhs.grid, d)
    ncomp = r_ * c_
    f = rhs.values.reshape(rhs.grid.shape + (ncomp,))[wd.ii, wd.jj]
    gb, gring = wd.boundary_values(boundary, ncomp)
    A = -wd.lap
    b = f + wd.lap_b @ gb
    solve = factorize(A)
    u = solve(b)
    u = u.reshape(wd.N, ncomp)
    _check_residual(A, u, b, tol, "Poisson")
    out = np.zeros(rhs.grid.shape + (ncomp,))
    ri, rj = np.nonzero(wd.ring)
    out[ri, rj] = gring
    out[wd.ii, wd.jj] = u
    return Field(rhs.grid, out.reshape(rhs.grid.shape + (r_, c_, 1)))


# ---------------------------------------------------------------------------
# Hodge decomposition


@dataclass(frozen=True)
class HodgeTriple:
    f: Field
    g: Field
    h: Field
    disc: Disc

    def reconstruct(self) -> Field:
        return zero_ext_gradient(self.f) + zero_ext_rotated_gradient(self.g) + self.h


def _central(a, axis, h):
    """Central difference of zero-padded node data (valid everywhere)."""
    p = np.pad(a, [(1, 1), (1, 1)] + [(0, 0)] * (a.ndim - 2))
    n = a.shape[0]
    if axis == 0:
        return (p[2:, 1:n + 1] - p[:-2, 1:n + 1]) / (2 * h)
    return (p[1:n + 1, 2:] - p[1:n + 1, :-2]) / (2 * h)


def zero_ext_gradient(f: Field) -> Field:
    """Central gradient of ``f`` with zero extension beyond the grid."""
    v = f.values[..., 0]
    h = f.grid.h
    return Field(f.grid, np.stack([_central(v, 0, h), _central(v, 1, h)], axis=-1))


def zero_ext_rotated_gradient(g: Field) -> Field:
    v = g.values[..., 0]
    h = g.grid.h
    return Field(g.grid, np.stack([-_central(v, 1, h), _central(v, 0, h)], axis=-1))


def _wide_matrix(wd: WorkingDomain):
    """``G^T G`` restricted to the unknowns: the (negated) 2h-spaced Laplacian."""
    N, h = wd.N, wd.grid.h
    rows, cols, vals = [], [], []
    n = wd.grid.resolution
    for k in range(N):
        i, j = wd.ii[k], wd.jj[k]
        rows.append(k); cols.append(k); vals.append(4.0 / (4 * h * h))
        for di, dj in ((2, 0), (-2, 0), (0, 2), (0, -2)):
            ni, nj = i + di, j + dj
            if 0 <= ni < n and 0 <= nj < n and wd.mask[ni, nj]:
                rows.append(k); cols.append(wd.index[ni, nj]); vals.append(-1.0 / (4 * h * h))
    return sp.csc_matrix((vals, (rows, cols)), shape=(N, N))


def hodge_decompose(chi: Field, d: Disc = UNIT_DISC, tol: float = 1e-10) -> HodgeTriple:
    """Split ``χ = ∇f + ∇⊥g + h`` on the working disc.

    ``f`` and ``g`` vanish outside the unknown nodes of ``B_r(a)``; they are
    the least-squares potentials for the zero-extended central gradient, so
    ``h`` has vanishing central divergence and curl at every unknown node and
    the reconstruction holds to rounding.
    """
    r_, c_, s_ = chi.arity
    if s_ != 2:
        raise GridError(f"hodge_decompose expects arity (m, 1, 2), got {chi.arity}")
    grid = chi.grid
    wd = working_domain(grid, d)
    A = _wide_matrix(wd)
    ncomp = r_ * c_
    x = chi.values.reshape(grid.shape + (ncomp, 2))
    hh = grid.h
    # G^T chi at unknowns is minus the central divergence (resp. curl) of chi
    div = _central(x[..., 0], 0, hh) + _central(x[..., 1], 1, hh)
    cur = _central(x[..., 1], 0, hh) - _central(x[..., 0], 1, hh)
    b = np.concatenate([-div[wd.ii, wd.jj], -cur[wd.ii, wd.jj]], axis=1)
    solve = factorize(A)
    sol = solve(b)
    _check_residual(A, sol, b, tol, "Hodge")
    f = np.zeros(grid.shape + (ncomp,))
    g = np.zeros(grid.shape + (ncomp,))
    f[wd.ii, wd.jj] = sol[:, :ncomp]
    g[wd.ii, wd.jj] = sol[:, ncomp:]
    F = Field(grid, f.reshape(grid.shape + (r_, c_, 1)))
    Gf = Field(grid, g.reshape(grid.shape + (r_, c_, 1)))
    h = chi.values - zero_ext_gradient(F).values - zero_ext_rotated_gradient(Gf).values
    return HodgeTriple(F, Gf, Field(grid, h), d)


# ---------------------------------------------------------------------------
# Harmonic diagnostics


def wide_laplacian(h: Field, d: Disc = UNIT_DISC):
    """2h-spaced Laplacian of every component and the mask where it is evaluated.

    Evaluated at unknown nodes of the working disc whose four axis neighbours
    are unknown nodes too; exact for quadratic polynomials.
    """
    grid = h.grid
    wd = working_domain(grid, d)
    m = wd.mask
    ok = m.copy()
    ok[1:-1, 1:-1] &= m[2:, 1:-1] & m[:-2, 1:-1] & m[1:-1, 2:] & m[1:-1, :-2]
    ok[0, :] = ok[-1, :] = ok[:, 0] = ok[:, -1] = False
    v = h.flat()
    p = np.pad(v, [(2, 2), (2, 2), (0, 0)])
    n = grid.resolution
    c = p[2:n + 2, 2:n + 2]
    lap = (p[4:, 2:n + 2] + p[:-4, 2:n + 2] + p[2:n + 2, 4:] + p[2:n + 2, :-4] - 4 * c) / (4 * grid.h**2)
    return lap, ok


def harmonic_residual(h: Field, d: Disc = UNIT_DISC) -> float:
    """max interior ``|Δh|`` over all components (wide stencil)."""
    lap, ok = wide_laplacian(h, d)
    if not ok.any():
        return 0.0
    return float(np.abs(lap[ok]).max())


@dataclass
class HarmonicDecayReport:
    ratios: list
    constants: list
    bound: float
    violated: bool
    residual: float

    def rows(self):
        return [(r, c) for r, c in zip(self.ratios, self.constants)]


def harmonic_decay_check(h: Field, d: Disc, p: float = 2.0, ratios=(0.25, 0.5),
                         bound: float = 4.0, harmonic_tol: float = 0.05) -> HarmonicDecayReport:
    """Measure ``C(r/ϱ) = ∫_{B_r}|h|^p / ((r/ϱ)^2 ∫_{B_ϱ}|h|^p)`` with ``ϱ = d.radius``.

    ``h`` must be discretely harmonic on ``B_ϱ``: the wide-stencil residual,
    scaled by ``ϱ² / sup|h|``, has to stay below ``harmonic_tol``.
    """
    from .grid import integrate

    res = harmonic_residual(h, d)
    mag = pointwise_norm(h.values)
    sup = float(mag[h.grid.members(d)].max(initial=0.0))
    if sup > 0 and res * d.radius**2 / sup > harmonic_tol:
        raise GridError(f"field is not harmonic: harmonic_residual = {res:.3e} (sup|h| = {sup:.3e})")
    a = mag**p
    big = float(integrate(a, d, h.grid))
    consts = []
    for q in ratios:
        small = float(integrate(a, d.scaled(q), h.grid))
        consts.append(small / (q * q * big) if big > 0 else 0.0)
    return HarmonicDecayReport(list(ratios), consts, bound, any(c > bound for c in consts), res)
