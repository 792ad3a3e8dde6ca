"""Coulomb-gauge decomposition of skew-symmetric potentials.

Given ``Ω`` with values in ``so(m) ⊗ R²`` we look for ``P: D² -> SO(m)``
with ``P = I`` on the boundary and a skew ``ξ`` with zero mean such that

    ∇⊥ξ = P⁻¹∇P + P⁻¹ΩP.

Discretisation
--------------
Everything lives on a staggered complex built from the grid squares
("cells") whose four corners lie in the closed working disc.  Rotations sit
at nodes, connections and potentials on edges (an x-edge carries the first
spatial component, a y-edge the second), and ``ξ`` at cell centres.  For an
edge from node ``i`` to node ``j``

    E_e(P, Ω) = log(P_iᵀ P_j) / h + ½ (P_iᵀ Ω_e P_i + P_jᵀ Ω_e P_j),

with ``Ω_e`` the average of the nodal values at the two ends.  The discrete
divergence of an edge field at a node is the usual flux difference, and the
discrete ``∇⊥`` of a cell field is divergence free by construction, so the
Poincaré lemma holds exactly on the complex.

The logarithm (rather than the skew part of ``P_iᵀP_j``) keeps the abelian
case exact: for ``m = 2`` the connection of ``e^{φJ}`` is the plain
difference quotient of ``φ``.

The decomposition is computed by continuation in ``t``: an accepted state
``(R, ζ)`` at ``t`` is advanced by solving ``T(U, λ) = 0`` with
``λ = R⁻¹ (Δt Ω) R``, ``Q = e^U``, then ``P = R Q`` and ``ζ`` is recovered
from the edge field ``E(P, (t + Δt) Ω)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy import ndimage

from .elliptic import factorize, gradient
from .grid import Disc, DiscGrid, Field, GridError, UNIT_DISC, pointwise_norm, skew_defect

__all__ = [
    "GaugeConfig", "GaugePair", "ContinuationState", "StepFailure", "DecompositionFailed",
    "SmallnessViolation", "StaggeredComplex", "complex_for", "exp_skew", "log_rotation",
    "T_apply", "linearized_apply", "solve_gauge_step", "vector_potential", "decompose",
    "audit_estimates", "AuditReport", "skew_basis", "manufactured_potential",
    "random_divfree_potential", "l2_norm", "structure_defects",
]


class StepFailure(RuntimeError):
    pass


class DecompositionFailed(RuntimeError):
    def __init__(self, message, last_t):
        super().__init__(f"decomposition failed: {message} (last good t = {last_t:.6g})")
        self.last_t = last_t


class SmallnessViolation(ValueError):
    pass


# ---------------------------------------------------------------------------
# so(m) utilities


def skew_basis(m: int) -> np.ndarray:
    """Basis ``E_ab = e_a e_bᵀ − e_b e_aᵀ`` (a < b), shape (d, m, m)."""
    pairs = [(a, b) for a in range(m) for b in range(a + 1, m)]
    B = np.zeros((len(pairs), m, m))
    for k, (a, b) in enumerate(pairs):
        B[k, a, b], B[k, b, a] = 1.0, -1.0
    return B


def _coords(Y: np.ndarray) -> np.ndarray:
    m = Y.shape[-1]
    a, b = np.triu_indices(m, 1)
    return Y[..., a, b]


def _from_coords(c: np.ndarray, m: int) -> np.ndarray:
    out = np.zeros(c.shape[:-1] + (m, m))
    a, b = np.triu_indices(m, 1)
    out[..., a, b] = c
    out[..., b, a] = -c
    return out


def _skew(A):
    return 0.5 * (A - np.swapaxes(A, -1, -2))


def _T(A):
    return np.swapaxes(A, -1, -2)


def _expm_skew_array(U: np.ndarray) -> np.ndarray:
    m = U.shape[-1]
    if m == 1:
        return np.ones_like(U)
    if m == 2:
        th = U[..., 1, 0]
        c, s = np.cos(th), np.sin(th)
        return np.stack([np.stack([c, -s], -1), np.stack([s, c], -1)], -2)
    if m == 3:
        w = np.stack([U[..., 2, 1], U[..., 0, 2], U[..., 1, 0]], -1)
        th = np.linalg.norm(w, axis=-1)
        small = th < 1e-4
        ths = np.where(small, 1.0, th)
        a = np.where(small, 1 - th**2 / 6 + th**4 / 120, np.sin(ths) / ths)
        b = np.where(small, 0.5 - th**2 / 24 + th**4 / 720, (1 - np.cos(ths)) / ths**2)
        U2 = U @ U
        return np.eye(3) + a[..., None, None] * U + b[..., None, None] * U2
    # scaling and squaring with a 13-term Taylor polynomial
    nrm = np.abs(U).sum(axis=-1).max(axis=-1).max(initial=0.0)
    sq = max(0, int(math.ceil(math.log2(nrm / 0.5))) if nrm > 0.5 else 0)
    A = U / 2.0**sq
    out = np.broadcast_to(np.eye(m), U.shape).copy()
    term = out.copy()
    for k in range(1, 14):
        term = term @ A / k
        out = out + term
    for _ in range(sq):
        out = out @ out
    return out


def log_rotation(M: np.ndarray) -> np.ndarray:
    """Principal logarithm of rotations close to the identity (batched)."""
    m = M.shape[-1]
    if m == 2:
        th = np.arctan2(M[..., 1, 0], M[..., 0, 0])
        z = np.zeros_like(th)
        return np.stack([np.stack([z, -th], -1), np.stack([th, z], -1)], -2)
    if m == 3:
        c = np.clip((np.trace(M, axis1=-2, axis2=-1) - 1.0) / 2.0, -1.0, 1.0)
        th = np.arccos(c)
        small = th < 1e-4
        ths = np.where(small, 1.0, th)
        f = np.where(small, 0.5 + th**2 / 12 + 7 * th**4 / 720, ths / (2 * np.sin(ths)))
        if np.any(th > 3.0):
            raise GridError("log_rotation: rotation angle too close to π")
        return f[..., None, None] * (M - _T(M))
    A = M - np.eye(m)
    if np.abs(A).max(initial=0.0) > 0.5:
        from scipy.linalg import logm
        flat = M.reshape(-1, m, m)
        return _skew(np.stack([np.real(logm(x)) for x in flat]).reshape(M.shape))
    out = np.zeros_like(M)
    term = np.broadcast_to(np.eye(m), M.shape).copy()
    for k in range(1, 40):
        term = term @ A
        out = out + ((-1) ** (k + 1) / k) * term
    return _skew(out)


def exp_skew(U: Field, m: int | None = None) -> Field:
    """Nodewise matrix exponential of a skew field of arity (m, m, 1)."""
    r, c, s = U.arity
    if r != c or s != 1 or (m is not None and m != r):
        raise GridError(f"exp_skew expects arity (m, m, 1), got {U.arity}")
    return Field(U.grid, _expm_skew_array(_skew(U.values[..., 0]))[..., None], "rotation")


def _ad(X, Y):
    return X @ Y - Y @ X


def _dexpinv(X, Y):
    """``g(ad_X) Y`` with ``g(z) = z / (1 − e^{−z})``; ``log(e^X e^Y) ≈ X + g(ad_X) Y``."""
    a1 = _ad(X, Y)
    a2 = _ad(X, a1)
    a4 = _ad(X, _ad(X, a2))
    return Y + 0.5 * a1 + a2 / 12.0 - a4 / 720.0


# ---------------------------------------------------------------------------
# Staggered complex


class StaggeredComplex:
    """Cells, edges and unknown nodes of the working disc.

    Cell ``(i, j)`` is the square with lower-left corner at node ``(i, j)``.
    x-edge ``(i, j)`` joins nodes ``(i, j)`` and ``(i+1, j)``; y-edge ``(i, j)``
    joins ``(i, j)`` and ``(i, j+1)``.
    """

    def __init__(self, grid: DiscGrid, disc: Disc):
        self.grid, self.disc = grid, disc
        n, h = grid.resolution, grid.h
        a1, a2 = disc.center
        node_in = np.hypot(grid.X - a1, grid.Y - a2) <= disc.radius * (1 + 1e-12)
        if disc == UNIT_DISC or not disc.inside_unit_disc():
            node_in &= grid.R <= 1.0 + 1e-12
        cell = node_in[:-1, :-1] & node_in[1:, :-1] & node_in[:-1, 1:] & node_in[1:, 1:]
        self.cell = cell
        pc = np.pad(cell, 1)          # pc[i+1, j+1] = cell(i, j)
        # adjacent cells of node (i, j): (i-1,j-1), (i,j-1), (i-1,j), (i,j)
        c_ll, c_lr = pc[:-1, :-1], pc[1:, :-1]
        c_ul, c_ur = pc[:-1, 1:], pc[1:, 1:]
        self.unknown = c_ll & c_lr & c_ul & c_ur
        self.domain = c_ll | c_lr | c_ul | c_ur
        self.ncell_adj = c_ll.astype(int) + c_lr + c_ul + c_ur
        # x-edge (i, j), i < n-1: cells (i, j) above and (i, j-1) below
        above_x, below_x = pc[1:-1, 1:], pc[1:-1, :-1]
        self.xedge_int = above_x & below_x
        # y-edge (i, j), j < n-1: cells (i, j) right and (i-1, j) left
        right_y, left_y = pc[1:, 1:-1], pc[:-1, 1:-1]
        self.yedge_int = right_y & left_y
        ii, jj = np.nonzero(self.unknown)
        self.ii, self.jj = ii, jj
        self.N = len(ii)
        if self.N < 5:
            raise GridError("disc unresolved: gauge complex has fewer than 5 unknown nodes")
        self.index = np.full((n, n), -1, dtype=np.int64)
        self.index[ii, jj] = np.arange(self.N)
        ci, cj = np.nonzero(cell)
        self.ci, self.cj = ci, cj
        self.cell_index = np.full(cell.shape, -1, dtype=np.int64)
        self.cell_index[ci, cj] = np.arange(len(ci))
        self.h = h
        self._lap_solve = None
        self._cell_solve = None
        self._build_cell_graph()

    # -- edge fields ---------------------------------------------------------

    def node_to_edges(self, w: np.ndarray):
        """Average nodal (n, n, ..., 2) data onto edges: (Ex, Ey)."""
        w1, w2 = w[..., 0], w[..., 1]
        return 0.5 * (w1[:-1, :] + w1[1:, :]), 0.5 * (w2[:, :-1] + w2[:, 1:])

    def perp_nodal(self, z: np.ndarray):
        """Edge ``∇⊥`` of nodal data (n, n, ...), divergence free on the complex."""
        h = self.h
        zp = np.pad(z, [(1, 1), (1, 1)] + [(0, 0)] * (z.ndim - 2), mode="edge")
        # zp[i+1, j+1] = z[i, j]
        n = z.shape[0]
        # x-edge (i, j), i = 0..n-2: -(z[i,j+1]+z[i+1,j+1] - z[i,j-1] - z[i+1,j-1])/(4h)
        up = zp[1:n, 2:n + 2] + zp[2:n + 1, 2:n + 2]
        dn = zp[1:n, 0:n] + zp[2:n + 1, 0:n]
        ex = -(up - dn) / (4 * h)
        # y-edge (i, j), j = 0..n-2: (z[i+1,j]+z[i+1,j+1] - z[i-1,j] - z[i-1,j+1])/(4h)
        rt = zp[2:n + 2, 1:n] + zp[2:n + 2, 2:n + 1]
        lt = zp[0:n, 1:n] + zp[0:n, 2:n + 1]
        ey = (rt - lt) / (4 * h)
        return ex, ey

    def perp_cells(self, xi: np.ndarray):
        """Edge ``∇⊥`` of cell data (n-1, n-1, ...); only interior edges are meaningful."""
        h = self.h
        pad = [(1, 1), (1, 1)] + [(0, 0)] * (xi.ndim - 2)
        xp = np.pad(xi, pad)       # xp[i+1, j+1] = cell(i, j)
        ex = -(xp[1:-1, 1:] - xp[1:-1, :-1]) / h
        ey = (xp[1:, 1:-1] - xp[:-1, 1:-1]) / h
        return ex, ey

    def div(self, ex: np.ndarray, ey: np.ndarray) -> np.ndarray:
        """Nodal divergence of an edge field (n, n, ...) (only unknown nodes meaningful)."""
        h = self.h
        extra = [(0, 0)] * (ex.ndim - 2)
        exp_ = np.pad(ex, [(1, 1), (0, 0)] + extra)   # exp_[i+1, j] = Ex[i, j]
        eyp = np.pad(ey, [(0, 0), (1, 1)] + extra)
        d = (exp_[1:, :] - exp_[:-1, :]) / h + (eyp[:, 1:] - eyp[:, :-1]) / h
        return d

    def edge_l2(self, ex, ey, interior_only=True) -> float:
        mx = self.xedge_int if interior_only else np.ones(ex.shape[:2], bool)
        my = self.yedge_int if interior_only else np.ones(ey.shape[:2], bool)
        s = (ex[mx] ** 2).sum() + (ey[my] ** 2).sum()
        return float(math.sqrt(s) * self.h)

    def node_l2(self, a: np.ndarray) -> float:
        return float(math.sqrt((a[self.ii, self.jj] ** 2).sum()) * self.h)

    # -- gauge edge field ------------------------------------------------------

    def connection(self, P: np.ndarray):
        """``log(P_iᵀ P_j) / h`` on x- and y-edges."""
        Mx = _T(P[:-1, :]) @ P[1:, :]
        My = _T(P[:, :-1]) @ P[:, 1:]
        return log_rotation(Mx) / self.h, log_rotation(My) / self.h

    def conjugate(self, P: np.ndarray, cx: np.ndarray, cy: np.ndarray):
        """``½(P_iᵀ C_e P_i + P_jᵀ C_e P_j)`` per edge."""
        def conj(Pa, C):
            return _T(Pa) @ C @ Pa
        return (0.5 * (conj(P[:-1, :], cx) + conj(P[1:, :], cx)),
                0.5 * (conj(P[:, :-1], cy) + conj(P[:, 1:], cy)))

    def edge_field(self, P: np.ndarray, cx: np.ndarray, cy: np.ndarray):
        ax, ay = self.connection(P)
        bx, by = self.conjugate(P, cx, cy)
        return _skew(ax + bx), _skew(ay + by)

    def embed(self, U_unknown: np.ndarray, m: int) -> np.ndarray:
        out = np.zeros(self.grid.shape + (m, m))
        out[self.ii, self.jj] = U_unknown
        return out

    # -- linear solvers -----------------------------------------------------------

    def dirichlet_laplacian(self):
        """Five-point Laplacian on unknown nodes (zero data at other domain nodes)."""
        N, h = self.N, self.h
        rows, cols, vals = [np.arange(N)], [np.arange(N)], [np.full(N, -4.0 / h**2)]
        for di, dj in ((1, 0), (-1, 0), (0, 1), (0, -1)):
            ni, nj = self.ii + di, self.jj + dj
            k = self.index[ni, nj]
            ok = k >= 0
            rows.append(np.arange(N)[ok]); cols.append(k[ok]); vals.append(np.full(ok.sum(), 1.0 / h**2))
        return sp.csc_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(N, N))

    def laplace_solver(self):
        if self._lap_solve is None:
            self._lap_solve = factorize(self.dirichlet_laplacian())
        return self._lap_solve

    def _build_cell_graph(self):
        """Incidence of interior edges on cells for the least-squares potential."""
        ci = self.cell_index
        rows, cols, vals = [], [], []
        xi_, xj_ = np.nonzero(self.xedge_int)
        ab = ci[xi_, xj_]
        be = ci[xi_, xj_ - 1]
        nx = len(xi_)
        rows += [np.arange(nx), np.arange(nx)]
        cols += [ab, be]
        vals += [np.ones(nx), -np.ones(nx)]
        yi_, yj_ = np.nonzero(self.yedge_int)
        rt = ci[yi_, yj_]
        lt = ci[yi_ - 1, yj_]
        ny = len(yi_)
        rows += [nx + np.arange(ny), nx + np.arange(ny)]
        cols += [rt, lt]
        vals += [np.ones(ny), -np.ones(ny)]
        nc = len(self.ci)
        D = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                          shape=(nx + ny, nc))
        self._inc = D
        self._xe = (xi_, xj_)
        self._ye = (yi_, yj_)

    def cell_potential(self, ex: np.ndarray, ey: np.ndarray) -> np.ndarray:
        """Least-squares ``ξ`` on cells with ``∇⊥ξ ≈ (ex, ey)`` on interior edges.

        Only interior edges enter, which is the natural (Neumann-type)
        boundary condition; the additive constant is fixed afterwards.
        """
        h = self.h
        xi_, xj_ = self._xe
        yi_, yj_ = self._ye
        tail = ex.shape[2:]
        tx = -h * ex[xi_, xj_].reshape(len(xi_), -1)
        ty = h * ey[yi_, yj_].reshape(len(yi_), -1)
        rhs = self._inc.T @ np.concatenate([tx, ty], axis=0)
        if self._cell_solve is None:
            L = (self._inc.T @ self._inc).tolil()
            L[0, :] = 0.0
            L[0, 0] = 1.0
            self._cell_solve = factorize(L.tocsc())
        rhs[0] = 0.0
        sol = self._cell_solve(rhs)
        out = np.zeros(self.cell.shape + (sol.shape[1],))
        out[self.ci, self.cj] = sol
        return out.reshape(self.cell.shape + tail)

    def cells_to_nodes(self, xi: np.ndarray) -> np.ndarray:
        """Nodal values from cell values.

        Nodes whose four cells are all present take their average; nodes near
        the rim use a least-squares linear fit through included cells within
        two cells; nodes without nearby cells copy the nearest node value.
        """
        n = self.grid.resolution
        tail = xi.shape[2:]
        flat = xi.reshape(xi.shape[:2] + (-1,))
        k = flat.shape[-1]
        out = np.zeros((n, n, k))
        have = np.zeros((n, n), bool)
        pc = np.pad(flat, [(1, 1), (1, 1), (0, 0)])
        full = self.ncell_adj == 4
        s = pc[:-1, :-1] + pc[1:, :-1] + pc[:-1, 1:] + pc[1:, 1:]
        out[full] = s[full] / 4.0
        have |= full
        h = self.h
        cx = (np.arange(n - 1) + 0.5) * h - 1.0
        todo = np.argwhere(~full & (self.ncell_adj > 0))
        # include nodes adjacent to the complex that touch no cell
        near = ndimage.binary_dilation(self.domain, iterations=2) & ~full & ~(self.ncell_adj > 0)
        todo = np.concatenate([todo, np.argwhere(near)]) if near.any() else todo
        for i, j in todo:
            i0, i1 = max(i - 2, 0), min(i + 2, n - 1)
            j0, j1 = max(j - 2, 0), min(j + 2, n - 1)
            sub = self.cell[i0:i1, j0:j1]
            si, sj = np.nonzero(sub)
            if len(si) < 3:
                continue
            gi, gj = si + i0, sj + j0
            A = np.stack([np.ones(len(gi)), cx[gi] - self.grid.x1d[i], cx[gj] - self.grid.x1d[j]], 1)
            coef, *_ = np.linalg.lstsq(A, flat[gi, gj], rcond=None)
            out[i, j] = coef[0]
            have[i, j] = True
        if not have.all():
            _, (ni, nj) = ndimage.distance_transform_edt(~have, return_indices=True)
            out = out[ni, nj]
        return out.reshape((n, n) + tail)


_COMPLEX_CACHE: dict = {}


def complex_for(grid: DiscGrid, disc: Disc = UNIT_DISC) -> StaggeredComplex:
    key = (grid.resolution, disc.center, disc.radius)
    cx = _COMPLEX_CACHE.get(key)
    if cx is None:
        if len(_COMPLEX_CACHE) > 16:
            _COMPLEX_CACHE.clear()
        cx = _COMPLEX_CACHE[key] = StaggeredComplex(grid, disc)
    return cx


def l2_norm(u: Field, d: Disc = UNIT_DISC) -> float:
    w = u.grid.disc_weights(d)
    return float(math.sqrt(np.sum(w * pointwise_norm(u.values) ** 2)))


# ---------------------------------------------------------------------------
# Operator T and its linearisation


def _mat(f: Field, name: str):
    r, c, s = f.arity
    if r != c:
        raise GridError(f"{name} must be matrix valued, got arity {f.arity}")
    return f.values


def _T_edges(cx: StaggeredComplex, Q, Cx, Cy):
    ex, ey = cx.edge_field(Q, Cx, Cy)
    return _skew(cx.div(ex, ey))


def _c_edges(cx: StaggeredComplex, lam, zeta):
    m = lam.shape[2] if lam is not None else zeta.shape[2]
    n = cx.grid.resolution
    Cx = np.zeros((n - 1, n, m, m))
    Cy = np.zeros((n, n - 1, m, m))
    if zeta is not None:
        zx, zy = cx.perp_nodal(zeta)
        Cx, Cy = Cx + zx, Cy + zy
    if lam is not None:
        lx, ly = cx.node_to_edges(lam)
        Cx, Cy = Cx + lx, Cy + ly
    return Cx, Cy


def _nodal_output(cx: StaggeredComplex, vals: np.ndarray) -> Field:
    out = np.zeros_like(vals)
    out[cx.ii, cx.jj] = vals[cx.ii, cx.jj]
    return Field(cx.grid, _skew(out)[..., None], "skew")


def T_apply(U: Field, lam: Field, zeta: Field, d: Disc = UNIT_DISC) -> Field:
    """``T(U, λ) = div(e^{−U}∇e^{U} + e^{−U}(∇⊥ζ + λ)e^{U})`` on the complex.

    ``U`` and ``ζ`` have arity (m, m, 1), ``λ`` has arity (m, m, 2).  ``U`` is
    only read at unknown nodes (it vanishes on the rest of the complex).
    """
    Uv = _mat(U, "U")[..., 0]
    m = Uv.shape[-1]
    if lam.arity != (m, m, 2) or zeta.arity != (m, m, 1):
        raise GridError("T_apply: arity mismatch between U, λ and ζ")
    cx = complex_for(U.grid, d)
    Uk = np.zeros_like(Uv)
    Uk[cx.ii, cx.jj] = Uv[cx.ii, cx.jj]
    Q = _expm_skew_array(_skew(Uk))
    Cx, Cy = _c_edges(cx, lam.values, zeta.values[..., 0])
    return _nodal_output(cx, _T_edges(cx, Q, Cx, Cy))


def _edge_jacobian_maps(cx, Q, Cx, Cy, m):
    """Per-edge linear maps (in skew coordinates) of δE_e wrt ψ at both ends.

    Returns for x- and y-edges arrays ``Ji, Jj`` of shape (..., d, d).
    """
    basis = skew_basis(m)
    h = cx.h
    res = []
    for Pi, Pj, C in ((Q[:-1, :], Q[1:, :], Cx), (Q[:, :-1], Q[:, 1:], Cy)):
        M = _T(Pi) @ Pj
        X = log_rotation(M)
        Bi = _T(Pi) @ C @ Pi
        Bj = _T(Pj) @ C @ Pj
        Ji = np.empty(M.shape[:-2] + (len(basis), len(basis)))
        Jj = np.empty_like(Ji)
        for b, Eb in enumerate(basis):
            imj = _dexpinv(X, np.broadcast_to(Eb, M.shape)) / h + 0.5 * _ad(Bj, Eb)
            imi = -_dexpinv(X, _T(M) @ Eb @ M) / h + 0.5 * _ad(Bi, Eb)
            Jj[..., :, b] = _coords(_skew(imj))
            Ji[..., :, b] = _coords(_skew(imi))
        res.append((Ji, Jj))
    return res


def _assemble_jacobian(cx: StaggeredComplex, Q, Cx, Cy, m):
    d = m * (m - 1) // 2
    (Jxi, Jxj), (Jyi, Jyj) = _edge_jacobian_maps(cx, Q, Cx, Cy, m)
    h = cx.h
    idx = cx.index
    rows, cols, vals = [], [], []

    def add(row_nodes, col_nodes, blocks, sign):
        rk = idx[row_nodes]
        ck = idx[col_nodes]
        ok = (rk >= 0) & (ck >= 0)
        if not ok.any():
            return
        rk, ck, B = rk[ok], ck[ok], blocks[ok] * (sign / h)
        a = np.arange(d)
        R = (rk[:, None, None] * d + a[None, :, None]) + 0 * a[None, None, :]
        C = (ck[:, None, None] * d + a[None, None, :]) + 0 * a[None, :, None]
        rows.append(R.ravel()); cols.append(C.ravel()); vals.append(B.ravel())

    n = cx.grid.resolution
    I, J = np.meshgrid(np.arange(n - 1), np.arange(n), indexing="ij")
    # x-edge (i,j): tail node (i,j), head node (i+1,j); div at tail +E/h, head -E/h
    tail, head = (I, J), (I + 1, J)
    for row, sign in ((tail, 1.0), (head, -1.0)):
        add(row, tail, Jxi, sign)
        add(row, head, Jxj, sign)
    I, J = np.meshgrid(np.arange(n), np.arange(n - 1), indexing="ij")
    tail, head = (I, J), (I, J + 1)
    for row, sign in ((tail, 1.0), (head, -1.0)):
        add(row, tail, Jyi, sign)
        add(row, head, Jyj, sign)
    N = cx.N * d
    return sp.csc_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(N, N))


def linearized_apply(psi: Field, zeta: Field, lam: Field | None = None, d: Disc = UNIT_DISC) -> Field:
    """Derivative of ``T(·, λ)`` at ``U = 0`` applied to ``ψ``.

    On the complex this is ``Δψ + div(½[C_e, ψ_i] + ½[C_e, ψ_j])`` with
    ``C = ∇⊥ζ + λ``, the discrete form of ``Δψ + div[∇⊥ζ + λ, ψ]``.  It
    reduces to ``Δψ`` for ``ζ = 0, λ = 0``.
    """
    pv = _mat(psi, "ψ")[..., 0]
    cx = complex_for(psi.grid, d)
    P0 = np.zeros_like(pv)
    P0[cx.ii, cx.jj] = pv[cx.ii, cx.jj]
    Cx, Cy = _c_edges(cx, None if lam is None else lam.values, zeta.values[..., 0])
    h = cx.h
    dx = (P0[1:, :] - P0[:-1, :]) / h
    dy = (P0[:, 1:] - P0[:, :-1]) / h
    cmx = 0.5 * (_ad(Cx, P0[:-1, :]) + _ad(Cx, P0[1:, :]))
    cmy = 0.5 * (_ad(Cy, P0[:, :-1]) + _ad(Cy, P0[:, 1:]))
    return _nodal_output(cx, cx.div(dx + cmx, dy + cmy))


# ---------------------------------------------------------------------------
# Newton step


@dataclass
class NewtonStats:
    iterations: int = 0
    residuals: list = field(default_factory=list)
    converged: bool = False


def _newton(cx: StaggeredComplex, Cx, Cy, m, tol, max_iter, Q0=None):
    d = m * (m - 1) // 2
    basis_n = cx.N
    n = cx.grid.resolution
    Q = np.broadcast_to(np.eye(m), (n, n, m, m)).copy() if Q0 is None else Q0.copy()
    stats = NewtonStats()
    lap = cx.laplace_solver()

    def precond(v):
        v = v.reshape(basis_n, d)
        return lap(v).ravel()

    for it in range(max_iter + 1):
        F = _T_edges(cx, Q, Cx, Cy)
        Fk = _coords(F[cx.ii, cx.jj])
        # L² norm of the matrix residual (both triangles of the skew matrix)
        res = math.sqrt(2.0 * (Fk**2).sum()) * cx.h
        stats.residuals.append(res)
        if not np.isfinite(res):
            raise StepFailure("non-finite residual")
        if res <= tol:
            stats.iterations, stats.converged = it, True
            return Q, stats
        if it == max_iter:
            break
        if it >= 2 and res > 2.0 * stats.residuals[-2]:
            raise StepFailure(f"residual growth {stats.residuals[-2]:.3e} -> {res:.3e}")
        J = _assemble_jacobian(cx, Q, Cx, Cy, m)
        b = -Fk.ravel()
        M = spla.LinearOperator(J.shape, precond)
        x, info = spla.gmres(J, b, M=M, rtol=1e-11, atol=0.1 * tol * 0, restart=60, maxiter=20)
        if info != 0 or not np.all(np.isfinite(x)):
            x = spla.splu(J).solve(b)
        psi = np.zeros((n, n, m, m))
        psi[cx.ii, cx.jj] = _from_coords(x.reshape(basis_n, d), m)
        Q = Q @ _expm_skew_array(psi)
    raise StepFailure(f"no convergence in {max_iter} Newton iterations (residual {stats.residuals[-1]:.3e})")


def solve_gauge_step(zeta: Field, R: Field, lam: Field, tol: float = 1e-8, d: Disc = UNIT_DISC,
                     max_iter: int = 30):
    """Solve ``T(U, λ) = 0`` for ``U`` (zero off the unknown nodes).

    ``λ`` is the raw increment (arity (m, m, 2)); it is conjugated by ``R``
    edgewise, ``½(R_iᵀλ_e R_i + R_jᵀλ_e R_j)``.  Returns ``(U, stats)``.
    """
    lv = _mat(lam, "λ")
    m = lv.shape[2]
    cx = complex_for(zeta.grid, d)
    Rv = R.values[..., 0]
    lx, ly = cx.node_to_edges(lv)
    lx, ly = cx.conjugate(Rv, lx, ly)
    zx, zy = cx.perp_nodal(zeta.values[..., 0])
    Q, stats = _newton(cx, zx + lx, zy + ly, m, tol, max_iter)
    U = np.zeros_like(Q)
    U[cx.ii, cx.jj] = log_rotation(Q[cx.ii, cx.jj])
    return Field(zeta.grid, _skew(U)[..., None], "skew"), stats


# ---------------------------------------------------------------------------
# Vector potential


def _weighted_mean(grid, vals, d):
    w = grid.disc_weights(d)
    return np.tensordot(w, vals, axes=([0, 1], [0, 1])) / w.sum()


def vector_potential(w: Field, d: Disc = UNIT_DISC, div_tol: float = 0.05) -> Field:
    """``ξ`` with ``∇⊥ξ ≈ w`` and zero mean over the working disc.

    ``w`` (arity (r, c, 2)) is averaged onto edges; its discrete divergence
    must satisfy ``‖div w‖ ≤ div_tol · ‖w‖ / r``.  ``ξ`` is the least-squares
    cell potential over interior edges, transferred to nodes.
    """
    r_, c_, s_ = w.arity
    if s_ != 2:
        raise GridError(f"vector_potential expects two spatial slots, got {w.arity}")
    cx = complex_for(w.grid, d)
    ex, ey = cx.node_to_edges(w.values)
    return _potential_from_edges(cx, ex, ey, d, div_tol, skew=(w.tag == "skew"))


def _potential_from_edges(cx, ex, ey, d, div_tol=None, skew=False, return_cells=False):
    grid = cx.grid
    scale = cx.edge_l2(ex, ey, interior_only=False)
    if div_tol is not None and scale > 0:
        dv = cx.div(ex, ey)
        dnorm = cx.node_l2(dv)
        if dnorm > div_tol * scale / d.radius:
            raise GridError(f"vector_potential: field is not divergence free "
                            f"(‖div w‖ = {dnorm:.3e}, tolerance {div_tol * scale / d.radius:.3e})")
    if skew:
        m = ex.shape[-1]
        cells = _from_coords(cx.cell_potential(_coords(_skew(ex)), _coords(_skew(ey))), m)
    else:
        cells = cx.cell_potential(ex, ey)
    nodal = cx.cells_to_nodes(cells)
    mean = _weighted_mean(grid, nodal, d)
    nodal = nodal - mean
    cells = cells - mean
    cells[~cx.cell] = 0.0
    tag = "skew" if skew else "general"
    if skew:
        nodal = _skew(nodal)
    f = Field(grid, nodal[..., None], tag)
    return (f, cells) if return_cells else f


# ---------------------------------------------------------------------------
# Continuation


@dataclass
class GaugeConfig:
    tol: float = 1e-8                 # Newton: ‖T‖_{L²}
    residual_tol: float = 1e-4        # accepted pair: residual ≤ residual_tol · ‖Ω‖_{L²}
    eps_threshold: float = 0.5
    initial_step: float = 0.1
    min_step: float = 1e-3
    max_newton: int = 30


@dataclass
class ContinuationState:
    t: float
    zeta: np.ndarray          # cell potential
    R: np.ndarray             # nodal rotations
    step: float
    newton_iterations: int = 0


@dataclass
class GaugePair:
    P: Field
    xi: Field
    residual: float
    relative_residual: float
    disc: Disc
    t_history: list = field(default_factory=list)
    newton_history: list = field(default_factory=list)
    xi_cells: np.ndarray | None = None

    def metadata(self) -> dict:
        return {
            "residual": self.residual,
            "relative_residual": self.relative_residual,
            "steps": len(self.t_history),
            "t_history": " ".join(f"{t:.6g}" for t in self.t_history),
            "newton_iterations": " ".join(str(k) for k in self.newton_history),
        }


def _omega_edges(cx, Omega: np.ndarray):
    return cx.node_to_edges(Omega)


def gauge_residual(cx: StaggeredComplex, P: np.ndarray, xi_cells: np.ndarray, Omega: np.ndarray) -> float:
    """Edge ``L²`` norm of ``∇⊥ξ − P⁻¹∇P − P⁻¹ΩP`` over interior edges."""
    ox, oy = _omega_edges(cx, Omega)
    ex, ey = cx.edge_field(P, ox, oy)
    px, py = cx.perp_cells(xi_cells)
    return cx.edge_l2(px - ex, py - ey)


def _check_potential(Omega: Field) -> int:
    r, c, s = Omega.arity
    if r != c or s != 2:
        raise GridError(f"skew potential must have arity (m, m, 2), got {Omega.arity}")
    if Omega.tag != "skew":
        Field(Omega.grid, Omega.values, "skew")   # validates
    return r


def decompose(Omega: Field, d: Disc = UNIT_DISC, config: GaugeConfig | None = None) -> GaugePair:
    """Gauge decomposition of ``Ω`` on the working disc by continuation in ``t``.

    Raises ``SmallnessViolation`` when ``‖Ω‖_{L²(B_r(a))}`` exceeds the
    configured threshold and ``DecompositionFailed`` when the step falls below
    the minimum or the final residual is above tolerance.
    """
    cfg = config or GaugeConfig()
    m = _check_potential(Omega)
    grid = Omega.grid
    cx = complex_for(grid, d)
    norm = l2_norm(Omega, d)
    if norm > cfg.eps_threshold:
        raise SmallnessViolation(f"‖Ω‖_L² = {norm:.4g} exceeds smallness threshold {cfg.eps_threshold:g}")
    n = grid.resolution
    Om = Omega.values
    R = np.broadcast_to(np.eye(m), (n, n, m, m)).copy()
    zeta = np.zeros((n - 1, n - 1, m, m))
    t_hist, it_hist = [], []
    if norm == 0.0:
        xi = Field(grid, np.zeros((n, n, m, m, 1)), "skew")
        return GaugePair(Field(grid, R[..., None], "rotation"), xi, 0.0, 0.0, d, [1.0], [0], zeta)
    ox, oy = _omega_edges(cx, Om)
    t, step = 0.0, cfg.initial_step
    while t < 1.0 - 1e-14:
        dt = min(step, 1.0 - t)
        lx, ly = cx.conjugate(R, dt * ox, dt * oy)
        zx, zy = cx.perp_cells(zeta)
        try:
            Q, stats = _newton(cx, zx + lx, zy + ly, m, cfg.tol, cfg.max_newton)
        except StepFailure:
            step *= 0.5
            if step < cfg.min_step:
                raise DecompositionFailed("continuation step below minimum", t) from None
            continue
        R = R @ Q
        t = 1.0 if t + dt > 1.0 - 1e-12 else t + dt
        ex, ey = cx.edge_field(R, t * ox, t * oy)
        zeta = cx.cell_potential(_coords(ex), _coords(ey))
        zeta = _from_coords(zeta, m)
        t_hist.append(t)
        it_hist.append(stats.iterations)
        step = min(2.0 * step, cfg.initial_step) if stats.iterations <= 3 else step
    xi, cells = _potential_from_edges(cx, *cx.edge_field(R, ox, oy), d, None, skew=True, return_cells=True)
    res = gauge_residual(cx, R, cells, Om)
    rel = res / norm
    if rel > cfg.residual_tol:
        raise DecompositionFailed(f"final residual {rel:.3e} above tolerance {cfg.residual_tol:g}", t)
    P = Field(grid, _skew_fix_rotation(R)[..., None], "rotation")
    return GaugePair(P, xi, res, rel, d, t_hist, it_hist, cells)


def structure_defects(gp: GaugePair) -> dict:
    """Orthogonality, skewness, mean and boundary defects of an accepted pair."""
    grid = gp.P.grid
    P = gp.P.values[..., 0]
    m = P.shape[-1]
    xi = gp.xi.values
    w = grid.disc_weights(gp.disc)
    mean = np.tensordot(w, xi, axes=([0, 1], [0, 1])) / w.sum()
    xin = l2_norm(gp.xi, gp.disc)
    bnd = grid.boundary | (np.hypot(grid.X - gp.disc.center[0], grid.Y - gp.disc.center[1]) >= gp.disc.radius)
    dev = np.abs(P - np.eye(m))[bnd]
    return {
        "orth_defect": float(np.abs(np.einsum("...ki,...kj->...ij", P, P) - np.eye(m)).max()),
        "xi_skew_defect": skew_defect(xi),
        "xi_mean": float(np.abs(mean).max()),
        "xi_l2": xin,
        "boundary_P_defect": float(dev.max(initial=0.0)),
    }


def _skew_fix_rotation(R):
    """Re-orthonormalise accumulated products (polar factor) to kill drift."""
    u, _, vt = np.linalg.svd(R)
    return u @ vt


# ---------------------------------------------------------------------------
# Estimate audit


@dataclass
class AuditReport:
    omega_l2: float
    omega_w12: float
    grad_ratio: float
    w22_ratio: float
    residual: float


def _sobolev(u: Field, k: int, d: Disc) -> float:
    """``W^{k,2}`` norm with interior finite differences."""
    total = l2_norm(u, d) ** 2
    cur = [u]
    for _ in range(k):
        nxt = []
        for f in cur:
            g = gradient(f)
            for s in range(2):
                nxt.append(Field(u.grid, g.values[..., s:s + 1]))
        total += sum(l2_norm(f, d) ** 2 for f in nxt)
        cur = nxt
    return math.sqrt(total)


def audit_estimates(gp: GaugePair, Omega: Field) -> AuditReport:
    """Measured ratios ``(‖∇ξ‖ + ‖∇P‖)/‖Ω‖_{L²}`` and the ``W^{2,2}`` analogue."""
    d = gp.disc
    on = l2_norm(Omega, d)
    if on == 0.0:
        return AuditReport(0.0, 0.0, 0.0, 0.0, gp.residual)
    grid = Omega.grid
    m = Omega.arity[0]
    gxi = l2_norm(gradient(gp.xi), d)
    gP = l2_norm(gradient(gp.P), d)
    PmI = Field(grid, gp.P.values - np.eye(m)[..., None])
    w22 = _sobolev(gp.xi, 2, d) + _sobolev(PmI, 2, d)
    comps = [Field(grid, Omega.values[..., s:s + 1]) for s in range(2)]
    ow12 = math.sqrt(sum(_sobolev(c, 1, d) ** 2 for c in comps))
    return AuditReport(on, ow12, (gxi + gP) / on, w22 / ow12, gp.residual)


# ---------------------------------------------------------------------------
# Input factories


def random_divfree_potential(grid: DiscGrid, m: int, target_l2: float, rng, modes: int = 3,
                             abelian: bool = False) -> Field:
    """``Ω = Σ ∇⊥β_k S_k`` with band-limited ``β_k`` vanishing on the unit circle.

    The result is rescaled to ``‖Ω‖_{L²(D²)} = target_l2``.
    """
    X, Y = grid.X, grid.Y
    basis = skew_basis(m)
    if abelian:
        basis = basis[:1]
    vals = np.zeros(grid.shape + (m, m, 2))
    bump = 1.0 - X**2 - Y**2
    for S in basis:
        beta_x = np.zeros(grid.shape)
        beta_y = np.zeros(grid.shape)
        for k1 in range(modes):
            for k2 in range(modes):
                a, b = rng.normal(size=2) / (1.0 + k1 + k2) ** 2
                ph = a * np.cos(np.pi * (k1 * X + k2 * Y)) + b * np.sin(np.pi * (k1 * X + k2 * Y))
                dph_dx = np.pi * k1 * (-a * np.sin(np.pi * (k1 * X + k2 * Y)) + b * np.cos(np.pi * (k1 * X + k2 * Y)))
                dph_dy = np.pi * k2 * (-a * np.sin(np.pi * (k1 * X + k2 * Y)) + b * np.cos(np.pi * (k1 * X + k2 * Y)))
                beta_x += -2 * X * ph + bump * dph_dx
                beta_y += -2 * Y * ph + bump * dph_dy
        vals[..., 0] += -beta_y[..., None, None] * S
        vals[..., 1] += beta_x[..., None, None] * S
    f = Field(grid, vals, "skew")
    nrm = l2_norm(f)
    return Field(grid, vals * (target_l2 / nrm), "skew") if nrm > 0 else f


def manufactured_potential(grid: DiscGrid, amplitude: float = 0.1, seed: int = 0):
    """Manufactured ``m = 3`` potential ``Ω = P₀∇⊥ξ₀P₀⁻¹ − ∇P₀ P₀⁻¹``.

    ``U₀`` vanishes on the unit circle and ``P₀ = e^{U₀}``; derivatives of
    ``P₀`` come from a fine central difference of the closed form (error
    ≈ 1e-11).  Returns ``(Ω, P₀, ξ₀)`` as nodal arrays.
    """
    rng = np.random.default_rng(seed)
    cu = rng.normal(size=(3, 3)) * amplitude
    cz = rng.normal(size=(3, 3)) * amplitude

    def U0(x, y):
        bump = 1.0 - x**2 - y**2
        c = [bump * (cu[k, 0] + cu[k, 1] * x + cu[k, 2] * np.sin(2 * y)) for k in range(3)]
        return _from_coords(np.stack(c, -1), 3)

    def Z0(x, y):
        c = [cz[k, 0] * np.cos(x + 2 * y) + cz[k, 1] * x * y + cz[k, 2] * np.sin(3 * x) for k in range(3)]
        return _from_coords(np.stack(c, -1), 3)

    def P0(x, y):
        return _expm_skew_array(U0(x, y))

    X, Y = grid.X, grid.Y
    e = 1e-5
    P = P0(X, Y)
    dP1 = (P0(X + e, Y) - P0(X - e, Y)) / (2 * e)
    dP2 = (P0(X, Y + e) - P0(X, Y - e)) / (2 * e)
    dZ1 = (Z0(X + e, Y) - Z0(X - e, Y)) / (2 * e)
    dZ2 = (Z0(X, Y + e) - Z0(X, Y - e)) / (2 * e)
    perp = (-dZ2, dZ1)
    Pt = _T(P)
    om = [_skew(P @ perp[s] @ Pt - dPs @ Pt) for s, dPs in enumerate((dP1, dP2))]
    Omega = np.stack(om, -1)
    return Field(grid, Omega, "skew"), P, Z0(X, Y)
