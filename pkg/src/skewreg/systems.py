"""Linear elliptic systems ``−Δu = Ω·∇u + e`` and the H-surface system.

Sign conventions.  ``(Ω·∇u)^i = Σ_k Σ_j Ω^{ij}_k ∂_k u^j``.  With the
H-surface potential

    Ω = H(u) [[0, ∇⊥u³, −∇⊥u²], [−∇⊥u³, 0, ∇⊥u¹], [∇⊥u², −∇⊥u¹, 0]]

one gets ``Ω·∇u = −2H(u) ∂₁u ∧ ∂₂u``, so ``−Δu = Ω·∇u`` is the H-surface
system ``Δu = 2H(u) ∂₁u ∧ ∂₂u``.  The inverse stereographic map
``(2x, |x|² − 1)/(1 + |x|²)`` solves it with ``H = +1``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .elliptic import SolverFailure, factorize, gradient, divergence, rotated_gradient, working_domain
from .grid import Disc, DiscGrid, Field, GridError, UNIT_DISC

__all__ = [
    "SystemProblem", "HSurfaceProblem", "PicardLog", "solve_linear_system",
    "build_h_surface_omega", "solve_h_surface", "gauged_divergence_residual",
    "stereographic_sphere", "fourier_boundary", "manufactured_system", "omega_dot_grad",
    "wedge", "w12_norm", "HSurfaceFailure", "deep_interior", "stereographic_boundary",
    "h_surface_residual",
]


class HSurfaceFailure(RuntimeError):
    def __init__(self, message, increments):
        super().__init__(message)
        self.increments = increments


@dataclass
class SystemProblem:
    Omega: Field | None             # (m, m, 2) skew, None means zero
    e: Field | None                 # (m, 1, 1), None means zero
    boundary: object = None         # None, callable(θ) -> (k, m), Field or array
    m: int = 3
    s: float = 1.25
    disc: Disc = UNIT_DISC

    def __post_init__(self):
        if not self.s > 1:
            raise GridError(f"integrability exponent s must exceed 1, got {self.s}")


@dataclass
class HSurfaceProblem:
    H: object                       # callable(u values (..., 3)) -> (...) or a constant
    boundary: object
    grid: DiscGrid
    max_iter: int = 30
    damping: float = 0.5
    tol: float = 1e-6


@dataclass
class PicardLog:
    increments: list = field(default_factory=list)
    iterations: int = 0
    converged: bool = False
    residual: float = float("nan")


def fourier_boundary(coeffs):
    """Vector boundary data from per-component lists of ``(k, cos, sin)`` terms."""
    comps = [list(c) for c in coeffs]

    def psi(theta):
        theta = np.asarray(theta, dtype=float)
        out = np.zeros(theta.shape + (len(comps),))
        for i, terms in enumerate(comps):
            for k, a, b in terms:
                out[..., i] += a * np.cos(k * theta) + b * np.sin(k * theta)
        return out
    return psi


def omega_dot_grad(Omega: np.ndarray, du: np.ndarray) -> np.ndarray:
    """``Σ_k Ω_k ∂_k u`` for nodal arrays Ω (..., m, m, 2) and ∇u (..., m, 2)."""
    return np.einsum("...ijk,...jk->...i", Omega, du)


def wedge(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.cross(a, b)


def _grad_array(u: Field) -> np.ndarray:
    return gradient(u).values[..., 0, :]     # (n, n, m, 2)


def solve_linear_system(prob: SystemProblem, grid: DiscGrid | None = None, tol: float = 1e-9) -> Field:
    """One sparse nonsymmetric solve of ``−Δu − Ω·∇u = e`` with ``u = ψ`` on the boundary.

    First derivatives use the second order non-uniform three point formula
    on the same Shortley-Weller arms as the Laplacian.
    """
    grid = grid or (prob.Omega.grid if prob.Omega is not None else prob.e.grid)
    m = prob.m
    wd = working_domain(grid, prob.disc)
    N = wd.N
    Im = sp.identity(m, format="csr")
    A = -sp.kron(wd.lap, Im)
    Bmat = sp.kron(wd.lap_b, Im)
    if prob.Omega is not None:
        if prob.Omega.arity != (m, m, 2):
            raise GridError(f"Ω must have arity ({m}, {m}, 2), got {prob.Omega.arity}")
        Om = prob.Omega.values[wd.ii, wd.jj]        # (N, m, m, 2)
        for k in range(2):
            Dk, Dkb = wd.d[k]
            blk = sp.bsr_matrix((Om[..., k], np.arange(N), np.arange(N + 1)), shape=(N * m, N * m))
            A = A - blk @ sp.kron(Dk, Im)
            Bmat = Bmat + blk @ sp.kron(Dkb, Im)
    rhs = np.zeros((N, m))
    if prob.e is not None:
        rhs += prob.e.values[wd.ii, wd.jj].reshape(N, m)
    gb, gring = wd.boundary_values(prob.boundary, m)
    b = rhs.ravel() + Bmat @ gb.ravel()
    A = sp.csc_matrix(A)
    try:
        solve = factorize(A)
        x = solve(b)
    except SolverFailure:
        raise
    except Exception as exc:  # pragma: no cover - SuperLU breakdown
        raise SolverFailure(f"linear system breakdown: {exc}") from exc
    res = A @ x - b
    scale = max(np.abs(b).max(initial=0.0), abs(A).max() * np.abs(x).max(initial=0.0), 1e-300)
    rel = float(np.abs(res).max(initial=0.0) / scale)
    if not np.isfinite(rel) or rel > tol:
        norm1 = float(abs(A).sum(axis=0).max())
        raise SolverFailure(f"system residual above {tol:g} (‖A‖₁ = {norm1:.3e})", rel)
    out = np.zeros(grid.shape + (m,))
    ri, rj = np.nonzero(wd.ring)
    out[ri, rj] = gring
    out[wd.ii, wd.jj] = x.reshape(N, m)
    return Field(grid, out[..., None, None])


def _H_values(H, u: np.ndarray) -> np.ndarray:
    if callable(H):
        return np.broadcast_to(np.asarray(H(u), dtype=float), u.shape[:-1])
    return np.full(u.shape[:-1], float(H))


def build_h_surface_omega(u: Field, H) -> Field:
    """Skew potential of the H-surface system built from the discrete ``∇⊥u``."""
    if u.arity != (3, 1, 1):
        raise GridError(f"the H-surface potential needs m = 3, got arity {u.arity}")
    rg = rotated_gradient(u).values[..., :, 0, :]        # (n, n, 3, 2)
    hv = _H_values(H, u.values[..., 0, 0])[..., None]
    g1, g2, g3 = rg[..., 0, :], rg[..., 1, :], rg[..., 2, :]
    z = np.zeros_like(g1)
    rows = [np.stack([z, g3, -g2], -2), np.stack([-g3, z, g1], -2), np.stack([g2, -g1, z], -2)]
    Om = np.stack(rows, -3) * hv[..., None, None, :]
    return Field(u.grid, Om, "skew")


def w12_norm(u: Field, d: Disc = UNIT_DISC) -> float:
    from .gauge import l2_norm
    return math.sqrt(l2_norm(u, d) ** 2 + l2_norm(gradient(u), d) ** 2)


def deep_interior(grid: DiscGrid, layers: int = 2) -> np.ndarray:
    """Interior nodes at least ``layers`` axis steps away from non-interior nodes."""
    from scipy import ndimage
    return ndimage.binary_erosion(grid.interior, iterations=layers)


def h_surface_residual(u: Field, H) -> float:
    """L² norm of ``Δu − 2H(u) ∂₁u ∧ ∂₂u`` over deep interior nodes (central stencils)."""
    g = u.grid
    du = _grad_array(u)
    lap = divergence(gradient(u)).values[..., 0, 0]
    hv = _H_values(H, u.values[..., 0, 0])
    r = lap - 2.0 * hv[..., None] * wedge(du[..., 0], du[..., 1])
    mask = deep_interior(g, 3)
    return float(math.sqrt((g.weights[mask][:, None] * r[mask] ** 2).sum()))


def solve_h_surface(prob: HSurfaceProblem):
    """Damped Picard iteration for ``−Δu = Ω(u)·∇u`` with ``u = ψ`` on ``∂D²``.

    Returns ``(u, PicardLog)``; raises ``HSurfaceFailure`` with the increment
    history when the increment does not fall below ``tol``.
    """
    grid = prob.grid
    log = PicardLog()
    base = SystemProblem(None, None, prob.boundary, m=3)
    u = solve_linear_system(base, grid)
    hv = _H_values(prob.H, u.values[..., 0, 0])
    if not np.any(hv):
        log.converged, log.iterations = True, 1
        log.increments.append(0.0)
        log.residual = h_surface_residual(u, prob.H)
        return u, log
    for k in range(1, prob.max_iter + 1):
        Om = build_h_surface_omega(u, prob.H)
        u_new = solve_linear_system(SystemProblem(Om, None, prob.boundary, m=3), grid)
        step = Field(grid, prob.damping * (u_new.values - u.values))
        u = Field(grid, u.values + step.values)
        inc = w12_norm(step)
        log.increments.append(inc)
        log.iterations = k
        if not np.isfinite(inc):
            break
        if inc <= prob.tol:
            log.converged = True
            log.residual = h_surface_residual(u, prob.H)
            return u, log
    raise HSurfaceFailure(f"Picard iteration did not converge in {prob.max_iter} iterations "
                          f"(last increment {log.increments[-1]:.3e})", log.increments)


def stereographic_sphere(grid: DiscGrid, scale: float = 1.0) -> Field:
    """``u*(x) = (2x¹, 2x², |x|² − 1) / (1 + |x|²)`` evaluated at ``scale·x``."""
    X, Y = scale * grid.X, scale * grid.Y
    q = 1.0 + X**2 + Y**2
    return Field.vector(grid, np.stack([2 * X / q, 2 * Y / q, (X**2 + Y**2 - 1) / q], -1))


def stereographic_boundary(scale: float = 1.0):
    """Boundary trace of ``u*(scale·x)`` on the unit circle."""
    q = 1.0 + scale**2

    def psi(theta):
        theta = np.asarray(theta, dtype=float)
        return np.stack([2 * scale * np.cos(theta) / q, 2 * scale * np.sin(theta) / q,
                         np.full(theta.shape, (scale**2 - 1) / q)], -1)
    return psi


def gauged_divergence_residual(u: Field, gp, e: Field | None = None) -> float:
    """L² defect of ``−div(P⁻¹∇u) = ∇⊥ξ·P⁻¹∇u + P⁻¹e`` on the working disc.

    Central differences at deep interior nodes; one-sided stencils near the
    rim are excluded because they are not consistent across the product.
    """
    grid = u.grid
    P = gp.P.values[..., 0]
    Pt = np.swapaxes(P, -1, -2)
    du = _grad_array(u)                                   # (n, n, m, 2)
    V = np.einsum("...ij,...jk->...ik", Pt, du)           # P⁻¹∇u
    Vf = Field(grid, V[..., None, :])
    divV = divergence(Vf).values[..., 0, 0]
    rxi = rotated_gradient(gp.xi).values                  # (n, n, m, m, 2)
    rhs = np.einsum("...ijk,...jk->...i", rxi, V)
    if e is not None:
        rhs = rhs + np.einsum("...ij,...j->...i", Pt, e.values[..., 0, 0])
    r = -divV - rhs
    d = gp.disc
    mask = deep_interior(grid, 3) & grid.members(d)
    w = grid.disc_weights(d)
    return float(math.sqrt((w[mask][:, None] * r[mask] ** 2).sum()))


# ---------------------------------------------------------------------------
# Manufactured problems


def _smooth_vector(m: int, rng, amplitude: float):
    """Random smooth ``u: R² -> R^m`` with analytic gradient and Laplacian."""
    a = rng.normal(size=(m, 3))
    k = rng.normal(size=(m, 2))

    def f(X, Y):
        u, ux, uy, lap = [], [], [], []
        for i in range(m):
            ph = k[i, 0] * X + k[i, 1] * Y
            s, c = np.sin(ph), np.cos(ph)
            kk = k[i, 0] ** 2 + k[i, 1] ** 2
            u.append(amplitude * (a[i, 0] * s + a[i, 1] * X * Y + a[i, 2] * X))
            ux.append(amplitude * (a[i, 0] * k[i, 0] * c + a[i, 1] * Y + a[i, 2]))
            uy.append(amplitude * (a[i, 0] * k[i, 1] * c + a[i, 1] * X))
            lap.append(amplitude * (-a[i, 0] * kk * s))
        return (np.stack(u, -1), np.stack([np.stack(ux, -1), np.stack(uy, -1)], -1), np.stack(lap, -1))
    return f


def manufactured_system(grid: DiscGrid, m: int = 3, omega_l2: float = 0.2, seed: int = 0,
                        amplitude: float = 1.0):
    """Problem with known solution ``u*`` and ``e := −Δu* − Ω·∇u*``.

    ``Ω`` is a random divergence-free skew potential with ``‖Ω‖_{L²} = omega_l2``.
    Returns ``(SystemProblem, u*)``.
    """
    from .gauge import random_divfree_potential
    rng = np.random.default_rng(seed)
    Om = random_divfree_potential(grid, m, omega_l2, rng)
    f = _smooth_vector(m, rng, amplitude)
    u, du, lap = f(grid.X, grid.Y)
    e = -lap - omega_dot_grad(Om.values, du)

    def psi(theta):
        theta = np.asarray(theta, dtype=float)
        return f(np.cos(theta), np.sin(theta))[0]
    prob = SystemProblem(Om, Field.vector(grid, e), psi, m=m)
    return prob, Field.vector(grid, u)
