import math

import numpy as np
import pytest
import scipy.linalg
from hypothesis import given, settings, strategies as st

from skewreg.gauge import (DecompositionFailed, GaugeConfig, SmallnessViolation, T_apply, audit_estimates,
                           complex_for, decompose, exp_skew, l2_norm, linearized_apply, log_rotation,
                           manufactured_potential, random_divfree_potential, skew_basis, solve_gauge_step,
                           structure_defects, vector_potential)
from skewreg.grid import Field, GridError, build_grid


def skew_field(g, coeff_fn, m):
    """Skew (m, m, 1) field from a function returning the m(m-1)/2 coordinates."""
    basis = skew_basis(m)
    c = coeff_fn(g.X, g.Y)
    vals = sum(c[k][..., None, None] * basis[k] for k in range(len(basis)))
    return Field(g, vals[..., None], "skew")


def bump(g):
    return np.clip(1 - g.R**2, 0, None)


# -- exponential -----------------------------------------------------------


def test_exp_zero_is_identity(g33):
    U = Field(g33, np.zeros(g33.shape + (3, 3, 1)), "skew")
    P = exp_skew(U).values[..., 0]
    assert np.array_equal(P, np.broadcast_to(np.eye(3), P.shape))


def test_exp_planar_rotation(g33):
    th = 0.7
    J = np.array([[0.0, -1.0], [1.0, 0.0]])
    U = Field(g33, np.broadcast_to(th * J, g33.shape + (2, 2))[..., None], "skew")
    P = exp_skew(U, 2).values[0, 0, ..., 0]
    R = np.array([[math.cos(th), -math.sin(th)], [math.sin(th), math.cos(th)]])
    assert np.abs(P - R).max() < 1e-15


def taylor(A, terms=30):
    out = np.eye(A.shape[0])
    term = np.eye(A.shape[0])
    for k in range(1, terms):
        term = term @ A / k
        out = out + term
    return out


@pytest.mark.parametrize("m", [3, 4, 5])
def test_exp_matches_series(m, g33, rng):
    basis = skew_basis(m)
    for _ in range(5):
        A = sum(c * b for c, b in zip(rng.normal(size=len(basis)), basis))
        U = Field(g33, np.broadcast_to(A, g33.shape + (m, m))[..., None], "skew")
        P = exp_skew(U).values[3, 4, ..., 0]
        assert np.abs(P - taylor(A)).max() < 1e-10
        assert np.abs(P - scipy.linalg.expm(A)).max() < 1e-12


def test_exp_arity_check(g33):
    with pytest.raises(GridError):
        exp_skew(Field(g33, np.zeros(g33.shape + (3, 3, 2)), "skew"))


@settings(max_examples=40, deadline=None)
@given(c=st.lists(st.floats(-1.0, 1.0), min_size=3, max_size=3))
def test_log_inverts_exp(c):
    A = sum(ci * b for ci, b in zip(c, skew_basis(3)))
    from skewreg.gauge import _expm_skew_array
    assert np.abs(log_rotation(_expm_skew_array(A)) - A).max() < 1e-12


# -- operator T and its linearisation ---------------------------------------


def test_T_zero_is_div_perp(g65):
    g = g65
    m = 3
    zeta = skew_field(g, lambda x, y: [np.sin(x + y), x * y, np.cos(2 * x)], m)
    zero = Field(g, np.zeros(g.shape + (m, m, 1)), "skew")
    lam = Field(g, np.zeros(g.shape + (m, m, 2)), "skew")
    T = T_apply(zero, lam, zeta)
    assert np.abs(T.values).max() < 1e-9


def test_T_of_gradient_is_laplacian():
    errs = []
    for n in (33, 65):
        g = build_grid(n)
        S = skew_basis(3)[1]
        phi = (1 - g.R**2) * np.cos(g.X)
        # grad of phi, analytic
        px = -2 * g.X * np.cos(g.X) - (1 - g.R**2) * np.sin(g.X)
        py = -2 * g.Y * np.cos(g.X)
        lap = -4 * np.cos(g.X) + 4 * g.X * np.sin(g.X) - (1 - g.R**2) * np.cos(g.X)
        lam = Field(g, np.stack([px, py], -1)[..., None, None, :] * S[..., None], "skew")
        zero = Field(g, np.zeros(g.shape + (3, 3, 1)), "skew")
        T = T_apply(zero, lam, zero).values[..., 0]
        cx = complex_for(g)
        inner = np.zeros(g.shape, bool)
        inner[cx.ii, cx.jj] = True
        inner &= g.R < 0.8
        errs.append(np.abs(T - lap[..., None, None] * S)[inner].max())
    assert errs[1] < 0.3 * errs[0]
    assert errs[1] < 0.02


def _psi(g, m=3):
    return skew_field(g, lambda x, y: [bump(g) * np.sin(x + 2 * y), bump(g) * x, bump(g) * (0.5 + y * y)], m)


def test_linearization_zero_and_laplacian(g33):
    g = g33
    zero = Field(g, np.zeros(g.shape + (3, 3, 1)), "skew")
    assert np.abs(linearized_apply(zero, zero).values).max() == 0.0
    psi = _psi(g)
    lam0 = Field(g, np.zeros(g.shape + (3, 3, 2)), "skew")
    for eps in (1e-3, 1e-4):
        fd = (T_apply(psi * eps, lam0, zero).values - T_apply(zero, lam0, zero).values) / eps
        H = linearized_apply(psi, zero).values
        assert np.abs(fd - H).max() <= 50 * eps * np.abs(H).max()


def test_linearization_finite_difference_order(g33):
    g = g33
    zeta = skew_field(g, lambda x, y: [0.3 * np.cos(x + y), 0.2 * x * y, 0.1 * np.sin(3 * x)], 3)
    lam = random_divfree_potential(g, 3, 0.3, np.random.default_rng(4))
    zero = Field(g, np.zeros(g.shape + (3, 3, 1)), "skew")
    psi = _psi(g)
    H = linearized_apply(psi, zeta, lam).values
    T0 = T_apply(zero, lam, zeta).values
    errs = []
    for eps in (1e-3, 1e-4):
        fd = (T_apply(psi * eps, lam, zeta).values - T0) / eps
        errs.append(np.abs(fd - H).max())
    assert errs[1] < 0.2 * errs[0]
    assert errs[1] < 1e-2 * np.abs(H).max()


# -- Newton step -------------------------------------------------------------


def test_step_with_zero_increment(g33):
    g = g33
    zeta = Field(g, np.zeros(g.shape + (3, 3, 1)), "skew")
    R = Field(g, np.broadcast_to(np.eye(3), g.shape + (3, 3))[..., None], "rotation")
    lam = Field(g, np.zeros(g.shape + (3, 3, 2)), "skew")
    U, stats = solve_gauge_step(zeta, R, lam)
    assert stats.iterations == 0
    assert np.abs(U.values).max() == 0.0


def test_step_with_divergence_free_increment(g65):
    g = g65
    zeta = Field(g, np.zeros(g.shape + (3, 3, 1)), "skew")
    R = Field(g, np.broadcast_to(np.eye(3), g.shape + (3, 3))[..., None], "rotation")
    lam = random_divfree_potential(g, 3, 0.2, np.random.default_rng(1))
    U, stats = solve_gauge_step(zeta, R, lam, tol=1e-10)
    assert stats.converged
    assert l2_norm(U) < 0.02 * l2_norm(lam)


def test_step_manufactured_root():
    # λ = −∇P*P*⁻¹ makes U* a root of the continuous T(·, λ); the discrete root differs
    # by the truncation error plus a first-order layer where U* is cut off at the rim
    errs = []
    for n in (33, 65):
        g = build_grid(n)
        m = 3
        Ustar = _psi(g) * 0.2
        Pstar = exp_skew(Ustar)
        from skewreg.elliptic import gradient
        dP = gradient(Pstar).values
        Pt = np.swapaxes(Pstar.values[..., 0], -1, -2)
        lam_v = -np.einsum("...ijk,...jl->...ilk", dP, Pt)
        lam_v = 0.5 * (lam_v - np.swapaxes(lam_v, -3, -2))
        lam = Field(g, lam_v, "skew")
        zeta = Field(g, np.zeros(g.shape + (m, m, 1)), "skew")
        R = Field(g, np.broadcast_to(np.eye(m), g.shape + (m, m))[..., None], "rotation")
        U, stats = solve_gauge_step(zeta, R, lam, tol=1e-9)
        assert stats.converged
        assert l2_norm(T_apply(U, lam, zeta)) <= 1e-8
        errs.append(l2_norm(U - Ustar) / l2_norm(Ustar))
    assert errs[1] < 0.15 and errs[1] < 0.6 * errs[0]


# -- vector potential --------------------------------------------------------


def test_vector_potential_zero(g33):
    w = Field(g33, np.zeros(g33.shape + (1, 1, 2)))
    assert np.abs(vector_potential(w).values).max() == 0.0


def test_vector_potential_stream_function():
    errs = []
    for n in (65, 129):
        g = build_grid(n)
        beta = np.sin(g.X) * np.cos(2 * g.Y)
        w = np.stack([2 * np.sin(g.X) * np.sin(2 * g.Y), np.cos(g.X) * np.cos(2 * g.Y)], -1)
        xi = vector_potential(Field(g, w[..., None, None, :])).values[..., 0, 0, 0]
        wts = g.weights
        target = beta - (wts * beta).sum() / wts.sum()
        errs.append(math.sqrt((wts * (xi - target) ** 2).sum()))
    assert errs[1] < 2e-3 and errs[1] < errs[0]


def test_vector_potential_rejects_gradient(g65):
    g = g65
    w = np.stack([2 * g.X, 2 * g.Y], -1)
    with pytest.raises(GridError, match="divergence free"):
        vector_potential(Field(g, w[..., None, None, :]))


# -- decomposition -----------------------------------------------------------


def test_decompose_zero(g33):
    Om = Field(g33, np.zeros(g33.shape + (3, 3, 2)), "skew")
    gp = decompose(Om)
    assert gp.residual == 0.0
    assert np.array_equal(gp.P.values[..., 0], np.broadcast_to(np.eye(3), g33.shape + (3, 3)))
    assert np.abs(gp.xi.values).max() == 0.0
    assert audit_estimates(gp, Om).grad_ratio == 0.0


def test_decompose_abelian(g65):
    g = g65
    rng = np.random.default_rng(3)
    Om = random_divfree_potential(g, 2, 0.2, rng, abelian=True)
    gp = decompose(Om)
    # Ω = ∇⊥β J with β from the potential itself
    beta = vector_potential(Field(g, Om.values[..., 1:2, 0:1, :])).values[..., 0, 0, 0]
    xi = gp.xi.values[..., 1, 0, 0]
    assert np.abs(gp.P.values[..., 0] - np.eye(2)).max() < 1e-4
    assert math.sqrt((g.weights * (xi - beta) ** 2).sum()) < 1e-3 * max(math.sqrt((g.weights * beta**2).sum()), 1e-3)


def test_decompose_manufactured_structure(g65):
    Om = manufactured_potential(g65, 0.02, 0)[0]
    gp = decompose(Om)
    assert gp.relative_residual <= 1e-4
    sd = structure_defects(gp)
    assert sd["orth_defect"] <= 1e-8
    assert sd["xi_skew_defect"] <= 1e-12
    assert sd["xi_mean"] <= 1e-8 * sd["xi_l2"]
    assert sd["boundary_P_defect"] <= 1e-6
    assert all(b > a for a, b in zip(gp.t_history, gp.t_history[1:]))
    assert gp.t_history[-1] == 1.0
    meta = gp.metadata()
    assert meta["steps"] == len(gp.t_history)


def test_decompose_deterministic(g33):
    Om = random_divfree_potential(g33, 3, 0.25, np.random.default_rng(8))
    a = decompose(Om)
    b = decompose(Om)
    assert np.array_equal(a.P.values, b.P.values)
    assert np.array_equal(a.xi.values, b.xi.values)


def test_smallness_violation(g33):
    Om = random_divfree_potential(g33, 3, 0.8, np.random.default_rng(0))
    with pytest.raises(SmallnessViolation):
        decompose(Om)


def test_continuation_stall_reports_last_t(g33):
    Om = random_divfree_potential(g33, 3, 0.4, np.random.default_rng(0))
    cfg = GaugeConfig(max_newton=0, min_step=0.05)
    with pytest.raises(DecompositionFailed) as info:
        decompose(Om, config=cfg)
    assert info.value.last_t == 0.0


def test_audit_scaling(g33):
    Om = random_divfree_potential(g33, 3, 0.3, np.random.default_rng(5))
    r1 = audit_estimates(decompose(Om), Om).grad_ratio
    half = Om * 0.5
    r2 = audit_estimates(decompose(half), half).grad_ratio
    assert 0.5 <= r1 / r2 <= 2.0
