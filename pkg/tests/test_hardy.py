import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from skewreg.grid import Field, GridError, build_grid
from skewreg.hardy import (PHI0_CONSTANT, MaximalConfig, bmo_seminorm, div_curl_hardy_check, duality_check,
                           hardy_norm, wente_check)
from skewreg.random_fields import band_limited, band_limited_field


def bump_laplacian(g, c=(0.1, -0.1), r=0.4):
    """Δφ for φ = (1 − |x−c|²/r²)³₊ (closed form)."""
    X, Y = g.X - c[0], g.Y - c[1]
    s = (X**2 + Y**2) / r**2
    inside = s < 1
    # φ = (1−s)³; Δφ = 3(1−s)(−4/r²)(1−s) ... written out via radial formula
    lap = np.where(inside, (-12 / r**2) * (1 - s) ** 2 + (24 / r**2) * s * (1 - s), 0.0)
    return Field.scalar(g, lap)


def test_phi0_gradient_normalised():
    z = np.linspace(0, 1, 200001)
    grad = PHI0_CONSTANT * 6 * z * (1 - z * z) ** 2
    assert grad.max() == pytest.approx(1.0, rel=1e-9)


def test_bmo_constant_is_zero(g33):
    assert bmo_seminorm(Field.scalar(g33, np.full(g33.shape, 3.0)), 0.5) == 0.0


def test_bmo_of_x1(g129):
    val = bmo_seminorm(Field.scalar(g129, g129.X.copy()), 0.5)
    assert val == pytest.approx(4 * 0.5 / (3 * math.pi), rel=0.01)


def test_bmo_of_sign(g65):
    val, (idx, r) = bmo_seminorm(Field.scalar(g65, np.sign(g65.X)), 0.5, return_argmax=True)
    assert 0.5 <= val <= 1.0
    assert abs(g65.X[tuple(idx)]) <= r


def test_bmo_rejects_tiny_radius(g33):
    with pytest.raises(GridError):
        bmo_seminorm(Field.scalar(g33, g33.X.copy()), g33.h / 2)


@settings(max_examples=15, deadline=None)
@given(c=st.floats(-50, 50), s=st.floats(-5, 5), seed=st.integers(0, 1000))
def test_bmo_invariances(c, s, seed):
    g = build_grid(33)
    f = band_limited(g, np.random.default_rng(seed), 3)
    base = bmo_seminorm(Field.scalar(g, f), 0.5)
    shifted = bmo_seminorm(Field.scalar(g, f + c), 0.5)
    scaled = bmo_seminorm(Field.scalar(g, s * f), 0.5)
    assert shifted == pytest.approx(base, rel=1e-9, abs=1e-12)
    assert scaled == pytest.approx(abs(s) * base, rel=1e-9, abs=1e-12)


def test_bmo_plane_mode_sees_the_rim(g33):
    f = Field.scalar(g33, np.ones(g33.shape))
    assert bmo_seminorm(f, 0.5, mode="disc") == 0.0
    assert bmo_seminorm(f, 0.5, mode="plane") > 0.1


def test_maximal_config_validation(g33):
    with pytest.raises(GridError, match="increasing"):
        MaximalConfig(g33.h, scales=(0.2, 0.1))
    with pytest.raises(GridError):
        MaximalConfig(g33.h, scales=(-0.1, 0.2))
    with pytest.raises(GridError, match="profile"):
        MaximalConfig(g33.h, profile="gauss")
    cfg = MaximalConfig.for_grid(g33)
    assert all(b > a for a, b in zip(cfg.scales, cfg.scales[1:]))


def test_hardy_zero_and_homogeneity(g33):
    cfg = MaximalConfig.for_grid(g33)
    assert hardy_norm(Field.scalar(g33, np.zeros(g33.shape)), cfg) == 0.0
    f = bump_laplacian(g33)
    a = hardy_norm(f, cfg)
    assert a > 0
    assert hardy_norm(f * -2.5, cfg) == pytest.approx(2.5 * a, rel=1e-12)


def test_hardy_of_laplacian_stable_under_scale_refinement(g65):
    f = bump_laplacian(g65)
    coarse = MaximalConfig.for_grid(g65)
    kmax = int(math.floor(2 * math.log2(4.0 / g65.h)))
    fine = MaximalConfig(g65.h, scales=tuple(2 ** (k / 2) * g65.h for k in range(2, kmax + 1)))
    a, b = hardy_norm(f, coarse), hardy_norm(f, fine)
    assert abs(a - b) / b <= 0.10


def test_hardy_of_indicator_grows_with_window(g65):
    f = Field.scalar(g65, (g65.R < 0.5).astype(float))
    vals = [hardy_norm(f, MaximalConfig.for_grid(g65, margin=m)) for m in (0.5, 1.0, 2.0)]
    inc = np.diff(vals)
    assert np.all(inc > 0)
    assert inc[1] >= 0.5 * inc[0]


def test_div_curl_self_pair_is_zero(g33):
    a = band_limited_field(g33, 1)
    rep = div_curl_hardy_check([(a, a)], MaximalConfig.for_grid(g33))
    assert rep.ratios == [pytest.approx(0.0, abs=1e-12)]


def test_div_curl_degenerate(g33):
    a = Field.scalar(g33, np.ones(g33.shape))
    rep = div_curl_hardy_check([(a, band_limited_field(g33, 2))], MaximalConfig.for_grid(g33))
    assert rep.ratios == [0.0] and rep.notes == ["degenerate"]


def test_div_curl_linear_pair_stable():
    vals = []
    for n in (65, 129):
        g = build_grid(n)
        rep = div_curl_hardy_check([(Field.scalar(g, g.X.copy()), Field.scalar(g, g.Y.copy()))],
                                   MaximalConfig.for_grid(g))
        vals.append(rep.ratios[0])
    assert np.all(np.isfinite(vals))
    assert abs(vals[0] - vals[1]) / vals[1] < 0.10


def test_div_curl_batch_bounded(g33):
    pairs = [(band_limited_field(g33, 2 * k), band_limited_field(g33, 2 * k + 1)) for k in range(20)]
    rep = div_curl_hardy_check(pairs, MaximalConfig.for_grid(g33))
    assert len(rep.ratios) == 20
    assert 0 < rep.max_ratio < 10
    assert len(rep.rows()) == 20


def test_duality(g65):
    cfg = MaximalConfig.for_grid(g65)
    g = bump_laplacian(g65)
    const = Field.scalar(g65, np.full(g65.shape, 2.0))
    rep = duality_check([(const, g), (Field.scalar(g65, g65.X.copy()), g)], cfg)
    assert rep.ratios[0] is None and rep.notes[0].startswith("skipped-degenerate")
    assert rep.ratios[1] is not None and 0 < rep.ratios[1] < 10
    pairs = [(band_limited_field(g65, k), bump_laplacian(g65, (0.2 * math.cos(k), 0.2 * math.sin(k)), 0.3))
             for k in range(5)]
    assert np.isfinite(duality_check(pairs, cfg).max_ratio)


def test_wente_closed_form(g129):
    rep = wente_check(Field.scalar(g129, g129.X.copy()), Field.scalar(g129, g129.Y.copy()), 2.0, keep_solution=True)
    assert rep.ratio == pytest.approx(math.sqrt(math.pi / 8) / math.pi, rel=0.02)
    u = rep.u.values[..., 0, 0, 0]
    assert np.abs(u - (-(1 - g129.R**2) / 4))[g129.interior].max() < 1e-10


def test_wente_self_pair(g33):
    a = band_limited_field(g33, 0)
    assert wente_check(a, a).ratio == pytest.approx(0.0, abs=1e-10)


@pytest.mark.parametrize("p", [1.5, 2.0, 3.0])
def test_wente_invariances(g33, p):
    a, b = band_limited_field(g33, 5), band_limited_field(g33, 6)
    r = wente_check(a, b, p).ratio
    shifted = wente_check(Field.scalar(g33, a.values[..., 0, 0, 0] + 3.0),
                          Field.scalar(g33, b.values[..., 0, 0, 0] - 1.0), p).ratio
    assert shifted == pytest.approx(r, rel=1e-8)
    # swapping flips the sign of the right-hand side
    swapped = wente_check(b, a, p)
    direct = wente_check(a, b, p)
    assert swapped.grad_u == pytest.approx(direct.grad_u, rel=1e-8)


def test_wente_rejects_bad_p(g33):
    with pytest.raises(GridError):
        wente_check(band_limited_field(g33, 0), band_limited_field(g33, 1), 1.0)
