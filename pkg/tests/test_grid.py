import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hierwave.errors import ConfigurationError
from hierwave.geometry import DomainSpec
from hierwave.grid import (
    Field,
    GridSpec,
    Mesh,
    PoissonRiesz,
    SpatialProfile,
    Trace,
    duality_pairing,
    h10_norm_physical,
    hminus1_norm_physical,
    l2_norm_physical,
    load_field_csv,
    load_profile_csv,
    load_trace_csv,
    save_field_csv,
    save_profile_csv,
    save_trace_csv,
    trapezoid_weights,
)

# frozen closed-form reference values
SQRT_12 = 1.0954451150103321       # sqrt(1.2)
L2_SIN = 0.7071067811865476        # sqrt(1/2)
H10_SIN = 2.221441469079183        # pi / sqrt(2)
HM1_SIN = 0.22507907903927651      # 1 / (pi sqrt(2))
HM1_ONE = 0.2886751345948129       # 1 / sqrt(12)


def unit_mesh(Ny=64):
    return Mesh.auto(DomainSpec(k=0.0, T=1.0, allow_k_zero=True), Ny)


def profile(mesh, fn, time=0.0):
    return SpatialProfile(fn(mesh.y), time, mesh)


def test_trapezoid_weights():
    w = trapezoid_weights(5, 0.25)
    assert np.allclose(w, [0.125, 0.25, 0.25, 0.25, 0.125])
    assert np.sum(w) == pytest.approx(1.0)


def test_l2_norm_examples():
    mesh = Mesh.auto(DomainSpec(k=0.1, T=4.0), 64)
    # alpha = 1.2 at t = 2
    f = SpatialProfile(np.ones(mesh.Ny + 1), 2.0, mesh)
    assert l2_norm_physical(f) == pytest.approx(SQRT_12, rel=1e-12)
    zero = SpatialProfile(np.zeros(mesh.Ny + 1), 2.0, mesh)
    assert l2_norm_physical(zero) == 0.0
    # trapezoid is exact for sin^2 on a uniform periodic-compatible grid
    s = profile(unit_mesh(), lambda y: np.sin(np.pi * y))
    assert l2_norm_physical(s) == pytest.approx(L2_SIN, rel=1e-12)


def test_h10_norm_examples():
    mesh = unit_mesh(128)
    s = profile(mesh, lambda y: np.sin(np.pi * y))
    # first-difference form carries an O(dy^2) defect against the continuum
    assert h10_norm_physical(s) == pytest.approx(H10_SIN, rel=1e-3)
    zero = profile(mesh, lambda y: 0.0 * y)
    assert h10_norm_physical(zero) == 0.0
    f = profile(mesh, lambda y: y * (1 - y) ** 2)
    assert h10_norm_physical(3.0 * f) == pytest.approx(3.0 * h10_norm_physical(f), rel=1e-12)


def test_h10_requires_zero_endpoints():
    mesh = unit_mesh()
    with pytest.raises(ConfigurationError):
        h10_norm_physical(profile(mesh, lambda y: y + 1.0))


def test_hminus1_norm_examples():
    mesh = unit_mesh(128)
    s = profile(mesh, lambda y: np.sin(np.pi * y))
    assert hminus1_norm_physical(s) == pytest.approx(HM1_SIN, rel=1e-3)
    one = profile(mesh, lambda y: np.ones_like(y))
    assert hminus1_norm_physical(one) == pytest.approx(HM1_ONE, rel=1e-3)
    zero = profile(mesh, lambda y: 0.0 * y)
    assert hminus1_norm_physical(zero) == 0.0


def test_duality_pairing_examples():
    mesh = unit_mesh(128)
    s = profile(mesh, lambda y: np.sin(np.pi * y))
    assert duality_pairing(s, s) == pytest.approx(0.5, rel=1e-12)
    zero = profile(mesh, lambda y: 0.0 * y)
    assert duality_pairing(s, zero) == 0.0


def test_duality_pairing_bound():
    mesh = unit_mesh(48)
    rng = np.random.default_rng(7)
    for _ in range(100):
        f = profile(mesh, lambda y: rng.standard_normal(y.size))
        gv = rng.standard_normal(mesh.Ny + 1)
        gv[0] = gv[-1] = 0.0
        g = SpatialProfile(gv, 0.0, mesh)
        lhs = abs(duality_pairing(f, g))
        rhs = hminus1_norm_physical(f) * h10_norm_physical(g)
        assert lhs <= rhs + 1e-10 * (1.0 + rhs)


def test_riesz_triple_consistency():
    """The same Poisson solve must tie the pairing, lift, and both norms together."""
    mesh = Mesh.auto(DomainSpec(k=0.2, T=3.0), 48)
    pr = PoissonRiesz(mesh, 3.0)
    rng = np.random.default_rng(3)
    for _ in range(20):
        f = rng.standard_normal(mesh.Ny + 1)
        gv = rng.standard_normal(mesh.Ny + 1)
        gv[0] = gv[-1] = 0.0
        v = pr.solve_values(f)
        # pairing of f against g equals the energy inner product of lift and g
        pair_fg = pr.pairing_values(f, gv)
        energy = float(np.sum(np.diff(v) * np.diff(gv)) / pr.hx)
        assert pair_fg == pytest.approx(energy, rel=1e-11, abs=1e-13)
        # negative norm of f equals the energy norm of its lift
        assert pr.hminus1_values(f) == pytest.approx(pr.h10_values(v), rel=1e-11)


def test_hminus1_second_order_convergence():
    # smooth non-eigenfunction f = x^2 (1 - x); exact value via the solved
    # two-point problem: v = x^5/20 - x^4/12 + x/30, ||f||^2 = int f v
    exact_sq = (
        Fraction(1, 160)
        - Fraction(1, 84)
        + Fraction(1, 120)
        - Fraction(1, 180)
        + Fraction(1, 96)
        - Fraction(1, 150)
    )
    exact = math.sqrt(float(exact_sq))
    errs = []
    for Ny in (32, 64, 128):
        mesh = unit_mesh(Ny)
        f = profile(mesh, lambda y: y**2 * (1 - y))
        errs.append(abs(hminus1_norm_physical(f) - exact))
    r1 = errs[0] / errs[1]
    r2 = errs[1] / errs[2]
    assert 3.0 < r1 < 5.0
    assert 3.0 < r2 < 5.0


@settings(max_examples=25, deadline=None)
@given(c=st.floats(-10, 10), seed=st.integers(0, 1000))
def test_norm_homogeneity(c, seed):
    mesh = unit_mesh(32)
    rng = np.random.default_rng(seed)
    fv = rng.standard_normal(mesh.Ny + 1)
    f = SpatialProfile(fv, 0.0, mesh)
    cf = SpatialProfile(c * fv, 0.0, mesh)
    assert l2_norm_physical(cf) == pytest.approx(abs(c) * l2_norm_physical(f), rel=1e-10, abs=1e-12)
    assert hminus1_norm_physical(cf) == pytest.approx(
        abs(c) * hminus1_norm_physical(f), rel=1e-10, abs=1e-12
    )


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 1000))
def test_norm_triangle(seed):
    mesh = unit_mesh(32)
    rng = np.random.default_rng(seed)
    fv, gv = rng.standard_normal((2, mesh.Ny + 1))
    f, g = SpatialProfile(fv, 0.0, mesh), SpatialProfile(gv, 0.0, mesh)
    fg = SpatialProfile(fv + gv, 0.0, mesh)
    for norm in (l2_norm_physical, hminus1_norm_physical):
        assert norm(fg) <= norm(f) + norm(g) + 1e-12


def test_gridspec_validation():
    with pytest.raises(ConfigurationError):
        GridSpec(Ny=4, Nt=100)
    with pytest.raises(ConfigurationError):
        GridSpec(Ny=16, Nt=100, cfl_safety=1.5)


def test_mesh_auto_cfl():
    mesh = Mesh.auto(DomainSpec(k=0.3, T=2.0), 33)
    assert mesh.cfl_ok()
    bad = Mesh(DomainSpec(k=0.3, T=2.0), GridSpec(Ny=33, Nt=10))
    assert not bad.cfl_ok()
    with pytest.raises(ConfigurationError):
        bad.require_cfl()


def test_container_shape_validation():
    mesh = unit_mesh(16)
    with pytest.raises(ConfigurationError):
        Field(np.zeros((3, 3)), mesh)
    with pytest.raises(ConfigurationError):
        SpatialProfile(np.zeros(5), 0.0, mesh)
    with pytest.raises(ConfigurationError):
        Trace(np.zeros(5), np.ones(5, bool), mesh)


def test_trace_zero_off_mask():
    mesh = unit_mesh(16)
    mask = np.zeros(mesh.Nt + 1, dtype=bool)
    mask[: mesh.Nt // 2] = True
    tr = Trace(np.ones(mesh.Nt + 1), mask, mesh)
    assert np.all(tr.values[~mask] == 0.0)


def test_csv_roundtrips(tmp_path):
    mesh = Mesh.auto(DomainSpec(k=0.25, T=2.0), 16)
    rng = np.random.default_rng(5)

    prof = SpatialProfile(rng.standard_normal(mesh.Ny + 1), 2.0, mesh)
    save_profile_csv(tmp_path / "p.csv", prof, {"note": "test"})
    back = load_profile_csv(tmp_path / "p.csv", mesh, 2.0)
    assert np.array_equal(back.values, prof.values)

    tr = Trace(rng.standard_normal(mesh.Nt + 1), np.ones(mesh.Nt + 1, bool), mesh)
    save_trace_csv(tmp_path / "t.csv", tr)
    back = load_trace_csv(tmp_path / "t.csv", mesh)
    assert np.array_equal(back.values, tr.values)

    fld = Field(rng.standard_normal((mesh.Ny + 1, mesh.Nt + 1)), mesh)
    save_field_csv(tmp_path / "f.csv", fld)
    back = load_field_csv(tmp_path / "f.csv", mesh)
    assert np.array_equal(back.values, fld.values)


def test_csv_mismatch_rejected(tmp_path):
    mesh = Mesh.auto(DomainSpec(k=0.25, T=2.0), 16)
    other = Mesh.auto(DomainSpec(k=0.25, T=2.0), 24)
    prof = SpatialProfile(np.ones(mesh.Ny + 1), 2.0, mesh)
    save_profile_csv(tmp_path / "p.csv", prof)
    with pytest.raises(ConfigurationError):
        load_profile_csv(tmp_path / "p.csv", other, 2.0)
