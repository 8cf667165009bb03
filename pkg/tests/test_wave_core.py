import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hierwave.errors import ConfigurationError, InstabilityError
from hierwave.geometry import DomainSpec
from hierwave.grid import Field, GridSpec, Mesh, SpatialProfile, Trace, trapezoid_weights
from hierwave.wave_core import (
    WaveProblem,
    extract_terminal,
    final_value_profile,
    final_velocity_profile,
    get_operator,
    solve_backward,
    solve_forward,
    terminal_adjoint,
    trace_normal_derivative,
)

SIN_QUARTER = 0.7071067811865476  # sin(pi/4)


def full_mask(mesh):
    return np.ones(mesh.Nt + 1, dtype=bool)


def zero_trace(mesh, side="y=0"):
    return Trace(np.zeros(mesh.Nt + 1), full_mask(mesh), mesh, side)


def random_inputs(mesh, rng):
    J, N = mesh.Ny, mesh.Nt
    bc0 = rng.standard_normal(N + 1)
    bc1 = rng.standard_normal(N + 1)
    a_int = rng.standard_normal(J - 1)
    m = rng.standard_normal(J + 1)
    S = rng.standard_normal((J + 1, N + 1))
    return bc0, bc1, a_int, m, S


def test_march_equals_matrix_solve():
    mesh = Mesh.auto(DomainSpec(k=0.2, T=1.5), 16)
    op = get_operator(mesh)
    rng = np.random.default_rng(0)
    bc0, bc1, a_int, m, S = random_inputs(mesh, rng)
    a_full = np.concatenate([[bc0[0]], a_int, [bc1[0]]])
    v1 = op.march(bc0, bc1, a_full, m, S)
    v2 = op.solve_lu(bc0, bc1, a_int, m, S)
    assert np.max(np.abs(v1 - v2)) < 1e-11


def test_adjoint_solve_dot_product():
    """<M^{-1} r(inputs), rho> must equal <inputs, input-cotangents> exactly."""
    mesh = Mesh.auto(DomainSpec(k=0.15, T=1.0), 12)
    for mirrored in (False, True):
        op = get_operator(mesh, mirrored)
        rng = np.random.default_rng(1 + mirrored)
        bc0, bc1, a_int, m, S = random_inputs(mesh, rng)
        rho = rng.standard_normal((mesh.Ny + 1, mesh.Nt + 1))
        v = op.solve_lu(bc0, bc1, a_int, m, S)
        lam = op.solve_adjoint(rho)
        lhs = float(np.sum(v * rho))
        cot = op.rhs_adjoint(lam)
        rhs = (
            bc0 @ cot["bc0"]
            + bc1 @ cot["bc1"]
            + a_int @ cot["a_interior"]
            + m @ cot["m_full"]
            + float(np.sum(S * cot["source"]))
        )
        assert abs(lhs - rhs) <= 1e-12 * (abs(lhs) + abs(rhs))


def test_zero_data_gives_zero_field():
    mesh = Mesh.auto(DomainSpec(k=0.1, T=2.0), 16)
    fld = solve_forward(WaveProblem("forward", zero_trace(mesh)))
    assert np.all(fld.values == 0.0)
    bld = solve_backward(WaveProblem("backward", zero_trace(mesh)))
    assert np.all(bld.values == 0.0)


@settings(max_examples=15, deadline=None)
@given(a=st.floats(-3, 3), b=st.floats(-3, 3), seed=st.integers(0, 100))
def test_solver_linearity(a, b, seed):
    mesh = Mesh.auto(DomainSpec(k=0.2, T=1.0), 10)
    op = get_operator(mesh)
    rng = np.random.default_rng(seed)
    in1 = random_inputs(mesh, rng)
    in2 = random_inputs(mesh, rng)
    mix = tuple(a * x + b * y for x, y in zip(in1, in2))
    v_mix = op.solve_lu(*mix)
    v_sum = a * op.solve_lu(*in1) + b * op.solve_lu(*in2)
    scale = np.max(np.abs(v_mix)) + 1.0
    assert np.max(np.abs(v_mix - v_sum)) < 1e-12 * scale


def test_dalembert_pointwise():
    mesh = Mesh.auto(DomainSpec(k=0.0, T=1.0, allow_k_zero=True), 200)
    bc = Trace(np.sin(np.pi * mesh.times), full_mask(mesh), mesh)
    fld = solve_forward(WaveProblem("forward", bc))
    j = np.argmin(np.abs(mesh.y - 0.25))
    n = np.argmin(np.abs(mesh.times - 0.5))
    assert fld.values[j, n] == pytest.approx(SIN_QUARTER, abs=5e-3)


def test_trace_exact_for_linear_field():
    mesh = Mesh.auto(DomainSpec(k=0.3, T=2.0), 24)
    vals = np.outer(mesh.y, mesh.alphas)  # u = x
    tr = trace_normal_derivative(Field(vals, mesh), side="y=0")
    assert np.max(np.abs(tr.values - 1.0)) < 1e-12
    tr1 = trace_normal_derivative(Field(vals, mesh), side="y=1")
    assert np.max(np.abs(tr1.values - 1.0)) < 1e-12


def test_trace_zero_field():
    mesh = Mesh.auto(DomainSpec(k=0.1, T=1.0), 16)
    tr = trace_normal_derivative(Field.zeros(mesh), side="y=0")
    assert np.all(tr.values == 0.0)


def test_dalembert_trace_derivative():
    mesh = Mesh.auto(DomainSpec(k=0.0, T=0.9, allow_k_zero=True), 200)
    bc = Trace(np.sin(np.pi * mesh.times), full_mask(mesh), mesh)
    fld = solve_forward(WaveProblem("forward", bc))
    tr = trace_normal_derivative(fld, side="y=0")
    # before any reflection returns: u_x(0, t) = -pi cos(pi t)
    sel = (mesh.times > 0.1) & (mesh.times < 0.9)
    expected = -np.pi * np.cos(np.pi * mesh.times[sel])
    assert np.max(np.abs(tr.values[sel] - expected)) < 5e-2 * np.pi


def test_finite_speed_of_propagation():
    mesh = Mesh.auto(DomainSpec(k=0.0, T=1.0, allow_k_zero=True), 128)
    t = mesh.times
    bc_vals = np.where(t < 0.1, np.sin(np.pi * t / 0.1) ** 2, 0.0)
    fld = solve_forward(WaveProblem("forward", Trace(bc_vals, full_mask(mesh), mesh)))
    Y, Tm = np.meshgrid(mesh.y, t, indexing="ij")
    ahead = Tm < Y - 0.1 - 5 * mesh.dy
    assert np.max(np.abs(fld.values[ahead])) < 1e-10


def test_energy_conservation():
    mesh = Mesh.auto(DomainSpec(k=0.0, T=2.0, allow_k_zero=True), 200)
    init = SpatialProfile(np.sin(np.pi * mesh.y), 0.0, mesh)
    vel = SpatialProfile(np.zeros(mesh.Ny + 1), 0.0, mesh)
    fld = solve_forward(
        WaveProblem("forward", zero_trace(mesh), zero_trace(mesh, "y=1"), None, (init, vel))
    )
    v = fld.values
    wy = trapezoid_weights(mesh.Ny + 1, mesh.dy)
    e_exact = np.pi**2 / 4.0
    for n in range(1, mesh.Nt):
        u_t = (v[:, n + 1] - v[:, n - 1]) / (2 * mesh.dt)
        u_x = np.gradient(v[:, n], mesh.dy)
        energy = 0.5 * np.sum(wy * (u_t**2 + u_x**2))
        assert abs(energy - e_exact) / e_exact < 1e-3


def test_backward_time_mirror_at_k0():
    """At k = 0 the reversed-time problem is the forward problem on the
    mirrored source, so the two solves must agree after mirroring."""
    mesh = Mesh.auto(DomainSpec(k=0.0, T=1.0, allow_k_zero=True), 24)
    rng = np.random.default_rng(4)
    S = rng.standard_normal((mesh.Ny + 1, mesh.Nt + 1))
    back = solve_backward(WaveProblem("backward", zero_trace(mesh), source=Field(S, mesh)))
    fwd = solve_forward(
        WaveProblem("forward", zero_trace(mesh), source=Field(S[:, ::-1].copy(), mesh))
    )
    assert np.max(np.abs(back.values - fwd.values[:, ::-1])) < 1e-10


def test_backward_matches_monolithic_direct():
    """Constant source on the moving domain: the march agrees with a direct
    solve of the assembled space-time system."""
    import scipy.sparse.linalg

    mesh = Mesh.auto(DomainSpec(k=0.1, T=4.0), 41)
    src = Field(np.ones((mesh.Ny + 1, mesh.Nt + 1)), mesh)
    back = solve_backward(WaveProblem("backward", zero_trace(mesh), source=src))
    op = get_operator(mesh, mirrored=True)
    r = op.rhs_vector(
        np.zeros(mesh.Nt + 1),
        np.zeros(mesh.Nt + 1),
        np.zeros(mesh.Ny - 1),
        np.zeros(mesh.Ny + 1),
        src.values[:, ::-1].copy(),
    )
    direct = scipy.sparse.linalg.spsolve(op.matrix(), r)
    direct_field = direct.reshape(mesh.Nt + 1, mesh.Ny + 1).T[:, ::-1]
    scale = np.max(np.abs(direct_field))
    assert np.max(np.abs(back.values - direct_field)) < 1e-6 * scale


def test_backward_final_data_honored():
    mesh = Mesh.auto(DomainSpec(k=0.2, T=1.0), 32)
    f0v = np.sin(np.pi * mesh.y)
    f0 = SpatialProfile(f0v, 1.0, mesh)
    f1 = SpatialProfile(np.zeros(mesh.Ny + 1), 1.0, mesh)
    fld = solve_backward(WaveProblem("backward", zero_trace(mesh), None, None, (f0, f1)))
    assert np.max(np.abs(fld.values[:, -1] - f0v)) < 1e-12


def test_corner_compatibility_enforced():
    mesh = Mesh.auto(DomainSpec(k=0.1, T=1.0), 16)
    bad_bc = Trace(np.ones(mesh.Nt + 1), full_mask(mesh), mesh)
    with pytest.raises(ConfigurationError):
        WaveProblem("forward", bad_bc)  # zero data but bc(0) = 1


def test_cfl_violation_raises():
    mesh = Mesh(DomainSpec(k=0.1, T=2.0), GridSpec(Ny=32, Nt=20))
    with pytest.raises(ConfigurationError):
        solve_forward(WaveProblem("forward", zero_trace(mesh)))


def test_instability_detected():
    mesh = Mesh(DomainSpec(k=0.1, T=40.0), GridSpec(Ny=32, Nt=400))
    op = get_operator(mesh)
    bc = np.zeros(mesh.Nt + 1)
    a = np.sin(np.pi * mesh.y)
    m = np.zeros(mesh.Ny + 1)
    with pytest.raises(InstabilityError) as err:
        op.march(bc, bc, a, m)
    assert err.value.step is not None


def test_final_profiles_linear_solution():
    """u = x on the expanding domain has zero physical velocity everywhere."""
    mesh = Mesh.auto(DomainSpec(k=0.3, T=2.0), 24)
    a = mesh.alphas
    bc1 = Trace(a.copy(), full_mask(mesh), mesh, side="y=1")
    init_val = SpatialProfile(mesh.y.copy(), 0.0, mesh)
    init_vel = SpatialProfile(np.zeros(mesh.Ny + 1), 0.0, mesh)
    fld = solve_forward(WaveProblem("forward", zero_trace(mesh), bc1, None, (init_val, init_vel)))
    uT = final_value_profile(fld)
    assert np.max(np.abs(uT.values - a[-1] * mesh.y)) < 1e-12
    utT = final_velocity_profile(fld)
    assert np.max(np.abs(utT.values)) < 1e-11


def test_terminal_extraction_adjoint_pair():
    mesh = Mesh.auto(DomainSpec(k=0.2, T=1.0), 20)
    rng = np.random.default_rng(9)
    values = rng.standard_normal((mesh.Ny + 1, mesh.Nt + 1))
    th1, th2 = rng.standard_normal((2, mesh.Ny + 1))
    for delta in (0.0, 0.7):
        c1, c2 = extract_terminal(mesh, values, delta)
        rho = terminal_adjoint(mesh, th1, th2, delta)
        lhs = float(c1 @ th1 + c2 @ th2)
        rhs = float(np.sum(values * rho))
        assert abs(lhs - rhs) <= 1e-12 * (abs(lhs) + abs(rhs) + 1.0)


def test_convergence_order_quick():
    from hierwave.verify import OracleCase, convergence_study

    case = OracleCase(
        name="quick",
        domain=DomainSpec(k=0.0, T=1.5, allow_k_zero=True),
        grids=(32, 64, 128),
        tolerance=0.0,
        reference="closed-form",
    )
    rows = convergence_study(case)
    for row in rows[1:]:
        assert 1.5 <= row["order"] <= 2.5
