"""Wave solvers on the expanding domain, realized on the reference cylinder.

With y = x / a(t), a(t) = 1 + k t, the physical equation u_tt - u_xx = S
turns into

    v_tt - (2 k y / a) v_yt - ((1 - k^2 y^2) / a^2) v_yy + (2 k^2 y / a^2) v_y = S

on (0,1) x (0,T).  The stepper uses second-order central differences in y,
leapfrog in time, and the centered cross stencil for the mixed derivative.
The cross stencil couples the spatial neighbours of the new time level, so
each step solves a small tridiagonal system (the matrix is I/dt^2 plus an
antisymmetric perturbation and is always invertible); the march remains
local in time.

Every solve is also available through one sparse space-time operator M
(forward substitution of M is exactly the march).  Transposed solves of M
provide the exact discrete adjoints that the coupled optimality systems
are built from; see :mod:`hierwave.coupled`.

Backward problems (data at t = T) are marched by the substitution
tau = T - t, which flips the sign of the mixed-derivative coefficient and
evaluates a at T - tau, then reuses the forward stepper.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg
import scipy.sparse
import scipy.sparse.linalg

from .errors import ConfigurationError, InstabilityError
from .grid import Field, Mesh, SpatialProfile, Trace
from .geometry import alpha

__all__ = [
    "WaveProblem",
    "WaveOperator",
    "get_operator",
    "solve_forward",
    "solve_backward",
    "trace_normal_derivative",
    "final_value_profile",
    "final_velocity_profile",
    "extract_terminal",
    "terminal_adjoint",
    "profile_derivative_matrix",
]


# ---------------------------------------------------------------------------
# small stencil helpers (interior <-> full-grid index conventions)
# ---------------------------------------------------------------------------

def _dc(z: np.ndarray, dy: float) -> np.ndarray:
    """Central first difference at interior nodes of a full-grid vector."""
    return (z[2:] - z[:-2]) / (2.0 * dy)


def _dyy(z: np.ndarray, dy: float) -> np.ndarray:
    """Central second difference at interior nodes of a full-grid vector."""
    return (z[2:] - 2.0 * z[1:-1] + z[:-2]) / dy**2


def _dc_T(mu: np.ndarray, dy: float, n_full: int) -> np.ndarray:
    """Transpose of :func:`_dc`: interior-indexed input, full-grid output."""
    out = np.zeros(n_full)
    out[2:] += mu / (2.0 * dy)
    out[: n_full - 2] -= mu / (2.0 * dy)
    return out


def _dyy_T(mu: np.ndarray, dy: float, n_full: int) -> np.ndarray:
    out = np.zeros(n_full)
    out[2:] += mu / dy**2
    out[1:-1] -= 2.0 * mu / dy**2
    out[: n_full - 2] += mu / dy**2
    return out


def profile_derivative_matrix(n_nodes: int, dy: float) -> np.ndarray:
    """Dense d/dy on a profile: central interior, one-sided 3-point at the ends."""
    D = np.zeros((n_nodes, n_nodes))
    for j in range(1, n_nodes - 1):
        D[j, j - 1] = -1.0 / (2.0 * dy)
        D[j, j + 1] = 1.0 / (2.0 * dy)
    D[0, 0], D[0, 1], D[0, 2] = -3.0 / (2 * dy), 4.0 / (2 * dy), -1.0 / (2 * dy)
    D[-1, -1], D[-1, -2], D[-1, -3] = 3.0 / (2 * dy), -4.0 / (2 * dy), 1.0 / (2 * dy)
    return D


# ---------------------------------------------------------------------------
# the space-time operator
# ---------------------------------------------------------------------------

class WaveOperator:
    """Stepper plus sparse space-time matrix for one direction of the sweep.

    ``mirrored=True`` builds the operator for the substitution tau = T - t,
    used to march problems with data at the final time.
    """

    def __init__(self, mesh: Mesh, mirrored: bool = False):
        self.mesh = mesh
        self.mirrored = mirrored
        J, N = mesh.Ny, mesh.Nt
        self.J, self.N = J, N
        self.dy, self.dt = mesh.dy, mesh.dt
        y = mesh.y
        k = mesh.domain.k
        t = mesh.times
        a = 1.0 + k * ((mesh.domain.T - t) if mirrored else t)
        sign = -1.0 if mirrored else 1.0
        # coefficient tables, shape (N+1, J+1), frozen at grid nodes
        self.a_of_row = a
        self.b = sign * 2.0 * k * y[None, :] / a[:, None]
        self.c = (1.0 - (k * y[None, :]) ** 2) / a[:, None] ** 2
        self.d = 2.0 * k**2 * y[None, :] / a[:, None] ** 2
        self._matrix = None
        self._lu = None

    # -- index layout: flat id = n * (J + 1) + j ----------------------------

    def _flatten(self, field_values: np.ndarray) -> np.ndarray:
        return np.ascontiguousarray(field_values.T).ravel()

    def _unflatten(self, vec: np.ndarray) -> np.ndarray:
        return vec.reshape(self.N + 1, self.J + 1).T.copy()

    # -- marching (forward substitution of M) -------------------------------

    def march(
        self,
        bc0: np.ndarray,
        bc1: np.ndarray,
        a_init: np.ndarray,
        m_init: np.ndarray,
        source: np.ndarray | None = None,
        check: bool = True,
    ) -> np.ndarray:
        """Explicit-in-time sweep.  Inputs are cylinder quantities:

        bc0, bc1: Dirichlet data at y=0 / y=1 over all time nodes;
        a_init:   full initial profile (endpoints must match bc at n=0);
        m_init:   full initial cylinder velocity v_t(y, 0);
        source:   optional (J+1, N+1) nodal source.
        """
        J, N, dy, dt = self.J, self.N, self.dy, self.dt
        v = np.zeros((J + 1, N + 1))
        v[:, 0] = a_init
        v[0, 0], v[J, 0] = bc0[0], bc1[0]
        data_scale = max(
            float(np.max(np.abs(a_init))),
            float(np.max(np.abs(m_init))),
            float(np.max(np.abs(bc0))),
            float(np.max(np.abs(bc1))),
            float(np.max(np.abs(source))) if source is not None else 0.0,
            1.0,
        )
        blowup = 1e100 * data_scale
        S0 = source[:, 0] if source is not None else np.zeros(J + 1)
        acc0 = (
            self.b[0, 1:-1] * _dc(m_init, dy)
            + self.c[0, 1:-1] * _dyy(v[:, 0], dy)
            - self.d[0, 1:-1] * _dc(v[:, 0], dy)
            + S0[1:-1]
        )
        v[1:-1, 1] = v[1:-1, 0] + dt * m_init[1:-1] + 0.5 * dt**2 * acc0
        v[0, 1], v[J, 1] = bc0[1], bc1[1]

        inv_dt2 = 1.0 / dt**2
        for n in range(1, N):
            b_n = self.b[n, 1:-1]
            q = b_n / (4.0 * dy * dt)
            rhs = (
                (2.0 * v[1:-1, n] - v[1:-1, n - 1]) * inv_dt2
                + self.c[n, 1:-1] * _dyy(v[:, n], dy)
                - self.d[n, 1:-1] * _dc(v[:, n], dy)
                - (b_n / (2.0 * dt)) * _dc(v[:, n - 1], dy)
            )
            if source is not None:
                rhs = rhs + source[1:-1, n]
            # move the new level's boundary columns to the right-hand side
            rhs[0] -= q[0] * bc0[n + 1]
            rhs[-1] += q[-1] * bc1[n + 1]
            nin = J - 1
            ab = np.zeros((3, nin))
            ab[1, :] = inv_dt2
            ab[0, 1:] = -q[:-1]
            ab[2, :-1] = q[1:]
            v[1:-1, n + 1] = scipy.linalg.solve_banded((1, 1), ab, rhs)
            v[0, n + 1], v[J, n + 1] = bc0[n + 1], bc1[n + 1]
            if check:
                peak = float(np.max(np.abs(v[1:-1, n + 1])))
                if not np.isfinite(peak) or peak > blowup:
                    raise InstabilityError(
                        f"unstable march at time step {n + 1} (t = {(n + 1) * dt:.4g}, "
                        f"amplitude {peak:.3e})",
                        step=n + 1,
                    )
        return v

    # -- sparse space-time matrix and LU ------------------------------------

    def matrix(self) -> scipy.sparse.csc_matrix:
        if self._matrix is not None:
            return self._matrix
        J, N, dy, dt = self.J, self.N, self.dy, self.dt
        stride = J + 1
        rows, cols, vals = [], [], []

        def add(r, c, v):
            r, c, v = np.broadcast_arrays(np.asarray(r), np.asarray(c), np.asarray(v, dtype=float))
            rows.append(r.ravel())
            cols.append(c.ravel())
            vals.append(v.ravel())

        # identity rows: boundaries at all levels, all nodes at level 0
        nn = np.arange(N + 1)
        add(nn * stride, nn * stride, 1.0)
        add(nn * stride + J, nn * stride + J, 1.0)
        jj = np.arange(1, J)
        add(jj, jj, 1.0)
        # first-step rows carry their spatial stencil through the level-0
        # columns so that the matrix captures every dependence on data
        c0 = self.c[0, 1:-1]
        d0 = self.d[0, 1:-1]
        half_dt2 = 0.5 * dt**2
        add(stride + jj, stride + jj, 1.0)
        add(stride + jj, jj, dt**2 * c0 / dy**2)
        add(stride + jj, jj + 1, -half_dt2 * (c0 / dy**2 - d0 / (2.0 * dy)))
        add(stride + jj, jj - 1, -half_dt2 * (c0 / dy**2 + d0 / (2.0 * dy)))

        inv_dt2 = 1.0 / dt**2
        for n in range(1, N):
            b = self.b[n, 1:-1]
            c = self.c[n, 1:-1]
            d = self.d[n, 1:-1]
            q = b / (4.0 * dy * dt)
            r = (n + 1) * stride + jj
            # level n+1
            add(r, (n + 1) * stride + jj, np.full(J - 1, inv_dt2))
            add(r, (n + 1) * stride + jj + 1, -q)
            add(r, (n + 1) * stride + jj - 1, q)
            # level n
            add(r, n * stride + jj, -2.0 * inv_dt2 + 2.0 * c / dy**2)
            add(r, n * stride + jj + 1, -c / dy**2 + d / (2.0 * dy))
            add(r, n * stride + jj - 1, -c / dy**2 - d / (2.0 * dy))
            # level n-1
            add(r, (n - 1) * stride + jj, np.full(J - 1, inv_dt2))
            add(r, (n - 1) * stride + jj + 1, q)
            add(r, (n - 1) * stride + jj - 1, -q)

        rows = np.concatenate(rows)
        cols = np.concatenate(cols)
        vals = np.concatenate(vals)
        size = (J + 1) * (N + 1)
        self._matrix = scipy.sparse.coo_matrix((vals, (rows, cols)), shape=(size, size)).tocsc()
        return self._matrix

    def lu(self):
        if self._lu is None:
            self._lu = scipy.sparse.linalg.splu(self.matrix())
        return self._lu

    # -- right-hand side and its input adjoint ------------------------------

    def rhs_vector(
        self,
        bc0: np.ndarray,
        bc1: np.ndarray,
        a_interior: np.ndarray,
        m_full: np.ndarray,
        source: np.ndarray | None = None,
    ) -> np.ndarray:
        J, N, dy, dt = self.J, self.N, self.dy, self.dt
        stride = J + 1
        r = np.zeros((N + 1, stride))
        r[:, 0] = bc0
        r[:, J] = bc1
        r[0, 1:-1] = a_interior
        S0 = source[1:-1, 0] if source is not None else 0.0
        r[1, 1:-1] = (
            a_interior
            + dt * m_full[1:-1]
            + 0.5 * dt**2 * (self.b[0, 1:-1] * _dc(m_full, dy) + S0)
        )
        if source is not None:
            r[2:, 1:-1] = source[1:-1, 1:N].T
        return r.ravel()

    def rhs_adjoint(self, lam: np.ndarray) -> dict:
        """Exact transpose of :meth:`rhs_vector` with respect to its inputs.

        ``lam`` is a full-grid multiplier field of shape (J+1, N+1).
        """
        J, N, dy, dt = self.J, self.N, self.dy, self.dt
        lam1 = lam[1:-1, 1]
        bc0_cot = lam[0, :].copy()
        bc1_cot = lam[J, :].copy()
        half_dt2 = 0.5 * dt**2
        b0 = self.b[0, 1:-1]
        a_cot = lam[1:-1, 0] + lam1
        m_cot = np.zeros(J + 1)
        m_cot[1:-1] = dt * lam1
        m_cot += half_dt2 * _dc_T(b0 * lam1, dy, J + 1)
        S_cot = np.zeros((J + 1, N + 1))
        S_cot[1:-1, 0] = half_dt2 * lam1
        S_cot[1:-1, 1:N] = lam[1:-1, 2 : N + 1]
        return {"bc0": bc0_cot, "bc1": bc1_cot, "a_interior": a_cot, "m_full": m_cot, "source": S_cot}

    # -- LU-backed solves ----------------------------------------------------

    def solve_lu(self, bc0, bc1, a_interior, m_full, source=None) -> np.ndarray:
        r = self.rhs_vector(bc0, bc1, a_interior, m_full, source)
        return self._unflatten(self.lu().solve(r))

    def solve_adjoint(self, rho: np.ndarray) -> np.ndarray:
        """Multiplier field lambda with M^T lambda = rho (rho full-grid)."""
        lam = self.lu().solve(self._flatten(rho), trans="T")
        return self._unflatten(lam)


_OPERATOR_CACHE: dict[tuple, WaveOperator] = {}


def get_operator(mesh: Mesh, mirrored: bool = False) -> WaveOperator:
    key = (*mesh.key(), mirrored)
    op = _OPERATOR_CACHE.get(key)
    if op is None:
        op = WaveOperator(mesh, mirrored)
        _OPERATOR_CACHE[key] = op
    return op


def clear_operator_cache() -> None:
    _OPERATOR_CACHE.clear()


# ---------------------------------------------------------------------------
# public solve interface
# ---------------------------------------------------------------------------

@dataclass
class WaveProblem:
    """One forward or backward solve.

    ``data`` holds (value, physical velocity) profiles: initial profiles on
    the unit interval for a forward problem, final profiles on (0, alpha(T))
    for a backward one.  Velocities are physical time derivatives; the
    conversion to cylinder velocities happens inside the solvers.
    """

    direction: str
    bc0: Trace
    bc1: Trace | None = None
    source: Field | None = None
    data: tuple[SpatialProfile, SpatialProfile] | None = None

    def __post_init__(self):
        if self.direction not in ("forward", "backward"):
            raise ConfigurationError("direction must be 'forward' or 'backward'")
        mesh = self.bc0.mesh
        if self.bc1 is None:
            self.bc1 = Trace.zeros(mesh, side="y=1")
        if self.data is None:
            t0 = 0.0 if self.direction == "forward" else mesh.domain.T
            self.data = (SpatialProfile.zeros(mesh, t0), SpatialProfile.zeros(mesh, t0))
        for part in (self.bc1, self.source, *self.data):
            if part is not None and part.mesh.key() != mesh.key():
                raise ConfigurationError("all problem pieces must share one mesh")
        # corner compatibility between boundary data and initial/final values
        val = self.data[0].values
        n_corner = 0 if self.direction == "forward" else mesh.Nt
        tol = mesh.dy * max(1.0, float(np.max(np.abs(val))) if val.size else 1.0)
        for trace, idx in ((self.bc0, 0), (self.bc1, -1)):
            if abs(trace.values[n_corner] - val[idx]) > tol:
                raise ConfigurationError(
                    "boundary trace and data disagree at the corner "
                    f"(|{trace.values[n_corner]:.3e} - {val[idx]:.3e}| > {tol:.1e})"
                )


def _cylinder_velocity(mesh: Mesh, value: np.ndarray, velocity: np.ndarray, time: float) -> np.ndarray:
    """v_t = u_t + k y u_x evaluated on the reference grid at a fixed time."""
    a = float(alpha(mesh.domain, time))
    D = profile_derivative_matrix(mesh.Ny + 1, mesh.dy)
    return velocity + (mesh.domain.k * mesh.y / a) * (D @ value)


def solve_forward(problem: WaveProblem, use_lu: bool = False) -> Field:
    """March the state equation from t = 0."""
    if problem.direction != "forward":
        raise ConfigurationError("solve_forward needs a forward problem")
    mesh = problem.bc0.mesh
    mesh.require_cfl()
    op = get_operator(mesh, mirrored=False)
    a_full = problem.data[0].values
    m_cyl = _cylinder_velocity(mesh, a_full, problem.data[1].values, 0.0)
    src = problem.source.values if problem.source is not None else None
    if use_lu:
        vals = op.solve_lu(problem.bc0.values, problem.bc1.values, a_full[1:-1], m_cyl, src)
    else:
        vals = op.march(problem.bc0.values, problem.bc1.values, a_full, m_cyl, src)
    return Field(vals, mesh).check_finite()


def solve_backward(problem: WaveProblem, use_lu: bool = False) -> Field:
    """March a final-data problem by the reversed-time substitution."""
    if problem.direction != "backward":
        raise ConfigurationError("solve_backward needs a backward problem")
    mesh = problem.bc0.mesh
    mesh.require_cfl()
    op = get_operator(mesh, mirrored=True)
    f0 = problem.data[0].values
    v_t_final = _cylinder_velocity(mesh, f0, problem.data[1].values, mesh.domain.T)
    bc0_rev = problem.bc0.values[::-1].copy()
    bc1_rev = problem.bc1.values[::-1].copy()
    src = problem.source.values[:, ::-1].copy() if problem.source is not None else None
    if use_lu:
        vals = op.solve_lu(bc0_rev, bc1_rev, f0[1:-1], -v_t_final, src)
    else:
        vals = op.march(bc0_rev, bc1_rev, f0, -v_t_final, src)
    return Field(vals[:, ::-1].copy(), mesh).check_finite()


def trace_normal_derivative(field: Field, side: str = "y=0", mask: np.ndarray | None = None) -> Trace:
    """u_x on one lateral boundary: one-sided 3-point difference over 1/alpha."""
    mesh = field.mesh
    v = field.values
    a = mesh.alphas
    if side == "y=0":
        deriv = (-3.0 * v[0, :] + 4.0 * v[1, :] - v[2, :]) / (2.0 * mesh.dy * a)
    elif side == "y=1":
        deriv = (3.0 * v[-1, :] - 4.0 * v[-2, :] + v[-3, :]) / (2.0 * mesh.dy * a)
    else:
        raise ConfigurationError("side must be 'y=0' or 'y=1'")
    if mask is None:
        mask = np.ones(mesh.Nt + 1, dtype=bool)
    return Trace(deriv, mask, mesh, side)


def final_value_profile(field: Field) -> SpatialProfile:
    return field.profile_at(field.mesh.Nt)


def final_velocity_profile(field: Field) -> SpatialProfile:
    """Physical u_t at t = T: one-sided in time minus the moving-frame drift."""
    mesh = field.mesh
    v = field.values
    N = mesh.Nt
    v_t = (3.0 * v[:, N] - 4.0 * v[:, N - 1] + v[:, N - 2]) / (2.0 * mesh.dt)
    aT = mesh.alphas[-1]
    D = profile_derivative_matrix(mesh.Ny + 1, mesh.dy)
    u_t = v_t - (mesh.domain.k * mesh.y / aT) * (D @ v[:, N])
    return SpatialProfile(u_t, mesh.domain.T, mesh)


def extract_terminal(mesh: Mesh, values: np.ndarray, delta: float = 0.0) -> tuple[np.ndarray, np.ndarray]:
    """(u_t(T) + delta u(T), -u(T)) as raw arrays; the reach-operator output."""
    N = mesh.Nt
    v_t = (3.0 * values[:, N] - 4.0 * values[:, N - 1] + values[:, N - 2]) / (2.0 * mesh.dt)
    aT = mesh.alphas[-1]
    D = profile_derivative_matrix(mesh.Ny + 1, mesh.dy)
    u_t = v_t - (mesh.domain.k * mesh.y / aT) * (D @ values[:, N])
    return u_t + delta * values[:, N], -values[:, N]


def terminal_first_step(
    mesh: Mesh,
    f0_vals: np.ndarray,
    f1_vals: np.ndarray,
    source_at_T: np.ndarray | None = None,
) -> np.ndarray:
    """Second-order reconstruction of a final-data field one step before T.

    Matches the first step of the reversed-time march; used to fill the
    terminal layer of multiplier-normalized adjoint fields, whose step rows
    stop one level short of the final time.
    """
    op = get_operator(mesh, mirrored=True)
    dy, dt = mesh.dy, mesh.dt
    D = profile_derivative_matrix(mesh.Ny + 1, dy)
    aT = mesh.alphas[-1]
    m_rev = -((mesh.domain.k * mesh.y / aT) * (D @ f0_vals) + f1_vals)
    S0 = source_at_T[1:-1] if source_at_T is not None else 0.0
    acc = (
        op.b[0, 1:-1] * _dc(m_rev, dy)
        + op.c[0, 1:-1] * _dyy(f0_vals, dy)
        - op.d[0, 1:-1] * _dc(f0_vals, dy)
        + S0
    )
    out = np.zeros_like(f0_vals)
    out[1:-1] = f0_vals[1:-1] + dt * m_rev[1:-1] + 0.5 * dt**2 * acc
    return out


def terminal_adjoint(mesh: Mesh, theta1: np.ndarray, theta2: np.ndarray, delta: float = 0.0) -> np.ndarray:
    """Exact transpose of :func:`extract_terminal`; returns a cotangent field."""
    N = mesh.Nt
    rho = np.zeros((mesh.Ny + 1, N + 1))
    inv2dt = 1.0 / (2.0 * mesh.dt)
    aT = mesh.alphas[-1]
    D = profile_derivative_matrix(mesh.Ny + 1, mesh.dy)
    rho[:, N] += 3.0 * inv2dt * theta1 + delta * theta1 - theta2
    rho[:, N] -= D.T @ ((mesh.domain.k * mesh.y / aT) * theta1)
    rho[:, N - 1] -= 4.0 * inv2dt * theta1
    rho[:, N - 2] += inv2dt * theta1
    return rho
