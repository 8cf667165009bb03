"""Coupled leader/follower optimality systems and the reach operator.

All couplings run through one discrete principle: the state solves the
sparse space-time operator M, the companion (adjoint) field solves M^T, and
the boundary-derivative trace that closes the loop is read off the
transposed solve.  With the quadrature weights fixed once, the discrete
first-order conditions then hold to solver tolerance rather than to scheme
order, and the reach operator and its adjoint are exact transposes of each
other.  Both facts are what the verification suite leans on.

Systems provided (all with zero initial data for the state):

* equilibrium pair (u, p): state driven by both controls, companion driven
  by the tracking misfit; the follower trace is recovered from p.
* free pair (u0, p0): the part independent of the leader.
* leader pair (g, q): the part linear in the leader control.
* adjoint pair (phi, psi): the transposed coupled system behind the reach
  operator's adjoint.

The fixed point in every case is a boundary trace at the controlled
endpoint; it is solved by relaxed Picard iteration (relaxation auto-halves
when the residual grows) with a direct sparse factorization of the coupled
system as rescue path and as the fast route for operator applications.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field as dc_field

import numpy as np
import scipy.sparse
import scipy.sparse.linalg

from .errors import ConfigurationError, ConvergenceError
from .geometry import SigmaPartition
from .grid import (
    Field,
    Mesh,
    SpatialProfile,
    Trace,
    space_time_weights,
    trapezoid_weights,
)
from .wave_core import extract_terminal, get_operator, terminal_adjoint, terminal_first_step

logger = logging.getLogger(__name__)

__all__ = [
    "PicardOptions",
    "FollowerConfig",
    "NashSolution",
    "AdjointPair",
    "solve_nash_system",
    "solve_free_part",
    "solve_leader_part",
    "apply_A",
    "apply_A_star",
    "cost_J",
    "cost_J2",
    "euler_lagrange_residual",
    "CoupledEngine",
    "get_engine",
]


@dataclass(frozen=True)
class PicardOptions:
    max_iters: int = 600
    tol: float = 1e-11
    relaxation: float = 1.0
    min_relaxation: float = 0.125
    allow_fallback: bool = True


@dataclass
class FollowerConfig:
    """Follower cost weight, desired trajectory, and boundary partition."""

    sigma: float
    partition: SigmaPartition
    u_tilde2: Field | None = None
    picard: PicardOptions = dc_field(default_factory=PicardOptions)

    def __post_init__(self):
        if not (np.isfinite(self.sigma) and self.sigma > 0.0):
            raise ConfigurationError(f"follower weight sigma must be positive, got {self.sigma}")


@dataclass
class NashSolution:
    u: Field
    p: Field
    w2: Trace
    iterations: int
    residual_history: list[float]
    method: str = "picard"


@dataclass
class AdjointPair:
    phi: Field
    psi: Field
    leader_trace: Trace
    iterations: int
    residual_history: list[float]
    method: str = "picard"


class CoupledEngine:
    """Shared machinery for one (mesh, sigma, partition) triple."""

    def __init__(self, mesh: Mesh, sigma: float, partition: SigmaPartition):
        if partition.mask1.shape != (mesh.Nt + 1,):
            raise ConfigurationError(
                f"partition masks have length {partition.mask1.shape[0]}, grid wants {mesh.Nt + 1}"
            )
        mesh.require_cfl()
        self.mesh = mesh
        self.sigma = float(sigma)
        self.partition = partition
        self.chi1 = partition.mask1.astype(float)
        self.chi2 = partition.mask2.astype(float)
        self.op = get_operator(mesh, mirrored=False)
        self.W = space_time_weights(mesh)
        self.tau = trapezoid_weights(mesh.Nt + 1, mesh.dt)
        self._zeros_full = np.zeros(mesh.Ny + 1)
        self._coupled_lu = None

    # -- elementary solves ---------------------------------------------------

    def state_solve(self, bc_values: np.ndarray) -> np.ndarray:
        """Forward solve with Dirichlet data at the fixed endpoint, zero data."""
        return self.op.solve_lu(bc_values, np.zeros(self.mesh.Nt + 1), np.zeros(self.mesh.Ny - 1), self._zeros_full)

    def multiplier_solve(self, rho: np.ndarray) -> np.ndarray:
        """Transposed solve against a full-grid cotangent."""
        return self.op.solve_adjoint(rho)

    def normal_trace(self, lam: np.ndarray) -> np.ndarray:
        """Operator-consistent outward normal derivative of a companion field
        at the controlled endpoint.

        Multiplier fields enter all first-order conditions through this
        trace; it approximates d(field)/dn = -d(field)/dx at x = 0 and makes
        the discrete optimality identities exact by construction.
        """
        return -lam[0, :] / self.tau

    def companion_field(self, lam: np.ndarray) -> np.ndarray:
        """Normalize a multiplier into nodal values of the companion field."""
        vals = self.op.rhs_adjoint(lam)["source"] / self.W
        vals[:, -1] = 0.0
        vals[0, :] = 0.0
        vals[-1, :] = 0.0
        return vals

    def trace_norm(self, values: np.ndarray) -> float:
        # overflow to inf is fine here: divergence is detected from the norm
        with np.errstate(over="ignore"):
            return float(np.sqrt(np.sum(self.tau * values**2)))

    # -- relaxed Picard on the coupling trace ---------------------------------

    def _relaxed_fixed_point(self, sweep, opts: PicardOptions, scale: float, warm=None):
        """Drive a trace fixed point: relax, auto-halve on residual growth,
        accept a stall at the round-off floor.

        ``sweep(trace)`` returns (payload, next_trace); the converged payload
        and trace are returned together with the residual history.
        """
        trace = np.zeros(self.mesh.Nt + 1) if warm is None else warm.copy()
        theta = opts.relaxation
        residuals: list[float] = []
        prev_res = np.inf
        best_res = np.inf
        stall = 0
        for it in range(1, opts.max_iters + 1):
            payload, trace_next = sweep(trace)
            res = self.trace_norm(trace_next - trace)
            residuals.append(res)
            if not np.isfinite(res):
                raise ConvergenceError(
                    f"coupling trace iteration diverged at step {it}",
                    residual_history=residuals,
                )
            level = max(scale, self.trace_norm(trace_next))
            if res <= opts.tol * level or res == 0.0:
                return payload, trace_next, it, residuals
            if res < 0.98 * best_res:
                best_res = res
                stall = 0
            else:
                stall += 1
            if stall >= 40 and res <= 1e-7 * level:
                # round-off floor of the factorized solves
                return payload, trace_next, it, residuals
            if res > prev_res and theta > opts.min_relaxation:
                theta = max(theta / 2.0, opts.min_relaxation)
            prev_res = res
            trace = (1.0 - theta) * trace + theta * trace_next
        raise ConvergenceError(
            f"coupling trace iteration did not converge in {opts.max_iters} steps "
            f"(last residual {residuals[-1]:.3e}, relaxation {theta})",
            residual_history=residuals,
        )

    def picard_pair(
        self,
        w1_values: np.ndarray,
        utilde: np.ndarray | None,
        opts: PicardOptions,
        warm: np.ndarray | None = None,
    ):
        """Iterate state/companion solves until the coupling trace settles.

        Returns (state, lam, w2, iterations, residuals).  ``utilde`` is the
        tracked trajectory (None means zero, which yields the leader pair
        when w1 is the leader control).
        """
        scale = self.trace_norm(self.chi1 * w1_values)
        if utilde is not None:
            scale += float(np.sqrt(np.sum(self.W * utilde**2)))

        def sweep(w2):
            bc = self.chi1 * w1_values + self.chi2 * w2
            state = self.state_solve(bc)
            misfit = state if utilde is None else state - utilde
            lam = self.multiplier_solve(self.W * misfit)
            w2_next = (self.chi2 / self.sigma) * self.normal_trace(lam)
            return (state, lam), w2_next

        (state, lam), w2, it, residuals = self._relaxed_fixed_point(sweep, opts, scale, warm)
        return state, lam, w2, it, residuals

    # -- direct (sparse-factorized) coupled solves ---------------------------

    def coupled_matrix(self) -> scipy.sparse.csc_matrix:
        M = self.op.matrix()
        size = M.shape[0]
        stride = self.mesh.Ny + 1
        n_idx = np.arange(self.mesh.Nt + 1)
        bc_rows = n_idx * stride
        coupling = scipy.sparse.coo_matrix(
            (self.chi2 / (self.sigma * self.tau), (bc_rows, bc_rows)), shape=(size, size)
        )
        W_flat = np.ascontiguousarray(self.W.T).ravel()
        K = scipy.sparse.bmat(
            [[M, coupling], [-scipy.sparse.diags(W_flat), M.T]], format="csc"
        )
        return K

    def coupled_lu(self):
        if self._coupled_lu is None:
            self._coupled_lu = scipy.sparse.linalg.splu(self.coupled_matrix())
        return self._coupled_lu

    def direct_pair(self, w1_values: np.ndarray, utilde: np.ndarray | None):
        """Solve the coupled system in one shot.  Same unknowns as the Picard path."""
        mesh = self.mesh
        size = (mesh.Ny + 1) * (mesh.Nt + 1)
        stride = mesh.Ny + 1
        rhs = np.zeros(2 * size)
        rhs[np.arange(mesh.Nt + 1) * stride] = self.chi1 * w1_values
        if utilde is not None:
            rhs[size:] = -np.ascontiguousarray((self.W * utilde).T).ravel()
        sol = self.coupled_lu().solve(rhs)
        state = self.op._unflatten(sol[:size])
        lam = self.op._unflatten(sol[size:])
        w2 = (self.chi2 / self.sigma) * self.normal_trace(lam)
        return state, lam, w2

    def direct_adjoint_pair(self, rho_terminal: np.ndarray):
        """Solve the transposed coupled system driven by a terminal cotangent."""
        size = (self.mesh.Ny + 1) * (self.mesh.Nt + 1)
        rhs = np.zeros(2 * size)
        rhs[:size] = np.ascontiguousarray(rho_terminal.T).ravel()
        sol = self.coupled_lu().solve(rhs, trans="T")
        mu = self.op._unflatten(sol[:size])
        psi = self.op._unflatten(sol[size:])
        return mu, psi

    def picard_adjoint_pair(self, rho_terminal: np.ndarray, opts: PicardOptions, warm=None):
        """Picard version of :meth:`direct_adjoint_pair` on the psi boundary trace."""
        scale = float(np.sqrt(np.sum(rho_terminal**2)))

        def sweep(s):
            psi = self.state_solve(s)
            mu = self.multiplier_solve(rho_terminal + self.W * psi)
            s_next = (self.chi2 / self.sigma) * self.normal_trace(mu)
            return (mu, psi), s_next

        (mu, psi), s, it, residuals = self._relaxed_fixed_point(sweep, opts, scale, warm)
        return mu, psi, s, it, residuals


_ENGINE_CACHE: dict[tuple, CoupledEngine] = {}


def get_engine(mesh: Mesh, cfg: FollowerConfig) -> CoupledEngine:
    key = (mesh.key(), float(cfg.sigma), cfg.partition.fingerprint())
    eng = _ENGINE_CACHE.get(key)
    if eng is None:
        eng = CoupledEngine(mesh, cfg.sigma, cfg.partition)
        _ENGINE_CACHE[key] = eng
    return eng


def clear_engine_cache() -> None:
    _ENGINE_CACHE.clear()


def _mesh_from_cfg(cfg: FollowerConfig, mesh: Mesh | None, *parts) -> Mesh:
    for part in parts:
        if part is not None:
            return part.mesh
    if cfg.u_tilde2 is not None:
        return cfg.u_tilde2.mesh
    if mesh is not None:
        return mesh
    raise ConfigurationError("cannot infer the mesh: pass one explicitly")


def _utilde_values(cfg: FollowerConfig, mesh: Mesh) -> np.ndarray | None:
    if cfg.u_tilde2 is None:
        return None
    if cfg.u_tilde2.mesh.key() != mesh.key():
        raise ConfigurationError("u_tilde2 lives on a different mesh")
    return cfg.u_tilde2.values


def _masked_values(trace: Trace, mask: np.ndarray) -> np.ndarray:
    return np.where(mask, trace.values, 0.0)


def solve_nash_system(w1: Trace, cfg: FollowerConfig, method: str = "picard") -> NashSolution:
    """Equilibrium pair for a fixed leader control.

    Picard iteration on the follower trace: solve the state with the current
    follower, the companion with the tracking misfit, update the follower
    from the companion's boundary derivative, relax, repeat.  Falls back to
    the direct coupled factorization when the iteration stalls (grids up to
    Ny = 64).
    """
    mesh = w1.mesh
    eng = get_engine(mesh, cfg)
    utilde = _utilde_values(cfg, mesh)
    w1v = _masked_values(w1, cfg.partition.mask1)
    if method == "direct":
        state, lam, w2 = eng.direct_pair(w1v, utilde)
        iters, residuals, how = 0, [], "direct"
    else:
        try:
            state, lam, w2, iters, residuals = eng.picard_pair(w1v, utilde, cfg.picard)
            how = "picard"
        except ConvergenceError as err:
            if not (cfg.picard.allow_fallback and mesh.Ny <= 64):
                raise
            logger.warning("picard stalled (%s); using direct coupled solve", err)
            state, lam, w2 = eng.direct_pair(w1v, utilde)
            iters, residuals, how = cfg.picard.max_iters, err.residual_history, "monolithic-fallback"
    u = Field(state, mesh).check_finite()
    p = Field(eng.companion_field(lam), mesh)
    w2_trace = Trace(w2, cfg.partition.mask2, mesh)
    return NashSolution(u, p, w2_trace, iters, residuals, how)


def solve_free_part(cfg: FollowerConfig, mesh: Mesh | None = None, method: str = "picard"):
    """Pair (u0, p0): the equilibrium with zero leader control."""
    mesh = _mesh_from_cfg(cfg, mesh)
    zero = Trace.zeros(mesh, cfg.partition.mask1)
    sol = solve_nash_system(zero, cfg, method=method)
    return sol.u, sol.p


def solve_leader_part(w1: Trace, cfg: FollowerConfig, method: str = "picard"):
    """Pair (g, q): the leader-linear part (tracked trajectory removed)."""
    mesh = w1.mesh
    eng = get_engine(mesh, cfg)
    w1v = _masked_values(w1, cfg.partition.mask1)
    if method == "direct":
        state, lam, _ = eng.direct_pair(w1v, None)
    else:
        try:
            state, lam, _, _, _ = eng.picard_pair(w1v, None, cfg.picard)
        except ConvergenceError:
            if not (cfg.picard.allow_fallback and mesh.Ny <= 64):
                raise
            state, lam, _ = eng.direct_pair(w1v, None)
    g = Field(state, mesh).check_finite()
    q = Field(eng.companion_field(lam), mesh)
    return g, q


def apply_A(w1: Trace, cfg: FollowerConfig, delta: float = 0.0, method: str = "auto"):
    """Reach operator: leader control to (final velocity + delta * value, -value)."""
    if delta < 0.0:
        raise ConfigurationError("delta must be nonnegative")
    mesh = w1.mesh
    eng = get_engine(mesh, cfg)
    w1v = _masked_values(w1, cfg.partition.mask1)
    if method == "auto":
        method = "direct" if mesh.Ny <= 64 else "picard"
    if method == "direct":
        state, _, _ = eng.direct_pair(w1v, None)
    else:
        state, _, _, _, _ = eng.picard_pair(w1v, None, cfg.picard)
    c1, c2 = extract_terminal(mesh, state, delta)
    T = mesh.domain.T
    return SpatialProfile(c1, T, mesh), SpatialProfile(c2, T, mesh)


def apply_A_star(
    f0: SpatialProfile,
    f1: SpatialProfile,
    cfg: FollowerConfig,
    delta: float = 0.0,
    method: str = "auto",
) -> AdjointPair:
    """Adjoint of the reach operator through the transposed coupled system.

    The returned trace is minus the boundary derivative of the first adjoint
    field on the leader's part of the boundary; it satisfies the duality
    identity against :func:`apply_A` exactly (to solver tolerance).
    """
    mesh = f0.mesh
    scale0 = np.max(np.abs(f0.values)) if f0.values.size else 0.0
    if abs(f0.values[0]) > 1e-9 * max(1.0, scale0) or abs(f0.values[-1]) > 1e-9 * max(1.0, scale0):
        raise ConfigurationError("f0 plays the zero-boundary role: endpoints must vanish")
    if f1.mesh.key() != mesh.key():
        raise ConfigurationError("f0 and f1 must share a mesh")
    eng = get_engine(mesh, cfg)
    wy = trapezoid_weights(mesh.Ny + 1, mesh.dy)
    aT = mesh.alphas[-1]
    theta1 = aT * wy * f0.values
    theta2 = aT * wy * f1.values
    rho = terminal_adjoint(mesh, theta1, theta2, delta)
    if method == "auto":
        method = "direct" if mesh.Ny <= 64 else "picard"
    if method == "direct":
        mu, psi = eng.direct_adjoint_pair(rho)
        iters, residuals, how = 0, [], "direct"
    else:
        mu, psi, _, iters, residuals = eng.picard_adjoint_pair(rho, cfg.picard)
        how = "picard"
    trace_vals = np.where(cfg.partition.mask1, mu[0, :] / eng.tau, 0.0)
    phi_vals = eng.companion_field(mu)
    phi_vals[:, -1] = f0.values
    phi_vals[:, -2] = terminal_first_step(mesh, f0.values, f1.values, psi[:, -1])
    phi = Field(phi_vals, mesh)
    psi_field = Field(psi, mesh)
    leader_trace = Trace(trace_vals, cfg.partition.mask1, mesh)
    return AdjointPair(phi, psi_field, leader_trace, iters, residuals, how)


def cost_J2(u: Field, w2: Trace, cfg: FollowerConfig) -> float:
    """Follower cost: half tracking misfit over the domain plus weighted control energy."""
    mesh = u.mesh
    W = space_time_weights(mesh)
    utilde = _utilde_values(cfg, mesh)
    misfit = u.values if utilde is None else u.values - utilde
    tau = trapezoid_weights(mesh.Nt + 1, mesh.dt)
    chi2 = cfg.partition.mask2
    return float(
        0.5 * np.sum(W * misfit**2) + 0.5 * cfg.sigma * np.sum(tau * chi2 * w2.values**2)
    )


def cost_J(w1: Trace) -> float:
    """Leader cost: half the squared boundary norm of the leader control."""
    tau = trapezoid_weights(w1.mesh.Nt + 1, w1.mesh.dt)
    return float(0.5 * np.sum(tau * w1.mask * w1.values**2))


def euler_lagrange_residual(
    sol: NashSolution, w1: Trace, cfg: FollowerConfig, what2: Trace
) -> float:
    """First-variation of the follower cost at ``sol`` in the direction ``what2``.

    Zero (to solver tolerance) exactly when ``sol`` is the equilibrium.
    """
    mesh = sol.u.mesh
    eng = get_engine(mesh, cfg)
    utilde = _utilde_values(cfg, mesh)
    misfit = sol.u.values if utilde is None else sol.u.values - utilde
    hat_vals = _masked_values(what2, cfg.partition.mask2)
    u_hat = eng.state_solve(eng.chi2 * hat_vals)
    term1 = float(np.sum(eng.W * misfit * u_hat))
    term2 = float(cfg.sigma * np.sum(eng.tau * eng.chi2 * sol.w2.values * hat_vals))
    return term1 + term2
