"""Continuous-time Pontryagin benchmark via single shooting.

The first-order conditions for minimum-effort attitude maneuvers give an
optimal-control law in the multipliers plus multiplier ODEs; both endpoint
states are fixed, so all initial costates are shooting unknowns.  The
state/costate system is integrated with RK4 and the terminal residual is
driven to zero by Levenberg-Marquardt with a finite-difference Jacobian.

Costate conventions
-------------------
``lam_r`` pairs with the attitude variation, ``lam_omega`` with the
momentum-weighted rate variation, ``lam_moment`` (SMRH) with the rotor
moment.  The default rate-costate equation keeps the couplings the
variational bookkeeping produces,

    lam_omega' = (J^-1 hat(J w) - hat(w)) lam_omega - J^-1 lam_r
                 [ + J^-1 K^T lam_moment  on the SMRH ],

which is what conserves the multiplier/variation pairing along paired
flows; ``compat_printed=True`` reproduces the theorem statements verbatim
instead (no lam_r coupling for the VPQ, opposite K-term sign for the
SMRH).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .algebra import AntipodalRotationError, hat, log_so3, pi_rotation_log
from .vehicles import SingleMainRotorHelicopter, Trajectory, VariablePitchQuadrotor


class ExtremalDivergedError(RuntimeError):
    """State/costate integration blew up before the final time."""

    def __init__(self, message, blow_up_time=None):
        super().__init__(message)
        self.blow_up_time = blow_up_time


@dataclass(frozen=True)
class CostateState:
    """Initial (or current) multipliers of the attitude TPBVP."""

    lam_r: np.ndarray
    lam_omega: np.ndarray
    lam_moment: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "lam_r", np.asarray(self.lam_r, dtype=float))
        object.__setattr__(self, "lam_omega", np.asarray(self.lam_omega, dtype=float))
        if self.lam_moment is not None:
            object.__setattr__(
                self, "lam_moment", np.asarray(self.lam_moment, dtype=float)
            )

    def as_vector(self):
        blocks = [self.lam_r, self.lam_omega]
        if self.lam_moment is not None:
            blocks.append(self.lam_moment)
        return np.concatenate(blocks)

    @classmethod
    def from_vector(cls, vec, with_moment):
        vec = np.asarray(vec, dtype=float)
        if with_moment:
            return cls(vec[0:3], vec[3:6], vec[6:9])
        return cls(vec[0:3], vec[3:6])


@dataclass(frozen=True)
class ShootingProblem:
    """Two-point boundary value problem for one vehicle maneuver.

    The horizon spans ``n_states - 1`` output intervals of length ``step``;
    each interval is integrated with ``substeps`` RK4 stages so the sampled
    grid matches the discrete solvers' exactly.
    """

    vehicle: object
    x0: object
    target: object
    n_states: int
    step: float
    control_weight: object = 1.0
    substeps: int = 1
    compat_printed: bool = False

    def __post_init__(self):
        if self.n_states < 2:
            raise ValueError("need at least two grid states")
        if self.step <= 0.0:
            raise ValueError("grid step must be positive")
        if self.substeps < 1:
            raise ValueError("substeps must be at least 1")
        q = np.asarray(self.control_weight, dtype=float)
        if q.ndim == 0:
            q = float(q) * np.eye(3)
        if q.shape != (3, 3) or np.linalg.eigvalsh(0.5 * (q + q.T))[0] <= 0.0:
            raise ValueError("control weight must be symmetric positive definite")
        object.__setattr__(self, "control_weight", 0.5 * (q + q.T))

    @property
    def horizon(self):
        return self.step * (self.n_states - 1)

    @property
    def with_moment(self):
        return isinstance(self.vehicle, SingleMainRotorHelicopter)


def optimal_control_vpq(q_weight, lam_omega):
    """Stationarity of the VPQ Hamiltonian: u = -Q^-1 lam_omega."""
    return -np.linalg.solve(q_weight, np.asarray(lam_omega, dtype=float))


def optimal_control_smrh(q_weight, control_matrix, lam_moment):
    """Stationarity of the SMRH Hamiltonian: u = -Q^-1 B^T lam_moment."""
    return -np.linalg.solve(
        q_weight, control_matrix.T @ np.asarray(lam_moment, dtype=float)
    )


def costate_rhs_vpq(inertia, omega, lam_r, lam_omega, compat_printed=False):
    """Multiplier ODEs for the VPQ: returns (lam_r', lam_omega')."""
    j_inv = np.linalg.inv(inertia)
    lam_r_dot = -hat(omega) @ lam_r
    core = j_inv @ hat(inertia @ omega) - hat(omega)
    lam_omega_dot = core @ lam_omega
    if not compat_printed:
        lam_omega_dot = lam_omega_dot - j_inv @ lam_r
    return lam_r_dot, lam_omega_dot


def costate_rhs_smrh(params, omega, lam_r, lam_omega, lam_moment, compat_printed=False):
    """Multiplier ODEs for the SMRH: returns (lam_r', lam_omega', lam_moment')."""
    j = params.inertia
    j_inv = np.linalg.inv(j)
    lam_r_dot = -hat(omega) @ lam_r
    core = j_inv @ hat(j @ omega) - hat(omega)
    coupling_sign = -1.0 if compat_printed else 1.0
    lam_omega_dot = (
        core @ lam_omega
        - j_inv @ lam_r
        + coupling_sign * (j_inv @ (params.rate_coupling.T @ lam_moment))
    )
    lam_moment_dot = -lam_omega - params.flap_matrix.T @ lam_moment
    return lam_r_dot, lam_omega_dot, lam_moment_dot


def _log_guarded(rel):
    try:
        return log_so3(rel)
    except AntipodalRotationError:
        return pi_rotation_log(rel)


def _make_rhs(problem):
    """Flattened-state extremal derivative; layout [R, w, (M), lam...]."""
    q = problem.control_weight
    if problem.with_moment:
        params = problem.vehicle.params
        j = params.inertia
        j_inv = np.linalg.inv(j)
        a_mat = params.flap_matrix
        k_mat = params.rate_coupling
        b_mat = params.control_matrix

        def rhs(y):
            rot = y[0:9].reshape(3, 3)
            w = y[9:12]
            m = y[12:15]
            lam_r, lam_w, lam_m = y[15:18], y[18:21], y[21:24]
            u = optimal_control_smrh(q, b_mat, lam_m)
            out = np.empty(24)
            out[0:9] = (rot @ hat(w)).reshape(-1)
            out[9:12] = j_inv @ (m - np.cross(w, j @ w))
            out[12:15] = a_mat @ m - k_mat @ w + b_mat @ u
            dots = costate_rhs_smrh(
                params, w, lam_r, lam_w, lam_m, problem.compat_printed
            )
            out[15:18], out[18:21], out[21:24] = dots
            return out

        return rhs, 24

    j = problem.vehicle.params.inertia
    j_inv = np.linalg.inv(j)

    def rhs(y):
        rot = y[0:9].reshape(3, 3)
        w = y[9:12]
        lam_r, lam_w = y[12:15], y[15:18]
        u = optimal_control_vpq(q, lam_w)
        out = np.empty(18)
        out[0:9] = (rot @ hat(w)).reshape(-1)
        out[9:12] = j_inv @ (u - np.cross(w, j @ w))
        out[12:15], out[15:18] = costate_rhs_vpq(
            j, w, lam_r, lam_w, problem.compat_printed
        )
        return out

    return rhs, 18


@dataclass(frozen=True)
class ShotResult:
    """Terminal residual and the sampled extremal of one shooting pass."""

    residual: np.ndarray
    trajectory: Trajectory = field(repr=False)

    @property
    def residual_norm(self):
        return float(np.linalg.norm(self.residual))


def shoot(problem, costate0):
    """Integrate the extremal for given initial costates; RK4 throughout.

    Returns the terminal residual (attitude logarithm, rate and moment
    differences) plus the trajectory sampled on the output grid, with the
    control history evaluated from the costates at the grid points.
    Raises :class:`ExtremalDivergedError` if the integration leaves the
    finite range before the final time.
    """
    if isinstance(costate0, CostateState):
        lam0 = costate0.as_vector()
    else:
        lam0 = np.asarray(costate0, dtype=float)
    rhs, dim = _make_rhs(problem)
    with_moment = problem.with_moment
    expected = 9 if with_moment else 6
    if lam0.shape != (expected,):
        raise ValueError(f"initial costate must have shape ({expected},)")

    x0 = problem.x0
    y = np.empty(dim)
    y[0:9] = np.asarray(x0.attitude, dtype=float).reshape(-1)
    y[9:12] = x0.omega
    if with_moment:
        y[12:15] = x0.moment
    y[dim - len(lam0) :] = lam0

    count = problem.n_states
    q = problem.control_weight
    attitudes = np.empty((count, 3, 3))
    rates = np.empty((count, 3))
    moments = np.empty((count, 3)) if with_moment else None
    controls = np.empty((count - 1, 3))

    def sample_control(state):
        if with_moment:
            return optimal_control_smrh(
                q, problem.vehicle.params.control_matrix, state[21:24]
            )
        return optimal_control_vpq(q, state[15:18])

    def store(k, state):
        attitudes[k] = state[0:9].reshape(3, 3)
        rates[k] = state[9:12]
        if with_moment:
            moments[k] = state[12:15]

    dt = problem.step / problem.substeps
    store(0, y)
    for k in range(count - 1):
        controls[k] = sample_control(y)
        for _ in range(problem.substeps):
            k1 = rhs(y)
            k2 = rhs(y + 0.5 * dt * k1)
            k3 = rhs(y + 0.5 * dt * k2)
            k4 = rhs(y + dt * k3)
            y = y + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if not np.all(np.isfinite(y)) or np.abs(y).max() > 1e9:
            t = (k + 1) * problem.step
            raise ExtremalDivergedError(
                f"extremal diverged at t = {t:.4f} s", blow_up_time=t
            )
        store(k + 1, y)

    target = problem.target
    blocks = [
        _log_guarded(np.asarray(target.attitude, dtype=float).T @ attitudes[-1]),
        rates[-1] - target.omega,
    ]
    if with_moment:
        blocks.append(moments[-1] - target.moment)
    residual = np.concatenate(blocks)
    trajectory = Trajectory(problem.step, attitudes, rates, moments, controls)
    return ShotResult(residual, trajectory)


@dataclass
class TPBVPResult:
    """Outcome of the shooting solve.

    ``trajectory`` is ``None`` when even the seeded extremal diverged
    before the final time (single shooting cannot tame costate dynamics
    whose adjoint amplification exceeds double precision, e.g. fast rotor
    time constants over long horizons).
    """

    trajectory: Trajectory | None = field(repr=False)
    costate0: CostateState
    residual_norm: float
    converged: bool
    iterations: int
    status: str


def seed_from_controls(problem, controls):
    """Initial costate guess inverting the control law at t = 0.

    The law and its first time derivative are inverted at t = 0:
    ``lam_omega(0) = -Q u(0)`` and ``lam_r(0)`` from ``u'(0)`` for the VPQ
    (``lam_moment(0)``/``lam_omega(0)`` for the SMRH, with ``lam_r(0)`` at
    zero).  The derivative matters: seeding the level alone holds the
    initial control flat, which triples the maneuver angle of a
    rest-to-rest profile and strands the shooting at the extra-winding
    extremal of the same boundary conditions.
    """
    u = np.asarray(controls, dtype=float)
    u0 = u[0]
    udot0 = (u[1] - u[0]) / problem.step if len(u) > 1 else np.zeros(3)
    q = problem.control_weight
    if problem.with_moment:
        params = problem.vehicle.params
        b = params.control_matrix
        lam_m0 = -np.linalg.solve(b.T, q @ u0)
        lam_m_dot0 = -np.linalg.solve(b.T, q @ udot0)
        lam_w0 = -lam_m_dot0 - params.flap_matrix.T @ lam_m0
        return CostateState(np.zeros(3), lam_w0, lam_m0)
    j = problem.vehicle.params.inertia
    w0 = np.asarray(problem.x0.omega, dtype=float)
    lam_w0 = -q @ u0
    core = np.linalg.inv(j) @ hat(j @ w0) - hat(w0)
    lam_r0 = j @ (q @ udot0 + core @ lam_w0)
    return CostateState(lam_r0, lam_w0)


def solve_tpbvp(
    problem,
    initial_costate=None,
    max_iterations=60,
    residual_tolerance=1e-6,
    fd_step=1e-6,
    damping=1e-3,
):
    """Levenberg-Marquardt over the initial costates.

    ``initial_costate`` may be a :class:`CostateState`, a flat vector, or
    ``None`` for a cold start at zero.  The Jacobian is forward finite
    differences with a relative step; damping multiplies by ten on reject
    and divides by ten on accept.  Non-convergence is reported in the
    result, with the best iterate retained.
    """
    if initial_costate is None:
        lam = np.zeros(9 if problem.with_moment else 6)
    elif isinstance(initial_costate, CostateState):
        lam = initial_costate.as_vector()
    else:
        lam = np.array(initial_costate, dtype=float)

    try:
        best = shoot(problem, lam)
    except ExtremalDivergedError as err:
        return TPBVPResult(
            None,
            CostateState.from_vector(lam, problem.with_moment),
            np.inf,
            False,
            0,
            f"shooting failed to converge: seed extremal diverged ({err})",
        )
    best_norm = best.residual_norm
    iterations = 0
    for _ in range(max_iterations):
        if best_norm < residual_tolerance:
            break
        iterations += 1
        jac = np.empty((len(best.residual), len(lam)))
        for i in range(len(lam)):
            delta = fd_step * max(1.0, abs(lam[i]))
            probe = lam.copy()
            probe[i] += delta
            try:
                jac[:, i] = (shoot(problem, probe).residual - best.residual) / delta
            except ExtremalDivergedError:
                jac[:, i] = 0.0
        gram = jac.T @ jac
        gradient = jac.T @ best.residual
        scale = np.diag(np.clip(np.diag(gram), 1e-12, None))
        accepted = False
        for _ in range(12):
            step = np.linalg.solve(gram + damping * scale, -gradient)
            try:
                trial = shoot(problem, lam + step)
            except ExtremalDivergedError:
                damping *= 10.0
                continue
            if trial.residual_norm < best_norm:
                lam = lam + step
                best, best_norm = trial, trial.residual_norm
                damping = max(damping / 10.0, 1e-12)
                accepted = True
                break
            damping *= 10.0
        if not accepted:
            break
    converged = best_norm < residual_tolerance
    status = (
        "converged"
        if converged
        else f"shooting failed to converge: best residual {best_norm:.3e}"
    )
    return TPBVPResult(
        best.trajectory,
        CostateState.from_vector(lam, problem.with_moment),
        best_norm,
        converged,
        iterations,
        status,
    )
