"""MPSP trajectory solver on SO(3).

Each iteration rolls out the full nonlinear dynamics, measures the terminal
deviation from the target intrinsically, linearizes the deviation dynamics
along the nominal, collapses the horizon into terminal sensitivity matrices
by a backward recursion, and applies a closed-form control update that is
the exact KKT solution of a static equality-constrained QP.  No costate
propagation, no Riccati sweep: the only factorization is a p x p Cholesky
of the sensitivity Gram matrix (p = 6 for the VPQ, 9 for the SMRH).

Linearization conventions
-------------------------
The deviation state stacks the attitude variation eta (so that
``R = R_nom exp(hat(eta))``), the body-rate deviation, and (SMRH) the
moment deviation.  The attitude block uses ``I - h hat(w_nom)``: the
left-trivialized variation satisfies ``eta' = -ad_w eta + dw``, the sign
that survives finite-difference validation.  The velocity block uses the
full derivative of the gyroscopic drift, ``J^-1 (hat(J w) - hat(w) J)``;
``compat_printed=True`` swaps in the shorthand variants
(``-J^-1 hat(w) J + hat(w)`` and the SMRH ``I - h K`` coupling) for
comparison runs.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .algebra import AntipodalRotationError, ad_matrix, hat, pi_rotation_log
from .vehicles import (
    AbelianSMS,
    SingleMainRotorHelicopter,
    VariablePitchQuadrotor,
    sms_velocity_jacobian,
)


class SingularGramError(RuntimeError):
    """The sensitivity Gram matrix sum_k G_k R^-1 G_k^T is rank deficient."""


# ---------------------------------------------------------------------------
# Step linearization
# ---------------------------------------------------------------------------


def _gyroscopic_jacobian(inertia, omegas, compat_printed):
    """Batched velocity-block Jacobian at nominal rates ``omegas`` (K, 3)."""
    j_inv = np.linalg.inv(inertia)
    hat_w = hat(omegas)
    if compat_printed:
        return -np.matmul(j_inv, np.matmul(hat_w, inertia)) + hat_w
    hat_jw = hat(omegas @ inertia.T)
    return np.matmul(j_inv, hat_jw - np.matmul(hat_w, inertia))


def linearize_vpq(params, omega_nominal, h, compat_printed=False):
    """Deviation-model matrices (A, B) along nominal VPQ rates.

    ``omega_nominal`` may be a single rate (3,) or a stack (K, 3); the
    result is correspondingly (6, 6)/(6, 3) or (K, 6, 6)/(K, 6, 3).
    """
    omegas = np.atleast_2d(np.asarray(omega_nominal, dtype=float))
    count = len(omegas)
    eye = np.eye(3)
    a = np.zeros((count, 6, 6))
    a[:, :3, :3] = eye - h * hat(omegas)
    a[:, :3, 3:] = h * eye
    a[:, 3:, 3:] = eye + h * _gyroscopic_jacobian(params.inertia, omegas, compat_printed)
    b = np.zeros((count, 6, 3))
    b[:, 3:, :] = h * np.linalg.inv(params.inertia)
    if np.ndim(omega_nominal) == 1:
        return a[0], b[0]
    return a, b


def linearize_smrh(params, omega_nominal, h, compat_printed=False):
    """Deviation-model matrices (A, B) along nominal SMRH rates.

    The moment-rate coupling block is ``-h K`` (the finite-difference
    derivative of ``M' = A M - K w + B u``); ``compat_printed`` reproduces
    the shorthand ``I - h K`` instead.
    """
    omegas = np.atleast_2d(np.asarray(omega_nominal, dtype=float))
    count = len(omegas)
    eye = np.eye(3)
    a = np.zeros((count, 9, 9))
    a[:, :3, :3] = eye - h * hat(omegas)
    a[:, :3, 3:6] = h * eye
    a[:, 3:6, 3:6] = eye + h * _gyroscopic_jacobian(
        params.inertia, omegas, compat_printed
    )
    a[:, 3:6, 6:] = h * np.linalg.inv(params.inertia)
    coupling = -h * params.rate_coupling
    if compat_printed:
        coupling = eye + coupling
    a[:, 6:, 3:6] = coupling
    a[:, 6:, 6:] = eye + h * params.flap_matrix
    b = np.zeros((count, 9, 3))
    b[:, 6:, :] = h * params.control_matrix
    if np.ndim(omega_nominal) == 1:
        return a[0], b[0]
    return a, b


def linearize_sms(model, v_nominal, h):
    """Generic single-step (A, B) for a simple mechanical system.

    Attitude block ``I - h ad(v)``, velocity block from the full drift
    derivative.  Matches :func:`linearize_vpq` on so(3).
    """
    v = np.asarray(v_nominal, dtype=float)
    n = model.algebra.dim
    a = np.zeros((2 * n, 2 * n))
    a[:n, :n] = np.eye(n) - h * ad_matrix(model.algebra, v)
    a[:n, n:] = h * np.eye(n)
    a[n:, n:] = np.eye(n) + h * sms_velocity_jacobian(model, v)
    b = np.zeros((2 * n, n))
    b[n:, :] = h * model.inertia.sharp
    return a, b


def linearize_rollout(vehicle, trajectory, compat_printed=False):
    """Stacked (A, B) along a rolled-out nominal; shapes (K-1, p, p)/(K-1, p, n)."""
    h = trajectory.step
    rates = trajectory.rates[:-1]
    if isinstance(vehicle, VariablePitchQuadrotor):
        return linearize_vpq(vehicle.params, rates, h, compat_printed)
    if isinstance(vehicle, SingleMainRotorHelicopter):
        return linearize_smrh(vehicle.params, rates, h, compat_printed)
    if isinstance(vehicle, AbelianSMS):
        n = vehicle.model.algebra.dim
        a = np.zeros((2 * n, 2 * n))
        a[:n, :n] = np.eye(n)
        a[:n, n:] = h * np.eye(n)
        a[n:, n:] = np.eye(n)
        b = np.zeros((2 * n, n))
        b[n:, :] = h * vehicle.model.inertia.sharp
        count = len(trajectory) - 1
        return (
            np.broadcast_to(a, (count, 2 * n, 2 * n)).copy(),
            np.broadcast_to(b, (count, 2 * n, n)).copy(),
        )
    raise TypeError(f"no linearization for vehicle type {type(vehicle).__name__}")


# ---------------------------------------------------------------------------
# Terminal sensitivity chain
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RankCertificate:
    """Surjectivity diagnosis of the terminal sensitivity map.

    ``sigma_min``/``sigma_max`` are the extreme singular values of the
    trailing-block stack ``[G_{N-m} ... G_{N-1}]`` with m = ceil(p/n); the
    determinant fields are filled only for the 2n-block structure where the
    closed form ``h^(3n) det(sharp)^2`` applies.
    """

    full_rank: bool
    sigma_min: float
    sigma_max: float
    det_value: float | None = None
    det_expected: float | None = None
    det_ok: bool | None = None


def rank_certificate(g, h=None, inertia_sharp=None, det_rel_tol=1e-6):
    """Rank-check the trailing blocks of the sensitivity chain.

    Full row rank of ``[G_{N-m} ... G_{N-1}]`` (m = ceil(p/n)) certifies
    that the stacked sensitivity map is surjective, hence the update's Gram
    matrix is positive definite.  When ``h`` and ``inertia_sharp`` are given
    and p = 2n, the determinant of the trailing two blocks is also compared
    against the closed form ``h^(3n) (det sharp)^2``.
    """
    g = np.asarray(g, dtype=float)
    count, p, n = g.shape
    blocks = min(count, -(-p // n))
    tail = np.hstack(list(g[count - blocks :]))
    sigmas = np.linalg.svd(tail, compute_uv=False)
    sigma_max = float(sigmas.max()) if sigmas.size else 0.0
    # Fewer columns than rows cannot span the terminal space at all.
    sigma_min = float(sigmas.min()) if tail.shape[1] >= p else 0.0
    full = sigma_min > 1e-12 * max(sigma_max, 1.0)
    det_value = det_expected = det_ok = None
    if h is not None and inertia_sharp is not None and p == 2 * n and count >= 2:
        det_value = float(np.linalg.det(np.hstack([g[-2], g[-1]])))
        det_expected = float(h ** (3 * n) * np.linalg.det(inertia_sharp) ** 2)
        det_ok = abs(det_value - det_expected) <= det_rel_tol * abs(det_expected)
    return RankCertificate(full, sigma_min, sigma_max, det_value, det_expected, det_ok)


@dataclass(frozen=True)
class SensitivityChain:
    """Terminal sensitivities G_k = A_{N-1}...A_{k+1} B_k plus a rank check."""

    matrices: np.ndarray = field(repr=False)  # (K-1, p, n)
    certificate: RankCertificate

    def __len__(self):
        return len(self.matrices)


def build_chain(a_seq, b_seq):
    """Terminal sensitivity chain by the backward recursion.

    ``G_{N-1} = B_{N-1}`` and ``G_k = (G0_{k+1} A_{k+1}) B_k`` with the
    accumulated product seeded at the identity, so the whole chain costs one
    backward sweep of p x p products instead of repeated full products.
    """
    a_seq = np.asarray(a_seq, dtype=float)
    b_seq = np.asarray(b_seq, dtype=float)
    count, p, _ = a_seq.shape
    if count < 1:
        raise ValueError("need at least one step (two states) to build a chain")
    g = np.empty((count, p, b_seq.shape[2]))
    g[-1] = b_seq[-1]
    acc = np.eye(p)
    for k in range(count - 2, -1, -1):
        acc = acc @ a_seq[k + 1]
        g[k] = acc @ b_seq[k]
    return SensitivityChain(g, rank_certificate(g))


def terminal_deviation(vehicle, state, target):
    """Terminal deviation of a nominal endpoint from the target.

    Oriented so that driving it to zero drives the trajectory onto the
    target: the attitude part is ``log(R_target^T R)``, the remaining
    blocks are plain differences.  Raises for a target attitude antipodal
    to the endpoint (logarithm branch cut); the solver loops fall back to a
    deterministic pi-branch instead, see :func:`deviation_allowing_pi`.
    """
    return vehicle.deviation(state, target)


def deviation_allowing_pi(vehicle, state, target):
    """Deviation of ``state`` from ``target`` with a pi-rotation fallback.

    Maneuvers commanded exactly half a turn away start on the logarithm
    branch cut; one deterministic branch is as good as the other there, and
    the iterates leave the cut after the first correction.
    """
    try:
        return vehicle.deviation(state, target)
    except AntipodalRotationError:
        eta = pi_rotation_log(target.attitude.T @ state.attitude)
        blocks = [eta, state.omega - target.omega]
        if vehicle.has_moment:
            blocks.append(state.moment - target.moment)
        return np.concatenate(blocks)


# ---------------------------------------------------------------------------
# Closed-form control updates
# ---------------------------------------------------------------------------


def _weight_matrix(weight, n):
    w = np.asarray(weight, dtype=float)
    if w.ndim == 0:
        if w <= 0.0:
            raise ValueError("control weight must be positive")
        return float(w) * np.eye(n)
    if w.shape != (n, n):
        raise ValueError(f"control weight must be scalar or ({n},{n}), got {w.shape}")
    if np.linalg.norm(w - w.T) > 1e-12 * max(np.linalg.norm(w), 1.0):
        raise ValueError("control weight must be symmetric")
    if np.linalg.eigvalsh(w)[0] <= 0.0:
        raise ValueError("control weight must be positive definite")
    return w


def _solve_gram(g, r_inv, rhs):
    gram = np.einsum("kpn,nm,kqm->pq", g, r_inv, g)
    gram = 0.5 * (gram + gram.T)
    eigs = np.linalg.eigvalsh(gram)
    if eigs[0] < 1e-12 * max(eigs[-1], 1e-300):
        raise SingularGramError(
            "singular sensitivity Gram matrix: smallest eigenvalue "
            f"{eigs[0]:.3e} vs largest {eigs[-1]:.3e}"
        )
    return cho_solve(cho_factor(gram), rhs)


def mpsp_update_increment(u_prev, g, weight, terminal_dev):
    """Minimum-increment update: the exact KKT solution of

    minimize sum_k (1/2) du_k^T R du_k  s.t.  sum_k G_k du_k = dX_N,

    applied as ``u - du``.
    """
    u_prev = np.asarray(u_prev, dtype=float)
    r = _weight_matrix(weight, u_prev.shape[1])
    r_inv = np.linalg.inv(r)
    multiplier = _solve_gram(g, r_inv, np.asarray(terminal_dev, dtype=float))
    du = np.einsum("kpn,p->kn", g, multiplier) @ r_inv
    return u_prev - du


def mpsp_update_effort(u_prev, g, weight, terminal_dev):
    """Minimum-effort update: the exact KKT solution of

    minimize sum_k (1/2) (u_k - du_k)^T R (u_k - du_k)
    s.t. sum_k G_k du_k = dX_N,

    returned directly as the new sequence ``u - du``.  Coincides with the
    increment update when the previous controls are zero.
    """
    u_prev = np.asarray(u_prev, dtype=float)
    r = _weight_matrix(weight, u_prev.shape[1])
    r_inv = np.linalg.inv(r)
    carried = np.einsum("kpn,kn->p", g, u_prev)
    multiplier = _solve_gram(
        g, r_inv, carried - np.asarray(terminal_dev, dtype=float)
    )
    return np.einsum("kpn,p->kn", g, multiplier) @ r_inv


_UPDATES = {"increment": mpsp_update_increment, "effort": mpsp_update_effort}


# ---------------------------------------------------------------------------
# Iteration loop
# ---------------------------------------------------------------------------


@dataclass
class MPSPConfig:
    """MPSP solve settings.

    ``control_weight`` is the per-step SPD weight R (scalar means R = w I);
    ``update_variant`` selects the minimum-effort or minimum-increment QP;
    ``deviation_scaling`` optionally weights the mixed-unit terminal norm
    used for the stopping test (the update itself is scaling-invariant).
    """

    control_weight: object = 1.0
    max_iterations: int = 30
    terminal_tolerance: float = 1e-8
    update_variant: str = "increment"
    deviation_scaling: np.ndarray | None = None
    compat_printed: bool = False

    def __post_init__(self):
        if self.terminal_tolerance <= 0.0:
            raise ValueError("terminal tolerance must be positive")
        if self.max_iterations < 1:
            raise ValueError("need at least one iteration")
        if self.update_variant not in _UPDATES:
            raise ValueError(
                f"unknown update variant '{self.update_variant}' "
                f"(choose from {sorted(_UPDATES)})"
            )


@dataclass
class IterationReport:
    """Per-iteration convergence record shared by the MPSP and iLQR loops.

    ``deviation_norms[i]`` is the terminal deviation norm of the i-th
    nominal rollout; ``increment_costs[i]`` the cost (1/2) sum du^T R du of
    the correction computed there (zero once feasible); ``effort_costs[i]``
    the control effort (1/2) sum u^T R u; ``costs`` the iLQR total cost.
    """

    deviation_norms: list[float] = field(default_factory=list)
    increment_costs: list[float] = field(default_factory=list)
    effort_costs: list[float] = field(default_factory=list)
    wall_times: list[float] = field(default_factory=list)
    costs: list[float] | None = None
    converged: bool = False
    iterations: int = 0
    status: str = "in-progress"

    @property
    def ratios(self):
        """Successive terminal-norm ratios (Q-linear convergence monitor)."""
        norms = self.deviation_norms
        out = []
        for prev, cur in zip(norms, norms[1:]):
            out.append(cur / prev if prev > 0.0 else np.nan)
        return out


def _quadratic_cost(u, r):
    return 0.5 * float(np.einsum("kn,nm,km->", u, r, u))


def mpsp_solve(vehicle, x0, target, n_states, h, config=None, u_init=None):
    """Iterate rollout / linearize / update until the terminal deviation dies.

    Returns ``(trajectory, report)`` where the trajectory is the last
    nominal rollout (the one whose deviation met the tolerance, on
    success).  Non-convergence is reported through ``report.converged`` /
    ``report.status``; the trajectory is still returned for diagnosis.
    """
    config = config or MPSPConfig()
    if n_states < 2:
        raise ValueError(f"need at least two states, got {n_states}")
    update = _UPDATES[config.update_variant]
    r = _weight_matrix(config.control_weight, vehicle.control_dim)
    if u_init is None:
        u = np.zeros((n_states - 1, vehicle.control_dim))
    else:
        u = np.array(u_init, dtype=float)
        if u.shape != (n_states - 1, vehicle.control_dim):
            raise ValueError(
                f"initial guess must have shape {(n_states - 1, vehicle.control_dim)}, "
                f"got {u.shape}"
            )
    scaling = config.deviation_scaling
    report = IterationReport()
    trajectory = None
    for _ in range(config.max_iterations):
        start = time.perf_counter()
        trajectory = vehicle.rollout(x0, u, h)
        dev = deviation_allowing_pi(vehicle, trajectory.terminal_state, target)
        norm = float(np.linalg.norm(dev if scaling is None else scaling * dev))
        a_seq, b_seq = linearize_rollout(vehicle, trajectory, config.compat_printed)
        chain = build_chain(a_seq, b_seq)
        u_next = update(u, chain.matrices, r, dev)
        report.deviation_norms.append(norm)
        report.increment_costs.append(_quadratic_cost(u_next - u, r))
        report.effort_costs.append(_quadratic_cost(u, r))
        report.wall_times.append(time.perf_counter() - start)
        report.iterations += 1
        if norm < config.terminal_tolerance:
            report.converged = True
            report.status = "converged"
            return trajectory, report
        u = u_next
    report.status = "did not converge within max_iterations"
    return trajectory, report
