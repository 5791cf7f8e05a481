"""Vehicle dynamics: generic simple mechanical system on a Lie group, the
variable-pitch quadrotor (VPQ) rigid-body attitude model, and the
single-main-rotor helicopter (SMRH) model with first-order rotor-moment
dynamics, plus nonlinear forward rollout.

All vehicles share a small protocol consumed by the solvers:

* ``control_dim`` / ``deviation_dim`` / ``has_moment``
* ``step(state, u, h)`` - one explicit Lie-Euler step
* ``rollout(x0, controls, h)`` - forward simulation to a :class:`Trajectory`
* ``deviation(state, ref)`` - intrinsic deviation of ``state`` from ``ref``
  as a stacked vector (attitude part through the group logarithm)

The attitude advances through the group exponential so iterates stay on the
manifold; velocity (and moment) blocks advance by explicit Euler.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property
from importlib import resources

import numpy as np

from .algebra import (
    InertiaOperator,
    LieAlgebraSpec,
    check_rotation,
    coad_by_momentum,
    coad_matrix,
    exp_so3,
    hat,
    log_so3,
)


class AllocationError(RuntimeError):
    """Rotor allocation (moment -> thrust coefficients) did not converge."""


# ---------------------------------------------------------------------------
# Generic simple mechanical system
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SMSModel:
    """Simple mechanical system on a Lie group: algebra plus inertia.

    Control covectors are fixed to the dual basis (fully actuated), so the
    input lives in the full dual algebra.
    """

    algebra: LieAlgebraSpec
    inertia: InertiaOperator

    def __post_init__(self):
        if self.algebra.dim != self.inertia.dim:
            raise ValueError(
                f"algebra dim {self.algebra.dim} != inertia dim {self.inertia.dim}"
            )


def sms_velocity_derivative(model, v, u):
    """Body-velocity derivative ``sharp(coad(v) flat(v)) + sharp(u)``.

    On so(3) this is Euler's equation ``J^-1 (J w x w) + J^-1 u``.
    """
    v = np.asarray(v, dtype=float)
    u = np.asarray(u, dtype=float)
    if v.shape != (model.algebra.dim,) or u.shape != (model.algebra.dim,):
        raise ValueError(
            f"velocity/control must have shape ({model.algebra.dim},), "
            f"got {v.shape} and {u.shape}"
        )
    momentum = model.inertia.flat @ v
    drift = coad_matrix(model.algebra, v) @ momentum
    return model.inertia.sharp @ (drift + u)


def sms_velocity_jacobian(model, v):
    """Derivative of the drift ``v -> sharp(coad(v) flat(v))`` at ``v``.

    Both slots of the bilinear coadjoint term contribute:
    ``sharp (coad(v) flat + coad(.)(flat v))``.  On so(3) this evaluates to
    ``J^-1 (hat(J w) - hat(w) J)``, the form that passes finite-difference
    checks (the single-slot shorthand does not).
    """
    v = np.asarray(v, dtype=float)
    spec = model.algebra
    momentum = model.inertia.flat @ v
    return model.inertia.sharp @ (
        coad_matrix(spec, v) @ model.inertia.flat + coad_by_momentum(spec, momentum)
    )


# ---------------------------------------------------------------------------
# Vehicle parameters
# ---------------------------------------------------------------------------


def _as_inertia(value):
    j = np.asarray(value, dtype=float)
    if j.shape != (3, 3):
        raise ValueError(f"inertia must be 3x3, got {j.shape}")
    InertiaOperator.from_matrix(j)  # symmetry / positive-definiteness gate
    return j


@dataclass(frozen=True)
class VPQParams:
    """Variable-pitch quadrotor constants.

    ``thrust_scale`` is the rotor thrust constant K [N] multiplying the
    thrust coefficients, ``arm_length`` the rotor-to-center distance d [m],
    ``rotor_radius`` r [m], and ``flight_mode`` +1 for normal / -1 for
    inverted flight.
    """

    inertia: np.ndarray = field(repr=False)
    thrust_scale: float = 40.0
    arm_length: float = 0.22
    rotor_radius: float = 0.12
    flight_mode: int = 1
    provenance: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "inertia", _as_inertia(self.inertia))
        for name in ("thrust_scale", "arm_length", "rotor_radius"):
            if getattr(self, name) <= 0.0:
                raise ValueError(f"{name} must be positive")
        if self.flight_mode not in (1, -1):
            raise ValueError(f"flight_mode must be +1 or -1, got {self.flight_mode}")

    @classmethod
    def from_dict(cls, data):
        return cls(**_checked_fields(cls, data))


@dataclass(frozen=True)
class SMRHParams:
    """Single-main-rotor helicopter constants.

    The flap states are not integrated separately; they are absorbed into
    the moment vector M = (l, m, n_tr), whose linear dynamics
    ``M' = A M - K w + B u`` are assembled in :meth:`flap_matrix`,
    :meth:`rate_coupling`, and :meth:`control_matrix`.
    """

    inertia: np.ndarray = field(repr=False)
    rotor_time_constant: float = 0.1  # tau_m [s]
    rotor_speed: float = 167.0  # main-rotor angular speed [rad/s]
    flap_stiffness: float = 120.0  # blade-root stiffness [N m/rad]
    flap_inertia: float = 0.03  # blade inertia about the flap hinge [kg m^2]
    tail_time_constant: float = 0.05  # tau_t [s]
    tail_gain: float = 5.0  # tail-rotor control effectiveness [N m]
    hub_height: float = 0.3  # rotor hub offset above the CoM [m]
    hover_thrust: float = 0.0  # main-rotor thrust entering the hub moment [N]
    provenance: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "inertia", _as_inertia(self.inertia))
        positive = (
            "rotor_time_constant",
            "rotor_speed",
            "flap_stiffness",
            "flap_inertia",
            "tail_time_constant",
            "tail_gain",
            "hub_height",
        )
        for name in positive:
            if getattr(self, name) <= 0.0:
                raise ValueError(f"{name} must be positive")
        if self.hover_thrust < 0.0:
            raise ValueError("hover_thrust must be nonnegative")

    @classmethod
    def from_dict(cls, data):
        return cls(**_checked_fields(cls, data))

    @property
    def hub_moment_gain(self):
        """Restoring-moment scale (flap stiffness plus thrust-offset term)."""
        return self.flap_stiffness + self.hub_height * self.hover_thrust

    @cached_property
    def flap_matrix(self):
        """Moment-state matrix A of ``M' = A M - K w + B u``."""
        cross = self.flap_stiffness / (2.0 * self.rotor_speed * self.flap_inertia)
        inv_m = 1.0 / self.rotor_time_constant
        return np.array(
            [
                [-inv_m, cross, 0.0],
                [-cross, -inv_m, 0.0],
                [0.0, 0.0, -1.0 / self.tail_time_constant],
            ]
        )

    @cached_property
    def rate_coupling(self):
        """Body-rate coupling matrix K of ``M' = A M - K w + B u``."""
        sigma = self.hub_moment_gain
        ratio = sigma / (self.rotor_speed * self.rotor_time_constant)
        return np.array(
            [
                [sigma, -ratio, 0.0],
                [ratio, sigma, 0.0],
                [0.0, 0.0, self.tail_gain],
            ]
        )

    @cached_property
    def control_matrix(self):
        """Control matrix B of ``M' = A M - K w + B u``."""
        sigma = self.hub_moment_gain
        return np.diag(
            [
                sigma / self.rotor_time_constant,
                sigma / self.rotor_time_constant,
                self.tail_gain / self.tail_time_constant,
            ]
        )


def _checked_fields(cls, data):
    known = set(cls.__dataclass_fields__) - {"provenance"}
    kwargs = {}
    for key, value in data.items():
        if key == "provenance":
            kwargs[key] = dict(value)
        elif key in known:
            kwargs[key] = value
        else:
            raise ValueError(f"unknown parameter field '{key}' for {cls.__name__}")
    return kwargs


def _load_packaged_params(name, cls):
    text = resources.files("liempsp").joinpath("params", name).read_text()
    return cls.from_dict(json.loads(text))


def load_vpq_params(path=None):
    """Shipped VPQ defaults (inertia published; rotor constants representative)."""
    if path is None:
        return _load_packaged_params("vpq.json", VPQParams)
    with open(path) as f:
        return VPQParams.from_dict(json.load(f))


def load_smrh_params(path=None):
    """Shipped SMRH defaults (all representative, labeled in provenance)."""
    if path is None:
        return _load_packaged_params("smrh.json", SMRHParams)
    with open(path) as f:
        return SMRHParams.from_dict(json.load(f))


# ---------------------------------------------------------------------------
# States and trajectories
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class VehicleState:
    """Group element plus body rates (plus rotor moment for the SMRH).

    ``attitude`` is a 3x3 rotation for the SO(3) vehicles and a translation
    vector for :class:`AbelianSMS`.
    """

    attitude: np.ndarray
    omega: np.ndarray
    moment: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "attitude", np.asarray(self.attitude, dtype=float))
        object.__setattr__(self, "omega", np.asarray(self.omega, dtype=float))
        if self.moment is not None:
            object.__setattr__(self, "moment", np.asarray(self.moment, dtype=float))


@dataclass(frozen=True)
class Trajectory:
    """Discrete state/control history with a fixed time step.

    ``attitudes`` stacks the group elements (K, 3, 3) for SO(3) vehicles,
    ``rates`` the body velocities (K, n), ``moments`` the SMRH moment states
    or ``None``, and ``controls`` the (K-1, n) input sequence.
    """

    step: float
    attitudes: np.ndarray = field(repr=False)
    rates: np.ndarray = field(repr=False)
    moments: np.ndarray | None = field(repr=False)
    controls: np.ndarray = field(repr=False)

    def __post_init__(self):
        if self.step <= 0.0:
            raise ValueError(f"time step must be positive, got {self.step}")
        k = len(self.attitudes)
        if len(self.rates) != k or len(self.controls) != k - 1:
            raise ValueError(
                f"inconsistent lengths: {k} attitudes, {len(self.rates)} rates, "
                f"{len(self.controls)} controls (need K, K, K-1)"
            )
        if self.moments is not None and len(self.moments) != k:
            raise ValueError(f"expected {k} moment states, got {len(self.moments)}")

    def __len__(self):
        return len(self.attitudes)

    @property
    def times(self):
        return self.step * np.arange(len(self))

    def state(self, k):
        moment = None if self.moments is None else self.moments[k]
        return VehicleState(self.attitudes[k], self.rates[k], moment)

    @property
    def terminal_state(self):
        return self.state(len(self) - 1)


# ---------------------------------------------------------------------------
# Vehicle derivative maps
# ---------------------------------------------------------------------------


def vpq_derivative(params, state, u):
    """VPQ equations of motion: returns ``(hat(w), w_dot)`` in the body frame.

    ``w_dot = -J^-1 (w x J w) + J^-1 u``; the attitude rate is ``R hat(w)``.
    """
    w = np.asarray(state.omega, dtype=float)
    u = np.asarray(u, dtype=float)
    j = params.inertia
    w_dot = np.linalg.solve(j, u - np.cross(w, j @ w))
    return hat(w), w_dot


def smrh_derivative(params, state, u):
    """SMRH equations of motion: ``(hat(w), w_dot, m_dot)``.

    The fuselage torque is the moment state M, which follows
    ``M' = A M - K w + B u`` with u = (lon, lat, tail) swash/tail inputs.
    """
    if state.moment is None:
        raise ValueError("SMRH state requires a moment vector")
    w = np.asarray(state.omega, dtype=float)
    m = np.asarray(state.moment, dtype=float)
    u = np.asarray(u, dtype=float)
    if u.shape != (3,):
        raise ValueError(f"SMRH control must have shape (3,), got {u.shape}")
    j = params.inertia
    w_dot = np.linalg.solve(j, m - np.cross(w, j @ w))
    m_dot = params.flap_matrix @ m - params.rate_coupling @ w + params.control_matrix @ u
    return hat(w), w_dot, m_dot


# ---------------------------------------------------------------------------
# Rotor thrust/moment maps (VPQ)
# ---------------------------------------------------------------------------

_ROTOR_SIGNS_L = np.array([1.0, -1.0, -1.0, 1.0])
_ROTOR_SIGNS_M = np.array([1.0, 1.0, -1.0, -1.0])
_ROTOR_SIGNS_N = np.array([1.0, -1.0, 1.0, -1.0])


def _signed_three_halves(c):
    # Real-valued odd extension of c^(3/2); agrees with the plain power for
    # c >= 0 and keeps inverted flight (gamma = -1, c <= 0) real.
    return np.sign(c) * np.abs(c) ** 1.5


def vpq_rotor_forward(params, thrust_coeffs, gamma=None, require_feasible=False):
    """Thrust/moment equilibrium (T, l, m, n) of the H-configuration rotors.

    With ``require_feasible`` the strict reading is enforced: every
    ``gamma * C_Ti`` must be nonnegative or the 3/2-power yaw terms would be
    complex.  By default the signed-power extension is used instead, which
    is the continuous gamma-symmetric completion of the same formulas.
    """
    c = np.asarray(thrust_coeffs, dtype=float)
    if c.shape != (4,):
        raise ValueError(f"expected 4 thrust coefficients, got shape {c.shape}")
    g = params.flight_mode if gamma is None else gamma
    if require_feasible and np.any(g * c < 0.0):
        raise ValueError(
            "invalid thrust coefficient: gamma * C_T must be nonnegative "
            f"(gamma={g}, C_T={c})"
        )
    k, d, r = params.thrust_scale, params.arm_length, params.rotor_radius
    thrust = g * k * np.sum(c)
    roll = g * k * d * (_ROTOR_SIGNS_L @ c)
    pitch = g * k * d * (_ROTOR_SIGNS_M @ c)
    yaw = g * (k * r / np.sqrt(2.0)) * (_ROTOR_SIGNS_N @ _signed_three_halves(c))
    return np.array([thrust, roll, pitch, yaw])


def vpq_rotor_inverse(params, thrust, roll, pitch, yaw, gamma=None, tol=1e-10, max_iter=50):
    """Thrust coefficients realizing a (T, l, m, n) target, by damped Newton.

    Starts at the equal-thrust trim and raises :class:`AllocationError` if
    the residual does not reach ``tol`` (relative) within ``max_iter``
    iterations.
    """
    g = params.flight_mode if gamma is None else gamma
    target = np.array([thrust, roll, pitch, yaw], dtype=float)
    k, d, r = params.thrust_scale, params.arm_length, params.rotor_radius
    c = np.full(4, thrust / (4.0 * g * k))
    scale = max(1.0, np.linalg.norm(target))

    def residual(coeffs):
        return vpq_rotor_forward(params, coeffs, gamma=g) - target

    res = residual(c)
    for _ in range(max_iter):
        if np.linalg.norm(res) <= tol * scale:
            return c
        jac = np.vstack(
            [
                g * k * np.ones(4),
                g * k * d * _ROTOR_SIGNS_L,
                g * k * d * _ROTOR_SIGNS_M,
                g * (k * r / np.sqrt(2.0)) * _ROTOR_SIGNS_N * 1.5 * np.sqrt(np.abs(c)),
            ]
        )
        try:
            step = np.linalg.solve(jac, -res)
        except np.linalg.LinAlgError:
            # Yaw row degenerates at zero coefficients; regularize lightly.
            step = np.linalg.lstsq(jac + 1e-9 * np.eye(4), -res, rcond=None)[0]
        alpha = 1.0
        for _ in range(20):
            trial = c + alpha * step
            trial_res = residual(trial)
            if np.linalg.norm(trial_res) < np.linalg.norm(res):
                c, res = trial, trial_res
                break
            alpha *= 0.5
        else:
            break
    if np.linalg.norm(res) <= tol * scale:
        return c
    raise AllocationError(
        f"allocation infeasible: residual {np.linalg.norm(res):.3e} after "
        f"{max_iter} Newton iterations"
    )


# ---------------------------------------------------------------------------
# Vehicles
# ---------------------------------------------------------------------------


class VariablePitchQuadrotor:
    """Rigid body on SO(3) driven by three independent body moments."""

    control_dim = 3
    deviation_dim = 6
    has_moment = False

    def __init__(self, params):
        self.params = params
        self._j = params.inertia
        self._j_inv = np.linalg.inv(params.inertia)

    def omega_dot(self, omega, u):
        return self._j_inv @ (u - np.cross(omega, self._j @ omega))

    def validate_state(self, state):
        check_rotation(state.attitude)
        if state.moment is not None:
            raise ValueError("VPQ state carries no moment vector")

    def step(self, state, u, h):
        return VehicleState(
            state.attitude @ exp_so3(h * state.omega),
            state.omega + h * self.omega_dot(state.omega, u),
        )

    def rollout(self, x0, controls, h):
        if h <= 0.0:
            raise ValueError(f"time step must be positive, got {h}")
        self.validate_state(x0)
        controls = np.asarray(controls, dtype=float)
        count = len(controls) + 1
        attitudes = np.empty((count, 3, 3))
        rates = np.empty((count, 3))
        rot = np.array(x0.attitude, dtype=float)
        w = np.array(x0.omega, dtype=float)
        attitudes[0], rates[0] = rot, w
        j, j_inv = self._j, self._j_inv
        for k in range(count - 1):
            w_dot = j_inv @ (controls[k] - np.cross(w, j @ w))
            rot = rot @ exp_so3(h * w)
            w = w + h * w_dot
            attitudes[k + 1], rates[k + 1] = rot, w
        return Trajectory(h, attitudes, rates, None, controls)

    def deviation(self, state, ref):
        eta = log_so3(ref.attitude.T @ state.attitude)
        return np.concatenate([eta, state.omega - ref.omega])


class SingleMainRotorHelicopter:
    """Rigid fuselage on SO(3) plus the first-order rotor-moment state."""

    control_dim = 3
    deviation_dim = 9
    has_moment = True

    def __init__(self, params):
        self.params = params
        self._j = params.inertia
        self._j_inv = np.linalg.inv(params.inertia)

    def validate_state(self, state):
        check_rotation(state.attitude)
        if state.moment is None:
            raise ValueError("SMRH state requires a moment vector")

    def step(self, state, u, h):
        _, w_dot, m_dot = smrh_derivative(self.params, state, u)
        return VehicleState(
            state.attitude @ exp_so3(h * state.omega),
            state.omega + h * w_dot,
            state.moment + h * m_dot,
        )

    def rollout(self, x0, controls, h):
        if h <= 0.0:
            raise ValueError(f"time step must be positive, got {h}")
        self.validate_state(x0)
        controls = np.asarray(controls, dtype=float)
        count = len(controls) + 1
        attitudes = np.empty((count, 3, 3))
        rates = np.empty((count, 3))
        moments = np.empty((count, 3))
        rot = np.array(x0.attitude, dtype=float)
        w = np.array(x0.omega, dtype=float)
        m = np.array(x0.moment, dtype=float)
        attitudes[0], rates[0], moments[0] = rot, w, m
        j, j_inv = self._j, self._j_inv
        a_mat = self.params.flap_matrix
        k_mat = self.params.rate_coupling
        b_mat = self.params.control_matrix
        for k in range(count - 1):
            w_dot = j_inv @ (m - np.cross(w, j @ w))
            m_dot = a_mat @ m - k_mat @ w + b_mat @ controls[k]
            rot = rot @ exp_so3(h * w)
            w = w + h * w_dot
            m = m + h * m_dot
            attitudes[k + 1], rates[k + 1], moments[k + 1] = rot, w, m
        return Trajectory(h, attitudes, rates, moments, controls)

    def deviation(self, state, ref):
        eta = log_so3(ref.attitude.T @ state.attitude)
        return np.concatenate(
            [eta, state.omega - ref.omega, state.moment - ref.moment]
        )


class AbelianSMS:
    """Simple mechanical system on the translation group R^n.

    The bracket vanishes, so the discrete deviation model is exact and the
    solvers reduce to their linear-quadratic behavior.  Used as a validation
    vehicle; the group element is the position vector itself.
    """

    has_moment = False

    def __init__(self, model):
        if np.any(model.algebra.structure_constants != 0.0):
            raise ValueError("AbelianSMS requires an abelian algebra spec")
        self.model = model
        self.control_dim = model.algebra.dim
        self.deviation_dim = 2 * model.algebra.dim

    def validate_state(self, state):
        n = self.model.algebra.dim
        if state.attitude.shape != (n,) or state.omega.shape != (n,):
            raise ValueError(f"abelian state blocks must have shape ({n},)")

    def step(self, state, u, h):
        return VehicleState(
            state.attitude + h * state.omega,
            state.omega + h * (self.model.inertia.sharp @ np.asarray(u, dtype=float)),
        )

    def rollout(self, x0, controls, h):
        if h <= 0.0:
            raise ValueError(f"time step must be positive, got {h}")
        self.validate_state(x0)
        controls = np.asarray(controls, dtype=float)
        n = self.model.algebra.dim
        count = len(controls) + 1
        positions = np.empty((count, n))
        velocities = np.empty((count, n))
        positions[0], velocities[0] = x0.attitude, x0.omega
        sharp = self.model.inertia.sharp
        for k in range(count - 1):
            positions[k + 1] = positions[k] + h * velocities[k]
            velocities[k + 1] = velocities[k] + h * (sharp @ controls[k])
        return Trajectory(h, positions, velocities, None, controls)

    def deviation(self, state, ref):
        return np.concatenate(
            [state.attitude - ref.attitude, state.omega - ref.omega]
        )
