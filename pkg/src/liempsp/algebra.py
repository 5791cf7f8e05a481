"""Lie-algebra and SO(3) primitives shared by the vehicle models and solvers.

Conventions
-----------
* Lie-algebra elements (body velocities, attitude variations) and dual
  elements (moments, controls) are plain 1-D numpy arrays of length ``dim``.
* Structure constants are stored dense as ``c[i, j, k] = c^k_{ij}`` with
  ``[e_i, e_j] = c^k_{ij} e_k``.  Problem sizes here never exceed dim 9,
  so no sparse format is used.
* The coadjoint operator follows the duality pairing
  ``<coad(v) mu, eta> = <mu, [v, eta]>``, which makes its matrix the
  transpose of the adjoint matrix.  On so(3) with the standard basis this
  is ``-hat(v)``, so that momentum evolves by ``mu x v`` and the rigid-body
  drift comes out as the familiar ``J^{-1} (J w x w)``.
* Rotations are 3x3 orthogonal matrices with determinant +1; group updates
  go through the exponential map so iterates stay on SO(3).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# Series switchover for Rodrigues / log extraction.  Below this angle the
# closed forms divide by ~0, so the second-order Taylor factors are used.
_SMALL_ANGLE = 1e-8

# Rotations with trace <= -1 + this slack sit on the pi-rotation branch cut
# of the logarithm and are rejected rather than branch-selected.
_ANTIPODAL_SLACK = 1e-10


class AntipodalRotationError(ValueError):
    """Raised by :func:`log_so3` for rotations at (or within slack of) pi."""


def hat(v):
    """Skew-symmetric matrix of a 3-vector: ``hat(v) @ y == cross(v, y)``.

    Accepts stacked input of shape (..., 3) and returns (..., 3, 3).
    """
    v = np.asarray(v, dtype=float)
    if v.shape[-1] != 3:
        raise ValueError(f"expected a 3-vector, got shape {v.shape}")
    out = np.zeros(v.shape[:-1] + (3, 3))
    x, y, z = v[..., 0], v[..., 1], v[..., 2]
    out[..., 0, 1] = -z
    out[..., 0, 2] = y
    out[..., 1, 0] = z
    out[..., 1, 2] = -x
    out[..., 2, 0] = -y
    out[..., 2, 1] = x
    return out


def vee(m, tol=1e-9):
    """Inverse of :func:`hat`.

    The symmetric part of ``m`` must vanish to ``tol`` (Frobenius); the
    matrix is symmetrized before extraction so rounding noise is harmless.
    """
    m = np.asarray(m, dtype=float)
    if m.shape != (3, 3):
        raise ValueError(f"expected a 3x3 matrix, got shape {m.shape}")
    sym = 0.5 * (m + m.T)
    if np.linalg.norm(sym) > tol:
        raise ValueError(
            f"matrix is not skew-symmetric: symmetric part has norm "
            f"{np.linalg.norm(sym):.3e} > {tol:.1e}"
        )
    skew = 0.5 * (m - m.T)
    return np.array([skew[2, 1], skew[0, 2], skew[1, 0]])


def exp_so3(v):
    """Exponential map so(3) -> SO(3) via the Rodrigues formula."""
    v = np.asarray(v, dtype=float)
    theta = np.linalg.norm(v)
    k = hat(v)
    if theta < _SMALL_ANGLE:
        a = 1.0 - theta**2 / 6.0
        b = 0.5 - theta**2 / 24.0
    else:
        a = np.sin(theta) / theta
        b = (1.0 - np.cos(theta)) / theta**2
    return np.eye(3) + a * k + b * (k @ k)


def log_so3(rot):
    """Principal logarithm SO(3) -> so(3), returned as a 3-vector.

    Raises
    ------
    AntipodalRotationError
        If ``trace(rot) <= -1 + 1e-10``, i.e. the rotation angle is within
        ~1e-5 rad of pi, where the principal branch is ambiguous.
    """
    rot = np.asarray(rot, dtype=float)
    tr = np.trace(rot)
    if tr <= -1.0 + _ANTIPODAL_SLACK:
        raise AntipodalRotationError(
            "antipodal rotation: attitude is within the pi-rotation branch "
            f"cut (trace = {tr:.12f})"
        )
    cos_theta = np.clip(0.5 * (tr - 1.0), -1.0, 1.0)
    theta = np.arccos(cos_theta)
    if theta < _SMALL_ANGLE:
        factor = 0.5 + theta**2 / 12.0
    else:
        factor = 0.5 * theta / np.sin(theta)
    w = factor * (rot - rot.T)
    return np.array([w[2, 1], w[0, 2], w[1, 0]])


def pi_rotation_log(rot):
    """Logarithm of a rotation at (or within slack of) the angle pi.

    :func:`log_so3` rejects these because the principal branch is ambiguous;
    solver loops that may start exactly a half-turn from their target call
    this instead to pick one branch deterministically.  The axis comes from
    the rank-one symmetric part and its sign is fixed by making the
    largest-magnitude component positive (both signs rotate identically).
    """
    rot = np.asarray(rot, dtype=float)
    tr = np.trace(rot)
    if tr > -1.0 + 1e-6:
        raise ValueError(f"rotation is not near pi (trace = {tr:.6f})")
    cos_theta = np.clip(0.5 * (tr - 1.0), -1.0, 1.0)
    theta = np.arccos(cos_theta)
    outer = (0.5 * (rot + rot.T) - cos_theta * np.eye(3)) / (1.0 - cos_theta)
    axis = outer[np.argmax(np.diag(outer))]
    axis = axis / np.linalg.norm(axis)
    if axis[np.argmax(np.abs(axis))] < 0.0:
        axis = -axis
    return theta * axis


def group_step(rot, omega, h):
    """One Lie-Euler attitude update ``rot @ exp_so3(h * omega)``.

    Keeps iterates on SO(3) by construction, unlike an additive Euler step.
    """
    if h <= 0.0:
        raise ValueError(f"step size must be positive, got {h}")
    return rot @ exp_so3(h * np.asarray(omega, dtype=float))


def rotation_defect(rot):
    """Frobenius distance of ``rot`` from the orthogonality/det manifold."""
    rot = np.asarray(rot, dtype=float)
    ortho = np.linalg.norm(rot.T @ rot - np.eye(3))
    return max(ortho, abs(np.linalg.det(rot) - 1.0))


def check_rotation(rot, tol=1e-9):
    """Validate the SO(3) invariants ``R^T R = I`` and ``det R = 1``."""
    defect = rotation_defect(rot)
    if defect > tol:
        raise ValueError(f"matrix is not a rotation: defect {defect:.3e} > {tol:.1e}")


def project_rotation(rot):
    """Nearest rotation matrix (polar projection via SVD)."""
    u, _, vt = np.linalg.svd(np.asarray(rot, dtype=float))
    r = u @ vt
    if np.linalg.det(r) < 0.0:
        r = u @ np.diag([1.0, 1.0, -1.0]) @ vt
    return r


def _levi_civita():
    eps = np.zeros((3, 3, 3))
    eps[0, 1, 2] = eps[1, 2, 0] = eps[2, 0, 1] = 1.0
    eps[0, 2, 1] = eps[2, 1, 0] = eps[1, 0, 2] = -1.0
    return eps


@dataclass(frozen=True)
class LieAlgebraSpec:
    """Finite-dimensional Lie algebra given by dense structure constants.

    ``structure_constants[i, j, k]`` is the coefficient of ``e_k`` in
    ``[e_i, e_j]``.  Antisymmetry and the Jacobi identity are asserted at
    construction (both to 1e-12), so downstream code can rely on them.
    """

    dim: int
    structure_constants: np.ndarray = field(repr=False)

    def __post_init__(self):
        if self.dim < 1:
            raise ValueError(f"dimension must be positive, got {self.dim}")
        c = np.asarray(self.structure_constants, dtype=float)
        if c.shape != (self.dim,) * 3:
            raise ValueError(
                f"structure constants must have shape {(self.dim,) * 3}, "
                f"got {c.shape}"
            )
        object.__setattr__(self, "structure_constants", c)
        anti = np.max(np.abs(c + np.transpose(c, (1, 0, 2))))
        if anti > 1e-12:
            raise ValueError(f"structure constants not antisymmetric: {anti:.3e}")
        jacobi = (
            np.einsum("ijm,mkl->ijkl", c, c)
            + np.einsum("jkm,mil->ijkl", c, c)
            + np.einsum("kim,mjl->ijkl", c, c)
        )
        worst = np.max(np.abs(jacobi))
        if worst > 1e-12:
            raise ValueError(f"Jacobi identity violated: residual {worst:.3e}")

    @classmethod
    def so3(cls):
        """so(3) in the standard basis, where the bracket is the cross product."""
        return cls(3, _levi_civita())

    @classmethod
    def abelian(cls, dim):
        """Commutative algebra of given dimension (all brackets vanish)."""
        return cls(dim, np.zeros((dim, dim, dim)))


def _check_dim(spec, v, name):
    v = np.asarray(v, dtype=float)
    if v.shape != (spec.dim,):
        raise ValueError(f"{name} must have shape ({spec.dim},), got {v.shape}")
    return v


def ad_matrix(spec, v):
    """Matrix of the adjoint ``eta -> [v, eta]``; equals ``hat(v)`` on so(3)."""
    v = _check_dim(spec, v, "algebra vector")
    return np.einsum("i,ijk->kj", v, spec.structure_constants)


def coad_matrix(spec, v):
    """Matrix of the coadjoint ``mu -> coad(v) mu``.

    Defined by ``<coad(v) mu, eta> = <mu, [v, eta]>``, hence the transpose
    of :func:`ad_matrix`; on so(3) it is ``-hat(v)``.
    """
    v = _check_dim(spec, v, "algebra vector")
    return np.einsum("i,ikj->kj", v, spec.structure_constants)


def coad_by_momentum(spec, mu):
    """Matrix of ``w -> coad(w) mu`` for fixed momentum ``mu``.

    This is the other factor of the bilinear map (v, mu) -> coad(v) mu, and
    is what the velocity-block linearization needs.  On so(3) it equals
    ``hat(mu)``.
    """
    mu = _check_dim(spec, mu, "momentum vector")
    return np.einsum("j,ikj->ki", mu, spec.structure_constants)


@dataclass(frozen=True)
class InertiaOperator:
    """Kinetic-energy metric as a symmetric positive-definite matrix.

    ``flat`` maps body velocities to momenta (``J`` on so(3)); ``sharp`` is
    its inverse.  Construct with :meth:`from_matrix`, which validates
    symmetry, positive-definiteness, and the inverse pairing.
    """

    flat: np.ndarray = field(repr=False)
    sharp: np.ndarray = field(repr=False)

    @classmethod
    def from_matrix(cls, flat):
        flat = np.asarray(flat, dtype=float)
        if flat.ndim != 2 or flat.shape[0] != flat.shape[1]:
            raise ValueError(f"inertia matrix must be square, got {flat.shape}")
        scale = np.linalg.norm(flat)
        if np.linalg.norm(flat - flat.T) > 1e-12 * max(scale, 1.0):
            raise ValueError("inertia matrix must be symmetric")
        eigs = np.linalg.eigvalsh(flat)
        if eigs[0] <= 0.0:
            raise ValueError(f"inertia matrix must be positive definite, eigs {eigs}")
        sharp = np.linalg.inv(flat)
        residual = np.linalg.norm(flat @ sharp - np.eye(flat.shape[0]))
        if residual > 1e-12 * max(scale, 1.0):
            raise ValueError(f"inertia inverse pairing off by {residual:.3e}")
        return cls(flat=flat, sharp=sharp)

    @property
    def dim(self):
        return self.flat.shape[0]
