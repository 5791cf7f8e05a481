import numpy as np
import pytest

from liempsp.algebra import (
    AntipodalRotationError,
    InertiaOperator,
    LieAlgebraSpec,
    ad_matrix,
    coad_by_momentum,
    coad_matrix,
    exp_so3,
    group_step,
    hat,
    log_so3,
    rotation_defect,
    vee,
)


def series_exp(m, terms=20):
    """Truncated matrix-exponential series, the oracle for exp_so3."""
    out = np.eye(3)
    term = np.eye(3)
    for k in range(1, terms):
        term = term @ m / k
        out = out + term
    return out


def axis_angle(axis, angle):
    """Rotation about a unit axis, built from the textbook closed form."""
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    k = hat(axis)
    return np.cos(angle) * np.eye(3) + np.sin(angle) * k + (1 - np.cos(angle)) * np.outer(axis, axis)


def random_nilpotent_spec(rng):
    """4-dim nilpotent algebra ([e1,e2]=e3, [e1,e3]=e4) in a random basis."""
    c = np.zeros((4, 4, 4))
    c[0, 1, 2] = 1.0
    c[1, 0, 2] = -1.0
    c[0, 2, 3] = 1.0
    c[2, 0, 3] = -1.0
    p = np.eye(4) + 0.3 * rng.standard_normal((4, 4))
    pinv = np.linalg.inv(p)
    c_prime = np.einsum("ia,jb,dk,ijk->abd", p, p, pinv, c)
    # Conjugation leaves roundoff in the constants; symmetrize it away so
    # the spec's own 1e-12 Jacobi assertion sees a clean algebra.
    c_prime = 0.5 * (c_prime - np.transpose(c_prime, (1, 0, 2)))
    return LieAlgebraSpec(4, c_prime)


class TestHatVee:
    def test_hat_zero(self):
        assert np.array_equal(hat([0.0, 0.0, 0.0]), np.zeros((3, 3)))

    def test_hat_e1(self):
        expected = np.array([[0, 0, 0], [0, 0, -1], [0, 1, 0]], dtype=float)
        assert np.array_equal(hat([1.0, 0.0, 0.0]), expected)

    def test_hat_123(self):
        expected = np.array([[0, -3, 2], [3, 0, -1], [-2, 1, 0]], dtype=float)
        assert np.array_equal(hat([1.0, 2.0, 3.0]), expected)

    def test_hat_is_cross_product(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            v, y = rng.standard_normal((2, 3))
            assert np.allclose(hat(v) @ y, np.cross(v, y), atol=1e-14)

    def test_hat_antisymmetry(self):
        rng = np.random.default_rng(2)
        for _ in range(100):
            v, w = rng.standard_normal((2, 3))
            assert np.allclose(hat(v) @ w, -hat(w) @ v, atol=1e-14)

    def test_hat_batched(self):
        rng = np.random.default_rng(3)
        vs = rng.standard_normal((7, 3))
        batched = hat(vs)
        for i, v in enumerate(vs):
            assert np.array_equal(batched[i], hat(v))

    def test_vee_zero(self):
        assert np.array_equal(vee(np.zeros((3, 3))), np.zeros(3))

    @pytest.mark.parametrize("v", [[1.0, 2.0, 3.0], [-4.0, 0.5, 7.0]])
    def test_vee_inverts_hat(self, v):
        assert np.array_equal(vee(hat(v)), np.array(v))

    def test_vee_rejects_symmetric_part(self):
        m = hat([1.0, 2.0, 3.0])
        m[0, 0] = 1e-6
        with pytest.raises(ValueError, match="skew"):
            vee(m)


class TestExpLog:
    def test_exp_zero(self):
        assert np.array_equal(exp_so3(np.zeros(3)), np.eye(3))

    def test_exp_pi_roll(self):
        assert np.allclose(exp_so3([np.pi, 0, 0]), np.diag([1.0, -1.0, -1.0]), atol=1e-15)

    def test_exp_matches_series_oracle(self):
        rng = np.random.default_rng(4)
        vs = [np.array([0.3, -0.2, 0.1])] + list(rng.uniform(-2, 2, (50, 3)))
        for v in vs:
            assert np.allclose(exp_so3(v), series_exp(hat(v)), atol=1e-13)

    def test_log_identity(self):
        assert np.array_equal(log_so3(np.eye(3)), np.zeros(3))

    def test_log_inverts_exp(self):
        v = np.array([0.1, 0.2, 0.3])
        assert np.allclose(log_so3(exp_so3(v)), v, atol=1e-12)

    def test_log_axis_angle_oracle(self):
        rot = axis_angle([1.0, 1.0, 1.0], 0.5)
        expected = (0.5 / np.sqrt(3.0)) * np.ones(3)
        assert np.allclose(log_so3(rot), expected, atol=1e-12)

    def test_round_trip_sweep(self):
        rng = np.random.default_rng(5)
        for _ in range(500):
            direction = rng.standard_normal(3)
            direction /= np.linalg.norm(direction)
            v = rng.uniform(1e-12, np.pi - 0.01) * direction
            assert np.linalg.norm(log_so3(exp_so3(v)) - v) < 1e-9

    def test_log_rejects_antipodal(self):
        rng = np.random.default_rng(6)
        axis = rng.standard_normal(3)
        rot = axis_angle(axis, np.pi)
        with pytest.raises(AntipodalRotationError, match="antipodal"):
            log_so3(rot)

    def test_exp_stays_on_group(self):
        rng = np.random.default_rng(7)
        for _ in range(200):
            assert rotation_defect(exp_so3(rng.uniform(-3, 3, 3))) < 1e-14


class TestAdjoint:
    def test_ad_zero(self):
        spec = LieAlgebraSpec.so3()
        assert np.array_equal(ad_matrix(spec, np.zeros(3)), np.zeros((3, 3)))

    def test_ad_so3_is_hat(self):
        spec = LieAlgebraSpec.so3()
        v = np.array([1.0, 2.0, 3.0])
        assert np.allclose(ad_matrix(spec, v), hat(v), atol=1e-15)

    def test_ad_abelian_vanishes(self):
        spec = LieAlgebraSpec.abelian(5)
        rng = np.random.default_rng(8)
        assert np.array_equal(ad_matrix(spec, rng.standard_normal(5)), np.zeros((5, 5)))

    def test_coad_zero(self):
        spec = LieAlgebraSpec.so3()
        assert np.array_equal(coad_matrix(spec, np.zeros(3)), np.zeros((3, 3)))

    def test_coad_so3_is_minus_hat(self):
        spec = LieAlgebraSpec.so3()
        v = np.array([1.0, 2.0, 3.0])
        assert np.allclose(coad_matrix(spec, v), -hat(v), atol=1e-15)

    @pytest.mark.parametrize("make_spec", ["so3", "nilpotent"])
    def test_coad_duality_pairing(self, make_spec):
        # <coad(v) mu, eta> = <mu, ad(v) eta>, checked by brute force.
        rng = np.random.default_rng(9)
        spec = LieAlgebraSpec.so3() if make_spec == "so3" else random_nilpotent_spec(rng)
        v = rng.standard_normal(spec.dim)
        mu = rng.standard_normal(spec.dim)
        for _ in range(100):
            eta = rng.standard_normal(spec.dim)
            lhs = (coad_matrix(spec, v) @ mu) @ eta
            rhs = mu @ (ad_matrix(spec, v) @ eta)
            assert abs(lhs - rhs) < 1e-12 * max(1.0, abs(rhs))

    @pytest.mark.parametrize("make_spec", ["so3", "nilpotent"])
    def test_coad_is_ad_transpose(self, make_spec):
        rng = np.random.default_rng(10)
        spec = LieAlgebraSpec.so3() if make_spec == "so3" else random_nilpotent_spec(rng)
        for _ in range(1000):
            v = rng.standard_normal(spec.dim)
            assert np.allclose(coad_matrix(spec, v), ad_matrix(spec, v).T, atol=1e-13)

    def test_coad_by_momentum_so3(self):
        spec = LieAlgebraSpec.so3()
        mu = np.array([0.4, -1.2, 2.0])
        assert np.allclose(coad_by_momentum(spec, mu), hat(mu), atol=1e-15)

    def test_coad_bilinearity_swap(self):
        rng = np.random.default_rng(11)
        spec = random_nilpotent_spec(rng)
        for _ in range(50):
            v = rng.standard_normal(4)
            mu = rng.standard_normal(4)
            assert np.allclose(
                coad_matrix(spec, v) @ mu, coad_by_momentum(spec, mu) @ v, atol=1e-12
            )

    def test_dimension_mismatch_rejected(self):
        spec = LieAlgebraSpec.so3()
        with pytest.raises(ValueError, match="shape"):
            ad_matrix(spec, np.zeros(4))
        with pytest.raises(ValueError, match="shape"):
            coad_matrix(spec, np.zeros(2))


class TestSpecValidation:
    def test_so3_constants_pass(self):
        LieAlgebraSpec.so3()

    def test_antisymmetry_enforced(self):
        c = np.zeros((2, 2, 2))
        c[0, 1, 0] = 1.0  # no matching -1 for c[1, 0, 0]
        with pytest.raises(ValueError, match="antisymmetric"):
            LieAlgebraSpec(2, c)

    def test_jacobi_enforced(self):
        # Antisymmetric constants that fail Jacobi: [e1,e2]=e3, [e1,e3]=e1.
        # The cyclic sum on (1,2,3) leaves a dangling +e3.
        c = np.zeros((3, 3, 3))
        c[0, 1, 2] = 1.0
        c[1, 0, 2] = -1.0
        c[0, 2, 0] = 1.0
        c[2, 0, 0] = -1.0
        with pytest.raises(ValueError, match="Jacobi"):
            LieAlgebraSpec(3, c)


class TestGroupStep:
    def test_identity_fixed_point(self):
        for h in (1e-3, 0.1, 1.0):
            assert np.allclose(group_step(np.eye(3), np.zeros(3), h), np.eye(3))

    def test_constant_rate_composes_to_pi(self):
        rot = np.eye(3)
        omega = np.array([np.pi / 0.6, 0.0, 0.0])
        for _ in range(600):
            rot = group_step(rot, omega, 0.001)
        assert np.linalg.norm(rot - np.diag([1.0, -1.0, -1.0])) < 1e-6

    def test_rejects_nonpositive_step(self):
        with pytest.raises(ValueError, match="positive"):
            group_step(np.eye(3), np.ones(3), 0.0)

    def test_single_step_drift(self):
        rng = np.random.default_rng(12)
        for _ in range(100):
            rot = exp_so3(rng.uniform(-2, 2, 3))
            stepped = group_step(rot, rng.uniform(-10, 10, 3), 1e-3)
            assert rotation_defect(stepped) - rotation_defect(rot) < 1e-10

    def test_long_run_orthogonality_drift(self):
        rng = np.random.default_rng(13)
        rot = np.eye(3)
        for _ in range(100_000):
            rot = group_step(rot, rng.uniform(-10.0, 10.0, 3), 1e-3)
        assert np.linalg.norm(rot.T @ rot - np.eye(3)) < 1e-8


class TestInertiaOperator:
    def test_accepts_spd(self):
        j = np.diag([0.0122, 0.0266, 0.0387])
        op = InertiaOperator.from_matrix(j)
        assert np.allclose(op.flat @ op.sharp, np.eye(3), atol=1e-14)
        assert op.dim == 3

    def test_rejects_asymmetric(self):
        j = np.array([[1.0, 0.1, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
        with pytest.raises(ValueError, match="symmetric"):
            InertiaOperator.from_matrix(j)

    def test_rejects_indefinite(self):
        with pytest.raises(ValueError, match="positive definite"):
            InertiaOperator.from_matrix(np.diag([1.0, -1.0, 1.0]))
