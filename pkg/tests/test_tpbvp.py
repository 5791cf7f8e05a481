import numpy as np
import pytest

from liempsp.algebra import exp_so3, hat
from liempsp.mpsp import MPSPConfig, mpsp_solve
from liempsp.tpbvp import (
    CostateState,
    ExtremalDivergedError,
    ShootingProblem,
    costate_rhs_smrh,
    costate_rhs_vpq,
    optimal_control_smrh,
    optimal_control_vpq,
    seed_from_controls,
    shoot,
    solve_tpbvp,
)
from liempsp.vehicles import (
    SingleMainRotorHelicopter,
    VariablePitchQuadrotor,
    VehicleState,
    load_smrh_params,
    load_vpq_params,
)

FLIP_TARGET = np.diag([1.0, -1.0, -1.0])


@pytest.fixture(scope="module")
def vpq():
    return VariablePitchQuadrotor(load_vpq_params())


@pytest.fixture(scope="module")
def smrh():
    return SingleMainRotorHelicopter(load_smrh_params())


@pytest.fixture(scope="module")
def vpq_flip_solution(vpq):
    x0 = VehicleState(np.eye(3), np.zeros(3))
    target = VehicleState(FLIP_TARGET, np.zeros(3))
    traj, report = mpsp_solve(
        vpq, x0, target, 600, 1e-3, MPSPConfig(update_variant="effort")
    )
    assert report.converged
    problem = ShootingProblem(vpq, x0, target, 600, 1e-3)
    return problem, traj


class TestControlLaws:
    def test_vpq_zero_multiplier(self):
        assert np.array_equal(optimal_control_vpq(np.eye(3), np.zeros(3)), np.zeros(3))

    def test_vpq_identity_weight(self):
        lam = np.array([1.0, -2.0, 0.5])
        assert np.allclose(optimal_control_vpq(np.eye(3), lam), -lam)

    def test_vpq_diagonal_weight(self):
        u = optimal_control_vpq(np.diag([1.0, 2.0, 4.0]), np.array([2.0, 2.0, 2.0]))
        assert np.allclose(u, [-2.0, -1.0, -0.5])

    def test_smrh_zero_multiplier(self, smrh):
        u = optimal_control_smrh(np.eye(3), smrh.params.control_matrix, np.zeros(3))
        assert np.array_equal(u, np.zeros(3))

    def test_smrh_diagonal_map(self, smrh):
        b = smrh.params.control_matrix
        lam = np.array([0.1, -0.2, 0.3])
        assert np.allclose(
            optimal_control_smrh(np.eye(3), b, lam), -np.diag(b) * lam
        )

    def test_smrh_stationarity_residual(self, smrh):
        rng = np.random.default_rng(70)
        for _ in range(20):
            q = np.diag(rng.uniform(0.5, 2.0, 3))
            lam = rng.standard_normal(3)
            u = optimal_control_smrh(q, smrh.params.control_matrix, lam)
            residual = q @ u + smrh.params.control_matrix.T @ lam
            assert np.linalg.norm(residual) < 1e-12


class TestCostateDynamics:
    def test_vpq_zero_rate_default(self, vpq):
        j = vpq.params.inertia
        lam_r = np.array([0.3, -0.1, 0.2])
        lam_w = np.array([1.0, 0.5, -0.5])
        dr, dw = costate_rhs_vpq(j, np.zeros(3), lam_r, lam_w)
        assert np.array_equal(dr, np.zeros(3))
        assert np.allclose(dw, -np.linalg.solve(j, lam_r), atol=1e-15)

    def test_zero_costates_stationary(self, vpq, smrh):
        z = np.zeros(3)
        w = np.array([1.0, -2.0, 0.5])
        for compat in (False, True):
            assert all(
                np.array_equal(d, z)
                for d in costate_rhs_vpq(vpq.params.inertia, w, z, z, compat)
            )
            assert all(
                np.array_equal(d, z)
                for d in costate_rhs_smrh(smrh.params, w, z, z, z, compat)
            )

    def test_vpq_compat_drops_coupling(self, vpq):
        w = np.array([0.4, -0.3, 0.2])
        lam_r = np.array([1.0, 0.0, 0.0])
        _, dw_default = costate_rhs_vpq(vpq.params.inertia, w, lam_r, np.zeros(3))
        _, dw_compat = costate_rhs_vpq(
            vpq.params.inertia, w, lam_r, np.zeros(3), compat_printed=True
        )
        assert np.allclose(dw_compat, 0.0)
        assert np.linalg.norm(dw_default) > 1.0

    def test_smrh_isolated_moment_costate_decay(self, smrh):
        lam_m = np.array([0.2, -0.1, 0.4])
        _, _, dm = costate_rhs_smrh(
            smrh.params, np.zeros(3), np.zeros(3), np.zeros(3), lam_m
        )
        assert np.allclose(dm, -smrh.params.flap_matrix.T @ lam_m, atol=1e-15)

    def test_lam_r_norm_preserved_along_extremal(self, vpq):
        # lam_r' = -hat(w) lam_r is a rotation of lam_r, so its norm is flat.
        j = vpq.params.inertia
        q = np.eye(3)
        y = np.concatenate(
            [np.eye(3).reshape(-1), np.zeros(3), [0.02, -0.01, 0.03], [0.6, 0.1, -0.2]]
        )

        def rhs(y):
            rot, w = y[0:9].reshape(3, 3), y[9:12]
            lam_r, lam_w = y[12:15], y[15:18]
            u = optimal_control_vpq(q, lam_w)
            dr, dw = costate_rhs_vpq(j, w, lam_r, lam_w)
            return np.concatenate(
                [
                    (rot @ hat(w)).reshape(-1),
                    np.linalg.solve(j, u - np.cross(w, j @ w)),
                    dr,
                    dw,
                ]
            )

        h = 1e-3
        norms = [np.linalg.norm(y[12:15])]
        for _ in range(600):
            k1, k2 = rhs(y), rhs(y + 0.5 * h * rhs(y))
            k3 = rhs(y + 0.5 * h * k2)
            k4 = rhs(y + h * k3)
            y = y + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
            norms.append(np.linalg.norm(y[12:15]))
        assert max(norms) - min(norms) < 1e-8


def integrate_pairing(vehicle, compat, horizon, h=1e-3, seed=71):
    """Joint extremal/deviation/costate flow; returns the pairing history.

    The multiplier equations are adjoint to the linearized deviation flow,
    so <lam_r, eta> + <lam_w, J dw> (+ <lam_m, dM>) must stay constant when
    the control variation is zero.  This is the oracle that fixes the
    coupling terms the printed theorems drop or sign-flip.
    """
    rng = np.random.default_rng(seed)
    with_moment = vehicle.has_moment
    j = vehicle.params.inertia
    j_inv = np.linalg.inv(j)
    q = np.eye(3)

    def gyro_jac(w):
        return j_inv @ (hat(j @ w) - hat(w) @ j)

    state = {
        "rot": np.eye(3).reshape(-1),
        "w": np.zeros(3),
        "lam_r": rng.standard_normal(3) * 0.1,
        "lam_w": rng.standard_normal(3) * 0.5,
        "eta": rng.standard_normal(3) * 0.01,
        "dw": rng.standard_normal(3) * 0.01,
    }
    if with_moment:
        state["m"] = np.zeros(3)
        state["lam_m"] = rng.standard_normal(3) * 0.05
        state["dm"] = rng.standard_normal(3) * 0.01
    keys = list(state)
    y = np.concatenate([state[k] for k in keys])
    sizes = [state[k].size for k in keys]
    offsets = np.cumsum([0] + sizes)

    def unpack(vec):
        return {k: vec[offsets[i] : offsets[i + 1]] for i, k in enumerate(keys)}

    def rhs(vec):
        s = unpack(vec)
        rot = s["rot"].reshape(3, 3)
        w = s["w"]
        out = {}
        out["rot"] = (rot @ hat(w)).reshape(-1)
        if with_moment:
            params = vehicle.params
            u = optimal_control_smrh(q, params.control_matrix, s["lam_m"])
            out["w"] = j_inv @ (s["m"] - np.cross(w, j @ w))
            out["m"] = (
                params.flap_matrix @ s["m"]
                - params.rate_coupling @ w
                + params.control_matrix @ u
            )
            dr, dw_, dm_ = costate_rhs_smrh(
                params, w, s["lam_r"], s["lam_w"], s["lam_m"], compat
            )
            out["lam_r"], out["lam_w"], out["lam_m"] = dr, dw_, dm_
            out["eta"] = -hat(w) @ s["eta"] + s["dw"]
            out["dw"] = gyro_jac(w) @ s["dw"] + j_inv @ s["dm"]
            out["dm"] = params.flap_matrix @ s["dm"] - params.rate_coupling @ s["dw"]
        else:
            u = optimal_control_vpq(q, s["lam_w"])
            out["w"] = j_inv @ (u - np.cross(w, j @ w))
            dr, dw_ = costate_rhs_vpq(j, w, s["lam_r"], s["lam_w"], compat)
            out["lam_r"], out["lam_w"] = dr, dw_
            out["eta"] = -hat(w) @ s["eta"] + s["dw"]
            out["dw"] = gyro_jac(w) @ s["dw"]
        return np.concatenate([out[k] for k in keys])

    def pairing(vec):
        s = unpack(vec)
        value = s["lam_r"] @ s["eta"] + s["lam_w"] @ (j @ s["dw"])
        if with_moment:
            value += s["lam_m"] @ s["dm"]
        return value

    history = [pairing(y)]
    for _ in range(int(round(horizon / h))):
        k1 = rhs(y)
        k2 = rhs(y + 0.5 * h * k1)
        k3 = rhs(y + 0.5 * h * k2)
        k4 = rhs(y + h * k3)
        y = y + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        history.append(pairing(y))
    return np.array(history)


class TestAdjointPairing:
    def test_vpq_default_conserves(self, vpq):
        history = integrate_pairing(vpq, compat=False, horizon=0.6)
        assert np.abs(history - history[0]).max() < 1e-6 * max(1.0, abs(history[0]))

    def test_vpq_printed_form_drifts(self, vpq):
        history = integrate_pairing(vpq, compat=True, horizon=0.6)
        assert np.abs(history - history[0]).max() > 1e-4

    def test_smrh_default_conserves(self, smrh):
        # h = 5e-4 keeps RK4 truncation (amplified by the fast moment
        # costate) well below the conservation tolerance.
        history = integrate_pairing(smrh, compat=False, horizon=0.2, h=5e-4)
        assert np.abs(history - history[0]).max() < 1e-6 * max(1.0, abs(history[0]))

    def test_smrh_printed_form_drifts(self, smrh):
        history = integrate_pairing(smrh, compat=True, horizon=0.2)
        assert np.abs(history - history[0]).max() > 1e-4


class TestShoot:
    def test_trivial_problem_zero_residual(self, vpq):
        x0 = VehicleState(np.eye(3), np.zeros(3))
        problem = ShootingProblem(vpq, x0, x0, 100, 1e-3)
        result = shoot(problem, CostateState(np.zeros(3), np.zeros(3)))
        assert np.allclose(result.residual, 0.0, atol=1e-15)
        assert np.allclose(result.trajectory.controls, 0.0)

    def test_residual_jacobian_fd_consistency(self, vpq):
        x0 = VehicleState(np.eye(3), np.zeros(3))
        target = VehicleState(exp_so3([0.8, 0.2, -0.1]), np.zeros(3))
        problem = ShootingProblem(vpq, x0, target, 150, 1e-3)
        lam = np.array([0.01, -0.02, 0.03, 0.2, -0.1, 0.15])
        base = shoot(problem, lam).residual

        def jac(step):
            cols = []
            for i in range(6):
                probe = lam.copy()
                probe[i] += step
                cols.append((shoot(problem, probe).residual - base) / step)
            return np.array(cols).T

        j5, j6 = jac(1e-5), jac(1e-6)
        assert np.all(np.isfinite(j5)) and np.all(np.isfinite(j6))
        assert np.abs(j5 - j6).max() < 1e-3 * (1.0 + np.abs(j6).max())

    def test_rk4_order(self, vpq):
        x0 = VehicleState(np.eye(3), np.zeros(3))
        target = VehicleState(exp_so3([1.0, 0.0, 0.0]), np.zeros(3))
        lam = np.array([0.05, -0.02, 0.01, 0.8, 0.3, -0.4])

        def residual_at(substeps):
            problem = ShootingProblem(vpq, x0, target, 60, 1e-2, substeps=substeps)
            return shoot(problem, lam).residual

        reference = residual_at(16)
        errors = [np.linalg.norm(residual_at(s) - reference) for s in (1, 2, 4)]
        slope = np.polyfit(np.log([1.0, 0.5, 0.25]), np.log(errors), 1)[0]
        assert slope >= 3.7

    def test_substep_doubling_on_nominal_flip(self, vpq, vpq_flip_solution):
        problem, mpsp_traj = vpq_flip_solution
        seeded = solve_tpbvp(problem, seed_from_controls(problem, mpsp_traj.controls))
        assert seeded.converged
        lam = seeded.costate0
        fine = ShootingProblem(vpq, problem.x0, problem.target, 600, 1e-3, substeps=2)
        res_1 = shoot(problem, lam).residual
        res_2 = shoot(fine, lam).residual
        assert np.linalg.norm(res_1 - res_2) < 1e-8

    def test_divergence_reports_time(self, smrh):
        x0 = VehicleState(np.eye(3), np.zeros(3), np.zeros(3))
        target = VehicleState(FLIP_TARGET, np.zeros(3), np.zeros(3))
        problem = ShootingProblem(smrh, x0, target, 1200, 1e-3)
        with pytest.raises(ExtremalDivergedError, match="diverged") as excinfo:
            shoot(problem, CostateState(np.zeros(3), np.zeros(3), np.ones(3)))
        assert excinfo.value.blow_up_time is not None


class TestSolve:
    def test_trivial_problem_converges_immediately(self, vpq):
        x0 = VehicleState(np.eye(3), np.zeros(3))
        problem = ShootingProblem(vpq, x0, x0, 50, 1e-3)
        result = solve_tpbvp(problem, None)
        assert result.converged and result.iterations == 0

    def test_vpq_flip_from_mpsp_seed(self, vpq_flip_solution):
        problem, mpsp_traj = vpq_flip_solution
        seed = seed_from_controls(problem, mpsp_traj.controls)
        result = solve_tpbvp(problem, seed)
        assert result.converged and result.residual_norm < 1e-6
        u_mpsp, u_ct = mpsp_traj.controls, result.trajectory.controls
        rms = np.linalg.norm(u_mpsp - u_ct) / np.linalg.norm(u_ct)
        assert rms <= 0.05

    def test_cold_start_flip_is_accepted_to_fail(self, vpq):
        # Shooting without a seed is initialization-sensitive by nature;
        # either outcome is fine, but it must return, not raise.
        x0 = VehicleState(np.eye(3), np.zeros(3))
        target = VehicleState(FLIP_TARGET, np.zeros(3))
        problem = ShootingProblem(vpq, x0, target, 600, 1e-3)
        result = solve_tpbvp(problem, None, max_iterations=5)
        assert result.status
        if not result.converged:
            assert "failed" in result.status

    def test_short_smrh_maneuver_converges(self, smrh):
        x0 = VehicleState(np.eye(3), np.zeros(3), np.zeros(3))
        target = VehicleState(exp_so3([0.4, 0.0, 0.0]), np.zeros(3), np.zeros(3))
        traj, report = mpsp_solve(
            smrh, x0, target, 250, 1e-3, MPSPConfig(update_variant="effort")
        )
        assert report.converged
        problem = ShootingProblem(smrh, x0, target, 250, 1e-3)
        result = solve_tpbvp(problem, seed_from_controls(problem, traj.controls))
        assert result.converged
        rms = np.linalg.norm(traj.controls - result.trajectory.controls)
        assert rms / np.linalg.norm(result.trajectory.controls) < 0.05

    def test_smrh_flip_fails_gracefully(self, smrh):
        # Costates of the moment subsystem amplify like exp(t/tau_t); over
        # the 1.2 s flip that exceeds double precision and single shooting
        # cannot converge.  The solver must say so, not crash.
        x0 = VehicleState(np.eye(3), np.zeros(3), np.zeros(3))
        target = VehicleState(FLIP_TARGET, np.zeros(3), np.zeros(3))
        problem = ShootingProblem(smrh, x0, target, 1200, 1e-3)
        result = solve_tpbvp(
            problem, CostateState(np.zeros(3), np.zeros(3), np.zeros(3)),
            max_iterations=3,
        )
        assert not result.converged
        assert "failed" in result.status
