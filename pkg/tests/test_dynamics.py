from types import SimpleNamespace

import numpy as np
import pytest

from wadc.caseio import bundled_case
from wadc.dynamics import (
    NoiseModel,
    PmuWindow,
    assemble_state_space,
    closed_loop,
    emulate_pmu,
    ou_discretization,
    simulate_linear_ou,
)
from wadc.errors import ConfigError, NumericalError
from wadc.linalg import matrix_exp, solve_lyapunov
from wadc.network import solve_equilibrium

from conftest import make_hurwitz, rel_fro


@pytest.fixture(scope="module")
def rm():
    return solve_equilibrium(bundled_case("two_area"))


class TestAssemble:
    def test_zero_gain_open_loop(self, rm):
        model = assemble_state_space(rm, sigma=0.05)
        assert np.array_equal(model.a_closed, model.a)

    def test_zero_sigma_zero_noise_input(self, rm):
        model = assemble_state_space(rm, sigma=0.0)
        assert np.all(model.s == 0.0)

    def test_gain_embeds_in_speed_columns(self, rm):
        rng = np.random.default_rng(3)
        gain = rng.standard_normal((rm.nv, rm.ng))
        model = assemble_state_space(rm, sigma=0.05, gain_p=gain)
        diff = model.a_closed - model.a
        expected = np.zeros_like(diff)
        expected[:, rm.ng :] = model.b @ gain
        # identical up to one floating-point add per touched entry
        assert np.max(np.abs(diff - expected)) < 1e-14
        assert np.array_equal(closed_loop(model.a, model.b, gain), model.a_closed)

    def test_structure_blocks(self, rm):
        model = assemble_state_space(rm, sigma=0.05)
        ng = rm.ng
        assert np.all(model.a[:ng, :ng] == 0.0)
        assert np.array_equal(model.a[:ng, ng:], rm.case.omega0 * np.eye(ng))
        assert np.all(model.b[:ng, :] == 0.0)
        assert np.all(model.s[:ng, :] == 0.0)
        # noise input carries the machine loading: -E^2 G sigma / M on the diagonal
        expect = -np.diag(rm.emf**2 * rm.g_diag * 0.05 / rm.inertia)
        assert np.allclose(model.s[ng:, :], expect, atol=1e-15)


def _toy_model(a, s, ng=None):
    a = np.atleast_2d(np.asarray(a, dtype=float))
    s = np.atleast_2d(np.asarray(s, dtype=float))
    return SimpleNamespace(a_closed=a, s=s, ng=ng if ng is not None else a.shape[0] // 2)


class TestLinearOu:
    def test_zero_noise_zero_start_stays_zero(self, rm):
        model = assemble_state_space(rm, sigma=0.0)
        traj = simulate_linear_ou(model, dt=0.02, duration=5.0, seed=1)
        assert np.all(traj.x == 0.0)

    def test_deterministic_part_matches_matrix_exp(self, rm):
        model = assemble_state_space(rm, sigma=0.0)
        x0 = np.zeros(2 * rm.ng)
        x0[0] = 0.01
        x0[rm.ng] = 1e-4
        traj = simulate_linear_ou(model, dt=0.02, duration=4.0, x0=x0, seed=0)
        for k in (10, 100, 199):
            ref = matrix_exp(model.a_closed, traj.times[k]) @ x0
            assert np.max(np.abs(traj.x[k] - ref)) < 1e-10

    def test_scalar_ou_stationary_variance(self):
        model = _toy_model([[-1.0]], [[np.sqrt(2.0)]], ng=0)
        traj = simulate_linear_ou(
            model, dt=0.02, duration=300.0, seed=2, stationary_start=True
        )
        var = traj.x.var()
        assert abs(var - 1.0) < 0.10  # exact stationary variance is s^2/(2|a|) = 1

    def test_sample_covariance_matches_lyapunov(self):
        # stationary law oracle, median over seeds
        rng = np.random.default_rng(5)
        a = make_hurwitz(6, rng)
        s = 0.1 * rng.standard_normal((6, 3))
        c_ref = solve_lyapunov(a, s @ s.T)
        errs = []
        for seed in range(10):
            traj = simulate_linear_ou(
                _toy_model(a, s, ng=3), dt=0.02, duration=300.0, seed=seed, stationary_start=True
            )
            c_hat = np.cov(traj.x.T, bias=True)
            errs.append(rel_fro(c_hat, c_ref))
        assert np.median(errs) < 0.10

    def test_exact_discretization_semigroup(self, rm):
        model = assemble_state_space(rm, sigma=0.05)
        f1, q1 = ou_discretization(model.a_closed, model.s, 0.02)
        f2, q2 = ou_discretization(model.a_closed, model.s, 0.01)
        assert rel_fro(f2 @ f2, f1) < 1e-12
        assert np.max(np.abs(f2 @ q2 @ f2.T + q2 - q1)) < 1e-12 * max(1.0, np.max(np.abs(q1)))

    def test_determinism(self, rm):
        model = assemble_state_space(rm, sigma=0.05)
        t1 = simulate_linear_ou(model, dt=0.02, duration=10.0, seed=7)
        t2 = simulate_linear_ou(model, dt=0.02, duration=10.0, seed=7)
        assert np.array_equal(t1.x, t2.x)

    def test_stationary_start_requires_hurwitz(self, rm):
        model = assemble_state_space(rm, sigma=0.05)  # rigid-body zero mode present
        with pytest.raises(NumericalError, match="Hurwitz"):
            simulate_linear_ou(model, dt=0.02, duration=1.0, stationary_start=True)


class TestEmulatePmu:
    def test_exact_subsampling_and_mean_removal(self, rm):
        model = assemble_state_space(rm, sigma=0.05)
        traj = simulate_linear_ou(model, dt=0.005, duration=20.0, seed=3)
        win = emulate_pmu(traj, rate_hz=50.0)
        ref_d = traj.delta[::4]
        ref_w = traj.omega[::4]
        assert np.allclose(win.ddelta, ref_d - ref_d.mean(axis=0), atol=1e-15)
        assert np.allclose(win.domega, ref_w - ref_w.mean(axis=0), atol=1e-15)
        assert win.rate_hz == 50.0 and win.n_samples == 1000

    def test_constant_trajectory_gives_zero_deviations(self):
        traj = SimpleNamespace(
            times=np.arange(100) * 0.02,
            delta=np.full((100, 2), 0.7),
            omega=np.ones((100, 2)),
            rate_hz=50.0,
        )
        win = emulate_pmu(traj, rate_hz=50.0)
        assert np.max(np.abs(win.ddelta)) < 1e-13 and np.max(np.abs(win.domega)) < 1e-13

    def test_measurement_noise_level(self):
        traj = SimpleNamespace(
            times=np.arange(15000) * 0.02,
            delta=np.zeros((15000, 1)),
            omega=np.zeros((15000, 1)),
            rate_hz=50.0,
        )
        win = emulate_pmu(traj, rate_hz=50.0, noise_std=1e-4, seed=11)
        assert abs(win.ddelta.std() - 1e-4) < 0.05e-4
        assert abs(win.domega.std() - 1e-4) < 0.05e-4

    def test_non_integer_decimation_rejected(self, rm):
        model = assemble_state_space(rm, sigma=0.05)
        traj = simulate_linear_ou(model, dt=0.02, duration=2.0, seed=0)
        with pytest.raises(ConfigError, match="integer multiple"):
            emulate_pmu(traj, rate_hz=30.0)

    def test_csv_round_trip(self, rm, tmp_path):
        model = assemble_state_space(rm, sigma=0.05)
        traj = simulate_linear_ou(model, dt=0.02, duration=5.0, seed=3)
        win = emulate_pmu(traj, rate_hz=50.0)
        path = tmp_path / "w.csv"
        win.to_csv(path)
        back = PmuWindow.from_csv(path)
        assert back.rate_hz == win.rate_hz
        assert np.array_equal(back.ddelta, win.ddelta)
        assert np.array_equal(back.domega, win.domega)


class TestNoiseModel:
    def test_sigma_vector_broadcast(self):
        assert np.array_equal(NoiseModel(0.05).sigma_vector(3), [0.05, 0.05, 0.05])
        with pytest.raises(ConfigError):
            NoiseModel(-1.0).sigma_vector(2)

    def test_streams_are_independent_and_deterministic(self):
        nm = NoiseModel(0.05, seed=9)
        a1 = nm.stream("w", 0).standard_normal(4)
        a2 = nm.stream("w", 0).standard_normal(4)
        b = nm.stream("w", 1).standard_normal(4)
        assert np.array_equal(a1, a2)
        assert not np.array_equal(a1, b)
