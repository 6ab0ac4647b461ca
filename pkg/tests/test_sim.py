import numpy as np
import pytest

from vdpbc.control import ControllerConfig, derive_beta, on_reference_state
from vdpbc.exceptions import DivergenceError, DomainError
from vdpbc.phmech import TwoLinkArm, table1_model
from vdpbc.sim import (
    IntegratorConfig,
    measured_decay_rate,
    simulate_closed_loop,
    simulate_open_loop,
    simulate_prolonged,
    transient_time,
)

SHORT = IntegratorConfig(dt=1e-3, t_end=1.0, record_stride=10)


class TestIntegratorConfig:
    def test_steps(self):
        assert IntegratorConfig(dt=1e-4, t_end=10).steps == 100000

    @pytest.mark.parametrize("kw", [dict(dt=0), dict(dt=-1e-3), dict(t_end=0), dict(scheme="midpoint"),
                                    dict(record_stride=0), dict(dt=float("nan"))])
    def test_rejects(self, kw):
        with pytest.raises(DomainError):
            IntegratorConfig(**kw)


class TestDecayRate:
    def test_synthetic_exponential(self):
        t = np.linspace(0, 5, 501)
        est = measured_decay_rate(t, np.exp(-4 * t))
        assert est.rate == pytest.approx(2.0, rel=1e-10)
        assert not est.truncated

    def test_oscillator_does_not_decay(self):
        t = np.linspace(0, 20, 2001)
        V = 1 + 0.5 * np.cos(3 * t)
        assert abs(measured_decay_rate(t, V).rate) < 0.02

    def test_floor_truncates(self):
        t = np.linspace(0, 10, 1001)
        V = np.maximum(np.exp(-20 * t), 1e-30)
        est = measured_decay_rate(t, V)
        assert est.truncated
        assert est.rate == pytest.approx(10.0, rel=1e-6)

    def test_stall_on_integrator_floor(self):
        t = np.linspace(0, 10, 1001)
        V = np.maximum(np.exp(-20 * t), 1e-18 * (1 + 0.5 * np.sin(t)))
        est = measured_decay_rate(t, V)
        assert est.truncated
        assert est.rate == pytest.approx(10.0, rel=2e-2)

    def test_explicit_window(self):
        t = np.linspace(0, 4, 401)
        V = np.where(t < 2, np.exp(-2 * t), np.exp(-4) * np.exp(-6 * (t - 2)))
        assert measured_decay_rate(t, V, window=(2.0, 4.0)).rate == pytest.approx(3.0, rel=1e-10)

    def test_zero_storage(self):
        assert np.isnan(measured_decay_rate(np.arange(3.0), np.zeros(3)).rate)


class TestTransientTime:
    def test_first_time_staying_below(self):
        t = np.arange(6.0)
        assert transient_time(t, np.array([1, 0.1, 1e-4, 0.1, 1e-4, 1e-5]), 1e-3) == 4.0

    def test_never_settles(self):
        assert np.isinf(transient_time(np.arange(3.0), np.ones(3), 1e-3))

    def test_always_below(self):
        assert transient_time(np.arange(3.0), np.zeros(3), 1e-3) == 0.0


class TestClosedLoop:
    def test_converges(self, fjr, gains, traj):
        rec = simulate_closed_loop(fjr, gains, traj, IntegratorConfig(dt=1e-3, t_end=3.0, record_stride=10), np.zeros(4))
        assert rec.error_norms()[-1].max() < 1e-8
        assert rec.beta == pytest.approx(derive_beta(gains, fjr).beta)

    def test_record_shapes(self, fjr, gains, traj):
        rec = simulate_closed_loop(fjr, gains, traj, SHORT, np.zeros(4))
        assert rec.t.shape == (101,)
        assert rec.x.shape == (101, 4) and rec.err.shape == (101, 4, 1)
        assert rec.rows().shape == (101, 15)
        np.testing.assert_allclose(rec.t, np.arange(101) * 0.01, atol=1e-15)

    def test_decomposition_sums(self, fjr, gains, traj):
        rec = simulate_closed_loop(fjr, gains, traj, SHORT, [0.2, 0.0, 0.0, 0.0])
        np.testing.assert_allclose(rec.u, rec.u_ff + rec.u_fb, rtol=1e-14, atol=1e-14)

    def test_deterministic(self, fjr, gains, traj):
        a = simulate_closed_loop(fjr, gains, traj, SHORT, [0.2, 0.0, 0.0, 0.0])
        b = simulate_closed_loop(fjr, gains, traj, SHORT, [0.2, 0.0, 0.0, 0.0])
        np.testing.assert_array_equal(a.x, b.x)

    def test_storage_decays(self, fjr, gains, traj):
        rec = simulate_closed_loop(fjr, gains, traj, SHORT, [0.2, 0.0, 0.0, 0.0])
        beta = rec.beta
        assert np.all(rec.V <= rec.V[0] * np.exp(-2 * beta * rec.t) * (1 + 1e-9))
        assert np.all(rec.dVdt <= -2 * beta * rec.V + 1e-12)

    def test_rk4_order(self, fjr, gains, traj):
        x0 = [0.2, 0.1, 0.0, 0.0]
        ref = simulate_closed_loop(fjr, gains, traj, IntegratorConfig(dt=1.25e-4, t_end=0.2, record_stride=1600), x0).x[-1]
        e1 = np.abs(simulate_closed_loop(fjr, gains, traj, IntegratorConfig(dt=1e-3, t_end=0.2, record_stride=200), x0).x[-1] - ref).max()
        e2 = np.abs(simulate_closed_loop(fjr, gains, traj, IntegratorConfig(dt=5e-4, t_end=0.2, record_stride=400), x0).x[-1] - ref).max()
        assert e1 / e2 >= 14

    def test_euler_scheme_runs(self, fjr, gains, traj):
        rec = simulate_closed_loop(fjr, gains, traj, IntegratorConfig(dt=1e-4, t_end=0.5, scheme="euler", record_stride=100), np.zeros(4))
        assert np.all(np.isfinite(rec.x))

    def test_finite_difference_mode_tracks_analytic(self, fjr, traj):
        x0 = [0.2, 0.0, 0.0, 0.0]
        a = simulate_closed_loop(fjr, ControllerConfig.table1(), traj, SHORT, x0)
        b = simulate_closed_loop(fjr, ControllerConfig.table1(derivatives="finite_difference"), traj, SHORT, x0)
        assert np.abs(a.x - b.x).max() < 1e-5

    def test_divergence(self, fjr, gains, traj):
        with pytest.raises(DivergenceError) as info:
            simulate_closed_loop(fjr, gains, traj, IntegratorConfig(dt=0.05, t_end=5.0), [0.5, 0.0, 0.0, 0.0])
        assert 0 < info.value.time <= 5.0

    def test_omega_signal(self, fjr, gains, traj):
        a = simulate_closed_loop(fjr, gains, traj, SHORT, np.zeros(4), omega=lambda t: 0.0)
        b = simulate_closed_loop(fjr, gains, traj, SHORT, np.zeros(4), omega=lambda t: 0.1)
        np.testing.assert_array_equal(a.x, simulate_closed_loop(fjr, gains, traj, SHORT, np.zeros(4)).x)
        assert np.abs(b.x - a.x).max() > 1e-6
        np.testing.assert_allclose(b.u_fb - a.u_fb - 0.1, (b.u - a.u) - 0.1 - (b.u_ff - a.u_ff), atol=1e-12)

    def test_bad_initial_state(self, fjr, gains, traj):
        with pytest.raises(DomainError):
            simulate_closed_loop(fjr, gains, traj, SHORT, [np.nan, 0, 0, 0])

    def test_summary(self, fjr, gains, traj):
        s = simulate_closed_loop(fjr, gains, traj, IntegratorConfig(dt=1e-3, t_end=3.0, record_stride=10), np.zeros(4)).summary()
        assert s["transient_time"] < 3.0
        assert s["beta_hat"] > s["beta"]
        assert s["peak_u"] > 0


class TestProlonged:
    def test_zero_tangent_stays_zero(self, fjr, gains, traj):
        rec = simulate_prolonged(fjr, gains, traj, SHORT, [0.1, 0.0, 0.0, 0.0], np.zeros(4))
        assert np.all(rec.V == 0) and np.all(rec.dx_v == 0)

    def test_virtual_copy_matches_plant(self, fjr, gains, traj):
        x0 = [0.1, 0.05, 0.0, 0.0]
        rec = simulate_prolonged(fjr, gains, traj, SHORT, x0, [1.0, 0, 0, 0])
        np.testing.assert_array_equal(rec.x_v, rec.closed.x)
        np.testing.assert_array_equal(rec.closed.x, simulate_closed_loop(fjr, gains, traj, SHORT, x0).x)

    def test_virtual_converges_to_plant_reference(self, fjr, gains, traj):
        integ = IntegratorConfig(dt=1e-3, t_end=3.0, record_stride=10)
        rec = simulate_prolonged(fjr, gains, traj, integ, np.zeros(4), np.zeros(4), x_v0=[0.4, 0.0, 0.0, 0.0])
        assert np.abs(rec.x_v[-1] - rec.closed.x[-1]).max() < 1e-8

    def test_tangent_contracts(self, fjr, gains, traj):
        rec = simulate_prolonged(fjr, gains, traj, SHORT, np.zeros(4), [1.0, 0, 0, 0])
        beta = derive_beta(gains, fjr).beta
        assert np.all(rec.V <= rec.V[0] * np.exp(-2 * beta * rec.t) * (1 + 1e-9))

    def test_passivity_supply(self, fjr, gains, traj):
        rec = simulate_prolonged(fjr, gains, traj, SHORT, np.zeros(4), [1.0, 0, 0, 0], domega=lambda t: np.sin(5 * t))
        assert np.max(rec.dVdt - rec.supply()) <= 1e-8

    def test_tangent_linear_in_initial_vector(self, fjr, gains, traj):
        a = simulate_prolonged(fjr, gains, traj, SHORT, np.zeros(4), [1.0, 0, 0, 0]).dx_v
        b = simulate_prolonged(fjr, gains, traj, SHORT, np.zeros(4), [3.0, 0, 0, 0]).dx_v
        np.testing.assert_allclose(b, 3 * a, rtol=1e-12, atol=1e-15)

    def test_bad_tangent(self, fjr, gains, traj):
        with pytest.raises(DomainError):
            simulate_prolonged(fjr, gains, traj, SHORT, np.zeros(4), np.zeros(3))


class TestOpenLoop:
    def test_dissipation_non_decreasing(self, fjr):
        rec = simulate_open_loop(fjr, SHORT, [0.3, 0.1, 0.0, 0.0])
        assert np.all(np.diff(rec.dissipated) >= 0)
        assert np.all(np.diff(rec.H) <= 1e-12)

    def test_energy_balance_with_input(self, fjr):
        # the stiff spring mode dominates; the residual must converge at RK4 order
        res = [np.abs(simulate_open_loop(fjr, IntegratorConfig(dt=dt, t_end=1.0, record_stride=10), [0.3, 0.1, 0.0, 0.0],
                                         u=lambda t: np.sin(3 * t)).balance_residual()).max()
               for dt in (5e-4, 2.5e-4)]
        assert res[0] / res[1] >= 8
        assert res[1] < 1e-8

    def test_generic_path_energy_balance(self):
        arm = TwoLinkArm()
        integ = IntegratorConfig(dt=1e-3, t_end=0.5, record_stride=50)
        rec = simulate_open_loop(arm, integ, [0.5, -0.3, 0.2, 0.1], u=lambda t: np.array([np.sin(t), 0.2]))
        assert np.abs(rec.balance_residual()).max() < 1e-8
        assert np.all(np.diff(rec.dissipated) >= 0)

    def test_compiled_and_generic_agree(self):
        from vdpbc import sim

        fjr = table1_model()
        integ = IntegratorConfig(dt=1e-3, t_end=0.2, record_stride=20)
        x0 = [0.3, 0.1, 0.01, 0.0]
        fast = sim.simulate_open_loop(fjr, integ, x0, u=lambda t: 0.5)
        orig = sim._compiled_plant
        try:
            sim._compiled_plant = lambda model: None
            slow = sim.simulate_open_loop(fjr, integ, x0, u=lambda t: 0.5)
        finally:
            sim._compiled_plant = orig
        np.testing.assert_allclose(fast.x, slow.x, rtol=1e-12, atol=1e-14)
        np.testing.assert_allclose(fast.H, slow.H, rtol=1e-12)

    def test_undamped_rigid_motion_conserves_energy(self):
        m = table1_model(damping=False, load=0.0)
        rec = simulate_open_loop(m, IntegratorConfig(dt=1e-3, t_end=1.0, record_stride=100), [0, 0, 0.031, 0.004])
        assert np.abs(rec.H - rec.H[0]).max() / rec.H[0] < 1e-12

    def test_divergence(self):
        class Unstable(TwoLinkArm):
            def potential_gradient(self, q):
                return -1e3 * np.asarray(q)

        with pytest.raises(DivergenceError):
            simulate_open_loop(Unstable(), IntegratorConfig(dt=1e-2, t_end=5.0, bound=1e3), [0.1, 0.1, 0.0, 0.0])

    def test_on_reference_closed_loop(self, fjr, gains, traj):
        x0 = on_reference_state(fjr, gains, traj)
        rec = simulate_closed_loop(fjr, gains, traj, IntegratorConfig(dt=1e-4, t_end=0.5, record_stride=100), x0)
        assert rec.error_norms().max() < 1e-12
