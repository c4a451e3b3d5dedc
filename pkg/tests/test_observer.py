import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nlox.errors import ConfigError, DivergenceError, ModelEvaluationError
from nlox.neural import init_params, mlp_forward
from nlox.observer import (
    ObserverConfig,
    batched_rollout,
    continuous_reference_rollout,
    lyapunov_weights,
    observer_step,
    rollout,
    ultimate_bound,
    zero_omega,
)

CFG = ObserverConfig.with_ones([3.0, 6.0], n_y=1, t_s=0.1)


def net_omega(cfg, seed, width=8):
    net = init_params([cfg.n_z, width, width, cfg.n_z * cfg.n_u], seed)
    return net, lambda z: mlp_forward(net, z)[0].reshape(cfg.n_z, cfg.n_u)


class TestConfig:
    def test_rejects_non_hurwitz(self):
        with pytest.raises(ConfigError):
            ObserverConfig.with_ones([3.0, -1.0], 1, 0.1)

    def test_rejects_unstable_discretisation(self):
        with pytest.raises(ConfigError):
            ObserverConfig.with_ones([1.0, 25.0], 1, 0.1)

    def test_b_transposed_row_is_accepted(self):
        cfg = ObserverConfig([3.0, 6.0], [[1.0, 1.0]], 0.1)
        assert cfg.B.shape == (2, 1)

    def test_a_matrix(self):
        np.testing.assert_array_equal(CFG.A, [[-3.0, 0.0], [0.0, -6.0]])


class TestStep:
    def test_fixed_point(self):
        np.testing.assert_array_equal(observer_step(CFG, np.zeros(2), [0.0], [0.0], zero_omega(CFG)), 0.0)

    def test_decay(self):
        np.testing.assert_allclose(observer_step(CFG, np.ones(2), [0.0], [0.0], zero_omega(CFG)), [0.7, 0.4],
                                   atol=1e-15)

    def test_output_drive(self):
        np.testing.assert_allclose(observer_step(CFG, np.zeros(2), [1.0], [0.0], zero_omega(CFG)), [0.1, 0.1],
                                   atol=1e-15)

    def test_input_term(self):
        omega = lambda z: np.array([[2.0], [-1.0]])
        np.testing.assert_allclose(observer_step(CFG, np.zeros(2), [0.0], [0.5], omega), [0.1, -0.05], atol=1e-15)

    def test_non_finite_omega(self):
        with pytest.raises(ModelEvaluationError):
            observer_step(CFG, np.zeros(2), [0.0], [1.0], lambda z: np.full((2, 1), np.nan))


class TestRollout:
    def test_zero_everything(self):
        Z = rollout(CFG, np.zeros((30, 1)), np.zeros((30, 1)), zero_omega(CFG))
        np.testing.assert_array_equal(Z, 0.0)

    def test_constant_output_fixed_point(self):
        Z = rollout(CFG, np.ones((400, 1)), np.zeros((400, 1)), zero_omega(CFG))
        np.testing.assert_allclose(Z[-1], [1.0 / 3.0, 1.0 / 6.0], atol=1e-14)

    def test_row_zero_is_initial_state(self):
        Z = rollout(CFG, np.zeros((3, 1)), np.zeros((3, 1)), zero_omega(CFG), z0=np.array([2.0, -1.0]))
        np.testing.assert_array_equal(Z[0], [2.0, -1.0])

    def test_linear_plant_sylvester_oracle(self):
        cfg = ObserverConfig.with_ones([3.0, 6.0], 1, 0.001)
        t = np.arange(5001) * 0.001
        x = 0.8 * np.exp(-t)
        Z = rollout(cfg, x[:, None], np.zeros((t.size, 1)), zero_omega(cfg))
        residual = np.linalg.norm(Z - np.outer(x, [0.5, 0.2]), axis=1)
        assert residual[-1] < 1e-3
        assert residual[-1] < residual[100]

    def test_divergence_guard_reports_step(self):
        omega = lambda z: np.array([[500.0], [500.0]])
        with pytest.raises(DivergenceError) as info:
            rollout(CFG, np.zeros((100, 1)), np.ones((100, 1)), omega, z_bound=1.0)
        assert info.value.index == 1

    def test_batched_matches_sequential(self, rng):
        net, omega = net_omega(CFG, 3)
        Y = rng.normal(size=(4, 50, 1))
        U = rng.uniform(0, 1, size=(4, 50, 1))
        batch = batched_rollout(CFG, Y, U, lambda Z: mlp_forward(net, Z)[0].reshape(-1, 2, 1))
        for i in range(4):
            np.testing.assert_allclose(batch[i], rollout(CFG, Y[i], U[i], omega), rtol=1e-13, atol=1e-15)

    def test_superposition_without_input_term(self, rng):
        y1, y2 = rng.normal(size=(2, 40, 1))
        z1, z2 = rng.normal(size=(2, 2))
        zero_u = np.zeros((40, 1))
        a, b = 0.7, -1.3
        combined = rollout(CFG, a * y1 + b * y2, zero_u, zero_omega(CFG), z0=a * z1 + b * z2)
        separate = a * rollout(CFG, y1, zero_u, zero_omega(CFG), z0=z1) + b * rollout(CFG, y2, zero_u, zero_omega(CFG), z0=z2)
        np.testing.assert_allclose(combined, separate, atol=1e-13)


class TestContinuousReference:
    def test_zero(self):
        Z = continuous_reference_rollout(CFG, np.zeros((10, 1)), np.zeros((10, 1)), zero_omega(CFG))
        np.testing.assert_array_equal(Z, 0.0)

    def test_linear_ode_closed_form(self):
        # constant y: z(t) = (1 - exp(-lambda t)) / lambda
        Z = continuous_reference_rollout(CFG, np.ones((11, 1)), np.zeros((11, 1)), zero_omega(CFG))
        t = np.arange(11) * 0.1
        exact = (1 - np.exp(-np.outer(t, [3.0, 6.0]))) / np.array([3.0, 6.0])
        np.testing.assert_allclose(Z, exact, atol=1e-11)

    def test_fourth_order_self_convergence(self, rng):
        _, omega = net_omega(CFG, 9)
        Y = np.sin(np.arange(20) * 0.3)[:, None]
        U = rng.uniform(0.2, 1.0, size=(20, 1))
        ref = continuous_reference_rollout(CFG, Y, U, omega, substeps=64)
        errs = [np.max(np.abs(continuous_reference_rollout(CFG, Y, U, omega, substeps=s) - ref)) for s in (2, 4, 8)]
        ratios = np.array(errs[:-1]) / np.array(errs[1:])
        assert np.all((ratios > 12) & (ratios < 20))

    def test_euler_is_first_order_close(self, rng):
        _, omega = net_omega(CFG, 4)
        Y = np.cos(np.arange(40) * 0.2)[:, None]
        U = rng.uniform(0.2, 1.0, size=(40, 1))
        gap = np.max(np.abs(rollout(CFG, Y, U, omega) - continuous_reference_rollout(CFG, Y, U, omega)))
        assert 0 < gap < 0.1


class TestUltimateBound:
    def test_lyapunov_weights_solve_discrete_equation(self):
        p = lyapunov_weights(CFG)
        a = 1 - CFG.t_s * CFG.eigenvalues
        np.testing.assert_allclose(a * p * a - p, -CFG.t_s, rtol=1e-14)

    def test_bound_dominates_worst_case_rollout(self, rng):
        net, omega = net_omega(CFG, 1)
        m_omega = net.output_bound()
        for _ in range(5):
            Y = rng.uniform(-1, 1, size=(300, 1))
            U = rng.uniform(-1, 1, size=(300, 1))
            Z = rollout(CFG, Y, U, omega)
            bound = ultimate_bound(CFG, 1.0, 1.0, m_omega)
            assert np.max(np.linalg.norm(Z, axis=1)) < 2 * bound

    def test_bound_scales_with_inputs(self):
        assert ultimate_bound(CFG, 2.0, 0.0, 0.0) == pytest.approx(2 * ultimate_bound(CFG, 1.0, 0.0, 0.0))


@settings(max_examples=40, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 1000))
def test_constant_output_fixed_point_is_attracting(y, z0, seed):
    Z = rollout(CFG, np.full((300, 1), y), np.zeros((300, 1)), zero_omega(CFG), z0=np.full(2, z0))
    np.testing.assert_allclose(Z[-1], [y / 3.0, y / 6.0], atol=1e-9 * (1 + abs(y) + abs(z0)))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.01, 0.3))
def test_random_omega_stays_inside_twice_the_bound(seed, t_s):
    cfg = ObserverConfig.with_ones([3.0, 6.0], 1, t_s)
    net, omega = net_omega(cfg, seed)
    rng = np.random.default_rng(seed)
    Y = rng.uniform(0, 1, size=(200, 1))
    U = rng.uniform(0, 1, size=(200, 1))
    Z = rollout(cfg, Y, U, omega)
    assert np.max(np.linalg.norm(Z, axis=1)) < 2 * ultimate_bound(cfg, 1.0, 1.0, net.output_bound())
