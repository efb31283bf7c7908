#!/usr/bin/env python
# -*- coding: utf-8 -*-

import math
import os
import sys
import unittest

import numpy as np
import sympy

# 添加项目根目录到路径
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from dispersive_lab.exceptions import FlowError, SymbolError
from dispersive_lab.flow import (
    DampingSymbol,
    damping_integral,
    damping_symbol_eval,
    flat_hamiltonian,
    flow_jacobian,
    halfkg_hamiltonian,
    hamiltonian_field,
    integrate_flow,
    inverse_lipschitz_constants,
    make_eps_profile,
    trajectory_rows,
    verify_damping_monotone,
)
from dispersive_lab.metric import make_metric
from dispersive_lab.pdo import Symbol, symbol_variables


class TestHamiltonianField(unittest.TestCase):
    """测试 Hamilton 向量场"""

    def test_flat_unit_frequency(self):
        """λ=1、ξ=e₁ 时 ẋ = e₁/√2，ξ̇ = 0"""
        velocity, force = hamiltonian_field(flat_hamiltonian(2), 1.0, ([0.3, -2.0], [1.0, 0.0]))
        np.testing.assert_allclose(velocity, [2 ** -0.5, 0.0], atol=1e-15)
        np.testing.assert_allclose(force, [0.0, 0.0], atol=1e-15)

    def test_wave_limit(self):
        """λ=2^10 时 |ẋ| 与1相差不超过 2^-19"""
        velocity, _ = hamiltonian_field(flat_hamiltonian(3, 2.0 ** 10), 1.0, ([0, 0, 0], [0.0, 1.0, 0.0]))
        self.assertLess(abs(np.linalg.norm(velocity) - 1.0), 2.0 ** -19)

    def test_x_independent_perturbation(self):
        """与 x 无关的 𝔄 给出 ξ̇ = 0"""
        _, _, xis = symbol_variables(2)
        sym = flat_hamiltonian(2) + Symbol(xis[0] ** 2 / 10, 2, 2.0)
        _, force = hamiltonian_field(sym, 3.0, ([1.0, 2.0], [0.5, 0.5]))
        self.assertTrue(np.all(force == 0.0))

    def test_numeric_symbol_has_no_field(self):
        """数值符号不提供导数"""
        sym = Symbol.from_function(lambda t, x, xi: np.ones(x.shape[:-1]), 1)
        with self.assertRaises(SymbolError):
            hamiltonian_field(sym, 1.0, ([0.0], [1.0]))


class TestIntegrateFlow(unittest.TestCase):
    """测试流积分"""

    def test_flat_closed_form(self):
        """平直流 x_t = x_s + (t-s)ξ/⟨ξ⟩，ξ 不变"""
        traj = integrate_flow(flat_hamiltonian(2), ([0.0, 0.0], [1.0, 0.0]), 1.0, 10.0)
        x_t, xi_t = traj.end
        np.testing.assert_allclose(x_t, [9 / math.sqrt(2), 0.0], atol=1e-9)
        np.testing.assert_allclose(xi_t, [1.0, 0.0], atol=1e-12)

    def test_batch_shapes(self):
        """批量相点共享步长，输出形状为 (T, B, d)"""
        x0 = np.zeros((3, 2))
        xi0 = np.array([[1.0, 0.0], [0.0, 2.0], [-1.0, 1.0]])
        traj = integrate_flow(flat_hamiltonian(2), (x0, xi0), 1.0, 5.0, samples=9)
        self.assertEqual(traj.x.shape, (9, 3, 2))
        self.assertEqual(traj.batch_shape, (3,))
        self.assertEqual(len(traj.members()), 3)
        expected = 4.0 * xi0 / np.sqrt(1 + np.sum(xi0 ** 2, axis=1, keepdims=True))
        np.testing.assert_allclose(traj.end[0], expected, atol=1e-9)

    def test_time_reversal(self):
        """扰动流正向再反向积分回到初始点"""
        sym = halfkg_hamiltonian(make_metric('radial_bump', 2, 0.05, width=2.0))
        forward = integrate_flow(sym, ([0.5, -1.0], [0.8, 0.4]), 1.0, 12.0, tol=1e-11)
        back = integrate_flow(sym, forward.end, 12.0, 1.0, tol=1e-11)
        np.testing.assert_allclose(back.end[0], [0.5, -1.0], atol=1e-8)
        np.testing.assert_allclose(back.end[1], [0.8, 0.4], atol=1e-8)

    def test_frequency_drift_scales_with_eps(self):
        """|ξ_t - ξ_s| 关于 ε 线性"""
        drifts = []
        for eps in (0.01, 0.02):
            sym = halfkg_hamiltonian(make_metric('radial_bump', 1, eps, width=2.0))
            traj = integrate_flow(sym, ([-3.0], [1.0]), 1.0, 100.0, samples=50)
            drifts.append(float(np.max(np.abs(traj.xi[:, 0] - 1.0))))
        self.assertGreater(drifts[0], 0.0)
        self.assertAlmostEqual(drifts[1] / drifts[0], 2.0, delta=0.2)

    def test_rejects_bad_times(self):
        """非正时刻报错"""
        with self.assertRaises(FlowError):
            integrate_flow(flat_hamiltonian(1), ([0.0], [1.0]), 0.0, 2.0)
        with self.assertRaises(FlowError):
            integrate_flow(flat_hamiltonian(1), ([0.0], [1.0]), 1.0, 2.0, samples=[3.0])


class TestFlowJacobian(unittest.TestCase):
    """测试流的 Jacobian"""

    def test_flat_blocks(self):
        """平直情形 ∂x_t/∂ξ_t = (t-s)Φ_KG(ξ)，其余块为 I 与 0"""
        jac = flow_jacobian(flat_hamiltonian(2), ([1.0, 2.0], [0.6, -0.3]), 1.0, 5.0)
        np.testing.assert_allclose(jac.block(0, 0), np.eye(2), atol=1e-8)
        np.testing.assert_allclose(jac.block(1, 1), np.eye(2), atol=1e-8)
        np.testing.assert_allclose(jac.block(1, 0), np.zeros((2, 2)), atol=1e-8)
        self.assertLess(jac.deviation, 1e-8)
        self.assertAlmostEqual(jac.prefactor, 1.0, places=8)
        self.assertAlmostEqual(jac.determinant, 1.0, places=8)
        ratio, misalignment = jac.eigen_match()
        self.assertLess(ratio, 1e-6)
        self.assertLess(misalignment, 1e-6)

    def test_off_diagonal_block_scales_with_eps(self):
        """∂ξ_s/∂x_s 块的范数关于 ε 线性"""
        norms = []
        for eps in (0.01, 0.02):
            sym = halfkg_hamiltonian(make_metric('radial_bump', 2, eps, width=2.0))
            jac = flow_jacobian(sym, ([0.5, 0.5], [1.0, 0.2]), 1.0, 6.0)
            norms.append(float(np.linalg.norm(jac.block(1, 0))))
        self.assertGreater(norms[0], 0.0)
        self.assertAlmostEqual(norms[1] / norms[0], 2.0, delta=0.4)

    def test_non_smooth_flow(self):
        """速度在 ξ=0 处跳跃时有限差分失效"""
        _, _, xis = symbol_variables(1)
        sym = Symbol(sympy.sqrt(1 + xis[0] ** 2) + sympy.Abs(xis[0]) / 2, 1, 1.0)
        with self.assertRaises(FlowError):
            flow_jacobian(sym, ([0.0], [0.0]), 1.0, 5.0)

    def test_inverse_lipschitz(self):
        """平直流的逆 Lipschitz 常数有限"""
        pairs = [([1.0, 0.2], [1.05, 0.23]), ([0.5, -0.5], [0.45, -0.42]), ([0.0, 2.0], [0.06, 1.95])]
        constants = inverse_lipschitz_constants(flat_hamiltonian(2), pairs, 1.0, 11.0)
        self.assertEqual(constants['pairs'], 3)
        self.assertGreater(constants['transverse'], 0.0)
        self.assertLess(constants['transverse'], 10.0)
        self.assertGreater(constants['longitudinal'], 0.0)
        self.assertLess(constants['longitudinal'], 20.0)


class TestEpsProfile(unittest.TestCase):
    """测试缓变剖面 ε(s)"""

    def setUp(self):
        self.profile = make_eps_profile(0.01)

    def test_slowly_varying(self):
        """相邻壳层的对数比不超过 2^-10"""
        self.assertLessEqual(self.profile.max_log_step(), 2.0 ** -10 * (1 + 1e-9))

    def test_total_matches_budget(self):
        """∫ε(s)/s ds 归一化为 ε"""
        total = self.profile.total()
        self.assertGreaterEqual(total, 0.01 / 4)
        self.assertLessEqual(total, 0.04)
        self.assertAlmostEqual(total / 0.01, 1.0, places=9)

    def test_log_derivative_bound(self):
        """|ε'(s)|s/ε(s) ≤ 2^-5"""
        rng = np.random.default_rng(0)
        s = 2.0 ** rng.uniform(-30, 30, size=1000)
        self.assertLessEqual(float(np.max(np.abs(self.profile.log_derivative(s)))), 2.0 ** -5)

    def test_shell_bracket(self):
        """2^j < s < 2^{j+1} 时 ε_j < ε(s) < 2ε_j"""
        low, high = self.profile.shell_bracket()
        self.assertGreater(low, 1.0)
        self.assertLess(high, 2.0)

    def test_cumulative_increasing_and_bounded(self):
        """e(s) 递增且有界"""
        s = np.concatenate([[0.0], 2.0 ** np.linspace(-40, 40, 400)])
        e = self.profile.cumulative(s)
        self.assertEqual(e[0], 0.0)
        self.assertTrue(np.all(np.diff(e) > 0))
        self.assertLessEqual(float(e[-1]), 1.0)

    def test_rejects_bad_input(self):
        """ε ≤ 0 或壳层范围过短时报错"""
        with self.assertRaises(SymbolError):
            make_eps_profile(0.0)
        with self.assertRaises(SymbolError):
            make_eps_profile(0.01, shells=(0, 1))


class TestDampingSymbol(unittest.TestCase):
    """测试阻尼符号 𝔅"""

    def setUp(self):
        self.damping = DampingSymbol(make_eps_profile(0.01))

    def test_outgoing_point_vanishes(self):
        """|ξ|=1、x=tξ、t=100 时 𝔅 = 0"""
        self.assertEqual(float(damping_symbol_eval(self.damping, 100.0, [100.0, 0.0], [1.0, 0.0])), 0.0)

    def test_high_frequency(self):
        """|ξ|=100、t=16 时 𝔅 = 16^{-3/4}"""
        for x in ([0.0, 0.0], [16.0, 0.0], [-3.0, 40.0]):
            self.assertAlmostEqual(float(self.damping(16.0, x, [100.0, 0.0])), 0.125, places=12)

    def test_incoming_point(self):
        """x = -tξ 时 𝔅 = t^{-3/4}"""
        self.assertAlmostEqual(float(self.damping(10.0, [-10.0, 0.0], [1.0, 0.0])), 10.0 ** -0.75, places=12)

    def test_origin(self):
        """x = 0 时 𝔅 = t^{-3/4}"""
        self.assertAlmostEqual(float(self.damping(4.0, [0.0, 0.0], [1.0, 1.0])), 4.0 ** -0.75, places=12)

    def test_range(self):
        """随机点上 0 ≤ 𝔅 ≤ t^{-3/4}"""
        rng = np.random.default_rng(1)
        t = rng.uniform(1, 200, size=2000)
        x = rng.normal(scale=50.0, size=(2000, 2))
        xi = rng.normal(scale=3.0, size=(2000, 2))
        values = self.damping(t, x, xi)
        self.assertTrue(np.all(values >= 0))
        self.assertTrue(np.all(values <= t ** -0.75 * (1 + 1e-12)))

    def test_low_frequency_variant(self):
        """低频版本去掉 b₂ 并把 b₁ 的截断频率改为 8"""
        low = DampingSymbol(self.damping.profile, variant='low')
        t = 100.0
        self.assertEqual(float(self.damping(t, [t, 0.0], [10.0, 0.0])), 0.0)
        self.assertAlmostEqual(float(low(t, [t, 0.0], [10.0, 0.0])), t ** -0.75, places=12)
        self.assertAlmostEqual(float(self.damping(t, [t, 0.0], [0.02, 0.0])), t ** -0.75, places=12)
        self.assertEqual(float(low(t, [t, 0.0], [0.02, 0.0])), 0.0)

    def test_rejects_bad_parameters(self):
        """指数必须位于 (1/2, 1)，t ≥ 1"""
        with self.assertRaises(SymbolError):
            DampingSymbol(self.damping.profile, exponent=1.0)
        with self.assertRaises(SymbolError):
            DampingSymbol(self.damping.profile, variant='medium')
        with self.assertRaises(SymbolError):
            self.damping(0.5, [1.0, 0.0], [1.0, 0.0])


class TestDampingIntegral(unittest.TestCase):
    """测试阻尼积分 Ψ 与单调性检查"""

    def setUp(self):
        self.damping = DampingSymbol(make_eps_profile(0.01))

    def test_pinned_outside_annulus(self):
        """|ξ|=100 时 Ψ(t) = 4(t^{1/4} - s^{1/4})"""
        traj = integrate_flow(flat_hamiltonian(1), ([0.0], [100.0]), 1.0, 16.0, samples=16, damping=self.damping)
        self.assertAlmostEqual(float(traj.psi[-1]), 4.0, places=6)
        self.assertTrue(np.all(np.diff(traj.psi) >= 0))

    def test_outgoing_trajectory(self):
        """沿出射轨道 Ψ ≡ 0，且单调性检查无活跃样本"""
        s = 10.0
        traj = integrate_flow(flat_hamiltonian(2), ([s / math.sqrt(2), 0.0], [1.0, 0.0]), s, 40.0, samples=13)
        psi = damping_integral(traj, self.damping)
        self.assertTrue(np.all(psi == 0.0))
        report = verify_damping_monotone(self.damping, [traj])
        self.assertTrue(report.passed)
        self.assertEqual(report.active_samples, 0)

    def test_recomputed_integral_matches(self):
        """事后计算的 Ψ 与积分时同步累积的 Ψ 一致"""
        p0 = ([2.0, -1.0], [0.3, 0.4])
        with_psi = integrate_flow(flat_hamiltonian(2), p0, 1.0, 8.0, samples=8, damping=self.damping)
        plain = integrate_flow(flat_hamiltonian(2), p0, 1.0, 8.0, samples=8)
        np.testing.assert_allclose(damping_integral(plain, self.damping), with_psi.psi, atol=1e-8)
        rows = trajectory_rows(plain, self.damping)
        self.assertEqual(len(rows), 8)
        self.assertIn('b5', rows[0])
        self.assertIn('damping', rows[-1])

    def test_grazing_start(self):
        """掠射起点处 db₃/dt ≥ 2/t，t^{3/4}𝔅 不增，加倍后 𝔅 = 0"""
        s = 8.0
        cos = -2.0 ** -0.5 + 0.5 / 4096
        x0 = s * np.array([cos, math.sqrt(1 - cos ** 2)])
        traj = integrate_flow(flat_hamiltonian(2), (x0, [1.0, 0.0]), s, 2 * s, samples=5)
        b = self.damping.factors(s, x0, [1.0, 0.0])
        self.assertAlmostEqual(float(b[2]), 0.5, places=6)
        report = verify_damping_monotone(self.damping, [traj])
        self.assertGreaterEqual(report.active_samples, 1)
        self.assertGreater(report.min_derivative_ratio, 1.0)
        self.assertEqual(report.doubling_checked, 1)
        self.assertTrue(report.passed)


if __name__ == '__main__':
    unittest.main()
