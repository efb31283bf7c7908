#!/usr/bin/env python
# -*- coding: utf-8 -*-

import math
import os
import sys
import unittest

import numpy as np

# 添加项目根目录到路径
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from dispersive_lab.exceptions import (
    ConfigError,
    GridError,
    NumericalError,
    SmallDataError,
    StepSizeError,
    SymbolError,
    WraparoundError,
)
from dispersive_lab.evolve import (
    PropagatorConfig,
    apply_partition,
    cubic_dirac_solve,
    damped_step,
    flat_halfkg_step,
    nonlinear_substep,
    outgoing_partition,
    parametrix_diagnostics,
    perturbed_halfkg_step,
    propagate,
    scattering_tail,
    _series_order,
    _symbol_terms,
)
from dispersive_lab.flow import DampingSymbol, make_eps_profile
from dispersive_lab.grid import SpectralField, SpinorField, dealias_mask, gaussian_packet, make_grid
from dispersive_lab.metric import FLAT_GAMMAS, make_metric
from dispersive_lab.pdo import dirac_packet


class TestFlatStep(unittest.TestCase):
    """测试平直半 Klein-Gordon 乘子"""

    def setUp(self):
        self.grid = make_grid(1, 64, 8.0)

    def test_plane_wave_phase(self):
        """格点平面波只获得相位 e^{-it⟨ξ₀⟩}"""
        xi0 = 4 * math.pi / 8.0
        u = SpectralField(self.grid, values=np.exp(1j * xi0 * self.grid.coords[0]))
        out = flat_halfkg_step(u, 1.0, 0.0, 2.5)
        expected = np.exp(-2.5j * math.sqrt(1 + xi0 ** 2)) * u.values
        np.testing.assert_allclose(out.values, expected, atol=1e-12)

    def test_zero_step_and_unitarity(self):
        """dt=0 为恒等，且 L² 范数守恒"""
        u = gaussian_packet(self.grid, width=1.0, frequency=[1.5])
        self.assertIs(flat_halfkg_step(u, 1.0, 0.0, 0.0), u)
        out = flat_halfkg_step(u, 2.0, 0.0, 7.3)
        self.assertAlmostEqual(out.norm() / u.norm(), 1.0, places=13)

    def test_backward_sign(self):
        """sign=-1 的步是 sign=+1 的逆"""
        u = gaussian_packet(self.grid, width=1.0, frequency=[1.0])
        back = flat_halfkg_step(flat_halfkg_step(u, 1.0, 0.0, 3.0), 1.0, 3.0, 3.0, sign=-1)
        self.assertLess((back - u).norm(), 1e-12)

    def test_rejects_bad_mass(self):
        """M ≤ 0 报错"""
        u = gaussian_packet(self.grid)
        with self.assertRaises(SymbolError):
            flat_halfkg_step(u, 0.0, 0.0, 1.0)


class TestPropagatorConfig(unittest.TestCase):
    """测试传播器配置的校验"""

    def setUp(self):
        self.grid = make_grid(1, 128, 16.0)
        self.flat = make_metric('flat', 1)

    def test_rejects_bad_step(self):
        """dt ≤ 0 或超过网格间距时报错"""
        with self.assertRaises(StepSizeError):
            PropagatorConfig(self.grid, self.flat, dt=0.0)
        with self.assertRaises(StepSizeError):
            PropagatorConfig(self.grid, self.flat, dt=0.5, scheme='split-step')
        cfg = PropagatorConfig(self.grid, self.flat, dt=0.5, scheme='exact-flat')
        self.assertEqual(cfg.lam, 1.0)

    def test_rejects_bad_scheme_and_window(self):
        """未知格式与非法窗口"""
        with self.assertRaises(ConfigError):
            PropagatorConfig(self.grid, self.flat, scheme='magnus')
        with self.assertRaises(GridError):
            PropagatorConfig(self.grid, self.flat, window=(2.0, 1.0))
        with self.assertRaises(GridError):
            PropagatorConfig(self.grid, make_metric('flat', 2))


class TestPerturbedStep(unittest.TestCase):
    """测试度规扰动的分裂步"""

    def setUp(self):
        self.grid = make_grid(1, 128, 16.0)
        self.u0 = gaussian_packet(self.grid, width=1.0, frequency=[2.0])

    def test_flat_metric_matches_flat_step(self):
        """ε=0 时与平直步一致"""
        cfg = PropagatorConfig(self.grid, make_metric('radial_bump', 1, 0.0), dt=0.1)
        out = perturbed_halfkg_step(self.u0, cfg, 0.0)
        flat = flat_halfkg_step(self.u0, 1.0, 0.0, 0.1)
        self.assertLess((out - flat).norm(), 1e-14)

    def test_second_order_self_convergence(self):
        """ε=0.01 时 dt 减半误差约降为 1/4"""
        spec = make_metric('radial_bump', 1, 0.01)
        finals = []
        for dt in (0.1, 0.05, 0.025):
            cfg = PropagatorConfig(self.grid, spec, dt=dt)
            finals.append(propagate(self.u0, cfg, 0.0, 1.0))
        coarse = (finals[0] - finals[1]).norm()
        fine = (finals[1] - finals[2]).norm()
        self.assertGreater(fine, 0.0)
        self.assertAlmostEqual(math.log2(coarse / fine), 2.0, delta=0.2)

    def test_norm_conservation(self):
        """对称化的扰动步保持 L² 范数"""
        cfg = PropagatorConfig(self.grid, make_metric('radial_bump', 1, 0.05), dt=0.1)
        out = propagate(self.u0, cfg, 0.0, 2.0)
        self.assertLess(abs(out.norm() / self.u0.norm() - 1.0), 1e-10)

    def test_rejects_large_operator_step(self):
        """‖扰动‖·dt > 0.5 时报错"""
        cfg = PropagatorConfig(self.grid, make_metric('radial_bump', 1, 5.0), dt=0.2)
        with self.assertRaises(StepSizeError):
            perturbed_halfkg_step(self.u0, cfg, 0.0)

    def test_window_leaves_outside_flat(self):
        """频率窗口外的数据按平直乘子演化"""
        spec = make_metric('radial_bump', 1, 0.05)
        cfg = PropagatorConfig(self.grid, spec, dt=0.1, window=(4.0, 8.0))
        u = gaussian_packet(self.grid, width=4.0)
        out = perturbed_halfkg_step(u, cfg, 0.0)
        flat = flat_halfkg_step(u, 1.0, 0.0, 0.1)
        self.assertLess((out - flat).norm() / u.norm(), 1e-10)


class TestExactPerturbationSymbol(unittest.TestCase):
    """测试分裂步使用精确的冻结度规符号"""

    def test_series_matches_symbol_anisotropic(self):
        """常系数各向异性扰动：展开项之和等于 (g-δ)ξξ/(√(1+gξξ)+⟨ξ⟩)"""
        grid = make_grid(2, 8, 4.0)
        h = np.array([[0.04, 0.01], [0.01, -0.02]])
        coefficients = np.broadcast_to(h[:, :, None, None], (2, 2) + grid.shape)
        terms = _symbol_terms(coefficients, grid, 1.0, _series_order(0.05, 40))
        total = sum(c * m for c, m in terms)
        quad = np.einsum('...j,jk,...k->...', grid.xi, h, grid.xi)
        bracket = grid.bracket(1.0)
        exact = quad / (np.sqrt(bracket ** 2 + quad) + bracket)
        np.testing.assert_allclose(total, exact, rtol=0, atol=1e-12)

    def test_series_matches_symbol_isotropic(self):
        """φ(x)δ 的逐阶单项与精确符号一致，与 ξ 方向无关"""
        grid = make_grid(2, 8, 4.0)
        phi = 0.03 * np.exp(-np.sum(grid.points ** 2, axis=-1))
        coefficients = np.zeros((2, 2) + grid.shape)
        coefficients[0, 0] = coefficients[1, 1] = phi
        order = _series_order(0.03, 40)
        terms = _symbol_terms(coefficients, grid, 2.0, order)
        self.assertEqual(len(terms), order)
        point = (3, 5)
        row = np.array([c[point] * m for c, m in terms]).sum(axis=0)
        xi2 = grid.freq_norm ** 2
        bracket = grid.bracket(2.0)
        exact = phi[point] * xi2 / (np.sqrt(4.0 + (1.0 + phi[point]) * xi2) + bracket)
        np.testing.assert_allclose(row, exact, rtol=0, atol=1e-13)

    def test_series_order(self):
        """截断阶数随 q 增大，q ≥ 1 时报错"""
        self.assertEqual(_series_order(0.0, 40), 1)
        small, large = _series_order(0.01, 40), _series_order(0.2, 40)
        self.assertLess(small, large)
        with self.assertRaises(NumericalError):
            _series_order(1.0, 40)
        with self.assertRaises(NumericalError):
            _series_order(0.9, 3)

    def test_curved_step_matches_dense_quantization(self):
        """1 维径向凸包：分裂步与稠密量子化的精确符号一致，且与平直步明显不同"""
        grid = make_grid(1, 64, 8.0)
        spec = make_metric('radial_bump', 1, 0.05)
        u0 = gaussian_packet(grid, width=1.0, frequency=[2.0])
        fast = perturbed_halfkg_step(u0, PropagatorConfig(grid, spec, dt=0.1), 0.0)
        exact = perturbed_halfkg_step(u0, PropagatorConfig(grid, spec, dt=0.1, scheme='split-step-exact'), 0.0)
        flat = flat_halfkg_step(u0, 1.0, 0.0, 0.1)
        self.assertLess((fast - exact).norm(), 1e-10 * u0.norm())
        self.assertGreater((exact - flat).norm(), 1e-4 * u0.norm())

    def test_anisotropic_step_matches_dense_quantization(self):
        """2 维随时间变化的各向异性度规，走单项式展开路径"""
        grid = make_grid(2, 16, 4.0)
        spec = make_metric('random_bump', 2, 0.05, seed=1)
        u0 = gaussian_packet(grid, width=1.0, frequency=[1.0, -0.5])
        fast = perturbed_halfkg_step(u0, PropagatorConfig(grid, spec, dt=0.1), 0.3)
        exact = perturbed_halfkg_step(u0, PropagatorConfig(grid, spec, dt=0.1, scheme='split-step-exact'), 0.3)
        self.assertLess((fast - exact).norm(), 1e-10 * u0.norm())

    def test_exact_scheme_self_convergence(self):
        """稠密精确格式同样二阶收敛"""
        grid = make_grid(1, 64, 8.0)
        spec = make_metric('radial_bump', 1, 0.01)
        u0 = gaussian_packet(grid, width=1.0, frequency=[2.0])
        finals = []
        for dt in (0.1, 0.05, 0.025):
            cfg = PropagatorConfig(grid, spec, dt=dt, scheme='split-step-exact')
            finals.append(propagate(u0, cfg, 0.0, 1.0))
        coarse = (finals[0] - finals[1]).norm()
        fine = (finals[1] - finals[2]).norm()
        self.assertGreater(fine, 0.0)
        self.assertAlmostEqual(math.log2(coarse / fine), 2.0, delta=0.2)

    def test_large_perturbation_needs_exact_scheme(self):
        """|s| ≥ 1 时级数不收敛，稠密格式仍可用且保持范数"""
        grid = make_grid(1, 64, 8.0)
        spec = make_metric('radial_bump', 1, 2.0)
        u0 = gaussian_packet(grid, width=1.0, frequency=[1.0])
        with self.assertRaises(NumericalError):
            perturbed_halfkg_step(u0, PropagatorConfig(grid, spec, dt=0.01), 0.0)
        out = perturbed_halfkg_step(u0, PropagatorConfig(grid, spec, dt=0.01, scheme='split-step-exact'), 0.0)
        self.assertLess(abs(out.norm() / u0.norm() - 1.0), 1e-10)


class TestDampedStep(unittest.TestCase):
    """测试阻尼演化"""

    def setUp(self):
        self.damping = DampingSymbol(make_eps_profile(0.01))

    def test_requires_time_after_one(self):
        """t₀ < 1 时阻尼没有定义"""
        grid = make_grid(1, 128, 16.0)
        cfg = PropagatorConfig(grid, make_metric('flat', 1), dt=0.1, scheme='damped')
        with self.assertRaises(SymbolError):
            damped_step(gaussian_packet(grid), cfg, self.damping, 0.5)
        with self.assertRaises(SymbolError):
            propagate(gaussian_packet(grid), cfg, 1.0, 2.0)

    def test_decay_outside_annulus(self):
        """频率环之外的波包按 u' = -t^{-3/4}u 衰减"""
        grid = make_grid(1, 1024, 32.0)
        cfg = PropagatorConfig(grid, make_metric('flat', 1), dt=0.05, scheme='damped')
        u0 = gaussian_packet(grid, width=2.0, frequency=[20.0])
        out = propagate(u0, cfg, 1.0, 5.0, damping=self.damping)
        expected = math.exp(-4.0 * (5.0 ** 0.25 - 1.0))
        self.assertAlmostEqual(out.norm() / u0.norm(), expected, delta=1e-3 * expected)

    def test_norm_nonincreasing(self):
        """100 步内范数单调不增"""
        grid = make_grid(1, 256, 32.0)
        cfg = PropagatorConfig(grid, make_metric('radial_bump', 1, 0.01), dt=0.1, scheme='damped')
        norms = []
        propagate(gaussian_packet(grid, center=[-3.0], width=1.5, frequency=[1.0]), cfg, 1.0, 11.0,
                  callback=lambda t, u: norms.append(u.norm()), damping=self.damping)
        self.assertEqual(len(norms), 101)
        for before, after in zip(norms, norms[1:]):
            self.assertLessEqual(after, before * (1 + 1e-6))
        self.assertLess(norms[-1], norms[0])


class TestOutgoingPartition(unittest.TestCase):
    """测试外向分解 𝒫_j"""

    def setUp(self):
        self.grid = make_grid(1, 256, 32.0)
        self.partition = outgoing_partition(self.grid, 3)

    def test_box_too_small(self):
        """2^{j_max+1} > L 时报错"""
        with self.assertRaises(GridError):
            outgoing_partition(make_grid(1, 64, 16.0), 4)
        with self.assertRaises(GridError):
            self.partition.symbol(4, [1.0], [1.0])

    def test_outgoing_interior_point(self):
        """|x| = 2^j 且 x·ξ > 0 时 Σ_j p_j 等于环截断的值 1"""
        for j in range(4):
            self.assertAlmostEqual(float(self.partition.total([2.0 ** j], [1.0])), 1.0, places=12)

    def test_incoming_point(self):
        """入射点上所有 p_j 为零"""
        for j in range(4):
            self.assertEqual(float(self.partition.symbol(j, [2.0 ** j], [-1.0])), 0.0)

    def test_partition_identity_and_supports(self):
        """|x| ≤ 2^{j_max} 上 Σ_j p_j 等于外向锥截断，且相隔两级的支撑不相交"""
        grid = make_grid(2, 16, 32.0)
        partition = outgoing_partition(grid, 3)
        rng = np.random.default_rng(1)
        r = rng.uniform(0.0, 8.0, 2000)
        angle = rng.uniform(0, 2 * math.pi, 2000)
        x = np.stack([r * np.cos(angle), r * np.sin(angle)], axis=-1)
        xi = rng.uniform(-4.0, 4.0, (2000, 2))
        np.testing.assert_allclose(partition.total(x, xi), partition.cone_cutoff(x, xi), atol=1e-10)
        for j in range(2):
            overlap = partition.symbol(j, x, xi) * partition.symbol(j + 2, x, xi)
            self.assertEqual(float(np.max(overlap)), 0.0)

    def test_apply_partition_contracts(self):
        """0 ≤ p_j ≤ 1，分格量子化后范数不增"""
        u = gaussian_packet(self.grid, center=[4.0], width=1.0, frequency=[1.0])
        out = apply_partition(self.partition, 2, u)
        self.assertGreater(out.norm(), 0.1 * u.norm())
        self.assertLessEqual(out.norm(), u.norm() * (1 + 1e-12))


class TestParametrixDiagnostics(unittest.TestCase):
    """测试参数解的区域诊断"""

    def setUp(self):
        self.grid = make_grid(1, 256, 32.0)
        self.cfg = PropagatorConfig(self.grid, make_metric('flat', 1), dt=1.0, scheme='exact-flat')
        partition = outgoing_partition(self.grid, 3)
        self.data = apply_partition(partition, 2, gaussian_packet(self.grid, center=[5.0], width=1.5,
                                                                  frequency=[2.0]))

    def test_flat_outgoing_data(self):
        """平直演化 t-s=20：内区质量很小，频率不泄漏"""
        report = parametrix_diagnostics(self.cfg, None, 2, 0.0, 20.0, self.data, samples=4)
        self.assertEqual(len(report.rows), 5)
        self.assertLess(report.final['inner_mass'], 1e-3)
        self.assertEqual(report.final['outer_mass'], 0.0)
        self.assertLess(report.max_mass('frequency_leakage'), 1e-12)
        self.assertLess(report.final['sup'], report.rows[0]['sup'])

    def test_wraparound(self):
        """传播距离超出盒子预算时报错"""
        with self.assertRaises(WraparoundError):
            parametrix_diagnostics(self.cfg, None, 2, 0.0, 30.0, self.data)


class TestCubicDirac(unittest.TestCase):
    """测试三次 Dirac 求解器"""

    def setUp(self):
        self.grid = make_grid(1, 64, 16.0)
        self.flat = make_metric('flat', 1)
        packet = dirac_packet(self.grid, 1.0, 2.0)
        self.packet = packet.apply_multiplier(dealias_mask(self.grid))

    def test_nonlinear_substep_conserves_density(self):
        """非线性子步逐点保持 ψ†ψ"""
        psi = self.packet * 0.7
        out = nonlinear_substep(psi, 0.3)
        np.testing.assert_allclose(out.density(), psi.density(), atol=1e-12)

    def test_nonlinear_substep_rhs_is_gamma0_form(self):
        """小步长差商等于 i(ψ†ψ)γ⁰ψ"""
        psi = self.packet * 0.7
        dt = 1e-6
        rate = (nonlinear_substep(psi, dt).values - psi.values) / dt
        expected = 1j * psi.density() * np.einsum('ij,j...->i...', FLAT_GAMMAS[0], psi.values)
        np.testing.assert_allclose(rate, expected, rtol=0, atol=1e-5)

    def test_zero_data(self):
        """ψ₀ = 0 时解恒为零"""
        series = cubic_dirac_solve(SpinorField.zeros(self.grid, (4,)), self.flat, 1.0, 1.0, 0.1)
        self.assertTrue(all(n == 0.0 for n in series.plus_norms + series.minus_norms))
        self.assertEqual(series.state(1.0).norm(), 0.0)

    def test_cubic_amplitude_scaling(self):
        """非线性解与线性解之差按振幅的三次方缩放"""
        deviations = []
        for a in (0.1, 0.05):
            psi0 = self.packet * a
            nonlinear = cubic_dirac_solve(psi0, self.flat, 1.0, 2.0, 0.1)
            linear = cubic_dirac_solve(psi0, self.flat, 1.0, 2.0, 0.1, nonlinear=False)
            deviations.append((nonlinear.state(2.0) - linear.state(2.0)).norm())
        self.assertAlmostEqual(math.log2(deviations[0] / deviations[1]), 3.0, delta=0.3)

    def test_small_data_stays_small(self):
        """小数据平直演化的 H^s 范数不超过初值的2倍"""
        series = cubic_dirac_solve(self.packet * 0.1, self.flat, 1.0, 10.0, 0.1)
        self.assertLessEqual(series.max_growth, 2.0)
        self.assertAlmostEqual(series.times[-1], 10.0)

    def test_small_data_guard(self):
        """初值超出 η 或 s ≤ 1 时报错"""
        with self.assertRaises(SmallDataError):
            cubic_dirac_solve(self.packet, self.flat, 1.0, 1.0, 0.1, eta=1e-3)
        with self.assertRaises(SymbolError):
            cubic_dirac_solve(self.packet, self.flat, 1.0, 1.0, 0.1, sobolev_s=1.0)

    def test_linear_tail_vanishes(self):
        """线性平直解拉回后不随时间变化"""
        series = cubic_dirac_solve(self.packet * 0.1, self.flat, 1.0, 2.0, 0.1, nonlinear=False)
        table = scattering_tail(series, None, [0.0, 1.0, 2.0])
        self.assertEqual(len(table.rows), 6)
        self.assertLess(max(row['tail'] for row in table.rows), 1e-10)

    def test_curved_linear_run(self):
        """弯曲度规下线性部分保持有限且范数近似守恒"""
        spec = make_metric('radial_bump', 1, 0.01)
        psi0 = self.packet * 0.1
        series = cubic_dirac_solve(psi0, spec, 1.0, 0.5, 0.1, nonlinear=False, samples=5)
        ratio = series.state(0.5).norm() / psi0.norm()
        self.assertLess(abs(ratio - 1.0), 0.05)


if __name__ == '__main__':
    unittest.main()
