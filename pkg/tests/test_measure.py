#!/usr/bin/env python
# -*- coding: utf-8 -*-

import math
import os
import sys
import unittest

import numpy as np

# 添加项目根目录到路径
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from dispersive_lab.evolve import PropagatorConfig, propagate
from dispersive_lab.exceptions import (
    ForbiddenEndpointError,
    GridError,
    MeasurementError,
    NonAdmissibleError,
)
from dispersive_lab.grid import SpectralField, gaussian_packet, make_grid
from dispersive_lab.measure import (
    LocalEnergyAccumulator,
    TimeSeriesNorms,
    admissible_pair,
    decay_fit,
    local_energy_norm,
    lq_norm,
    mixed_norm,
    morawetz_positivity,
    sobolev_norm,
    strichartz_ratio,
    weighted_local_energy_norm,
    x_s_norm,
)
from dispersive_lab.metric import make_metric


class TestSobolevAndLq(unittest.TestCase):
    """测试单个时刻的范数"""

    def test_sobolev_zero_is_l2(self):
        """s=0 时就是 L² 范数"""
        u = gaussian_packet(make_grid(2, 32, 8.0), width=1.5, frequency=[1.0, 0.0])
        self.assertAlmostEqual(sobolev_norm(u, 0.0), u.norm(), places=12)

    def test_plane_wave(self):
        """格点平面波的 H^1 范数为 ⟨ξ₀⟩‖1‖"""
        grid = make_grid(1, 64, 8.0)
        xi0 = 4 * math.pi / 8.0
        u = SpectralField(grid, values=np.exp(1j * xi0 * grid.coords[0]))
        self.assertAlmostEqual(sobolev_norm(u, 1.0), math.sqrt(1 + xi0 ** 2) * 4.0, places=10)

    def test_gaussian_h2(self):
        """高斯函数的 H^2 范数与解析矩积分一致"""
        grid = make_grid(1, 128, 16.0)
        u = gaussian_packet(grid, width=1.0)
        self.assertAlmostEqual(sobolev_norm(u, 2.0), math.sqrt(2.75 * math.sqrt(math.pi)), places=10)

    def test_lq_of_constant(self):
        """单位测度盒子上常数1的所有 L^q 范数为1"""
        grid = make_grid(1, 8, 0.5)
        one = SpectralField(grid, values=np.ones(grid.shape))
        for q in (1.0, 2.0, 6.0, math.inf):
            self.assertAlmostEqual(lq_norm(one, q), 1.0, places=12)
        with self.assertRaises(MeasurementError):
            lq_norm(one, 0.5)


class TestMixedNorm(unittest.TestCase):
    """测试时空混合范数"""

    def test_constant_on_unit_box(self):
        """u ≡ 1, t ∈ [0,1] 时对所有 p,q 为1"""
        grid = make_grid(1, 8, 0.5)
        one = SpectralField(grid, values=np.ones(grid.shape))
        series = TimeSeriesNorms(qs=(2.0, 4.0))
        for t in np.linspace(0.0, 1.0, 5):
            series.record(t, one)
        for p in (1.0, 2.0, math.inf):
            for q in (2.0, 4.0):
                self.assertAlmostEqual(mixed_norm(series, p, q), 1.0, places=12)

    def test_exponential_in_time(self):
        """u = e^{-t}g 时 ‖u‖_{L²_tL^q} = ‖g‖_q √((1-e^{-2T})/2)"""
        grid = make_grid(1, 64, 8.0)
        g = gaussian_packet(grid, width=1.0)
        series = TimeSeriesNorms(qs=(3.0,))
        for t in np.linspace(0.0, 1.0, 2001):
            series(t, g * math.exp(-t))
        expected = lq_norm(g, 3.0) * math.sqrt((1 - math.exp(-2.0)) / 2.0)
        self.assertAlmostEqual(mixed_norm(series, 2.0, 3.0), expected, places=6)

    def test_missing_exponent(self):
        """没有记录的 q 报错，时刻必须递增"""
        grid = make_grid(1, 8, 0.5)
        series = TimeSeriesNorms(qs=(2.0,))
        one = SpectralField(grid, values=np.ones(grid.shape))
        series.record(0.0, one)
        with self.assertRaises(MeasurementError):
            mixed_norm(series, 2.0, 4.0)
        with self.assertRaises(MeasurementError):
            series.record(0.0, one)
        with self.assertRaises(MeasurementError):
            mixed_norm(series, 2.0, 2.0)


class TestAdmissiblePair(unittest.TestCase):
    """测试 Strichartz 容许对"""

    def test_endpoint_theta_one(self):
        """d=3, θ=1, q=6 → p=2, σ=5/6"""
        pair = admissible_pair(3, 1.0, 6.0)
        self.assertAlmostEqual(pair.p, 2.0, places=14)
        self.assertAlmostEqual(pair.sigma, 5.0 / 6.0, places=14)

    def test_energy_pair(self):
        """q=2 → p=∞, σ=0"""
        pair = admissible_pair(3, 1.0, 2.0)
        self.assertTrue(math.isinf(pair.p))
        self.assertEqual(pair.sigma, 0.0)

    def test_relations_hold(self):
        """两个关系式精确成立"""
        for d, theta, q in [(3, 0.5, 4.0), (2, 1.0, 8.0), (3, 0.0, 10.0), (1, 1.0, math.inf)]:
            scaling, smoothing = admissible_pair(d, theta, q).residuals()
            self.assertLess(abs(scaling), 1e-14)
            self.assertLess(abs(smoothing), 1e-14)

    def test_rejections(self):
        """禁止端点与不容许的组合"""
        with self.assertRaises(ForbiddenEndpointError):
            admissible_pair(3, 0.0, math.inf)
        with self.assertRaises(NonAdmissibleError):
            admissible_pair(3, 1.0, math.inf)
        with self.assertRaises(NonAdmissibleError):
            admissible_pair(3, 1.0, 1.5)
        with self.assertRaises(NonAdmissibleError):
            admissible_pair(3, 1.5, 4.0)


class TestStrichartzRatio(unittest.TestCase):
    """测试 Strichartz 比值"""

    def setUp(self):
        self.grid = make_grid(1, 128, 16.0)
        self.u0 = gaussian_packet(self.grid, width=1.0, frequency=[1.0])
        self.cfg = PropagatorConfig(self.grid, make_metric('flat', 1), dt=0.5, scheme='exact-flat')

    def test_energy_pair_is_conservation(self):
        """ε=0, (p,q)=(∞,2) 时比值为1"""
        pair = admissible_pair(1, 1.0, 2.0)
        series = TimeSeriesNorms(qs=(2.0,), derivative=1.0 - pair.sigma)
        propagate(self.u0, self.cfg, 0.0, 5.0, callback=series)
        self.assertAlmostEqual(strichartz_ratio(series, pair, 1.0, self.u0), 1.0, places=12)

    def test_rejects_inhomogeneous_or_mismatched(self):
        """非齐次解或导数阶不一致时报错"""
        pair = admissible_pair(1, 1.0, 2.0)
        series = TimeSeriesNorms(qs=(2.0,), derivative=0.0)
        propagate(self.u0, self.cfg, 0.0, 1.0, callback=series)
        with self.assertRaises(MeasurementError):
            strichartz_ratio(series, pair, 1.0, self.u0)
        with self.assertRaises(MeasurementError):
            strichartz_ratio(series, pair, 0.0, self.u0, forcing=self.u0)


class TestLocalEnergy(unittest.TestCase):
    """测试局部能量范数"""

    def setUp(self):
        self.grid = make_grid(1, 512, 32.0)
        self.r = np.abs(self.grid.coords[0])

    def _static(self, values):
        u = SpectralField(self.grid, values=values)
        return [(0.0, u), (1.0, u)]

    def test_single_shell(self):
        """支撑在 A_2 内的常数场：X_0 = ‖|x|^{-1/2}u‖_{L²(A_2)}"""
        values = ((self.r > 3.0) & (self.r < 5.0)).astype(float)
        expected = math.sqrt(float(np.sum(np.where(values > 0, 1.0 / self.r, 0.0)) * self.grid.spacing))
        self.assertAlmostEqual(local_energy_norm(self._static(values), 0), expected, places=12)
        self.assertAlmostEqual(local_energy_norm(self._static(values), 2), 2.0 * expected, places=12)

    def test_low_region(self):
        """支撑在 |x| < 2^{-k} 内的场只通过低区项贡献"""
        values = (self.r < 0.5).astype(float)
        expected = math.sqrt(float(np.sum(values)) * self.grid.spacing)
        self.assertAlmostEqual(local_energy_norm(self._static(values), 0), expected, places=12)

    def test_homogeneity(self):
        """u 加倍时 X_k 加倍"""
        u = gaussian_packet(self.grid, center=[6.0], width=2.0, frequency=[1.0])
        samples = [(0.0, u), (0.5, u * 0.5)]
        doubled = [(t, v * 2.0) for t, v in samples]
        self.assertAlmostEqual(local_energy_norm(doubled, 1), 2.0 * local_energy_norm(samples, 1), places=10)
        self.assertAlmostEqual(weighted_local_energy_norm(doubled, 1),
                               2.0 * weighted_local_energy_norm(samples, 1), places=10)
        self.assertAlmostEqual(x_s_norm(doubled, 1.0), 2.0 * x_s_norm(samples, 1.0), places=8)

    def test_rejections(self):
        """壳层小于网格间距、单个采样或 α 长度不对时报错"""
        u = gaussian_packet(self.grid, width=2.0)
        with self.assertRaises(GridError):
            local_energy_norm([(0.0, u), (1.0, u)], 4)
        with self.assertRaises(MeasurementError):
            local_energy_norm([(0.0, u)], 0)
        with self.assertRaises(MeasurementError):
            weighted_local_energy_norm([(0.0, u), (1.0, u)], 0, alpha=[1.0])

    def test_accumulator_streams(self):
        """流式累积与一次性计算一致，采样时刻必须递增"""
        u = gaussian_packet(self.grid, center=[6.0], width=2.0, frequency=[1.0])
        samples = [(0.0, u), (0.5, u * 0.5), (1.5, u * 0.25)]
        acc = LocalEnergyAccumulator(self.grid, [0, 1])
        weighted = LocalEnergyAccumulator(self.grid, [0, 1], offset=True)
        for t, v in samples:
            acc(t, v)
            weighted(t, v)
        self.assertEqual(acc.horizon, 1.5)
        self.assertAlmostEqual(acc.x_k(1), local_energy_norm(samples, 1), places=12)
        self.assertAlmostEqual(weighted.weighted(1), weighted_local_energy_norm(samples, 1), places=12)
        with self.assertRaises(MeasurementError):
            acc.record(1.0, u)
        with self.assertRaises(MeasurementError):
            acc.x_k(3)
        with self.assertRaises(MeasurementError):
            LocalEnergyAccumulator(self.grid, [0]).weighted(0)

    def test_morawetz_is_finite(self):
        """Morawetz 比值对频率局部化数据有限"""
        u = gaussian_packet(self.grid, center=[4.0], width=2.0, frequency=[1.0])
        self.assertTrue(math.isfinite(morawetz_positivity(u, 0.5)))
        with self.assertRaises(MeasurementError):
            morawetz_positivity(u, 0.0)


class TestDecayFit(unittest.TestCase):
    """测试衰减指数拟合"""

    def test_exact_power_law(self):
        """A t^{-3/2} 的指数为 -1.5"""
        times = np.linspace(1.0, 40.0, 20)
        fit = decay_fit(times, 3.0 * times ** -1.5)
        self.assertAlmostEqual(fit.exponent, -1.5, delta=1e-6)
        self.assertLess(fit.residual, 1e-9)
        self.assertEqual(fit.count, 20)

    def test_window(self):
        """只用窗口内的采样"""
        times = np.linspace(1.0, 40.0, 40)
        values = np.where(times < 10, times ** -1.0, 10.0 ** 0.5 * times ** -1.5)
        fit = decay_fit(times, values, window=(10.0, 40.0))
        self.assertAlmostEqual(fit.exponent, -1.5, delta=1e-6)

    def test_rejections(self):
        """样本不足、窗口在数据外或非正数据时报错"""
        times = np.linspace(1.0, 10.0, 5)
        with self.assertRaises(MeasurementError):
            decay_fit(times, times ** -1.0)
        times = np.linspace(1.0, 10.0, 10)
        with self.assertRaises(MeasurementError):
            decay_fit(times, times ** -1.0, window=(20.0, 30.0))
        with self.assertRaises(MeasurementError):
            decay_fit(times, -times)


if __name__ == '__main__':
    unittest.main()
