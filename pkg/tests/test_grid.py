#!/usr/bin/env python
# -*- coding: utf-8 -*-

import os
import sys
import math
import unittest

import numpy as np

# 添加项目根目录到路径
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from dispersive_lab.exceptions import GridError, NumericalError
from dispersive_lab.grid import (
    SpectralField,
    SpinorField,
    dealias_mask,
    frequency_cutoff,
    frequency_cutoff_multiplier,
    littlewood_paley,
    lp_partition,
    make_grid,
    radial_cutoff,
    resolvable_band,
    smooth_step,
    transform,
)


class TestMakeGrid(unittest.TestCase):

    def test_frequency_lattice(self):
        """测试频率格点为整数 -4..3"""
        grid = make_grid(1, 8, math.pi)
        np.testing.assert_allclose(np.sort(grid.freq_axis), np.arange(-4, 4), atol=1e-12)
        self.assertAlmostEqual(grid.nyquist, 4.0)

    def test_spacing_and_shape(self):
        grid = make_grid(3, 32, 20.0)
        self.assertEqual(grid.shape, (32, 32, 32))
        self.assertAlmostEqual(grid.spacing, 1.25)
        self.assertAlmostEqual(grid.axis[0], -20.0)

    def test_rejects_bad_input(self):
        """测试非法参数被拒绝"""
        with self.assertRaises(GridError):
            make_grid(2, 12, 1.0)
        with self.assertRaises(GridError):
            make_grid(4, 8, 1.0)
        with self.assertRaises(GridError):
            make_grid(1, 4, 1.0)
        with self.assertRaises(GridError):
            make_grid(1, 8, 0.0)


class TestTransform(unittest.TestCase):

    def setUp(self):
        self.rng = np.random.default_rng(7)

    def test_parseval_and_round_trip(self):
        """测试 Parseval 恒等式与往返变换"""
        grid = make_grid(2, 32, 5.0)
        values = self.rng.standard_normal(grid.shape) + 1j * self.rng.standard_normal(grid.shape)
        field = transform(SpectralField(grid, values=values), 'forward')
        lhs = np.sum(np.abs(values) ** 2) * grid.cell_volume
        rhs = np.sum(np.abs(field.coefficients) ** 2) * grid.dual_cell_volume
        self.assertLess(abs(lhs - rhs) / lhs, 1e-12)
        back = grid.inverse(field.coefficients)
        self.assertLess(np.max(np.abs(back - values)) / np.max(np.abs(values)), 1e-12)

    def test_plane_wave_single_coefficient(self):
        grid = make_grid(1, 16, math.pi)
        field = SpectralField(grid, values=np.exp(3j * grid.axis))
        coefficients = transform(field).coefficients
        index = int(np.argmin(np.abs(grid.freq_axis - 3.0)))
        self.assertAlmostEqual(abs(coefficients[index]), math.sqrt(2 * math.pi), places=10)
        others = np.delete(coefficients, index)
        self.assertLess(np.max(np.abs(others)), 1e-10)

    def test_gaussian_coefficients(self):
        """测试高斯函数的系数为高斯函数"""
        grid = make_grid(1, 256, 20.0)
        field = SpectralField(grid, values=np.exp(-grid.axis ** 2 / 2.0))
        expected = np.exp(-grid.freq_axis ** 2 / 2.0)
        np.testing.assert_allclose(field.coefficients, expected, atol=1e-10)

    def test_non_finite_input(self):
        grid = make_grid(1, 8, 1.0)
        values = np.zeros(grid.shape)
        values[3] = np.nan
        with self.assertRaises(NumericalError):
            transform(SpectralField(grid, values=values), 'forward')

    def test_derivative_multiplier(self):
        grid = make_grid(1, 64, math.pi)
        field = SpectralField(grid, values=np.sin(2.0 * grid.axis))
        derivative = field.apply_multiplier(grid.derivative_multiplier(0)).values
        np.testing.assert_allclose(derivative, 2.0 * np.cos(2.0 * grid.axis), atol=1e-10)

    def test_spinor_requires_four_components(self):
        grid = make_grid(1, 8, 1.0)
        with self.assertRaises(GridError):
            SpinorField(grid, values=np.zeros((3, 8)))
        spinor = SpinorField(grid, values=np.ones((4, 8)))
        np.testing.assert_allclose(spinor.density(), 4.0)


class TestLittlewoodPaley(unittest.TestCase):

    def setUp(self):
        self.grid = make_grid(1, 64, math.pi)

    def test_band_limits(self):
        self.assertEqual(resolvable_band(self.grid), (0, 4))
        with self.assertRaises(GridError):
            littlewood_paley(SpectralField.zeros(self.grid), 5)

    def test_plane_waves(self):
        """测试环中心的平面波原样通过，远处的平面波被消去"""
        centered = SpectralField(self.grid, values=np.exp(2j * self.grid.axis))
        far = SpectralField(self.grid, values=np.exp(16j * self.grid.axis))
        passed = littlewood_paley(centered, 1)
        np.testing.assert_allclose(passed.values, centered.values, atol=1e-12)
        self.assertLess(littlewood_paley(far, 1).norm(), 1e-12)

    def test_partition_of_unity(self):
        """测试各频带之和在可分辨频带上等于恒等算子"""
        grid = make_grid(2, 64, 8.0)
        rng = np.random.default_rng(3)
        _, j_hi = resolvable_band(grid)
        coefficients = rng.standard_normal(grid.shape) + 1j * rng.standard_normal(grid.shape)
        coefficients[grid.freq_norm > 2.0 ** j_hi] = 0.0
        field = SpectralField(grid, coefficients=coefficients)
        total = np.zeros(grid.shape, dtype=complex)
        multiplier_sum = np.zeros(grid.shape)
        for _, multiplier in lp_partition(grid):
            total += field.apply_multiplier(multiplier).values
            multiplier_sum += multiplier
        inside = grid.freq_norm <= 2.0 ** j_hi
        np.testing.assert_allclose(multiplier_sum[inside], 1.0, atol=1e-12)
        self.assertLess(np.max(np.abs(total - field.values)), 1e-10 * field.sup())

    def test_smooth_step_symmetry(self):
        v = np.linspace(-0.5, 1.5, 41)
        np.testing.assert_allclose(smooth_step(v) + smooth_step(1.0 - v), 1.0, atol=1e-14)


class TestFrequencyCutoff(unittest.TestCase):

    def setUp(self):
        self.grid = make_grid(1, 64, math.pi)

    def test_sharp(self):
        unit = SpectralField(self.grid, values=np.exp(1j * self.grid.axis))
        high = SpectralField(self.grid, values=np.exp(8j * self.grid.axis))
        np.testing.assert_allclose(frequency_cutoff(unit, 0.25, 4, 'sharp').values, unit.values, atol=1e-12)
        self.assertLess(frequency_cutoff(high, 0.25, 4, 'sharp').norm(), 1e-12)

    def test_smooth_idempotent_on_pass_band(self):
        """测试光滑截断仅在过渡带上偏离幂等"""
        grid = make_grid(1, 256, 8.0)
        lo, hi = 1.0, 4.0
        multiplier = frequency_cutoff_multiplier(grid, lo, hi)
        defect = np.abs(multiplier ** 2 - multiplier)
        r = grid.freq_norm
        transition = ((r > lo / 2) & (r < lo)) | ((r > hi) & (r < 2 * hi))
        self.assertEqual(np.max(defect[~transition]), 0.0)
        self.assertGreater(np.max(defect[transition]), 0.0)

    def test_rejects_empty_band(self):
        with self.assertRaises(GridError):
            frequency_cutoff(SpectralField.zeros(self.grid), 4.0, 4.0)

    def test_commutes_with_littlewood_paley(self):
        rng = np.random.default_rng(11)
        field = SpectralField(self.grid, values=rng.standard_normal(self.grid.shape))
        a = frequency_cutoff(littlewood_paley(field, 2), 1.0, 6.0)
        b = littlewood_paley(frequency_cutoff(field, 1.0, 6.0), 2)
        self.assertLess((a - b).norm(), 1e-14 * field.norm())


class TestSpatialHelpers(unittest.TestCase):

    def test_radial_cutoff(self):
        r = np.array([0.0, 0.5, 1.0, 1.5, 2.0, 3.0])
        cut = radial_cutoff(r, 1)
        np.testing.assert_allclose(cut[:3], 1.0)
        np.testing.assert_allclose(cut[4:], 0.0)
        self.assertTrue(0.0 < cut[3] < 1.0)

    def test_dealias_mask(self):
        grid = make_grid(1, 64, 1.0)
        self.assertEqual(int(dealias_mask(grid).sum()), 43)


if __name__ == '__main__':
    unittest.main()
