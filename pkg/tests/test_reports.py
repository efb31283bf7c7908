#!/usr/bin/env python
# -*- coding: utf-8 -*-

import json
import math
import os
import shutil
import sys
import tempfile
import unittest

import numpy as np

# 添加项目根目录到路径
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from dispersive_lab.exceptions import ReportError
from dispersive_lab.grid import SpectralField, gaussian_packet, make_grid
from dispersive_lab.reports import (
    SUMMARY_FILE,
    Check,
    ExperimentResult,
    check_below,
    check_within,
    read_field_dump,
    read_summary_json,
    read_table_csv,
    render_summary_json,
    render_table_csv,
    table_from_rows,
    write_field_dump,
    write_summary_json,
    write_table_csv,
)


class ReportTestCase(unittest.TestCase):
    def setUp(self):
        self.tmp = tempfile.mkdtemp()

    def tearDown(self):
        shutil.rmtree(self.tmp, ignore_errors=True)


class TestTableCsv(ReportTestCase):
    """测试 CSV 表格格式"""

    def test_render_layout(self):
        """注释行在前，表头按首次出现的顺序，LF 换行"""
        table = table_from_rows('series', [{'t': 1.0, 'sup': 0.5}, {'t': 2.0, 'sup': 0.25, 'extra': 3}],
                                'mass=1', 'grid d=3')
        text = render_table_csv(table)
        lines = text.split('\n')
        self.assertEqual(lines[0], '# mass=1')
        self.assertEqual(lines[1], '# grid d=3')
        self.assertEqual(lines[2], 't,sup,extra')
        self.assertEqual(lines[3], '1,0.5,')
        self.assertEqual(lines[4], '2,0.25,3')
        self.assertNotIn('\r', text)

    def test_non_finite_and_bool(self):
        """非有限数与布尔值使用固定写法"""
        table = table_from_rows('x', [{'a': math.nan, 'b': math.inf, 'c': True}])
        self.assertEqual(render_table_csv(table).split('\n')[1], 'nan,inf,true')

    def test_write_then_read(self):
        """读回的数值列为 float，字符串列保持原样"""
        table = table_from_rows('probe', [{'label': 'flat/graph', 'ratio': 0.125}], 'N=2')
        path = write_table_csv(os.path.join(self.tmp, table.filename), table)
        loaded = read_table_csv(path)
        self.assertEqual(loaded.name, 'probe')
        self.assertEqual(loaded.comments, ('N=2',))
        self.assertEqual(loaded.rows, [{'label': 'flat/graph', 'ratio': 0.125}])

    def test_read_missing(self):
        """表格文件不存在时报错"""
        with self.assertRaises(ReportError):
            read_table_csv(os.path.join(self.tmp, 'missing.csv'))

    def test_read_ragged_row(self):
        """列数与表头不一致时报错"""
        path = os.path.join(self.tmp, 'bad.csv')
        with open(path, 'w', encoding='utf-8') as f:
            f.write('a,b\n1,2,3\n')
        with self.assertRaises(ReportError):
            read_table_csv(path)


class TestChecks(unittest.TestCase):
    """测试检查项"""

    def test_check_below(self):
        self.assertTrue(check_below('x', 0.5, 1.0).passed)
        self.assertFalse(check_below('x', 1.0, 1.0).passed)

    def test_nan_never_passes(self):
        """NaN 不会被当作通过"""
        self.assertFalse(check_below('x', math.nan, 1.0).passed)
        self.assertFalse(check_within('x', math.nan, 0.0, 1.0).passed)

    def test_check_within_threshold(self):
        """阈值写成区间"""
        check = check_within('slope', -1.45, -1.5, 0.1)
        self.assertTrue(check.passed)
        self.assertEqual(check.comparison, 'in')
        self.assertAlmostEqual(check.threshold[0], -1.6)
        self.assertAlmostEqual(check.threshold[1], -1.4)

    def test_as_dict_jsonable(self):
        """numpy 值和非有限数可以序列化"""
        check = Check('c', np.bool_(True), np.float64(math.inf), np.array([1, 2]), '<')
        data = check.as_dict()
        self.assertIs(data['passed'], True)
        self.assertEqual(data['value'], 'inf')
        self.assertEqual(data['threshold'], [1, 2])
        json.dumps(data)

    def test_result_status(self):
        result = ExperimentResult('demo', checks=[Check('a', True), Check('b', False)])
        self.assertFalse(result.passed)
        self.assertEqual([c.name for c in result.failed_checks], ['b'])


class TestSummaryJson(ReportTestCase):
    """测试 JSON 摘要"""

    def test_sorted_and_stable(self):
        """键排序，相同输入得到相同文本"""
        summary = {'b': 1, 'a': {'z': np.float64(0.5), 'y': [np.int64(3)]}}
        first = render_summary_json(summary)
        self.assertEqual(first, render_summary_json(dict(reversed(list(summary.items())))))
        self.assertLess(first.index('"a"'), first.index('"b"'))
        self.assertTrue(first.endswith('\n'))

    def test_read_from_directory(self):
        """传入目录时读取其中的 summary.json"""
        write_summary_json(os.path.join(self.tmp, SUMMARY_FILE), {'experiment': 'decay'})
        self.assertEqual(read_summary_json(self.tmp)['experiment'], 'decay')

    def test_empty_report(self):
        """空报告报错"""
        path = os.path.join(self.tmp, SUMMARY_FILE)
        with open(path, 'w', encoding='utf-8') as f:
            f.write('{}')
        with self.assertRaises(ReportError):
            read_summary_json(path)

    def test_malformed_report(self):
        """非法 JSON 报错并带行号"""
        path = os.path.join(self.tmp, SUMMARY_FILE)
        with open(path, 'w', encoding='utf-8') as f:
            f.write('{\n  "a": \n')
        with self.assertRaises(ReportError) as ctx:
            read_summary_json(path)
        self.assertIn(path, str(ctx.exception))


class TestFieldDump(ReportTestCase):
    """测试网格场转储"""

    def test_values_dump(self):
        """点值转储读回后逐位相同"""
        field = gaussian_packet(make_grid(2, 8, 4.0), width=1.0, frequency=[0.5, 0.0])
        path = write_field_dump(os.path.join(self.tmp, 'u.csv'), field)
        with open(path, 'r', encoding='utf-8') as f:
            self.assertEqual(f.readline().strip(), '# grid d=2 n=8 L=4 repr=values')
        loaded, representation = read_field_dump(path)
        self.assertEqual(representation, 'values')
        np.testing.assert_array_equal(loaded.values, field.values)

    def test_spinor_rejected(self):
        """只能转储标量场"""
        grid = make_grid(1, 8, 4.0)
        spinor = SpectralField(grid, values=np.ones((4, 8), dtype=complex))
        with self.assertRaises(ReportError):
            write_field_dump(os.path.join(self.tmp, 'psi.csv'), spinor)

    def test_bad_header(self):
        path = os.path.join(self.tmp, 'bad.csv')
        with open(path, 'w', encoding='utf-8') as f:
            f.write('# not a grid\n')
        with self.assertRaises(ReportError):
            read_field_dump(path)


if __name__ == '__main__':
    unittest.main()
