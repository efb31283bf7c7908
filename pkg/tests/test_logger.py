#!/usr/bin/env python
# -*- coding: utf-8 -*-

import os
import shutil
import sys
import tempfile
import unittest

from loguru import logger

# 添加项目根目录到路径
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from dispersive_lab.logger import get_trace_id, set_trace_id, setup_logger


class TestLogger(unittest.TestCase):
    """测试日志配置"""

    def setUp(self):
        self.tmp = tempfile.mkdtemp()

    def tearDown(self):
        logger.remove()
        shutil.rmtree(self.tmp, ignore_errors=True)

    def test_trace_id(self):
        set_trace_id('abc-123', 'decay')
        self.assertEqual(get_trace_id(), 'abc-123')

    def test_file_sink_has_context(self):
        """日志行包含 trace_id 与实验名称"""
        set_trace_id('trace-xyz', 'projector')
        path = os.path.join(self.tmp, 'lab.log')
        setup_logger(path, console_output=False)
        logger.info("投影实验开始")
        logger.remove()
        with open(path, 'r', encoding='utf-8') as f:
            content = f.read()
        self.assertIn('[trace-xyz][projector]', content)
        self.assertIn('投影实验开始', content)

    def test_level_filter(self):
        """低于设定级别的日志不写入"""
        set_trace_id('trace-lvl')
        path = os.path.join(self.tmp, 'lab.log')
        setup_logger(path, level='WARNING', console_output=False)
        logger.info("不应出现")
        logger.warning("盒子预算不足")
        logger.remove()
        with open(path, 'r', encoding='utf-8') as f:
            content = f.read()
        self.assertNotIn('不应出现', content)
        self.assertIn('盒子预算不足', content)

    def test_console_only(self):
        """日志文件为空字符串时不创建文件"""
        setup_logger('', console_output=False)
        logger.info("只有控制台")
        self.assertEqual(os.listdir(self.tmp), [])


if __name__ == '__main__':
    unittest.main()
