import os
import platform
import traceback
from typing import Any, Dict, List, Optional

import matplotlib
import numpy as np
import scipy
import sympy
import yaml
from loguru import logger

from . import __version__
from .config import load_config_text
from .config_utils import DEFAULT_CONFIG_PATH, check_box_budget, generate_run_dir, generate_trace_id, \
    validate_config_structure
from .exceptions import ConfigError, DispersiveLabError
from .experiments import ExperimentContext, run_experiment
from .grid import set_fft_workers
from .logger import set_trace_id, setup_logger
from .reports import (
    DIAGNOSTIC_FILE,
    SUMMARY_FILE,
    ExperimentResult,
    write_field_dump,
    write_summary_json,
    write_table_csv,
)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_USAGE = 2
EXIT_NUMERICAL = 3
EXIT_CHECKS = 4


def library_versions() -> Dict[str, str]:
    """写入摘要的依赖版本"""
    return {
        'dispersive_lab': __version__,
        'python': platform.python_version(),
        'numpy': np.__version__,
        'scipy': scipy.__version__,
        'sympy': sympy.__version__,
        'matplotlib': matplotlib.__version__,
        'pyyaml': yaml.__version__,
    }


class ExperimentRunner:
    def __init__(self, config_path: str = DEFAULT_CONFIG_PATH, out_dir: Optional[str] = None,
                 seed: Optional[int] = None, threads: Optional[int] = None, console_output: bool = True):
        """
        加载配置并准备输出目录

        :param config_path: YAML/JSON 配置文件路径
        :param out_dir: 覆盖 output.directory
        :param seed: 覆盖配置中的随机种子
        :param threads: 覆盖 parallel.threads
        """
        # 生成trace_id，只出现在日志中，不写入结果文件
        self.trace_id = generate_trace_id()
        set_trace_id(self.trace_id)

        if not os.path.exists(config_path):
            raise FileNotFoundError(f"配置文件不存在: {config_path}")

        config, text = load_config_text(config_path)
        self.config = validate_config_structure(config, text, config_path)
        if seed is not None:
            self.config['seed'] = int(seed)
        if threads is not None:
            if threads < 1:
                raise ConfigError(f"线程数必须为正整数，当前为 {threads}")
            self.config['parallel']['threads'] = int(threads)
        if out_dir is not None:
            self.config['output']['directory'] = out_dir

        log_config = self.config.get('log', {})
        self.log_file = log_config.get('file', 'dispersive_lab.log')
        setup_logger(self.log_file, log_config.get('rotation', '1 week'), log_config.get('retention', '1 month'),
                     log_config.get('level', 'INFO'), console_output)

        self.experiment = self.config['experiment']
        set_trace_id(self.trace_id, self.experiment)
        self.seed = int(self.config['seed'])
        self.threads = int(self.config['parallel']['threads'])
        logger.info(f"开始实验任务: {self.experiment}")
        logger.info(f"日志文件路径: {os.path.abspath(self.log_file)}")

        check_box_budget(self.config)
        set_fft_workers(int(self.config['parallel'].get('fft_workers', 1)))
        self.run_dir = generate_run_dir(self.config['output']['directory'], self.experiment)
        self.result: Optional[ExperimentResult] = None
        self.passed_checks: List[str] = []
        self.failed_checks: List[str] = []
        self.written_files: List[str] = []

    def _base_summary(self) -> Dict[str, Any]:
        return {
            'experiment': self.experiment,
            'seed': self.seed,
            'config': self.config,
            'versions': library_versions(),
        }

    def _write_result(self, result: ExperimentResult) -> str:
        tables = {}
        for table in result.tables:
            self.written_files.append(write_table_csv(os.path.join(self.run_dir, table.filename), table))
            tables[table.name] = table.filename
        snapshots = []
        for filename, field in result.snapshots:
            self.written_files.append(write_field_dump(os.path.join(self.run_dir, filename), field))
            snapshots.append(filename)
        summary = self._base_summary()
        summary.update({
            'status': 'passed' if result.passed else 'failed',
            'checks': [check.as_dict() for check in result.checks],
            'metrics': result.metrics,
            'tables': tables,
            'plots': result.plots,
            'snapshots': snapshots,
        })
        path = write_summary_json(os.path.join(self.run_dir, SUMMARY_FILE), summary)
        self.written_files.append(path)
        return path

    def _write_diagnostic(self, error: BaseException) -> str:
        diagnostic = self._base_summary()
        diagnostic.update({
            'status': 'error',
            'error_type': type(error).__name__,
            'message': str(error),
        })
        return write_summary_json(os.path.join(self.run_dir, DIAGNOSTIC_FILE), diagnostic)

    def run(self) -> int:
        """运行实验并写出结果，返回退出码"""
        ctx = ExperimentContext(self.config, self.seed, self.threads)
        try:
            result = run_experiment(self.experiment, ctx)
        except ConfigError:
            raise
        except (DispersiveLabError, FloatingPointError) as e:
            logger.error(f"数值计算失败: {type(e).__name__}: {str(e)}")
            logger.debug(traceback.format_exc())
            path = self._write_diagnostic(e)
            logger.error(f"诊断信息已写入: {path}")
            return EXIT_NUMERICAL
        self.result = result
        self.passed_checks = [check.name for check in result.checks if check.passed]
        self.failed_checks = [check.name for check in result.failed_checks]
        self._write_result(result)
        for check in result.failed_checks:
            logger.warning(f"检查未通过: {check.name}, 值={check.value}, 阈值={check.threshold} ({check.comparison})")
        return EXIT_OK if result.passed else EXIT_CHECKS
