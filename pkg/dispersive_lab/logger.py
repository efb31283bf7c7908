import sys
from typing import Dict

from loguru import logger

# 当前运行的上下文：trace_id 与实验名称，线程池中的任务共享同一份
_run_context: Dict[str, str] = {'trace_id': '', 'experiment': ''}

LOG_FORMAT = ("[{time:YYYY-MM-DD HH:mm:ss.SSS}][{extra[trace_id]}][{extra[experiment]}]"
              "| {level: <8} | {name}:{function}:{line} - {message}\n")


def set_trace_id(trace_id: str, experiment: str = '') -> None:
    """
    设置当前运行的trace_id

    :param trace_id: 要设置的trace_id
    :param experiment: 实验名称，为空时保留原值
    """
    _run_context['trace_id'] = trace_id
    if experiment:
        _run_context['experiment'] = experiment


def get_trace_id() -> str:
    return _run_context['trace_id']


def _custom_formatter(record):
    record["extra"]["trace_id"] = _run_context['trace_id'] or "-"
    record["extra"]["experiment"] = _run_context['experiment'] or "-"
    return LOG_FORMAT


def setup_logger(
    log_file: str = "dispersive_lab.log",
    rotation: str = "1 week",
    retention: str = "1 month",
    level: str = "INFO",
    console_output: bool = True
) -> None:
    """
    配置日志系统

    日志带时间戳，实验结果文件不带。

    :param log_file: 日志文件路径，为空时只输出到控制台
    :param rotation: 日志轮转策略
    :param retention: 日志保留时间
    :param level: 日志级别
    :param console_output: 是否在控制台(stderr)输出日志
    """
    logger.remove()

    if not _run_context['trace_id']:
        _run_context['trace_id'] = "unknown"

    if log_file:
        logger.add(log_file, rotation=rotation, retention=retention, level=level,
                   encoding='utf-8', format=_custom_formatter)

    # stdout 留给命令输出
    if console_output:
        logger.add(sys.stderr, level=level, format=_custom_formatter)

    logger.debug(f"日志系统初始化完成: 级别={level}, 文件={log_file or '-'}")
