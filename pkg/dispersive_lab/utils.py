import os
import sys
import tempfile
from typing import Callable, List, Optional

from loguru import logger


def _paths_to_try(file_path: str) -> List[Callable[[], str]]:
    """生成尝试查找文件的多个路径函数"""
    return [
        # 方式1: 从当前工作目录查找
        lambda: os.path.join(os.getcwd(), file_path),
        # 方式2: 从包安装位置的父目录查找
        lambda: os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), file_path),
        # 方式3: 从Python安装目录下的share查找
        lambda: os.path.join(os.path.dirname(sys.executable), 'share', 'dispersive_lab', file_path),
        # 方式4: 从用户目录查找
        lambda: os.path.join(os.path.expanduser('~'), '.local', 'share', 'dispersive_lab', file_path),
    ]


def find_from_package(file_path: str) -> Optional[str]:
    """按顺序在候选位置中查找文件，找不到时返回None"""
    for path_func in _paths_to_try(file_path):
        try:
            path = path_func()
        except Exception:
            continue
        if os.path.exists(path):
            return path
    return None


# 找不到示例配置文件时使用的内置示例
_BUILTIN_EXAMPLE = """\
# dispersive_lab 实验配置示例
experiment: decay
seed: 20240601
grid:
  dim: 3
  n: 64
  half_width: 80.0
metric:
  name: flat
  amplitude: 0.0
  params: {}
physics:
  mass: 1.0
  theta: 1.0
  sobolev_s: 1.0
time:
  horizon: 40.0
  dt: 0.5
experiment_params:
  window: [5.0, 40.0]
output:
  directory: ./results
log:
  file: dispersive_lab.log
  level: INFO
parallel:
  threads: 1
"""


def read_example_file(file_name: str = 'experiment.yaml') -> str:
    """读取示例配置文件内容，找不到时返回内置示例"""
    for candidate in (os.path.join('config', file_name), file_name):
        path = find_from_package(candidate)
        if path:
            with open(path, 'r', encoding='utf-8') as f:
                return f.read()
    logger.warning(f"未找到示例文件 {file_name}，使用内置示例")
    return _BUILTIN_EXAMPLE


def atomic_write_text(path: str, content: str) -> str:
    """先写临时文件再重命名，保证结果文件要么完整要么不存在"""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp_path = tempfile.mkstemp(prefix='.tmp_', dir=directory)
    try:
        with os.fdopen(fd, 'w', encoding='utf-8', newline='\n') as f:
            f.write(content)
        os.replace(tmp_path, path)
    except Exception:
        if os.path.exists(tmp_path):
            os.remove(tmp_path)
        raise
    return path


def format_number(value) -> str:
    """CSV/JSON 中使用的稳定数值格式"""
    if isinstance(value, bool):
        return 'true' if value else 'false'
    if isinstance(value, int):
        return str(value)
    if isinstance(value, float):
        if value != value:
            return 'nan'
        if value in (float('inf'), float('-inf')):
            return 'inf' if value > 0 else '-inf'
        return format(value, '.12g')
    try:
        return format(float(value), '.12g')
    except (TypeError, ValueError):
        return str(value)
