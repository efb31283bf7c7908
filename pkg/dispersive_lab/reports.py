"""实验结果的文件格式：CSV 表格、JSON 摘要与网格场转储

CSV 使用逗号分隔、UTF-8、LF 换行，以 `#` 开头的行为注释；结果文件中不写时间戳。
"""
import csv
import io
import json
import math
import os
import re
import traceback
from dataclasses import dataclass, field
from typing import Any, Dict, List, Sequence, Tuple

import numpy as np
from loguru import logger

from dispersive_lab.exceptions import ReportError
from dispersive_lab.grid import SpectralField, make_grid
from dispersive_lab.utils import atomic_write_text, format_number

SUMMARY_FILE = 'summary.json'
DIAGNOSTIC_FILE = 'diagnostic.json'

_DUMP_HEADER = re.compile(r'^#\s*grid\s+d=(\d+)\s+n=(\d+)\s+L=(\S+)\s+repr=(values|coeffs)\s*$')


@dataclass
class Table:
    """一张结果表；列按首次出现的顺序排列"""
    name: str
    rows: List[Dict[str, Any]]
    comments: Tuple[str, ...] = ()

    @property
    def columns(self) -> List[str]:
        seen: Dict[str, None] = {}
        for row in self.rows:
            for key in row:
                seen.setdefault(key, None)
        return list(seen)

    @property
    def filename(self) -> str:
        return f"{self.name}.csv"

    def column(self, key: str) -> List[Any]:
        return [row.get(key) for row in self.rows]


@dataclass
class Check:
    """一条可机器检查的不变量"""
    name: str
    passed: bool
    value: Any = None
    threshold: Any = None
    comparison: str = ''

    def as_dict(self) -> Dict[str, Any]:
        return {'name': self.name, 'passed': bool(self.passed), 'value': _jsonable(self.value),
                'threshold': _jsonable(self.threshold), 'comparison': self.comparison}


def check_below(name: str, value: float, threshold: float) -> Check:
    return Check(name, bool(np.isfinite(value) and value < threshold), value, threshold, '<')


def check_within(name: str, value: float, expected: float, tolerance: float) -> Check:
    return Check(name, bool(np.isfinite(value) and abs(value - expected) <= tolerance), value,
                 [expected - tolerance, expected + tolerance], 'in')


@dataclass
class ExperimentResult:
    experiment: str
    tables: List[Table] = field(default_factory=list)
    checks: List[Check] = field(default_factory=list)
    metrics: Dict[str, Any] = field(default_factory=dict)
    plots: List[Dict[str, Any]] = field(default_factory=list)
    snapshots: List[Tuple[str, SpectralField]] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(check.passed for check in self.checks)

    @property
    def failed_checks(self) -> List[Check]:
        return [check for check in self.checks if not check.passed]


def _jsonable(value: Any) -> Any:
    """转换为可稳定序列化的 Python 对象；非有限浮点数写成字符串"""
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return [_jsonable(v) for v in value.tolist()]
    if isinstance(value, (bool, np.bool_)):
        return bool(value)
    if isinstance(value, (int, np.integer)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        value = float(value)
        return value if math.isfinite(value) else format_number(value)
    if isinstance(value, complex):
        return {'real': _jsonable(value.real), 'imag': _jsonable(value.imag)}
    return value


def render_table_csv(table: Table) -> str:
    buffer = io.StringIO()
    for comment in table.comments:
        buffer.write(f"# {comment}\n")
    columns = table.columns
    writer = csv.writer(buffer, lineterminator='\n')
    writer.writerow(columns)
    for row in table.rows:
        writer.writerow([format_number(row[key]) if key in row else '' for key in columns])
    return buffer.getvalue()


def write_table_csv(path: str, table: Table) -> str:
    """原子写入 CSV 表格"""
    try:
        atomic_write_text(path, render_table_csv(table))
        logger.debug(f"写入表格: {path} ({len(table.rows)} 行)")
        return path
    except Exception as e:
        logger.error(f"写入表格失败: {path}: {str(e)}")
        logger.debug(traceback.format_exc())
        raise


def _parse_cell(text: str) -> Any:
    if text == '':
        return None
    if text in ('true', 'false'):
        return text == 'true'
    try:
        return float(text)
    except ValueError:
        return text


def read_table_csv(path: str) -> Table:
    """读取 write_table_csv 写出的表格，数值列解析为 float"""
    if not os.path.exists(path):
        raise ReportError(f"表格文件不存在: {path}")
    with open(path, 'r', encoding='utf-8') as f:
        lines = f.read().splitlines()
    comments = tuple(line[1:].strip() for line in lines if line.startswith('#'))
    body = [line for line in lines if not line.startswith('#')]
    if not body:
        raise ReportError(f"表格缺少表头: {path}")
    reader = csv.reader(body)
    header = next(reader)
    rows = []
    for number, record in enumerate(reader, start=2):
        if len(record) != len(header):
            raise ReportError(f"{path}: 第{number}个数据行有 {len(record)} 列，表头有 {len(header)} 列")
        rows.append({key: _parse_cell(cell) for key, cell in zip(header, record)})
    name = os.path.splitext(os.path.basename(path))[0]
    return Table(name, rows, comments)


def render_summary_json(summary: Dict[str, Any]) -> str:
    return json.dumps(_jsonable(summary), indent=2, sort_keys=True, ensure_ascii=False) + '\n'


def write_summary_json(path: str, summary: Dict[str, Any]) -> str:
    try:
        atomic_write_text(path, render_summary_json(summary))
        logger.info(f"写入摘要: {path}")
        return path
    except Exception as e:
        logger.error(f"写入摘要失败: {path}: {str(e)}")
        logger.debug(traceback.format_exc())
        raise


def read_summary_json(path: str) -> Dict[str, Any]:
    """读取摘要；传入目录时读取其中的 summary.json"""
    if os.path.isdir(path):
        path = os.path.join(path, SUMMARY_FILE)
    if not os.path.exists(path):
        raise ReportError(f"报告文件不存在: {path}")
    try:
        with open(path, 'r', encoding='utf-8') as f:
            data = json.load(f)
    except json.JSONDecodeError as e:
        logger.debug(traceback.format_exc())
        raise ReportError(f"{path}:{e.lineno}: 报告不是合法的 JSON: {e.msg}") from e
    if not isinstance(data, dict) or not data:
        raise ReportError(f"报告为空或顶层不是对象: {path}")
    return data


# ---------------------------------------------------------------------------
# 网格场转储

def write_field_dump(path: str, spectral: SpectralField, representation: str = 'values') -> str:
    """每个格点一行：指标元组、实部、虚部"""
    if representation not in ('values', 'coeffs'):
        raise ReportError(f"未知转储表示: {representation}，可选 values 或 coeffs")
    if spectral.lead_shape:
        raise ReportError(f"只能转储标量场，当前前导形状为 {spectral.lead_shape}")
    grid = spectral.grid
    data = spectral.values if representation == 'values' else spectral.coefficients
    buffer = io.StringIO()
    buffer.write(f"# grid d={grid.dim} n={grid.n} L={format_number(grid.half_width)} repr={representation}\n")
    writer = csv.writer(buffer, lineterminator='\n')
    writer.writerow([f"i{axis + 1}" for axis in range(grid.dim)] + ['real', 'imag'])
    for index in np.ndindex(*grid.shape):
        value = data[index]
        writer.writerow(list(index) + [format(float(value.real), '.17g'), format(float(value.imag), '.17g')])
    atomic_write_text(path, buffer.getvalue())
    logger.debug(f"写入场转储: {path}")
    return path


def read_field_dump(path: str) -> Tuple[SpectralField, str]:
    """读取场转储，返回 (场, 表示)"""
    if not os.path.exists(path):
        raise ReportError(f"转储文件不存在: {path}")
    with open(path, 'r', encoding='utf-8') as f:
        header = f.readline().strip()
        match = _DUMP_HEADER.match(header)
        if match is None:
            raise ReportError(f"{path}:1: 转储表头格式错误: {header}")
        d, n, half_width, representation = int(match.group(1)), int(match.group(2)), float(match.group(3)), match.group(4)
        grid = make_grid(d, n, half_width)
        reader = csv.reader(f)
        next(reader, None)
        data = np.zeros(grid.shape, dtype=complex)
        count = 0
        for number, record in enumerate(reader, start=3):
            if len(record) != d + 2:
                raise ReportError(f"{path}:{number}: 需要 {d + 2} 列，当前 {len(record)} 列")
            index = tuple(int(v) for v in record[:d])
            data[index] = complex(float(record[d]), float(record[d + 1]))
            count += 1
    if count != grid.n ** grid.dim:
        raise ReportError(f"{path}: 格点数 {count} 与网格 {grid.n}^{grid.dim} 不一致")
    if representation == 'values':
        return SpectralField(grid, values=data), representation
    return SpectralField(grid, coefficients=data), representation


def table_from_rows(name: str, rows: Sequence[Dict[str, Any]], *comments: str) -> Table:
    return Table(name, list(rows), tuple(comments))
