"""由摘要中的 plots 描述生成静态 SVG 图

每个描述形如 {kind, file, title, xlabel, ylabel, series: [{table, x, y, label}], references: [...]}，
kind 取 loglog、line 或 bars。相同输入得到相同的 SVG 字节。
"""
import io
import math
import os
import traceback
from typing import Any, Dict, List, Optional

import matplotlib

matplotlib.use('Agg')
import matplotlib.pyplot as plt
import numpy as np
from loguru import logger

from dispersive_lab.exceptions import ReportError
from dispersive_lab.reports import SUMMARY_FILE, Table, read_summary_json, read_table_csv
from dispersive_lab.utils import atomic_write_text

PLOT_KINDS = ('loglog', 'line', 'bars')

_RC = {
    'svg.hashsalt': 'dispersive_lab',
    'svg.fonttype': 'path',
    'path.simplify': False,
}


def _numeric(table: Table, key: str) -> np.ndarray:
    if key not in table.columns:
        raise ReportError(f"表格 {table.filename} 没有列 {key}，可用列: {', '.join(table.columns)}")
    values = []
    for value in table.column(key):
        values.append(float(value) if isinstance(value, (int, float)) and not isinstance(value, bool) else math.nan)
    return np.array(values)


def _load_tables(spec: Dict[str, Any], tables: Dict[str, str], base_dir: str,
                 cache: Dict[str, Table]) -> None:
    for series in spec.get('series', []):
        name = series.get('table')
        if name not in tables:
            raise ReportError(f"图 {spec.get('file')} 引用了不存在的表格: {name}")
        if name not in cache:
            cache[name] = read_table_csv(os.path.join(base_dir, tables[name]))


def _reference_line(ax, x: np.ndarray, y: np.ndarray, reference: Dict[str, Any]) -> None:
    """过数据首个正点的幂律参考线 c·t^slope"""
    slope = float(reference['slope'])
    keep = (x > 0) & (y > 0) & np.isfinite(y)
    if not keep.any():
        return
    x0, y0 = x[keep][0], y[keep][0]
    xs = np.array([x[keep][0], x[keep][-1]])
    scale = float(reference.get('scale', 1.0))
    ax.plot(xs, scale * y0 * (xs / x0) ** slope, linestyle='--', color='gray', linewidth=1.0,
            label=reference.get('label', f"t^{{{slope:g}}}"))


def _draw(ax, spec: Dict[str, Any], cache: Dict[str, Table]) -> None:
    kind = spec.get('kind')
    series_list = spec.get('series', [])
    if not series_list:
        raise ReportError(f"图 {spec.get('file')} 没有数据序列")
    if kind == 'bars':
        width = 0.8 / len(series_list)
        for index, series in enumerate(series_list):
            table = cache[series['table']]
            y = _numeric(table, series['y'])
            labels = [str(v) for v in table.column(series['x'])]
            positions = np.arange(len(y)) + (index - (len(series_list) - 1) / 2.0) * width
            ax.bar(positions, y, width=width, label=series.get('label', series['y']))
            ax.set_xticks(np.arange(len(y)))
            ax.set_xticklabels(labels)
        if spec.get('log_y', True):
            ax.set_yscale('log')
        return
    for series in series_list:
        table = cache[series['table']]
        x = _numeric(table, series['x'])
        y = _numeric(table, series['y'])
        if kind == 'loglog':
            keep = (x > 0) & (y > 0)
            ax.loglog(x[keep], y[keep], marker='.', linewidth=1.2, label=series.get('label', series['y']))
            for reference in spec.get('references', []):
                if reference.get('table', series['table']) == series['table'] and \
                        reference.get('y', series['y']) == series['y']:
                    _reference_line(ax, x, y, reference)
        else:
            ax.plot(x, y, marker='o', linewidth=1.5, label=series.get('label', series['y']))


def render_plot(spec: Dict[str, Any], cache: Dict[str, Table]) -> str:
    """把一个图描述渲染成 SVG 文本"""
    kind = spec.get('kind')
    if kind not in PLOT_KINDS:
        raise ReportError(f"未知图类型: {kind}，可选 {', '.join(PLOT_KINDS)}")
    with matplotlib.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(6.4, 3.8))
        try:
            _draw(ax, spec, cache)
            ax.set(xlabel=spec.get('xlabel', ''), ylabel=spec.get('ylabel', ''), title=spec.get('title', ''))
            ax.grid(alpha=0.25, linestyle=':')
            ax.legend(loc='best', fontsize='small')
            fig.tight_layout()
            buffer = io.StringIO()
            fig.savefig(buffer, format='svg', metadata={'Date': None})
            return buffer.getvalue()
        finally:
            plt.close(fig)


def plot_report(report_path: str, out_dir: Optional[str] = None) -> List[str]:
    """读取摘要并写出其中描述的所有 SVG，返回写出的路径

    :param report_path: summary.json 路径或其所在目录
    :param out_dir: SVG 输出目录，默认与报告同目录
    """
    summary = read_summary_json(report_path)
    base_dir = report_path if os.path.isdir(report_path) else os.path.dirname(os.path.abspath(report_path))
    specs = summary.get('plots')
    tables = summary.get('tables')
    if not isinstance(specs, list) or not isinstance(tables, dict):
        raise ReportError(f"报告缺少 plots 或 tables 字段: {os.path.join(base_dir, SUMMARY_FILE)}")
    if not specs:
        raise ReportError(f"报告中没有可绘制的图: {report_path}")
    out_dir = out_dir or base_dir
    cache: Dict[str, Table] = {}
    written = []
    for spec in specs:
        if not isinstance(spec, dict) or 'file' not in spec:
            raise ReportError(f"图描述格式错误: {spec}")
        _load_tables(spec, tables, base_dir, cache)
        path = os.path.join(out_dir, spec['file'])
        try:
            atomic_write_text(path, render_plot(spec, cache))
        except Exception as e:
            logger.error(f"绘图失败: {path}: {str(e)}")
            logger.debug(traceback.format_exc())
            raise
        logger.info(f"写入图: {path}")
        written.append(path)
    return written
