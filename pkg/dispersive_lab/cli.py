import argparse
import json
import os
import sys
import traceback
from typing import Any, Dict, List, Optional

from loguru import logger

from dispersive_lab import __author__, __email__, __version__
from dispersive_lab.config import create_config, update_config
from dispersive_lab.config_utils import DEFAULT_CONFIG_PATH, EXPERIMENT_NAMES
from dispersive_lab.core import EXIT_CONFIG, EXIT_OK, EXIT_USAGE, ExperimentRunner
from dispersive_lab.exceptions import ConfigError, DispersiveLabError, UnknownExperimentError
from dispersive_lab.logger import setup_logger
from dispersive_lab.plotting import plot_report
from dispersive_lab.utils import find_from_package, read_example_file


def parse_args(argv: Optional[List[str]] = None) -> argparse.Namespace:
    """解析命令行参数"""
    parser = argparse.ArgumentParser(prog='dispersive_lab', description="弱渐近平坦度规上的色散方程数值实验")

    parser.add_argument('--version', '-v', action='store_true', help='显示版本信息')

    subparsers = parser.add_subparsers(dest='command', help='可用命令')

    run_parser = subparsers.add_parser('run', help='运行配置文件描述的实验')
    run_parser.add_argument('config', type=str, nargs='?', default=DEFAULT_CONFIG_PATH,
                            help=f'配置文件路径（YAML 或 JSON），默认为{DEFAULT_CONFIG_PATH}')
    run_parser.add_argument('--out', type=str, default=None, help='输出目录，覆盖 output.directory')
    run_parser.add_argument('--seed', type=int, default=None, help='随机种子，覆盖配置中的 seed')
    run_parser.add_argument('--threads', type=int, default=None, help='并行线程数，覆盖 parallel.threads')

    plot_parser = subparsers.add_parser('plot', help='根据 summary.json 生成 SVG 图')
    plot_parser.add_argument('report', type=str, help='summary.json 路径或实验输出目录')
    plot_parser.add_argument('--out', type=str, default=None, help='SVG 输出目录，默认与报告同目录')

    subparsers.add_parser('version', help='显示版本信息及更新内容')

    update_parser = subparsers.add_parser('update-config', help='更新配置文件')
    update_parser.add_argument('config_path', type=str, nargs='?', default=DEFAULT_CONFIG_PATH,
                               help=f'配置文件路径，默认为{DEFAULT_CONFIG_PATH}')
    update_parser.add_argument('config_items', nargs='*',
                               help='配置项和值，格式为 key=value，嵌套键使用点表示法，如：grid.n=128 metric.amplitude=0.01')

    create_parser = subparsers.add_parser('create-config', help='创建新的配置文件')
    create_parser.add_argument('config_path', type=str, nargs='?', default=DEFAULT_CONFIG_PATH,
                               help=f'配置文件路径，默认为{DEFAULT_CONFIG_PATH}')
    create_parser.add_argument('--experiment', '-e', type=str, choices=EXPERIMENT_NAMES, default=None,
                               help='实验名称，给出时不再交互询问')

    subparsers.add_parser('config-example', help='显示配置文件示例')

    return parser.parse_args(argv)


def _flatten_dict(d: Dict, parent_key: str = '', sep: str = '.') -> Dict[str, Any]:
    """将嵌套字典展平，使用点表示法连接键"""
    items = []
    for k, v in d.items():
        new_key = f"{parent_key}{sep}{k}" if parent_key else k
        if isinstance(v, dict):
            items.extend(_flatten_dict(v, new_key, sep=sep).items())
        else:
            items.append((new_key, v))
    return dict(items)


def _parse_value(value: str) -> Any:
    try:
        return json.loads(value)
    except json.JSONDecodeError:
        pass
    try:
        return json.loads(value.lower())
    except json.JSONDecodeError:
        return value


def _print_version() -> None:
    print(f"Dispersive Lab v{__version__}")
    print(f"作者: {__author__}")
    print(f"邮箱: {__email__}")


def handle_version() -> None:
    """处理版本信息显示"""
    _print_version()
    sys.exit(EXIT_OK)


def handle_version_command() -> None:
    """处理version子命令，附带更新内容"""
    _print_version()
    changelog = find_from_package('changelog.md')
    if changelog:
        print("\n版本更新内容:")
        with open(changelog, 'r', encoding='utf-8') as f:
            for line in f:
                print(line, end='')
            print()
    sys.exit(EXIT_OK)


def handle_run(args: argparse.Namespace) -> None:
    """处理实验运行命令"""
    try:
        runner = ExperimentRunner(args.config, out_dir=args.out, seed=args.seed, threads=args.threads)
        code = runner.run()
    except UnknownExperimentError as e:
        logger.error(str(e))
        print(f"错误: {str(e)}", file=sys.stderr)
        sys.exit(EXIT_USAGE)
    except (ConfigError, FileNotFoundError, OSError) as e:
        logger.error(f"配置错误: {str(e)}")
        print(f"错误: {str(e)}", file=sys.stderr)
        sys.exit(EXIT_CONFIG)

    result = runner.result
    print(f"\n实验结果摘要:")
    print(f"- 实验: {runner.experiment}")
    print(f"- 随机种子: {runner.seed}")
    if result is not None:
        print(f"- 检查项: {len(result.checks)}，未通过: {len(result.failed_checks)}")
        for check in result.failed_checks:
            print(f"  未通过: {check.name} (值={check.value}, 阈值={check.threshold})")
    else:
        print("- 数值计算失败，诊断信息见 diagnostic.json")
    print(f"- 输出目录: {os.path.abspath(runner.run_dir)}")
    print(f"- 日志文件路径: {os.path.abspath(runner.log_file)}")
    print(f"- 运行追踪ID: {runner.trace_id}")
    sys.exit(code)


def handle_plot(args: argparse.Namespace) -> None:
    """处理绘图命令"""
    try:
        written = plot_report(args.report, args.out)
    except (DispersiveLabError, OSError) as e:
        logger.error(f"绘图失败: {str(e)}")
        print(f"错误: {str(e)}", file=sys.stderr)
        sys.exit(EXIT_CONFIG)
    print(f"已生成 {len(written)} 张图:")
    for path in written:
        print(f"  {path}")
    sys.exit(EXIT_OK)


def handle_update_config(args: argparse.Namespace) -> None:
    """处理更新配置命令"""
    updates: Dict[str, Any] = {}
    for item in args.config_items:
        if '=' not in item:
            print(f"错误: 配置项格式不正确: {item}，应为 key=value 格式")
            sys.exit(EXIT_USAGE)
        key, value = item.split('=', 1)
        keys = key.split('.')
        current = updates
        for k in keys[:-1]:
            if k not in current or not isinstance(current[k], dict):
                current[k] = {}
            current = current[k]
        current[keys[-1]] = _parse_value(value)

    if not updates:
        print("错误: 未指定要更新的配置项")
        print("使用示例: python -m dispersive_lab update-config config.yaml grid.n=128 metric.amplitude=0.01")
        sys.exit(EXIT_USAGE)

    try:
        update_config(args.config_path, updates)
    except Exception as e:
        logger.error(f"更新配置失败: {str(e)}")
        print(f"错误: 更新配置失败: {str(e)}")
        sys.exit(EXIT_CONFIG)
    print(f"配置文件已成功更新: {args.config_path}")
    print("更新的配置项:")
    for key_path, value in _flatten_dict(updates).items():
        print(f"  {key_path} = {value}")


def handle_create_config(args: argparse.Namespace) -> None:
    """处理创建配置命令"""
    try:
        create_config(args.config_path, experiment=args.experiment, interactive=args.experiment is None)
        print(f"配置文件已成功创建: {args.config_path}")
    except Exception as e:
        logger.error(f"创建配置失败: {str(e)}")
        logger.debug(traceback.format_exc())
        print(f"错误: 创建配置失败: {str(e)}")
        sys.exit(EXIT_CONFIG)


def handle_config_example() -> None:
    """处理配置文件示例"""
    print("配置文件示例:")
    print("=" * 60)
    print(read_example_file('experiment.yaml'))
    print("=" * 60)
    print("提示：可以使用 'dispersive_lab create-config [路径]' 命令创建新的配置文件。")


def main(argv: Optional[List[str]] = None) -> None:
    """主函数入口"""
    args = parse_args(argv)

    if args.version:
        handle_version()

    if args.command == 'version':
        handle_version_command()

    setup_logger(log_file='', console_output=True)
    if args.command == 'run':
        handle_run(args)
    elif args.command == 'plot':
        handle_plot(args)
    elif args.command == 'update-config':
        handle_update_config(args)
    elif args.command == 'create-config':
        handle_create_config(args)
    elif args.command == 'config-example':
        handle_config_example()
    else:
        print("错误: 请指定命令，使用 --help 查看用法", file=sys.stderr)
        sys.exit(EXIT_USAGE)


if __name__ == "__main__":
    main()
