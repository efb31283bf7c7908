import copy
import os
import re
import traceback
import uuid
from typing import Any, Dict, Optional

from loguru import logger

from dispersive_lab.exceptions import ConfigError, UnknownExperimentError

DEFAULT_CONFIG_PATH = os.path.join(os.path.expanduser('~'), '.config', 'dispersive_lab', 'config.yaml')

EXPERIMENT_NAMES = (
    'decay', 'strichartz', 'local-energy', 'projector',
    'flow', 'damping', 'kernel-probe', 'dirac',
)

# 各部分的通用默认值
SECTION_DEFAULTS: Dict[str, Dict[str, Any]] = {
    'grid': {'dim': 3, 'n': 64, 'half_width': 80.0},
    'metric': {'name': 'flat', 'amplitude': 0.0, 'params': {}},
    'physics': {'mass': 1.0, 'theta': 1.0, 'sobolev_s': 1.0, 'eta': 0.1},
    'time': {'start': 0.0, 'horizon': 40.0, 'dt': 0.5, 'samples': 36},
    'output': {'directory': './results'},
    'log': {'file': 'dispersive_lab.log', 'rotation': '1 week', 'retention': '1 month', 'level': 'INFO'},
    'parallel': {'threads': 1, 'fft_workers': 1},
}

# 每个实验覆盖的默认值，验收阈值也放在这里
EXPERIMENT_DEFAULTS: Dict[str, Dict[str, Any]] = {
    'decay': {
        'grid': {'dim': 3, 'n': 64, 'half_width': 80.0},
        'time': {'start': 0.0, 'horizon': 40.0, 'samples': 36},
        'experiment_params': {
            'window': [5.0, 40.0],
            'unit_sigma': 0.6, 'unit_cutoff': 0.63,
            'wave_lambda': 8.0, 'wave_center': 0.75, 'wave_width': 0.25,
            'expected_unit': -1.5, 'tol_unit': 0.1,
            'expected_wave': -1.0, 'tol_wave': 0.15,
        },
    },
    'strichartz': {
        'grid': {'dim': 3, 'n': 64, 'half_width': 80.0},
        'metric': {'name': 'inverse_square', 'amplitude': 0.0, 'params': {}},
        'time': {'start': 0.0, 'horizon': 50.0, 'dt': 0.5, 'samples': 101},
        'experiment_params': {
            'eps_list': [0.0, 0.01, 0.05], 'q': 6.0, 'packet_sigma': 0.6, 'packet_cutoff': 0.63,
            'local_energy_k': -2, 'tol_eps': 0.25, 'tol_horizon': 0.15,
            'sweep_points': 100,
        },
    },
    'local-energy': {
        'grid': {'dim': 3, 'n': 32, 'half_width': 40.0},
        'time': {'start': 0.0, 'horizon': 20.0, 'dt': 0.5, 'samples': 41},
        'experiment_params': {
            'data_band': -1, 'local_energy_k': -2, 'xs_s': 0.5,
            'morawetz_delta': 0.25, 'tol_horizon': 0.15,
        },
    },
    'projector': {
        'grid': {'dim': 1, 'n': 256, 'half_width': 16.0},
        'metric': {'name': 'radial_bump', 'amplitude': 0.05, 'params': {'width': 2.0}},
        'experiment_params': {
            'n_frequencies': 1000, 'algebra_dim': 3, 'algebra_n': 64, 'algebra_half_width': 20.0,
            'bands': [2, 3, 4], 'packet_width': 3.0, 'slope_max': -0.9, 'ratio_tol': 0.2,
            'algebra_tol': 1e-12,
        },
    },
    'flow': {
        'grid': {'dim': 3, 'n': 16, 'half_width': 8.0},
        'metric': {'name': 'radial_bump', 'amplitude': 0.01, 'params': {'width': 4.0}},
        'experiment_params': {
            'lam': 1.0, 's': 1.0, 't': 10.0, 'n_points': 20, 'eps_list': [0.005, 0.01, 0.02],
            'jacobian_tol': 1e-6, 'ratio_tol': 0.2, 'n_lemma': 1000, 'lemma_tol': 1e-12,
            'flow_tol': 1e-8, 'x0': [2.0, 0.0, 0.0], 'xi0': [0.0, 1.0, 0.0],
        },
    },
    'damping': {
        'grid': {'dim': 2, 'n': 256, 'half_width': 40.0},
        'metric': {'name': 'inverse_square', 'amplitude': 0.01, 'params': {}},
        'time': {'start': 4.0, 'horizon': 24.0, 'dt': 0.25, 'samples': 21},
        'experiment_params': {
            'n_trajectories': 200, 'damping_eps': 0.01, 'exponent': 0.75, 'c': 0.0625,
            'variant': 'full', 'tol': 0.1, 'trajectory_dim': 3,
            'partition_j': 2, 'eps_list': [0.0, 0.01], 'window': [0.125, 8.0],
            'inner_max': 1e-3, 'outer_max': 1e-6, 'leak_flat_max': 1e-6, 'leak_eps_max': 1e-2,
        },
    },
    'kernel-probe': {
        'grid': {'dim': 1, 'n': 256, 'half_width': 32.0},
        'metric': {'name': 'radial_bump', 'amplitude': 0.05, 'params': {'width': 3.0}},
        'experiment_params': {
            'scale': 1.0, 'fbi_tol': 1e-8, 'fbi_grid_2d': {'n': 64, 'half_width': 16.0},
            'probe_s': 1.0, 'probe_t': 8.0, 'probe_N': 2.0, 'lam': 1.0, 'dt': 0.25,
        },
    },
    'dirac': {
        'grid': {'dim': 3, 'n': 32, 'half_width': 24.0},
        'physics': {'mass': 1.0, 'sobolev_s': 1.5, 'eta': 0.1},
        'time': {'start': 0.0, 'horizon': 50.0, 'dt': 0.1, 'samples': 10},
        'experiment_params': {
            'amplitude_ratios': [1.0, 0.5, 0.25], 'packet_width': 3.0, 'packet_frequency': 1.0,
            'slope': 3.0, 'slope_tol': 0.3, 'norm_factor': 2.0, 'tail_fraction': 0.1,
            'tail_times': [10.0, 20.0, 30.0, 40.0, 50.0],
        },
    },
}


def _ensure_directory_exists(directory_path: str) -> None:
    """确保目录存在，如果不存在则创建"""
    if not os.path.exists(directory_path):
        try:
            os.makedirs(directory_path)
            logger.info(f"创建目录: {directory_path}")
        except Exception as e:
            logger.error(f"创建目录失败: {str(e)}")
            logger.debug(traceback.format_exc())
            raise


def generate_trace_id() -> str:
    """生成一个唯一的追踪ID"""
    return str(uuid.uuid4())


def generate_run_dir(base_dir: str, experiment: str) -> str:
    """生成实验输出目录，目录名不含时间戳以保证重复运行结果一致"""
    run_dir = os.path.join(base_dir, experiment)
    _ensure_directory_exists(run_dir)
    return run_dir


def locate_key_line(text: str, dotted_key: str) -> Optional[int]:
    """在配置文本中定位键所在的行号（从1开始），YAML 与 JSON 均可"""
    keys = dotted_key.split('.')
    start = 0
    lines = text.splitlines()
    found = None
    for key in keys:
        pattern = re.compile(r'^\s*(?:-\s*)?["\']?' + re.escape(key) + r'["\']?\s*:')
        found = None
        for index in range(start, len(lines)):
            if pattern.search(lines[index]):
                found = index
                break
        if found is None:
            return None
        start = found + 1
    return None if found is None else found + 1


def _merge_defaults(target: Dict[str, Any], defaults: Dict[str, Any]) -> Dict[str, Any]:
    for key, value in defaults.items():
        if key not in target or target[key] is None:
            target[key] = copy.deepcopy(value)
        elif isinstance(value, dict) and isinstance(target[key], dict):
            _merge_defaults(target[key], value)
    return target


def validate_config_structure(config: Dict[str, Any], text: Optional[str] = None,
                              path: Optional[str] = None) -> Dict[str, Any]:
    """验证配置结构并补齐默认值

    :param config: load_config 返回的字典
    :param text: 配置文件原文，用于在错误信息中标注行号
    :param path: 配置文件路径
    :return: 补齐默认值后的配置
    """
    def _line(key: str) -> Optional[int]:
        return locate_key_line(text, key) if text else None

    if not isinstance(config, dict):
        raise ConfigError("配置文件顶层必须是映射", line=1, path=path)
    if 'experiment' not in config:
        logger.error("配置中缺少experiment字段")
        raise ConfigError("配置中缺少experiment字段", line=1, path=path)

    name = config['experiment']
    if name not in EXPERIMENT_NAMES:
        logger.error(f"未知实验: {name}")
        raise UnknownExperimentError(str(name), EXPERIMENT_NAMES, line=_line('experiment'), path=path)

    _merge_defaults(config, copy.deepcopy(EXPERIMENT_DEFAULTS[name]))
    _merge_defaults(config, copy.deepcopy(SECTION_DEFAULTS))
    config.setdefault('experiment_params', {})
    config.setdefault('seed', 0)

    for section in SECTION_DEFAULTS:
        if not isinstance(config[section], dict):
            raise ConfigError(f"{section}部分必须是映射", line=_line(section), path=path)

    grid = config['grid']
    try:
        grid['dim'] = int(grid['dim'])
        grid['n'] = int(grid['n'])
        grid['half_width'] = float(grid['half_width'])
    except (TypeError, ValueError) as e:
        raise ConfigError(f"grid参数类型错误: {e}", line=_line('grid'), path=path)
    if grid['dim'] not in (1, 2, 3):
        raise ConfigError(f"grid.dim必须为1、2或3，当前为{grid['dim']}", line=_line('grid.dim'), path=path)
    n = grid['n']
    if n < 8 or n & (n - 1):
        raise ConfigError(f"grid.n必须是不小于8的2的幂，当前为{n}", line=_line('grid.n'), path=path)
    if grid['half_width'] <= 0:
        raise ConfigError("grid.half_width必须为正数", line=_line('grid.half_width'), path=path)

    time_cfg = config['time']
    if float(time_cfg['dt']) <= 0:
        raise ConfigError("time.dt必须为正数", line=_line('time.dt'), path=path)
    if float(time_cfg['horizon']) <= float(time_cfg['start']):
        raise ConfigError("time.horizon必须大于time.start", line=_line('time.horizon'), path=path)

    if float(config['metric'].get('amplitude', 0.0)) < 0:
        raise ConfigError("metric.amplitude不能为负", line=_line('metric.amplitude'), path=path)
    if float(config['physics']['mass']) <= 0:
        raise ConfigError("physics.mass必须为正数", line=_line('physics.mass'), path=path)

    threads = config['parallel'].get('threads', 1)
    if not isinstance(threads, int) or threads < 1:
        raise ConfigError("parallel.threads必须是正整数", line=_line('parallel.threads'), path=path)

    return config


def check_box_budget(config: Dict[str, Any]) -> bool:
    """检查盒子半宽是否满足 L >= 4T，不满足时只给出警告"""
    half_width = float(config['grid']['half_width'])
    horizon = float(config['time']['horizon'])
    if half_width < 4.0 * horizon:
        logger.warning(
            f"盒子半宽 L={half_width:g} 小于 4T={4.0 * horizon:g}，周期回绕可能影响测量"
        )
        return False
    return True
