import copy
import os
import traceback
from typing import Any, Dict, Optional, Tuple

import yaml
from loguru import logger

from dispersive_lab.config_utils import (
    EXPERIMENT_DEFAULTS,
    EXPERIMENT_NAMES,
    SECTION_DEFAULTS,
    _ensure_directory_exists,
)
from dispersive_lab.exceptions import ConfigError, UnknownExperimentError


def load_config_text(config_path: str) -> Tuple[Dict[str, Any], str]:
    """
    加载配置文件并同时返回原文

    YAML 是 JSON 的超集，因此 JSON 配置文件也能直接读取。

    :param config_path: 配置文件路径
    :return: (配置字典, 文件原文)
    """
    try:
        with open(config_path, 'r', encoding='utf-8') as f:
            text = f.read()
        config = yaml.safe_load(text)
        logger.info(f"成功加载配置文件: {config_path}")
        return config, text
    except FileNotFoundError:
        logger.error(f"配置文件不存在: {config_path}")
        logger.debug(traceback.format_exc())
        raise
    except yaml.YAMLError as e:
        logger.error(f"配置文件格式错误: {str(e)}")
        logger.debug(traceback.format_exc())
        mark = getattr(e, 'problem_mark', None)
        line = mark.line + 1 if mark is not None else None
        problem = getattr(e, 'problem', None) or str(e)
        raise ConfigError(f"配置文件格式错误: {problem}", line=line, path=config_path) from e
    except Exception as e:
        logger.error(f"加载配置文件失败: {str(e)}")
        logger.debug(traceback.format_exc())
        raise


def load_config(config_path: str) -> Dict[str, Any]:
    """
    加载YAML/JSON配置文件

    :param config_path: 配置文件路径
    :return: 配置字典
    """
    config, _ = load_config_text(config_path)
    return config


def update_config(config_path: str, updates: Dict[str, Any]) -> None:
    """修改或补充现有配置文件

    Args:
        config_path: 配置文件路径
        updates: 要更新的配置内容
    """
    try:
        if not os.path.exists(config_path):
            logger.error(f"配置文件不存在: {config_path}")
            raise FileNotFoundError(f"配置文件不存在: {config_path}")

        with open(config_path, 'r', encoding='utf-8') as f:
            config = yaml.safe_load(f) or {}

        def recursive_update(current: Dict[str, Any], update_values: Dict[str, Any]) -> Dict[str, Any]:
            for key, value in update_values.items():
                if key in current and isinstance(current[key], dict) and isinstance(value, dict):
                    current[key] = recursive_update(current[key], value)
                else:
                    current[key] = value
            return current

        updated_config = recursive_update(config, updates)

        if updated_config.get('experiment') not in EXPERIMENT_NAMES:
            raise UnknownExperimentError(str(updated_config.get('experiment')), EXPERIMENT_NAMES)

        with open(config_path, 'w', encoding='utf-8') as f:
            yaml.dump(updated_config, f, default_flow_style=False, allow_unicode=True, sort_keys=False)

        logger.info(f"配置文件已成功更新: {config_path}")

    except Exception as e:
        logger.error(f"更新配置文件失败: {str(e)}")
        logger.debug(traceback.format_exc())
        raise


def default_config(experiment: str) -> Dict[str, Any]:
    """生成某个实验的完整默认配置"""
    if experiment not in EXPERIMENT_NAMES:
        raise UnknownExperimentError(experiment, EXPERIMENT_NAMES)
    config: Dict[str, Any] = {'experiment': experiment, 'seed': 0}
    for section, values in SECTION_DEFAULTS.items():
        config[section] = copy.deepcopy(values)
    for section, values in EXPERIMENT_DEFAULTS[experiment].items():
        if isinstance(values, dict) and isinstance(config.get(section), dict):
            config[section].update(copy.deepcopy(values))
        else:
            config[section] = copy.deepcopy(values)
    return config


def create_config(config_path: str, experiment: Optional[str] = None, interactive: bool = True) -> Dict[str, Any]:
    """
    创建新的配置文件

    :param config_path: 配置文件路径
    :param experiment: 实验名称，为空时交互式询问
    :param interactive: 是否交互式询问其余选项
    :return: 写入的配置字典
    """
    try:
        if experiment is None:
            if interactive:
                print(f"可用实验: {', '.join(EXPERIMENT_NAMES)}")
                experiment = input("实验名称 (默认: decay): ").strip() or 'decay'
            else:
                experiment = 'decay'
        config = default_config(experiment)

        if interactive:
            seed = input(f"随机种子 (默认: {config['seed']}): ").strip()
            if seed:
                config['seed'] = int(seed)
            output_dir = input(f"输出目录 (默认: {config['output']['directory']}): ").strip()
            if output_dir:
                config['output']['directory'] = output_dir
            threads = input(f"并行线程数 (默认: {config['parallel']['threads']}): ").strip()
            if threads:
                config['parallel']['threads'] = int(threads)

        config_dir = os.path.dirname(os.path.abspath(config_path))
        _ensure_directory_exists(config_dir)
        with open(config_path, 'w', encoding='utf-8') as f:
            yaml.dump(config, f, default_flow_style=False, allow_unicode=True, sort_keys=False)

        logger.info(f"配置文件已创建: {config_path}")
        return config
    except Exception as e:
        logger.error(f"创建配置文件失败: {str(e)}")
        logger.debug(traceback.format_exc())
        raise
