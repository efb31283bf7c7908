"""dispersive_lab 的异常体系

所有数值模块抛出的错误都继承自 DispersiveLabError，CLI 据此决定退出码。
"""
from typing import Iterable, Optional


class DispersiveLabError(Exception):
    """所有 dispersive_lab 错误的基类"""


class GridError(DispersiveLabError, ValueError):
    """网格参数或频带越界"""


class MetricError(DispersiveLabError, ValueError):
    """度规不可求值、导数阶数超限或非正定"""


class SymbolError(DispersiveLabError, ValueError):
    """符号缺少导数信息或无法量子化"""


class StepSizeError(DispersiveLabError, ValueError):
    """时间步长相对扰动算子范数过大"""


class NumericalError(DispersiveLabError, FloatingPointError):
    """出现 NaN/Inf 或其他数值失效"""


class FlowError(DispersiveLabError, RuntimeError):
    """哈密顿流积分或有限差分失败"""


class SmallDataError(DispersiveLabError, RuntimeError):
    """解的 H^s 范数超出小数据区域"""

    def __init__(self, norm: float, bound: float):
        self.norm = norm
        self.bound = bound
        super().__init__(f"left small-data regime: H^s 范数 {norm:.6g} 超过上界 {bound:.6g}")


class ForbiddenEndpointError(DispersiveLabError, ValueError):
    """Strichartz 禁止端点"""


class NonAdmissibleError(DispersiveLabError, ValueError):
    """不可容许的 Strichartz 指标"""


class WraparoundError(DispersiveLabError, ValueError):
    """传播距离超过周期盒子的预算"""


class MeasurementError(DispersiveLabError, ValueError):
    """范数或拟合的输入不满足要求"""


class ReportError(DispersiveLabError, ValueError):
    """报告文件缺失或格式错误"""


class ConfigError(DispersiveLabError, ValueError):
    """配置文件错误，可附带出错行号"""

    def __init__(self, message: str, line: Optional[int] = None, path: Optional[str] = None):
        self.line = line
        self.path = path
        self.message = message
        super().__init__(self.location_message())

    def location_message(self) -> str:
        if self.path and self.line is not None:
            return f"{self.path}:{self.line}: {self.message}"
        if self.line is not None:
            return f"第{self.line}行: {self.message}"
        return self.message


class UnknownExperimentError(ConfigError):
    """实验名称不存在"""

    def __init__(self, name: str, valid: Iterable[str], line: Optional[int] = None, path: Optional[str] = None):
        self.name = name
        self.valid = sorted(valid)
        super().__init__(f"未知实验: {name}，可用实验: {', '.join(self.valid)}", line=line, path=path)
