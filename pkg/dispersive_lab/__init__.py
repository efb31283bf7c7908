"""
Dispersive Lab
弱渐近平坦度规上半 Klein-Gordon 与三次 Dirac 方程的数值实验工具包
"""

__version__ = "0.1.0"
__author__ = "Emrys.Liu"
__email__ = "emrys.liu@foxmail.com"

from .core import ExperimentRunner
from .config import load_config
