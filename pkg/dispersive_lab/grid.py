"""周期计算盒子、谱变换与二进频率投影

系数约定：û(ξ) = (2π)^{-d/2} h^d Σ_x u(x) e^{-iξ·x}，格点 x_m = -L + h m。
在该约定下 Σ|u|² h^d = Σ|û|² (π/L)^d，正反变换互逆。
"""
import math
from dataclasses import dataclass
from functools import cached_property
from typing import Iterator, List, Optional, Tuple

import numpy as np
import scipy.fft
from loguru import logger

from dispersive_lab.exceptions import GridError, NumericalError

_FFT_WORKERS = 1


def set_fft_workers(workers: int) -> None:
    """设置 scipy.fft 使用的线程数"""
    global _FFT_WORKERS
    _FFT_WORKERS = max(1, int(workers))


def get_fft_workers() -> int:
    return _FFT_WORKERS


@dataclass(frozen=True)
class Grid:
    """周期盒子 [-L, L)^d，每个方向 n 个点"""
    dim: int
    n: int
    half_width: float

    @cached_property
    def shape(self) -> Tuple[int, ...]:
        return (self.n,) * self.dim

    @cached_property
    def axes(self) -> Tuple[int, ...]:
        return tuple(range(-self.dim, 0))

    @cached_property
    def spacing(self) -> float:
        return 2.0 * self.half_width / self.n

    @cached_property
    def cell_volume(self) -> float:
        return self.spacing ** self.dim

    @cached_property
    def dual_spacing(self) -> float:
        return math.pi / self.half_width

    @cached_property
    def dual_cell_volume(self) -> float:
        return self.dual_spacing ** self.dim

    @cached_property
    def nyquist(self) -> float:
        return self.n * math.pi / (2.0 * self.half_width)

    @cached_property
    def axis(self) -> np.ndarray:
        return -self.half_width + self.spacing * np.arange(self.n)

    @cached_property
    def freq_axis(self) -> np.ndarray:
        """FFT 顺序的频率轴 ξ_k = πk/L, k ∈ [-n/2, n/2)"""
        return 2.0 * np.pi * scipy.fft.fftfreq(self.n, d=self.spacing)

    @cached_property
    def coords(self) -> Tuple[np.ndarray, ...]:
        return tuple(np.meshgrid(*([self.axis] * self.dim), indexing='ij'))

    @cached_property
    def points(self) -> np.ndarray:
        """形状 (*shape, d) 的格点坐标"""
        return np.stack(self.coords, axis=-1)

    @cached_property
    def radius(self) -> np.ndarray:
        return np.sqrt(sum(c ** 2 for c in self.coords))

    @cached_property
    def wavenumbers(self) -> Tuple[np.ndarray, ...]:
        return tuple(np.meshgrid(*([self.freq_axis] * self.dim), indexing='ij'))

    @cached_property
    def xi(self) -> np.ndarray:
        """形状 (*shape, d) 的对偶格点"""
        return np.stack(self.wavenumbers, axis=-1)

    @cached_property
    def freq_norm(self) -> np.ndarray:
        return np.sqrt(sum(k ** 2 for k in self.wavenumbers))

    @cached_property
    def _sign(self) -> np.ndarray:
        index = np.rint(scipy.fft.fftfreq(self.n) * self.n).astype(np.int64)
        sign_1d = np.where(index % 2 == 0, 1.0, -1.0)
        sign = np.ones(self.shape)
        for axis in range(self.dim):
            view = [1] * self.dim
            view[axis] = self.n
            sign = sign * sign_1d.reshape(view)
        return sign

    @cached_property
    def _forward_scale(self) -> float:
        return (2.0 * np.pi) ** (-self.dim / 2.0) * self.cell_volume

    @cached_property
    def _inverse_scale(self) -> float:
        return (2.0 * np.pi) ** (-self.dim / 2.0) * (self.n * self.dual_spacing) ** self.dim

    def forward(self, values: np.ndarray) -> np.ndarray:
        """点值到傅里叶系数，作用在最后 d 个轴上"""
        spectrum = scipy.fft.fftn(values, axes=self.axes, workers=_FFT_WORKERS)
        return spectrum * (self._sign * self._forward_scale)

    def inverse(self, coefficients: np.ndarray) -> np.ndarray:
        """傅里叶系数到点值"""
        values = scipy.fft.ifftn(coefficients * self._sign, axes=self.axes, workers=_FFT_WORKERS)
        return values * self._inverse_scale

    def bracket(self, mass: float = 1.0) -> np.ndarray:
        """⟨ξ⟩_M = √(M² + |ξ|²)"""
        return np.sqrt(mass ** 2 + self.freq_norm ** 2)

    def derivative_multiplier(self, axis: int) -> np.ndarray:
        """∂_axis 的乘子 iξ_axis，Nyquist 模式置零"""
        k = self.wavenumbers[axis].copy()
        k[np.isclose(np.abs(k), self.nyquist)] = 0.0
        return 1j * k

    def integrate(self, density: np.ndarray) -> np.ndarray:
        """对最后 d 个轴做格点求积"""
        return np.sum(density, axis=self.axes) * self.cell_volume


def make_grid(d: int, n: int, L: float) -> Grid:
    """构造网格，n 必须是不小于 8 的 2 的幂"""
    if d not in (1, 2, 3):
        raise GridError(f"维数必须为1、2或3，当前为{d}")
    if not isinstance(n, (int, np.integer)) or n < 8 or n & (n - 1):
        raise GridError(f"每个方向的点数必须是不小于8的2的幂，当前为{n}")
    if not L > 0:
        raise GridError(f"盒子半宽必须为正数，当前为{L}")
    return Grid(int(d), int(n), float(L))


def _frozen(array: np.ndarray) -> np.ndarray:
    array = np.array(array, dtype=np.complex128)
    array.setflags(write=False)
    return array


def _check_finite(array: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(array)):
        raise NumericalError(f"{what}中含有NaN或Inf")


class SpectralField:
    """周期盒子上的复值函数，点值与傅里叶系数惰性保持一致

    前导轴（例如旋量分量）放在网格轴之前，变换只作用于最后 d 个轴。
    """

    def __init__(self, grid: Grid, values: Optional[np.ndarray] = None,
                 coefficients: Optional[np.ndarray] = None):
        if values is None and coefficients is None:
            raise GridError("SpectralField 需要点值或傅里叶系数")
        self.grid = grid
        self._values = None if values is None else _frozen(values)
        self._coefficients = None if coefficients is None else _frozen(coefficients)
        shape = (self._values if self._values is not None else self._coefficients).shape
        if shape[len(shape) - grid.dim:] != grid.shape:
            raise GridError(f"数组形状 {shape} 与网格 {grid.shape} 不匹配")

    @classmethod
    def zeros(cls, grid: Grid, lead: Tuple[int, ...] = ()) -> 'SpectralField':
        return cls(grid, values=np.zeros(lead + grid.shape, dtype=np.complex128))

    @property
    def values(self) -> np.ndarray:
        if self._values is None:
            self._values = _frozen(self.grid.inverse(self._coefficients))
        return self._values

    @property
    def coefficients(self) -> np.ndarray:
        if self._coefficients is None:
            self._coefficients = _frozen(self.grid.forward(self._values))
        return self._coefficients

    @property
    def lead_shape(self) -> Tuple[int, ...]:
        shape = (self._values if self._values is not None else self._coefficients).shape
        return shape[:len(shape) - self.grid.dim]

    def with_values(self, values: np.ndarray) -> 'SpectralField':
        return type(self)(self.grid, values=values)

    def with_coefficients(self, coefficients: np.ndarray) -> 'SpectralField':
        return type(self)(self.grid, coefficients=coefficients)

    def apply_multiplier(self, multiplier: np.ndarray) -> 'SpectralField':
        """乘以傅里叶乘子"""
        return self.with_coefficients(self.coefficients * multiplier)

    def norm(self) -> float:
        """L² 范数，前导分量一并求和"""
        return float(np.sqrt(np.sum(np.abs(self.values) ** 2) * self.grid.cell_volume))

    def inner(self, other: 'SpectralField') -> complex:
        """离散内积 ⟨self, other⟩ = Σ self·conj(other) h^d"""
        return complex(np.sum(self.values * np.conj(other.values)) * self.grid.cell_volume)

    def sup(self) -> float:
        return float(np.max(np.abs(self.values)))

    def __add__(self, other: 'SpectralField') -> 'SpectralField':
        return self.with_values(self.values + other.values)

    def __sub__(self, other: 'SpectralField') -> 'SpectralField':
        return self.with_values(self.values - other.values)

    def __neg__(self) -> 'SpectralField':
        return self.with_values(-self.values)

    def __mul__(self, scalar) -> 'SpectralField':
        return self.with_values(self.values * scalar)

    __rmul__ = __mul__

    def __repr__(self) -> str:
        return f"{type(self).__name__}(grid={self.grid}, lead={self.lead_shape})"


class SpinorField(SpectralField):
    """四分量旋量场 ψ，分量轴在最前"""

    def __init__(self, grid: Grid, values: Optional[np.ndarray] = None,
                 coefficients: Optional[np.ndarray] = None):
        super().__init__(grid, values=values, coefficients=coefficients)
        if self.lead_shape != (4,):
            raise GridError(f"旋量场需要4个分量，当前前导形状为{self.lead_shape}")

    @classmethod
    def from_components(cls, components: List[SpectralField]) -> 'SpinorField':
        if len(components) != 4:
            raise GridError("旋量场需要4个分量")
        return cls(components[0].grid, values=np.stack([c.values for c in components]))

    def component(self, index: int) -> SpectralField:
        return SpectralField(self.grid, values=self.values[index])

    def density(self) -> np.ndarray:
        """逐点 ψ†ψ"""
        return np.sum(np.abs(self.values) ** 2, axis=0)


def transform(field: SpectralField, direction: str = 'forward') -> SpectralField:
    """显式执行正变换或逆变换，返回两种表示都已填充的新场"""
    if direction == 'forward':
        values = np.asarray(field.values)
        _check_finite(values, "输入点值")
        coefficients = field.grid.forward(values)
        _check_finite(coefficients, "傅里叶系数")
    elif direction == 'inverse':
        coefficients = np.asarray(field.coefficients)
        _check_finite(coefficients, "输入傅里叶系数")
        values = field.grid.inverse(coefficients)
        _check_finite(values, "点值")
    else:
        raise GridError(f"未知变换方向: {direction}")
    out = type(field).__new__(type(field))
    SpectralField.__init__(out, field.grid, values=values, coefficients=coefficients)
    return out


def smooth_step(v) -> np.ndarray:
    """C^∞ 台阶 S(v)：v≤0 时为0，v≥1 时为1，S(v)+S(1-v)=1"""
    v = np.asarray(v, dtype=float)
    with np.errstate(divide='ignore', over='ignore', invalid='ignore'):
        a = np.where(v > 0, np.exp(-1.0 / np.where(v > 0, v, 1.0)), 0.0)
        w = 1.0 - v
        b = np.where(w > 0, np.exp(-1.0 / np.where(w > 0, w, 1.0)), 0.0)
        out = np.where(a + b > 0, a / np.where(a + b > 0, a + b, 1.0), 0.0)
    out = np.where(v >= 1.0, 1.0, out)
    out = np.where(v <= 0.0, 0.0, out)
    return out


def dyadic_bump(u) -> np.ndarray:
    """β(u) = S(1-|u|)，支撑在 |u| < 1，u = log2|ξ| - j"""
    return smooth_step(1.0 - np.abs(u))


def _log2_radius(r: np.ndarray) -> np.ndarray:
    with np.errstate(divide='ignore'):
        return np.log2(np.asarray(r, dtype=float))


def resolvable_band(grid: Grid) -> Tuple[int, int]:
    """可分辨的二进频带 [j_lo, j_hi]"""
    j_lo = int(math.floor(math.log2(grid.dual_spacing)))
    j_hi = int(math.floor(math.log2(grid.nyquist))) - 1
    return j_lo, j_hi


def littlewood_paley_multiplier(grid: Grid, j: int, floor: bool = False,
                                ceiling: bool = False) -> np.ndarray:
    """S_j 的乘子；floor 时吸收 |ξ| ≤ 2^j 的全部低频，ceiling 时吸收 |ξ| ≥ 2^j 的高频"""
    u = _log2_radius(grid.freq_norm) - j
    mult = dyadic_bump(u)
    if floor:
        mult = np.where(u <= 0.0, 1.0, mult)
    if ceiling:
        mult = np.where(u >= 0.0, 1.0, mult)
    return mult


def littlewood_paley(field: SpectralField, j: int, floor: bool = False) -> SpectralField:
    """二进频率投影 S_j，输出支撑在 2^{j-1} < |ξ| < 2^{j+1}"""
    j_lo, j_hi = resolvable_band(field.grid)
    if j < j_lo or j > j_hi:
        raise GridError(f"频带 j={j} 超出可分辨范围 [{j_lo}, {j_hi}]")
    return field.apply_multiplier(littlewood_paley_multiplier(field.grid, j, floor=floor))


def lp_partition(grid: Grid, ceiling: bool = False) -> Iterator[Tuple[int, np.ndarray]]:
    """可分辨频带上的单位分解，最低频带包含 ξ=0"""
    j_lo, j_hi = resolvable_band(grid)
    for j in range(j_lo, j_hi + 1):
        yield j, littlewood_paley_multiplier(grid, j, floor=(j == j_lo), ceiling=(ceiling and j == j_hi))


def frequency_cutoff_multiplier(grid: Grid, lo: float, hi: float, sharpness: str = 'smooth',
                                radius: Optional[np.ndarray] = None) -> np.ndarray:
    if not 0 <= lo < hi:
        raise GridError(f"频率截断需要 0 ≤ lo < hi，当前 lo={lo}, hi={hi}")
    r = grid.freq_norm if radius is None else radius
    if sharpness == 'sharp':
        return ((r >= lo) & (r <= hi)).astype(float)
    if sharpness != 'smooth':
        raise GridError(f"未知截断类型: {sharpness}")
    high = smooth_step(1.0 - (_log2_radius(r) - math.log2(hi)))
    if lo == 0:
        return high
    low = smooth_step(1.0 + (_log2_radius(r) - math.log2(lo)))
    return low * high


def frequency_cutoff(field: SpectralField, lo: float, hi: float, sharpness: str = 'smooth') -> SpectralField:
    """频率截断 P_{lo≤·≤hi}；光滑版本支撑在 [lo/2, 2hi]"""
    return field.apply_multiplier(frequency_cutoff_multiplier(field.grid, lo, hi, sharpness))


def radial_cutoff(r, m: float) -> np.ndarray:
    """空间截断 χ_{<m}(r)：r ≤ 2^{m-1} 时为1，r ≥ 2^m 时为0；r 可以是半径数组或 Grid"""
    if isinstance(r, Grid):
        r = r.radius
    return smooth_step(m - _log2_radius(r))


def dealias_mask(grid: Grid) -> np.ndarray:
    """2/3 规则去混叠掩码"""
    index = np.abs(np.rint(scipy.fft.fftfreq(grid.n) * grid.n))
    keep_1d = (index < grid.n / 3.0).astype(float)
    mask = np.ones(grid.shape)
    for axis in range(grid.dim):
        view = [1] * grid.dim
        view[axis] = grid.n
        mask = mask * keep_1d.reshape(view)
    return mask


def gaussian_packet(grid: Grid, center=None, width: float = 1.0, frequency=None) -> SpectralField:
    """高斯波包 exp(-|x-c|²/2w²) e^{iξ₀·x}"""
    center = np.zeros(grid.dim) if center is None else np.asarray(center, dtype=float)
    frequency = np.zeros(grid.dim) if frequency is None else np.asarray(frequency, dtype=float)
    shifted = grid.points - center
    envelope = np.exp(-np.sum(shifted ** 2, axis=-1) / (2.0 * width ** 2))
    phase = np.exp(1j * np.tensordot(grid.points, frequency, axes=([-1], [0])))
    return SpectralField(grid, values=envelope * phase)


def spectral_packet(grid: Grid, profile) -> SpectralField:
    """由频域剖面 profile(xi_vectors, |xi|) 直接给出系数的带限数据"""
    coefficients = profile(grid.xi, grid.freq_norm)
    field = SpectralField(grid, coefficients=coefficients)
    logger.debug(f"构造带限数据: 网格={grid}, L2范数={field.norm():.6g}")
    return field
