"""相空间工具：Bargmann 变换、相空间距离、Hamilton 流 Jacobian 引理与核衰减探测

T_{1/s}u(x,ξ) = c_d s^{-d/4} ∫ e^{-|x-y|²/2s} e^{iξ·(x-y)} u(y) dy，c_d = 2^{-d/2}π^{-3d/4}。
相空间格点：x 取场网格的子格，ξ 取抽稀的对偶格，抽稀步长保证 Gaussian 窗在 ξ 方向跨越至少4个格。
"""
import math
from dataclasses import dataclass
from functools import cached_property
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import scipy.fft
from loguru import logger

from dispersive_lab.exceptions import GridError, MeasurementError, SymbolError
from dispersive_lab.grid import Grid, SpectralField

_CHUNK_ENTRIES = 1 << 22


def bargmann_constant(dim: int) -> float:
    return 2.0 ** (-dim / 2.0) * math.pi ** (-0.75 * dim)


def _largest_power_of_two(limit: float, n: int) -> int:
    stride = 1
    while stride * 2 <= limit and n % (stride * 2) == 0 and n // (stride * 2) >= 2:
        stride *= 2
    return stride


@dataclass(frozen=True)
class PhaseLattice:
    """(x, ξ) 乘积格点"""
    grid: Grid
    scale: float
    x_stride: int
    xi_stride: int

    @cached_property
    def x_axis(self) -> np.ndarray:
        return self.grid.axis[::self.x_stride]

    @cached_property
    def xi_count(self) -> int:
        return self.grid.n // self.xi_stride

    @cached_property
    def xi_axis(self) -> np.ndarray:
        """FFT 顺序，间距为 xi_stride·π/L"""
        return 2.0 * np.pi * scipy.fft.fftfreq(self.xi_count, d=self.grid.spacing)

    @cached_property
    def x_points(self) -> np.ndarray:
        d = self.grid.dim
        return np.stack(np.meshgrid(*([self.x_axis] * d), indexing='ij'), axis=-1).reshape(-1, d)

    @cached_property
    def xi_points(self) -> np.ndarray:
        d = self.grid.dim
        return np.stack(np.meshgrid(*([self.xi_axis] * d), indexing='ij'), axis=-1).reshape(-1, d)

    @property
    def x_shape(self) -> Tuple[int, ...]:
        return (len(self.x_axis),) * self.grid.dim

    @property
    def xi_shape(self) -> Tuple[int, ...]:
        return (self.xi_count,) * self.grid.dim

    @property
    def cell_volume(self) -> float:
        """相空间测度 (h_x·Δξ)^d"""
        dx = self.grid.spacing * self.x_stride
        dxi = self.grid.dual_spacing * self.xi_stride
        return (dx * dxi) ** self.grid.dim


def _check_resolved(grid: Grid, s: float) -> None:
    if not s > 0:
        raise GridError(f"尺度 s 必须为正数，当前为 {s}")
    if math.sqrt(s) < 2.0 * grid.spacing:
        raise GridError(f"尺度 s={s:g} 的 Gaussian 窗宽 √s={math.sqrt(s):.4g} 小于2个网格间距 {grid.spacing:.4g}")


def phase_lattice(grid: Grid, s: float) -> PhaseLattice:
    """按尺度 s 选择 x 与 ξ 的抽稀步长"""
    _check_resolved(grid, s)
    root = math.sqrt(s)
    x_stride = _largest_power_of_two(0.5 * root / grid.spacing, grid.n)
    xi_stride = _largest_power_of_two(grid.half_width / (4.0 * math.pi * root), grid.n)
    return PhaseLattice(grid, float(s), x_stride, xi_stride)


@dataclass
class PhaseFunction:
    """相空间函数 T_{1/s}u，values 形状为 x_shape + xi_shape"""
    lattice: PhaseLattice
    values: np.ndarray

    @property
    def scale(self) -> float:
        return self.lattice.scale

    def norm(self) -> float:
        return float(np.sqrt(np.sum(np.abs(self.values) ** 2) * self.lattice.cell_volume))

    def __add__(self, other: 'PhaseFunction') -> 'PhaseFunction':
        return PhaseFunction(self.lattice, self.values + other.values)

    def __mul__(self, scalar) -> 'PhaseFunction':
        return PhaseFunction(self.lattice, self.values * scalar)

    __rmul__ = __mul__


def _periodic_difference(grid: Grid, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    width = 2.0 * grid.half_width
    return np.mod(a - b + grid.half_width, width) - grid.half_width


def _window(grid: Grid, s: float, centers: np.ndarray) -> np.ndarray:
    """e^{-|x_a-y|²/2s}，形状 (len(centers), *grid.shape)，取最小像距离"""
    y = grid.points[None]
    diff = _periodic_difference(grid, centers.reshape((-1,) + (1,) * grid.dim + (grid.dim,)), y)
    return np.exp(-np.sum(diff ** 2, axis=-1) / (2.0 * s))


def _fold(values: np.ndarray, dim: int, stride: int, count: int) -> np.ndarray:
    """沿最后 d 个轴把长度 n 的周期序列折叠成长度 count"""
    lead = values.shape[:values.ndim - dim]
    shape = lead
    for _ in range(dim):
        shape = shape + (stride, count)
    folded = values.reshape(shape)
    axes = tuple(len(lead) + 2 * i for i in range(dim))
    return folded.sum(axis=axes)


def bargmann(field: SpectralField, s: float, lattice: Optional[PhaseLattice] = None) -> PhaseFunction:
    """T_{1/s}u 在相空间格点上的值"""
    grid = field.grid
    lattice = lattice or phase_lattice(grid, s)
    if lattice.grid != grid or lattice.scale != s:
        raise GridError("相空间格点与场的网格或尺度不一致")
    d = grid.dim
    prefactor = bargmann_constant(d) * s ** (-d / 4.0) * grid.cell_volume
    xi = lattice.xi_points
    centers = lattice.x_points
    out = np.empty((centers.shape[0], xi.shape[0]), dtype=complex)
    chunk = max(1, _CHUNK_ENTRIES // (grid.n ** d))
    values = field.values
    for start in range(0, centers.shape[0], chunk):
        block = centers[start:start + chunk]
        windowed = _window(grid, s, block) * values
        folded = _fold(windowed, d, lattice.xi_stride, lattice.xi_count)
        spectrum = scipy.fft.fftn(folded, axes=tuple(range(1, d + 1))).reshape(block.shape[0], -1)
        phase = np.exp(1j * (block + grid.half_width) @ xi.T)
        out[start:start + chunk] = prefactor * phase * spectrum
    logger.debug(f"Bargmann 变换: s={s:g}, 相空间格点 {out.shape}")
    return PhaseFunction(lattice, out.reshape(lattice.x_shape + lattice.xi_shape))


def bargmann_adjoint(phase: PhaseFunction, s: Optional[float] = None) -> SpectralField:
    """T*_{1/s}F，T*T = I"""
    lattice = phase.lattice
    if s is not None and s != lattice.scale:
        raise GridError(f"尺度不一致: 相空间函数为 s={lattice.scale:g}，请求 s={s:g}")
    grid = lattice.grid
    d = grid.dim
    scale = lattice.scale
    prefactor = bargmann_constant(d) * scale ** (-d / 4.0) * lattice.cell_volume * lattice.xi_count ** d
    xi = lattice.xi_points
    centers = lattice.x_points
    data = phase.values.reshape(centers.shape[0], xi.shape[0])
    total = np.zeros(grid.shape, dtype=complex)
    chunk = max(1, _CHUNK_ENTRIES // (grid.n ** d))
    for start in range(0, centers.shape[0], chunk):
        block = centers[start:start + chunk]
        shifted = data[start:start + chunk] * np.exp(-1j * (block + grid.half_width) @ xi.T)
        shifted = shifted.reshape((block.shape[0],) + lattice.xi_shape)
        periodic = scipy.fft.ifftn(shifted, axes=tuple(range(1, d + 1)))
        tiled = np.tile(periodic, (1,) + (lattice.xi_stride,) * d)
        total += np.sum(_window(grid, scale, block) * tiled, axis=0)
    return SpectralField(grid, values=prefactor * total)


def bargmann_point(field: SpectralField, s: float, x: Sequence[float], xi: Sequence[float]) -> complex:
    """单个相空间点处的 T_{1/s}u(x,ξ)"""
    grid = field.grid
    _check_resolved(grid, s)
    d = grid.dim
    x = np.asarray(x, dtype=float)
    xi = np.asarray(xi, dtype=float)
    diff = _periodic_difference(grid, x, grid.points)
    kernel = np.exp(-np.sum(diff ** 2, axis=-1) / (2.0 * s) + 1j * diff @ xi)
    prefactor = bargmann_constant(d) * s ** (-d / 4.0) * grid.cell_volume
    return complex(prefactor * np.sum(kernel * field.values))


def coherent_state(grid: Grid, y: Sequence[float], eta: Sequence[float], s: float) -> SpectralField:
    """Bargmann 核函数 T*_{1/s}δ_{(y,η)} = c_d s^{-d/4} e^{-|z-y|²/2s} e^{iη·(z-y)}"""
    _check_resolved(grid, s)
    y = np.asarray(y, dtype=float)
    eta = np.asarray(eta, dtype=float)
    diff = _periodic_difference(grid, grid.points, y)
    values = np.exp(-np.sum(diff ** 2, axis=-1) / (2.0 * s) + 1j * diff @ eta)
    return SpectralField(grid, values=bargmann_constant(grid.dim) * s ** (-grid.dim / 4.0) * values)


# ---------------------------------------------------------------------------
# 相空间几何

def lambda_bracket(xi: np.ndarray, a: float) -> np.ndarray:
    """⟨ξ⟩_a = √(a^{-2} + |ξ|²)"""
    xi = np.asarray(xi, dtype=float)
    return np.sqrt(a ** -2 + np.sum(xi ** 2, axis=-1))


def kg_jacobian_matrix(xi: Sequence[float], a: float) -> Tuple[np.ndarray, np.ndarray]:
    """Φ_KG(ξ) = ⟨ξ⟩_a^{-3}(⟨ξ⟩_a² I - ξ⊗ξ) 及其升序特征值"""
    if not a > 0:
        raise SymbolError(f"尺度参数 a 必须为正数，当前为 {a}")
    xi = np.asarray(xi, dtype=float)
    bracket = lambda_bracket(xi, a)
    d = xi.shape[-1]
    matrix = (bracket ** 2 * np.eye(d) - np.outer(xi, xi)) / bracket ** 3
    return matrix, np.linalg.eigvalsh(matrix)


def kg_jacobian_eigenvalues(xi: Sequence[float], a: float) -> np.ndarray:
    """闭式特征值：⟨ξ⟩_a^{-1}（d-1 重）与 a^{-2}⟨ξ⟩_a^{-3}，升序"""
    if not a > 0:
        raise SymbolError(f"尺度参数 a 必须为正数，当前为 {a}")
    xi = np.asarray(xi, dtype=float)
    bracket = float(lambda_bracket(xi, a))
    values = [1.0 / bracket] * (xi.shape[-1] - 1) + [a ** -2 / bracket ** 3]
    return np.sort(np.array(values))


def wave_jacobian_matrix(xi: Sequence[float]) -> Tuple[np.ndarray, int]:
    """Φ_w(ξ) = |ξ|²I - ξ⊗ξ 及其秩"""
    xi = np.asarray(xi, dtype=float)
    size = float(np.dot(xi, xi))
    matrix = size * np.eye(xi.shape[-1]) - np.outer(xi, xi)
    rank = int(np.linalg.matrix_rank(matrix, tol=1e-12 * max(1.0, size)))
    return matrix, rank


def phase_distance(p: Tuple[Sequence[float], Sequence[float]], q: Tuple[Sequence[float], Sequence[float]],
                   t: float) -> float:
    """d_t((x,ξ),(y,η))² = t^{-1}|x-y|² + t|ξ-η|²"""
    if not t > 0:
        raise MeasurementError(f"时间 t 必须为正数，当前为 {t}")
    dx = np.asarray(p[0], dtype=float) - np.asarray(q[0], dtype=float)
    dxi = np.asarray(p[1], dtype=float) - np.asarray(q[1], dtype=float)
    return float(math.sqrt(np.dot(dx, dx) / t + t * np.dot(dxi, dxi)))


@dataclass(frozen=True)
class DistortedNorm:
    """‖x‖_δ = √(x₁²+…+x_{d-1}²+δ²x_d²)"""
    delta: float = 1.0

    def __call__(self, x: Sequence[float]) -> float:
        x = np.asarray(x, dtype=float)
        return float(math.sqrt(np.sum(x[:-1] ** 2) + self.delta ** 2 * x[-1] ** 2))

    def along(self, v: Sequence[float], direction: Sequence[float]) -> float:
        """以 direction 为最后一个坐标轴时的畸变范数"""
        v = np.asarray(v, dtype=float)
        unit = np.asarray(direction, dtype=float)
        size = np.linalg.norm(unit)
        if size == 0:
            return float(np.linalg.norm(v))
        unit = unit / size
        parallel = float(np.dot(v, unit))
        transverse = v - parallel * unit
        return float(math.sqrt(np.dot(transverse, transverse) + self.delta ** 2 * parallel ** 2))


# ---------------------------------------------------------------------------
# 核衰减探测

@dataclass
class ProbeTable:
    """核探测结果，每行为 (t, s, x, ξ, measured, bound_N, ratio)"""
    order: float
    rows: List[Dict[str, object]]

    @property
    def max_ratio(self) -> float:
        return max((row['ratio'] for row in self.rows), default=0.0)

    @property
    def all_finite(self) -> bool:
        return all(np.isfinite(row['ratio']) for row in self.rows)


def flat_flow_map(t: float, s: float, lam: float = 1.0) -> Callable:
    """平直 Hamilton 流 (y,η) ↦ (y + (t-s)η/⟨η⟩_λ, η)"""
    def _map(y, eta):
        y = np.asarray(y, dtype=float)
        eta = np.asarray(eta, dtype=float)
        return y + (t - s) * eta / lambda_bracket(eta, lam), eta
    return _map


def kernel_decay_probe(evolution: Callable[[SpectralField], SpectralField], grid: Grid, t: float, s: float,
                       source: Tuple[Sequence[float], Sequence[float]],
                       probes: Sequence[Tuple[Sequence[float], Sequence[float]]], order: float = 2.0,
                       lam: float = 1.0, flow_map: Optional[Callable] = None,
                       damping: Optional[Sequence[float]] = None) -> ProbeTable:
    """对尺度 s 的相干态施加演化，再在尺度 t 下做 FBI 变换，与核的逐点上界比较

    上界 (t/s)^{-d/4}(1 + ΔΨ² + t^{-1}‖x-x_t‖_λ² + s‖ξ-ξ_t‖_{1/λ}²)^{-N}，(x_t,ξ_t) 为源点的流像。
    """
    if not (t > 0 and s > 0):
        raise MeasurementError(f"时间必须为正数: t={t}, s={s}")
    _check_resolved(grid, t)
    state = coherent_state(grid, source[0], source[1], s)
    evolved = evolution(state)
    flow_map = flow_map or flat_flow_map(t, s, lam)
    x_t, xi_t = flow_map(source[0], source[1])
    norm_x = DistortedNorm(lam)
    norm_xi = DistortedNorm(1.0 / lam)
    d = grid.dim
    rows = []
    for index, (x, xi) in enumerate(probes):
        x = np.asarray(x, dtype=float)
        xi = np.asarray(xi, dtype=float)
        measured = abs(bargmann_point(evolved, t, x, xi))
        delta_psi = 0.0 if damping is None else float(damping[index])
        bracket = 1.0 + delta_psi ** 2 + norm_x.along(x - x_t, xi_t) ** 2 / t \
            + s * norm_xi.along(xi - xi_t, xi_t) ** 2
        bound = (t / s) ** (-d / 4.0) * bracket ** (-order)
        rows.append({'t': t, 's': s, 'x': tuple(float(v) for v in x), 'xi': tuple(float(v) for v in xi),
                     'measured': measured, 'bound': bound, 'ratio': measured / bound})
    table = ProbeTable(order, rows)
    logger.debug(f"核探测: t={t:g}, s={s:g}, 最大比值 {table.max_ratio:.4g}")
    return table
