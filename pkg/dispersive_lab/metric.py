"""弱渐近平坦度规、衰减半范数、磨光以及旋量几何（标架、伽马矩阵、自旋联络）

约定：g^{ij} = δ^{ij} + ε h^{ij}(t,x)，g_00 = -1，g^{0j} = 0。
多重指标 α = (α_0, α_1, ..., α_d)，α_0 为时间导数阶数。
"""
import itertools
import math
import threading
from dataclasses import dataclass
from functools import cached_property
from typing import Any, Callable, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
import sympy
from loguru import logger

from dispersive_lab.exceptions import GridError, MetricError
from dispersive_lab.grid import Grid, littlewood_paley_multiplier, radial_cutoff, resolvable_band

MultiIndex = Tuple[int, ...]

# Dirac 表示下的平直伽马矩阵 γ̃^0..γ̃^3，满足 {γ̃^a, γ̃^b} = -2 m^{ab}，m = diag(-1,1,1,1)
_PAULI = (
    np.array([[0, 1], [1, 0]], dtype=complex),
    np.array([[0, -1j], [1j, 0]], dtype=complex),
    np.array([[1, 0], [0, -1]], dtype=complex),
)
FLAT_GAMMAS = np.zeros((4, 4, 4), dtype=complex)
FLAT_GAMMAS[0] = np.diag([1, 1, -1, -1]).astype(complex)
for _j, _sigma in enumerate(_PAULI, start=1):
    FLAT_GAMMAS[_j, :2, 2:] = _sigma
    FLAT_GAMMAS[_j, 2:, :2] = -_sigma
MINKOWSKI = np.diag([-1.0, 1.0, 1.0, 1.0])
_GAMMA_PAIRS = np.einsum('aij,bjk->abik', FLAT_GAMMAS, FLAT_GAMMAS)


def order_limit(dim: int) -> int:
    """度规导数的最高阶数 [d/2]+3"""
    return dim // 2 + 3


def multi_indices(dim: int, order: int, max_time: int = 2) -> Iterator[MultiIndex]:
    """枚举 |α| = order 且 α_0 ≤ max_time 的多重指标"""
    for alpha in itertools.product(range(order + 1), repeat=dim + 1):
        if sum(alpha) == order and alpha[0] <= max_time:
            yield alpha


def _check_alpha(alpha: Sequence[int], dim: int) -> MultiIndex:
    alpha = tuple(int(a) for a in alpha)
    if len(alpha) != dim + 1 or any(a < 0 for a in alpha):
        raise MetricError(f"多重指标 {alpha} 的长度应为 {dim + 1} 且分量非负")
    if sum(alpha) > order_limit(dim) or alpha[0] > 2:
        raise MetricError(f"多重指标 {alpha} 超出允许范围: |α| ≤ {order_limit(dim)}, α_0 ≤ 2")
    return alpha


class MetricProfile:
    """扰动 h^{ij}(t,x) 的接口"""
    dim: int = 0
    max_order: Optional[int] = None
    static: bool = True
    is_zero: bool = False

    def derivative(self, alpha: MultiIndex, t, x: np.ndarray) -> np.ndarray:
        """返回 ∂^α h^{ij}，形状 (..., d, d)"""
        raise NotImplementedError

    def _check_capability(self, alpha: MultiIndex) -> None:
        if self.max_order is not None and sum(alpha) > self.max_order:
            raise MetricError(f"剖面只提供到 {self.max_order} 阶导数，请求了 {alpha}")


class SymbolicProfile(MetricProfile):
    """sympy 表达式给出的剖面，导数为闭式并按多重指标缓存"""

    def __init__(self, matrix, dim: int, max_order: Optional[int] = None):
        self.dim = dim
        self.t = sympy.Symbol('t', real=True)
        self.xs = sympy.symbols(f'x1:{dim + 1}', real=True)
        matrix = sympy.Matrix(matrix)
        if matrix.shape != (dim, dim):
            raise MetricError(f"剖面矩阵形状应为 ({dim}, {dim})，当前为 {matrix.shape}")
        for i in range(dim):
            for j in range(i + 1, dim):
                if sympy.simplify(matrix[i, j] - matrix[j, i]) != 0:
                    raise MetricError("剖面矩阵必须对称")
        self.matrix = matrix
        self.max_order = max_order
        self.static = all(not entry.has(self.t) for entry in matrix)
        self.is_zero = all(entry == 0 for entry in matrix)
        self._compiled: Dict[MultiIndex, Callable] = {}
        self._lock = threading.Lock()

    @property
    def variables(self) -> Tuple[sympy.Symbol, ...]:
        return (self.t,) + tuple(self.xs)

    def expression(self, alpha: Optional[MultiIndex] = None) -> sympy.Matrix:
        """∂^α h 的符号表达式"""
        if alpha is None or not any(alpha):
            return self.matrix
        spec = []
        for var, count in zip(self.variables, alpha):
            spec.extend([var] * count)
        return self.matrix.applyfunc(lambda entry: sympy.diff(entry, *spec))

    def _function(self, alpha: MultiIndex) -> Callable:
        with self._lock:
            func = self._compiled.get(alpha)
            if func is None:
                expr = self.expression(alpha)
                upper = [expr[i, j] for i in range(self.dim) for j in range(i, self.dim)]
                func = sympy.lambdify(self.variables, upper, modules='numpy')
                self._compiled[alpha] = func
        return func

    def derivative(self, alpha: MultiIndex, t, x: np.ndarray) -> np.ndarray:
        self._check_capability(alpha)
        x = np.asarray(x, dtype=float)
        batch = np.broadcast(np.asarray(t, dtype=float), x[..., 0]).shape
        out = np.zeros(batch + (self.dim, self.dim))
        if self.is_zero:
            return out
        entries = self._function(alpha)(t, *[x[..., i] for i in range(self.dim)])
        index = 0
        for i in range(self.dim):
            for j in range(i, self.dim):
                value = np.broadcast_to(np.asarray(entries[index], dtype=float), batch)
                out[..., i, j] = value
                out[..., j, i] = value
                index += 1
        return out


@dataclass(frozen=True)
class MetricSpec:
    """度规规格，构造后不可变"""
    dim: int
    amplitude: float
    profile: MetricProfile
    name: str = 'custom'
    params: Tuple[Tuple[str, Any], ...] = ()

    def __hash__(self):
        return hash((self.dim, self.amplitude, self.name, self.params, id(self.profile)))

    def __eq__(self, other):
        return (isinstance(other, MetricSpec) and self.dim == other.dim
                and self.amplitude == other.amplitude and self.name == other.name
                and self.params == other.params and self.profile is other.profile)

    @property
    def is_flat(self) -> bool:
        return self.amplitude == 0 or self.profile.is_zero

    @property
    def static(self) -> bool:
        return self.is_flat or self.profile.static

    @property
    def param_dict(self) -> Dict[str, Any]:
        return dict(self.params)

    def with_amplitude(self, amplitude: float) -> 'MetricSpec':
        return MetricSpec(self.dim, float(amplitude), self.profile, self.name, self.params)


def _radius_squared(xs) -> sympy.Expr:
    return sum(x ** 2 for x in xs)


def _isotropic(dim: int, factory: Callable[[sympy.Expr, Tuple], sympy.Expr]) -> SymbolicProfile:
    probe = SymbolicProfile(sympy.zeros(dim, dim), dim)
    scalar = factory(_radius_squared(probe.xs), probe.xs, probe.t)
    return SymbolicProfile(scalar * sympy.eye(dim), dim)


def _random_matrix(dim: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((dim, dim))
    a = 0.5 * (a + a.T)
    return a / np.max(np.abs(a))


def _build_profile(name: str, dim: int, params: Dict[str, Any]) -> SymbolicProfile:
    rational = sympy.nsimplify
    if name == 'flat':
        return SymbolicProfile(sympy.zeros(dim, dim), dim)
    if name == 'radial_bump':
        width = rational(params.get('width', 1.0))
        return _isotropic(dim, lambda r2, xs, t: sympy.exp(-r2 / width ** 2))
    if name in ('inverse_power', 'inverse_square'):
        power = rational(2 if name == 'inverse_square' else params.get('power', 2.0))
        scale = rational(params.get('scale', 1.0))
        return _isotropic(dim, lambda r2, xs, t: (1 + r2 / scale ** 2) ** (-power / 2))
    if name == 'growing':
        return _isotropic(dim, lambda r2, xs, t: sympy.sqrt(1 + r2))
    if name == 'dyadic_bump':
        l0 = int(params.get('l0', 0))
        width = rational(params.get('width', 8.0))
        axis = int(params.get('axis', 0))
        return _isotropic(dim, lambda r2, xs, t: sympy.cos(sympy.Integer(2) ** l0 * xs[axis])
                          * sympy.exp(-r2 / (2 * width ** 2)))
    if name == 'random_bump':
        seed = int(params.get('seed', 0))
        width = rational(params.get('width', 2.0))
        omega = rational(params.get('frequency', 0.5))
        coeffs = _random_matrix(dim, seed)
        center = np.random.default_rng(seed + 1).uniform(-1.0, 1.0, dim)
        probe = SymbolicProfile(sympy.zeros(dim, dim), dim)
        shifted = sum((x - rational(round(float(c), 6))) ** 2 for x, c in zip(probe.xs, center))
        envelope = sympy.exp(-shifted / width ** 2) * (1 + sympy.sin(omega * probe.t) / 2)
        matrix = sympy.Matrix(dim, dim, lambda i, j: rational(round(float(coeffs[i, j]), 6)) * envelope)
        return SymbolicProfile(matrix, dim)
    raise MetricError(f"未知度规剖面: {name}，可用: {', '.join(PROFILE_NAMES)}")


PROFILE_NAMES = ('flat', 'radial_bump', 'inverse_power', 'inverse_square', 'growing',
                 'dyadic_bump', 'random_bump')


def _freeze(value):
    if isinstance(value, list):
        return tuple(_freeze(v) for v in value)
    if isinstance(value, dict):
        return tuple(sorted((k, _freeze(v)) for k, v in value.items()))
    return value


def make_metric(name: str, dim: int, amplitude: float = 0.0, **params) -> MetricSpec:
    """按名称构造内置度规"""
    if amplitude < 0:
        raise MetricError(f"振幅 ε 必须非负，当前为 {amplitude}")
    if dim not in (1, 2, 3):
        raise MetricError(f"维数必须为1、2或3，当前为 {dim}")
    profile = _build_profile(name, dim, params)
    frozen = tuple(sorted((k, _freeze(v)) for k, v in params.items()))
    logger.debug(f"构造度规: {name}, d={dim}, ε={amplitude}, 参数={params}")
    return MetricSpec(dim, float(amplitude), profile, name, frozen)


def metric_from_config(section: Dict[str, Any], dim: int) -> MetricSpec:
    return make_metric(section.get('name', 'flat'), dim, float(section.get('amplitude', 0.0)),
                       **dict(section.get('params') or {}))


def eval_metric(spec: MetricSpec, t, x, alpha: Optional[Sequence[int]] = None) -> np.ndarray:
    """∂^α g^{ij}(t,x)，形状 (..., d, d)"""
    alpha = _check_alpha(alpha if alpha is not None else (0,) * (spec.dim + 1), spec.dim)
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != spec.dim:
        raise MetricError(f"点的最后一维应为 {spec.dim}，当前形状 {x.shape}")
    spec.profile._check_capability(alpha)
    batch = np.broadcast(np.asarray(t, dtype=float), x[..., 0]).shape
    if spec.is_flat:
        out = np.zeros(batch + (spec.dim, spec.dim))
    else:
        out = spec.amplitude * spec.profile.derivative(alpha, t, x)
    if not any(alpha):
        out = out + np.eye(spec.dim)
    return out


def eval_metric_on_grid(spec: MetricSpec, t: float, grid: Grid,
                        alpha: Optional[Sequence[int]] = None) -> np.ndarray:
    return eval_metric(spec, t, grid.points, alpha)


def lower_metric(spec: MetricSpec, t, x) -> np.ndarray:
    """g_{ij} = (g^{ij})^{-1}"""
    return np.linalg.inv(eval_metric(spec, t, x))


# ---------------------------------------------------------------------------
# 衰减半范数

@dataclass
class SeminormReport:
    """各二进壳层上的 C_{α,k}、C'_{α,k} 以及单位球内的 C_α"""
    shells: List[int]
    decay: Dict[MultiIndex, np.ndarray]
    higher: Dict[MultiIndex, np.ndarray]
    regular: Dict[MultiIndex, float]
    amplitude: float
    budget: float
    higher_budget: float
    samples: int

    @property
    def decay_sums(self) -> Dict[MultiIndex, float]:
        return {alpha: float(np.sum(values)) for alpha, values in self.decay.items()}

    @property
    def higher_sums(self) -> Dict[MultiIndex, float]:
        return {alpha: float(np.sum(values)) for alpha, values in self.higher.items()}

    @staticmethod
    def _summable(values: np.ndarray, budget: float) -> bool:
        total = float(np.sum(values))
        return total <= budget and float(values[-1]) <= 0.1 * total

    @property
    def decay_ok(self) -> bool:
        return all(self._summable(v, self.budget) for v in self.decay.values())

    @property
    def higher_ok(self) -> bool:
        return all(self._summable(v, self.higher_budget) for v in self.higher.values())

    @property
    def regular_ok(self) -> bool:
        return all(math.isfinite(v) for v in self.regular.values())

    @property
    def passed(self) -> bool:
        return self.decay_ok and self.higher_ok and self.regular_ok

    def rows(self) -> List[Dict[str, Any]]:
        """展开为表格行，便于写入 CSV"""
        rows = []
        for kind, table in (('C', self.decay), ("C'", self.higher)):
            for alpha, values in table.items():
                for k, value in zip(self.shells, values):
                    rows.append({'kind': kind, 'alpha': ''.join(map(str, alpha)), 'k': k, 'value': float(value)})
        for alpha, value in self.regular.items():
            rows.append({'kind': 'C_ball', 'alpha': ''.join(map(str, alpha)), 'k': '', 'value': float(value)})
        return rows


def _shell_points(dim: int, r_lo: float, r_hi: float, t_range: Tuple[float, float],
                  draws: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """把 [0,1) 均匀样本映射为壳层中的 (t, x)"""
    t = t_range[0] + (t_range[1] - t_range[0]) * draws[:, 0]
    r = r_lo + (r_hi - r_lo) * draws[:, 1]
    if dim == 1:
        direction = np.where(draws[:, 2] < 0.5, -1.0, 1.0)[:, None]
    elif dim == 2:
        phi = 2.0 * np.pi * draws[:, 2]
        direction = np.stack([np.cos(phi), np.sin(phi)], axis=-1)
    else:
        z = 2.0 * draws[:, 2] - 1.0
        phi = 2.0 * np.pi * draws[:, 3]
        rho = np.sqrt(np.clip(1.0 - z ** 2, 0.0, None))
        direction = np.stack([rho * np.cos(phi), rho * np.sin(phi), z], axis=-1)
    return t, r[:, None] * direction


def flatness_seminorms(spec: MetricSpec, shells: Tuple[int, int] = (0, 8), samples: int = 200,
                       seed: int = 0, t_range: Tuple[float, float] = (0.0, 1.0),
                       budget_factor: float = 4.0, higher_budget_factor: float = 16.0) -> SeminormReport:
    """在二进壳层上采样 C_{α,k}、C'_{α,k} 与 C_α

    壳层 0 取为球 |x| < 2，k ≥ 1 取为 2^{k-1} < |x| < 2^{k+1}。
    样本对相同 seed 是前缀一致的，加密采样只会使上确界增大。
    """
    k_lo, k_hi = shells
    shell_list = list(range(max(0, k_lo), k_hi + 1))
    columns = 3 if spec.dim < 3 else 4
    # 每个壳层独立的随机流，保证不同样本数之间前缀一致
    draws = [np.random.default_rng([seed, index]).random((samples, columns))
             for index in range(len(shell_list) + 1)]

    def _sup(alpha: MultiIndex, t: np.ndarray, x: np.ndarray, weight_power: float, subtract: bool) -> float:
        values = eval_metric(spec, t, x, alpha)
        if subtract and not any(alpha):
            values = values - np.eye(spec.dim)
        r = np.linalg.norm(x, axis=-1)
        weighted = r ** weight_power * np.max(np.abs(values), axis=(-2, -1))
        return float(np.max(weighted)) if weighted.size else 0.0

    limit = order_limit(spec.dim)
    low_alphas = [a for order in range(0, 3) for a in multi_indices(spec.dim, order)]
    high_alphas = [a for order in range(3, limit + 1) for a in multi_indices(spec.dim, order)]

    decay = {alpha: np.zeros(len(shell_list)) for alpha in low_alphas}
    higher = {alpha: np.zeros(len(shell_list)) for alpha in high_alphas}
    for index, k in enumerate(shell_list):
        r_lo, r_hi = (0.0, 2.0) if k == 0 else (2.0 ** (k - 1), 2.0 ** (k + 1))
        t, x = _shell_points(spec.dim, r_lo, r_hi, t_range, draws[index])
        for alpha in low_alphas:
            decay[alpha][index] = _sup(alpha, t, x, sum(alpha), True)
        for alpha in high_alphas:
            higher[alpha][index] = _sup(alpha, t, x, (sum(alpha) + 1) / 2.0, False)

    t, x = _shell_points(spec.dim, 0.0, 1.0, t_range, draws[-1])
    regular = {alpha: _sup(alpha, t, x, sum(alpha), True) for alpha in low_alphas + high_alphas}

    report = SeminormReport(shell_list, decay, higher, regular, spec.amplitude,
                            budget_factor * spec.amplitude,
                            higher_budget_factor * spec.amplitude, samples)
    logger.info(f"衰减半范数: 度规={spec.name}, ε={spec.amplitude}, 通过={report.passed}")
    return report


# ---------------------------------------------------------------------------
# 磨光度规 g_(k)

class MollifiedProfile(MetricProfile):
    """Σ_{l<k-4} S_{<l}χ_{<k-2l} S_l h，在网格上计算，离网格点用三角插值求值"""

    def __init__(self, base: MetricSpec, grid: Grid, k: int):
        self.base = base
        self.grid = grid
        self.k = k
        self.dim = base.dim
        self.static = base.profile.static
        self.is_zero = base.profile.is_zero
        self.max_order = None
        self._lock = threading.Lock()
        self._cache: Dict[Tuple[float, int], np.ndarray] = {}

    def _truncated_sum(self, values: np.ndarray) -> np.ndarray:
        grid = self.grid
        j_lo, _ = resolvable_band(grid)
        coefficients = grid.forward(values)
        total = np.zeros_like(values)
        for l in range(j_lo, self.k - 4):
            band = grid.inverse(coefficients * littlewood_paley_multiplier(grid, l, floor=(l == j_lo))).real
            chi = radial_cutoff(grid.radius, self.k - 2 * l)
            low = littlewood_paley_multiplier(grid, l - 1, floor=True)
            chi = grid.inverse(grid.forward(chi) * low).real
            total += chi * band
        return total

    def coefficients(self, t: float, alpha0: int = 0) -> np.ndarray:
        """∂_t^{α0} 磨光剖面的傅里叶系数，形状 (d, d, *grid.shape)"""
        key = (float(t) if not self.static else 0.0, int(alpha0))
        with self._lock:
            cached = self._cache.get(key)
        if cached is not None:
            return cached
        alpha = (alpha0,) + (0,) * self.dim
        if self.is_zero or (self.static and alpha0 > 0):
            values = np.zeros((self.dim, self.dim) + self.grid.shape)
        else:
            raw = self.base.profile.derivative(alpha, key[0], self.grid.points)
            values = self._truncated_sum(np.moveaxis(raw, (-2, -1), (0, 1)))
        result = self.grid.forward(values)
        with self._lock:
            self._cache[key] = result
        return result

    def _interpolate(self, coeffs: np.ndarray, x: np.ndarray) -> np.ndarray:
        grid = self.grid
        flat_x = x.reshape(-1, self.dim)
        xi = grid.xi.reshape(-1, self.dim)
        c = coeffs.reshape(self.dim, self.dim, -1)
        scale = (2.0 * np.pi) ** (-self.dim / 2.0) * grid.dual_cell_volume
        out = np.empty((flat_x.shape[0], self.dim, self.dim))
        chunk = max(1, (1 << 22) // max(1, xi.shape[0]))
        for start in range(0, flat_x.shape[0], chunk):
            phase = np.exp(1j * flat_x[start:start + chunk] @ xi.T)
            out[start:start + chunk] = scale * np.einsum('pk,ijk->pij', phase, c).real
        return out.reshape(x.shape[:-1] + (self.dim, self.dim))

    def derivative(self, alpha: MultiIndex, t, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if np.ndim(t) != 0:
            raise MetricError("磨光度规只支持标量时间")
        coeffs = self.coefficients(t, alpha[0])
        for axis, count in enumerate(alpha[1:]):
            if count:
                coeffs = coeffs * (1j * self.grid.wavenumbers[axis]) ** count
        if x.shape == self.grid.points.shape and np.array_equal(x, self.grid.points):
            return np.moveaxis(self.grid.inverse(coeffs).real, (0, 1), (-2, -1))
        return self._interpolate(coeffs, x)


def mollify_metric(spec: MetricSpec, k: int, grid: Grid) -> MetricSpec:
    """构造磨光度规 g_(k) = δ + Σ_{l<k-4} S_{<l}χ_{<k-2l}S_l(g - δ)"""
    if grid.dim != spec.dim:
        raise GridError(f"网格维数 {grid.dim} 与度规维数 {spec.dim} 不一致")
    if 2.0 ** k >= grid.nyquist:
        raise GridError(f"磨光指标 k={k}: 2^k 不低于 Nyquist 频率 {grid.nyquist:.4g}")
    profile = MollifiedProfile(spec, grid, k)
    logger.debug(f"磨光度规: {spec.name}, k={k}")
    return MetricSpec(spec.dim, spec.amplitude, profile, f"{spec.name}_({k})", spec.params + (('mollify_k', k),))


def mollification_constants(spec_k: MetricSpec, k: int, envelope: Callable[[np.ndarray], np.ndarray],
                            points: np.ndarray, t: float = 0.0, max_order: int = 3) -> Dict[MultiIndex, float]:
    """两条磨光估计中的常数 c_α 在采样点上的最小可行值

    |α| ≤ 2 用 (1+2^k|x|)^{-|α|}，|α| ≥ 2 用 (1+2^k|x|)^{-1-|α|/2}；|α| = 2 取两者中较大的常数。
    """
    points = np.asarray(points, dtype=float)
    r = np.linalg.norm(points, axis=-1)
    eps_r = np.maximum(np.asarray(envelope(np.maximum(r, 2.0 ** -k)), dtype=float), 1e-300)
    constants: Dict[MultiIndex, float] = {}
    for order in range(0, max_order + 1):
        for alpha in multi_indices(spec_k.dim, order, max_time=0):
            values = eval_metric(spec_k, t, points, alpha)
            if order == 0:
                values = values - np.eye(spec_k.dim)
            size = np.max(np.abs(values), axis=(-2, -1))
            candidates = []
            if order <= 2:
                candidates.append(eps_r * 2.0 ** (order * k) * (1 + 2.0 ** k * r) ** (-order))
            if order >= 2:
                candidates.append(eps_r * 2.0 ** (order * k) * (1 + 2.0 ** k * r) ** (-1 - order / 2.0))
            constants[alpha] = max(float(np.max(size / bound)) for bound in candidates)
    return constants


# ---------------------------------------------------------------------------
# 旋量几何

def _padded_jet(spec: MetricSpec, t, x) -> Tuple[np.ndarray, np.ndarray]:
    """补齐到三维的 g^{ij} 与 ∂_μ g^{ij}，形状 (...,3,3) 和 (...,4,3,3)"""
    x = np.asarray(x, dtype=float)
    d = spec.dim
    batch = x.shape[:-1]
    g = np.broadcast_to(np.eye(3), batch + (3, 3)).copy()
    dg = np.zeros(batch + (4, 3, 3))
    g[..., :d, :d] = eval_metric(spec, t, x)
    if not spec.is_flat:
        for mu in range(d + 1):
            if mu == 0 and spec.static:
                continue
            alpha = tuple(1 if i == mu else 0 for i in range(d + 1))
            dg[..., mu, :d, :d] = eval_metric(spec, t, x, alpha)
    return g, dg


def _principal_roots(g_upper: np.ndarray) -> Tuple[np.ndarray, ...]:
    """由 g^{ij} 的谱分解得到 g_{ij}、B = sqrt(g_{ij})、B^{-1} 与特征基"""
    w, v = np.linalg.eigh(g_upper)
    if np.any(w <= 0) or not np.all(np.isfinite(w)):
        raise MetricError(f"空间度规不正定，最小特征值 {float(np.min(w)):.6g}")
    vt = np.swapaxes(v, -1, -2)
    lower = (v * (1.0 / w)[..., None, :]) @ vt
    root = (v * (w ** -0.5)[..., None, :]) @ vt
    root_inv = (v * (w ** 0.5)[..., None, :]) @ vt
    return lower, root, root_inv, w ** -0.5, v


@dataclass(frozen=True)
class SpinFrame:
    """一点（或一批点）处的标架 b^α_μ 及其导出量"""
    vierbein: np.ndarray
    inverse_vierbein: np.ndarray
    metric_lower: np.ndarray
    metric_upper: np.ndarray

    @cached_property
    def gammas(self) -> np.ndarray:
        return gamma_matrices(self)

    @cached_property
    def lower_gammas(self) -> np.ndarray:
        """γ_ν = e_{dν} γ̃^d，e_{dν} = m_{dc} b^c_ν"""
        frame = MINKOWSKI @ self.vierbein
        return np.einsum('...dn,dij->...nij', frame, FLAT_GAMMAS)


def _frame_parts(spec: MetricSpec, t, x):
    g_up, dg_up = _padded_jet(spec, t, x)
    lower, root, root_inv, sqrt_s, v = _principal_roots(g_up)
    batch = g_up.shape[:-2]
    b = np.zeros(batch + (4, 4))
    b[..., 0, 0] = 1.0
    b[..., 1:, 1:] = root
    e_inv = np.zeros(batch + (4, 4))
    e_inv[..., 0, 0] = 1.0
    e_inv[..., 1:, 1:] = root_inv
    g4_lower = np.zeros(batch + (4, 4))
    g4_lower[..., 0, 0] = -1.0
    g4_lower[..., 1:, 1:] = lower
    g4_upper = np.zeros(batch + (4, 4))
    g4_upper[..., 0, 0] = -1.0
    g4_upper[..., 1:, 1:] = g_up
    frame = SpinFrame(b, e_inv, g4_lower, g4_upper)
    return frame, lower, dg_up, sqrt_s, v


def vierbein(spec: MetricSpec, t, x) -> SpinFrame:
    """对称主平方根标架：b^0_0 = 1，空间块为 sqrt([g_{ij}])"""
    return _frame_parts(spec, t, x)[0]


def gamma_matrices(frame: SpinFrame) -> np.ndarray:
    """弯曲伽马矩阵 γ^μ = E^μ_a γ̃^a，形状 (..., 4, 4, 4)"""
    return np.einsum('...ma,aij->...mij', frame.inverse_vierbein, FLAT_GAMMAS)


def clifford_residual(frame: SpinFrame) -> float:
    """max |γ^μγ^ν + γ^νγ^μ + 2g^{μν}I|"""
    gammas = frame.gammas
    products = np.einsum('...mij,...njk->...mnik', gammas, gammas)
    anti = products + np.swapaxes(products, -3, -4)
    target = -2.0 * frame.metric_upper[..., None, None] * np.eye(4)
    return float(np.max(np.abs(anti - target)))


def vierbein_residual(frame: SpinFrame) -> float:
    """max |m_{αβ} b^α_μ b^β_ν - g_{μν}|"""
    rebuilt = np.swapaxes(frame.vierbein, -1, -2) @ MINKOWSKI @ frame.vierbein
    return float(np.max(np.abs(rebuilt - frame.metric_lower)))


def _lower_derivatives(lower: np.ndarray, dg_up: np.ndarray) -> np.ndarray:
    """∂_μ g_{ij} = -g_{ik} ∂_μ g^{kl} g_{lj}"""
    return -np.einsum('...ik,...mkl,...lj->...mij', lower, dg_up, lower)


def christoffel_symbols(spec: MetricSpec, t, x) -> np.ndarray:
    """(1+3) 维 Christoffel 符号 Γ^λ_{μν}，形状 (..., 4, 4, 4)"""
    frame, lower, dg_up, _, _ = _frame_parts(spec, t, x)
    return _christoffel(frame, _lower_derivatives(lower, dg_up))


def _christoffel(frame: SpinFrame, dg_lower: np.ndarray) -> np.ndarray:
    batch = dg_lower.shape[:-3]
    d4 = np.zeros(batch + (4, 4, 4))
    d4[..., :, 1:, 1:] = dg_lower
    first = 0.5 * (np.einsum('...msn->...smn', d4) + np.einsum('...nsm->...smn', d4) - d4)
    return np.einsum('...ls,...smn->...lmn', frame.metric_upper, first)


def _root_derivatives(dg_lower: np.ndarray, sqrt_s: np.ndarray, v: np.ndarray) -> np.ndarray:
    """由 B dB + dB B = dG 解出 ∂_μ B"""
    vt = np.swapaxes(v, -1, -2)
    rotated = np.einsum('...ki,...mkl,...lj->...mij', v, dg_lower, v)
    denom = sqrt_s[..., None, :, None] + sqrt_s[..., None, None, :]
    return np.einsum('...ik,...mkl,...lj->...mij', v, rotated / denom, vt)


def spin_connection(spec: MetricSpec, t, x) -> np.ndarray:
    """自旋联络 Γ_μ = ¼ ω_{μab} γ̃^a γ̃^b，ω_{μab} = E^ν_a (∂_μ e_{bν} - Γ^λ_{μν} e_{bλ})"""
    x = np.asarray(x, dtype=float)
    batch = x.shape[:-1]
    if spec.is_flat:
        return np.zeros(batch + (4, 4, 4), dtype=complex)
    frame, lower, dg_up, sqrt_s, v = _frame_parts(spec, t, x)
    dg_lower = _lower_derivatives(lower, dg_up)
    christoffel = _christoffel(frame, dg_lower)
    db = np.zeros(batch + (4, 4, 4))
    db[..., 1:, 1:] = _root_derivatives(dg_lower, sqrt_s, v)
    e = MINKOWSKI @ frame.vierbein
    de = np.einsum('bc,...mcn->...mbn', MINKOWSKI, db)
    covariant = de - np.einsum('...lmn,...bl->...mbn', christoffel, e)
    omega = np.einsum('...na,...mbn->...mab', frame.inverse_vierbein, covariant)
    return 0.25 * np.einsum('...mab,abik->...mik', omega, _GAMMA_PAIRS)


def affine_spin_residual(spec: MetricSpec, t: float, x, step: float = 1e-4) -> float:
    """max |∂_μγ_ν - Γ^λ_{μν}γ_λ - Γ_μγ_ν + γ_νΓ_μ|，∂_μγ_ν 用中心差分"""
    x = np.asarray(x, dtype=float)
    frame = vierbein(spec, t, x)
    gamma_low = frame.lower_gammas
    connection = spin_connection(spec, t, x)
    christoffel = christoffel_symbols(spec, t, x)
    dgamma = np.zeros(x.shape[:-1] + (4, 4, 4, 4), dtype=complex)
    for mu in range(spec.dim + 1):
        if mu == 0:
            plus = vierbein(spec, t + step, x).lower_gammas
            minus = vierbein(spec, t - step, x).lower_gammas
        else:
            shift = np.zeros(spec.dim)
            shift[mu - 1] = step
            plus = vierbein(spec, t, x + shift).lower_gammas
            minus = vierbein(spec, t, x - shift).lower_gammas
        dgamma[..., mu, :, :, :] = (plus - minus) / (2.0 * step)
    transport = np.einsum('...lmn,...lij->...mnij', christoffel, gamma_low)
    left = np.einsum('...mij,...njk->...mnik', connection, gamma_low)
    right = np.einsum('...nij,...mjk->...mnik', gamma_low, connection)
    residual = dgamma - transport - left + right
    return float(np.max(np.abs(residual)))


def connection_bound_ratio(spec: MetricSpec, t, x) -> float:
    """max_μ ‖Γ_μ‖ / max |∂_{t,x} g_{ij}|，度规平直时为 0"""
    if spec.is_flat:
        return 0.0
    connection = spin_connection(spec, t, x)
    _, lower, dg_up, _, _ = _frame_parts(spec, t, x)
    scale = float(np.max(np.abs(_lower_derivatives(lower, dg_up))))
    if scale == 0:
        return 0.0
    return float(np.max(np.linalg.norm(connection, ord=2, axis=(-2, -1)))) / scale
