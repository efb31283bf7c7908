"""符号的量子化、Dirac 投影算子、符号复合与误差算子的测量

量子化方式：
  kohn-nirenberg  Op(a)u(x) = (2π)^{-d/2} Σ_ξ a(x,ξ) û(ξ) e^{iξ·x} (π/L)^d
  weyl            核在中点 (x+y)/2 处取符号
  binned          Σ_m ψ_m(D)^{1/2} a(x,ξ_m) ψ_m(D)^{1/2}，ψ_m 为频率的光滑分解
"""
import math
import threading
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import scipy.fft
import sympy
from loguru import logger
from scipy import stats

from dispersive_lab.exceptions import GridError, SymbolError
from dispersive_lab.grid import (
    Grid,
    SpectralField,
    SpinorField,
    littlewood_paley_multiplier,
    resolvable_band,
)
from dispersive_lab.metric import (
    FLAT_GAMMAS,
    MetricSpec,
    SymbolicProfile,
    eval_metric_on_grid,
    spin_connection,
    vierbein,
)

FLAVORS = ('kohn-nirenberg', 'weyl', 'binned')
DEFAULT_MEMORY_BUDGET = 1 << 26


@lru_cache(maxsize=None)
def symbol_variables(dim: int) -> Tuple[sympy.Symbol, Tuple[sympy.Symbol, ...], Tuple[sympy.Symbol, ...]]:
    """符号使用的 (t, x, ξ) 变量，与度规剖面的变量一致"""
    t = sympy.Symbol('t', real=True)
    xs = sympy.symbols(f'x1:{dim + 1}', real=True)
    xis = sympy.symbols(f'xi1:{dim + 1}', real=True)
    return t, tuple(xs), tuple(xis)


class Symbol:
    """标量或 4×4 矩阵值符号 a(t,x,ξ)

    由 sympy 表达式给出时可求任意阶导数；只给数值函数时不能求导。
    """

    def __init__(self, expr=None, dim: int = 1, order: float = 0.0, name: str = '',
                 func: Optional[Callable] = None, matrix: Optional[bool] = None):
        if expr is None and func is None:
            raise SymbolError("符号需要 sympy 表达式或数值函数")
        self.dim = dim
        self.order = order
        self.name = name
        self.t, self.xs, self.xis = symbol_variables(dim)
        if expr is not None:
            expr = sympy.Matrix(expr) if isinstance(expr, (list, sympy.MatrixBase)) else sympy.sympify(expr)
            if isinstance(expr, sympy.MatrixBase) and expr.shape != (4, 4):
                raise SymbolError(f"矩阵符号必须是 4×4，当前为 {expr.shape}")
        self.expr = expr
        self.func = func
        self.is_matrix = isinstance(expr, sympy.MatrixBase) if expr is not None else bool(matrix)
        self._x_independent = False
        self._compiled = None
        self._lock = threading.Lock()

    @classmethod
    def from_function(cls, func: Callable, dim: int, order: float = 0.0, name: str = '',
                      matrix: bool = False, x_independent: bool = False) -> 'Symbol':
        sym = cls(None, dim, order, name, func=func, matrix=matrix)
        sym._x_independent = x_independent
        return sym

    @property
    def variables(self) -> Tuple[sympy.Symbol, ...]:
        return (self.t,) + self.xs + self.xis

    @property
    def free_symbols(self) -> set:
        return self.expr.free_symbols if self.expr is not None else set()

    @property
    def depends_on_x(self) -> bool:
        if self.expr is None:
            return not self._x_independent
        return bool(self.free_symbols & (set(self.xs) | {self.t}))

    def _callable(self) -> Callable:
        with self._lock:
            if self._compiled is None:
                if self.expr is None:
                    self._compiled = self.func
                else:
                    entries = list(self.expr) if self.is_matrix else [self.expr]
                    raw = sympy.lambdify(self.variables, entries, modules='numpy')
                    d = self.dim

                    def compiled(t, x, xi):
                        return raw(t, *[x[..., i] for i in range(d)], *[xi[..., i] for i in range(d)])
                    self._compiled = compiled
        return self._compiled

    def evaluate(self, t, x, xi) -> np.ndarray:
        """在 (t, x, ξ) 上求值，x 与 ξ 的最后一维为 d，其余维度广播"""
        x = np.asarray(x, dtype=float)
        xi = np.asarray(xi, dtype=float)
        batch = np.broadcast_shapes(np.shape(t), x.shape[:-1], xi.shape[:-1])
        raw = self._callable()(t, x, xi)
        if self.expr is None:
            out = np.asarray(raw, dtype=complex)
            return np.broadcast_to(out, batch + ((4, 4) if self.is_matrix else ())).copy()
        values = [np.broadcast_to(np.asarray(v, dtype=complex), batch) for v in raw]
        if self.is_matrix:
            return np.stack(values, axis=-1).reshape(batch + (4, 4))
        return values[0].copy()

    def _require_expr(self, what: str) -> None:
        if self.expr is None:
            raise SymbolError(f"数值符号 {self.name or '<anonymous>'} 不提供{what}")

    def derivative(self, x_alpha: Optional[Sequence[int]] = None,
                   xi_beta: Optional[Sequence[int]] = None) -> 'Symbol':
        """∂_x^α ∂_ξ^β a"""
        self._require_expr("导数")
        spec = []
        for var, count in zip(self.xs, x_alpha or ()):
            spec.extend([var] * int(count))
        for var, count in zip(self.xis, xi_beta or ()):
            spec.extend([var] * int(count))
        if not spec:
            return self
        if self.is_matrix:
            expr = self.expr.applyfunc(lambda e: sympy.diff(e, *spec))
        else:
            expr = sympy.diff(self.expr, *spec)
        order = self.order - sum(xi_beta or ())
        return Symbol(expr, self.dim, order, f"d({self.name})")

    def _combine(self, other, op: Callable, order: float) -> 'Symbol':
        self._require_expr("代数运算")
        if isinstance(other, Symbol):
            other._require_expr("代数运算")
            return Symbol(op(self.expr, other.expr), self.dim, order)
        return Symbol(op(self.expr, sympy.sympify(other)), self.dim, self.order)

    def __add__(self, other) -> 'Symbol':
        other_order = other.order if isinstance(other, Symbol) else 0.0
        return self._combine(other, lambda a, b: a + b, max(self.order, other_order))

    def __sub__(self, other) -> 'Symbol':
        other_order = other.order if isinstance(other, Symbol) else 0.0
        return self._combine(other, lambda a, b: a - b, max(self.order, other_order))

    def __mul__(self, other) -> 'Symbol':
        other_order = other.order if isinstance(other, Symbol) else 0.0
        return self._combine(other, lambda a, b: a * b, self.order + other_order)

    __rmul__ = __mul__

    def __neg__(self) -> 'Symbol':
        return self * -1

    def simplified(self) -> 'Symbol':
        self._require_expr("化简")
        return Symbol(sympy.simplify(self.expr), self.dim, self.order, self.name)

    def __repr__(self) -> str:
        body = self.expr if self.expr is not None else self.func
        return f"Symbol(order={self.order}, {body})"


def bracket_symbol(dim: int, mass: float = 1.0) -> Symbol:
    """⟨ξ⟩_M = √(M² + |ξ|²)"""
    _, _, xis = symbol_variables(dim)
    return Symbol(sympy.sqrt(sympy.nsimplify(mass) ** 2 + sum(k ** 2 for k in xis)), dim, 1.0, 'bracket')


def metric_expression(spec: MetricSpec) -> sympy.Matrix:
    """g^{ij} 的符号表达式，变量与 symbol_variables 一致"""
    if not isinstance(spec.profile, SymbolicProfile):
        raise SymbolError(f"度规 {spec.name} 没有符号表达式")
    amplitude = sympy.nsimplify(spec.amplitude)
    return sympy.eye(spec.dim) + amplitude * spec.profile.matrix


def perturbation_symbol(spec: MetricSpec, mass: float = 1.0) -> Symbol:
    """精确的 √(M²+g^{ij}ξ_iξ_j) - ⟨ξ⟩_M = (g-δ)ξξ / (√(M²+gξξ) + ⟨ξ⟩_M)"""
    _, _, xis = symbol_variables(spec.dim)
    g = metric_expression(spec)
    xi = sympy.Matrix(xis)
    m2 = sympy.nsimplify(mass) ** 2
    quad = (xi.T * g * xi)[0, 0]
    flat = sum(k ** 2 for k in xis)
    return Symbol((quad - flat) / (sympy.sqrt(m2 + quad) + sympy.sqrt(m2 + flat)), spec.dim, 1.0, 'perturbation')


# ---------------------------------------------------------------------------
# 量子化

class QuantizedOperator:
    """作用于 SpectralField 的线性算子"""

    def __init__(self, grid: Grid, apply_fn: Callable[[SpectralField], SpectralField], flavor: str,
                 symbol: Optional[Symbol] = None, adjoint_fn: Optional[Callable] = None,
                 description: str = ''):
        self.grid = grid
        self._apply = apply_fn
        self._adjoint = adjoint_fn
        self.flavor = flavor
        self.symbol = symbol
        self.description = description or flavor

    def __call__(self, field: SpectralField) -> SpectralField:
        return self._apply(field)

    apply = __call__

    def adjoint(self) -> 'QuantizedOperator':
        if self._adjoint is None:
            raise SymbolError(f"算子 {self.description} 没有伴随")
        return QuantizedOperator(self.grid, self._adjoint, self.flavor, None, self._apply,
                                 f"({self.description})*")

    def __matmul__(self, other: 'QuantizedOperator') -> 'QuantizedOperator':
        adjoint = None
        if self._adjoint is not None and other._adjoint is not None:
            adjoint = lambda u: other._adjoint(self._adjoint(u))
        return QuantizedOperator(self.grid, lambda u: self(other(u)), 'composite', None, adjoint,
                                 f"{self.description}∘{other.description}")

    def __add__(self, other: 'QuantizedOperator') -> 'QuantizedOperator':
        return QuantizedOperator(self.grid, lambda u: self(u) + other(u), 'composite', None, None,
                                 f"{self.description}+{other.description}")

    def __sub__(self, other: 'QuantizedOperator') -> 'QuantizedOperator':
        return QuantizedOperator(self.grid, lambda u: self(u) - other(u), 'composite', None, None,
                                 f"{self.description}-{other.description}")

    def scaled(self, factor: complex) -> 'QuantizedOperator':
        adjoint = None
        if self._adjoint is not None:
            adjoint = lambda u: self._adjoint(u) * np.conj(factor)
        return QuantizedOperator(self.grid, lambda u: self(u) * factor, self.flavor, self.symbol, adjoint,
                                 f"{factor}·{self.description}")


def _apply_pointwise_matrix(matrix: np.ndarray, values: np.ndarray) -> np.ndarray:
    """(…,4,4) 矩阵场作用在 (4,…) 旋量值上"""
    return np.einsum('...ij,j...->i...', matrix, values)


def multiplier_operator(grid: Grid, multiplier: np.ndarray, description: str = 'multiplier',
                        symbol: Optional[Symbol] = None) -> QuantizedOperator:
    """傅里叶乘子；矩阵乘子的形状为 (*grid.shape, 4, 4)"""
    multiplier = np.asarray(multiplier)
    if multiplier.shape == grid.shape:
        apply_fn = lambda u: u.apply_multiplier(multiplier)
        conj = np.conj(multiplier)
        adjoint_fn = lambda u: u.apply_multiplier(conj)
    else:
        hermitian = np.conj(np.swapaxes(multiplier, -1, -2))
        apply_fn = lambda u: u.with_coefficients(_apply_pointwise_matrix(multiplier, u.coefficients))
        adjoint_fn = lambda u: u.with_coefficients(_apply_pointwise_matrix(hermitian, u.coefficients))
    return QuantizedOperator(grid, apply_fn, 'multiplier', symbol, adjoint_fn, description)


def _separable_terms(sym: Symbol) -> Optional[List[Tuple[sympy.Expr, sympy.Expr]]]:
    """把标量符号拆成 Σ_m f_m(t,x) g_m(ξ)；无法拆分时返回 None"""
    if sym.expr is None or sym.is_matrix:
        return None
    spatial = set(sym.xs) | {sym.t}
    xis = set(sym.xis)
    grouped: Dict[sympy.Expr, sympy.Expr] = {}

    def _split(term):
        indep, dep = term.as_independent(*spatial, as_Add=False)
        if dep.free_symbols & xis:
            return None
        return dep, indep

    for term in sympy.Add.make_args(sym.expr):
        pieces = _split(term)
        if pieces is None:
            expanded = [_split(sub) for sub in sympy.Add.make_args(sympy.expand(term))]
            if any(p is None for p in expanded):
                return None
        else:
            expanded = [pieces]
        for dep, indep in expanded:
            grouped[dep] = grouped.get(dep, sympy.Integer(0)) + indep
    return list(grouped.items())


def _check_budget(work: int, budget: int, grid: Grid, what: str) -> None:
    if work > budget:
        raise GridError(
            f"{what}需要 {work} 个核元素（网格 {grid.n}^{grid.dim}），超过内存预算 {budget}"
        )


def _separable_operator(sym: Symbol, grid: Grid, t: float,
                        terms: List[Tuple[sympy.Expr, sympy.Expr]]) -> QuantizedOperator:
    variables = sym.variables
    spatial_args = [grid.coords[i] for i in range(grid.dim)]
    freq_args = [grid.wavenumbers[i] for i in range(grid.dim)]
    zeros = [np.zeros(grid.shape)] * grid.dim
    parts = []
    for f_expr, g_expr in terms:
        f = np.broadcast_to(np.asarray(sympy.lambdify(variables, f_expr, 'numpy')(t, *spatial_args, *zeros),
                                       dtype=complex), grid.shape)
        g = np.broadcast_to(np.asarray(sympy.lambdify(variables, g_expr, 'numpy')(t, *zeros, *freq_args),
                                       dtype=complex), grid.shape)
        parts.append((f, g))

    def apply_fn(u: SpectralField) -> SpectralField:
        total = np.zeros(u.values.shape, dtype=complex)
        for f, g in parts:
            total += f * grid.inverse(u.coefficients * g)
        return u.with_values(total)

    def adjoint_fn(u: SpectralField) -> SpectralField:
        total = np.zeros(u.coefficients.shape, dtype=complex)
        for f, g in parts:
            total += np.conj(g) * grid.forward(np.conj(f) * u.values)
        return u.with_coefficients(total)

    logger.debug(f"可分离量子化: {len(parts)} 项")
    return QuantizedOperator(grid, apply_fn, 'kohn-nirenberg', sym, adjoint_fn, f"KN[{sym.name}]")


def _dense_kn_operator(sym: Symbol, grid: Grid, t: float, budget: int) -> QuantizedOperator:
    size = grid.n ** grid.dim
    _check_budget(size * size, budget, grid, "稠密 Kohn-Nirenberg 量子化")
    x = grid.points.reshape(-1, grid.dim)
    xi = grid.xi.reshape(-1, grid.dim)
    scale = (2.0 * np.pi) ** (-grid.dim / 2.0) * grid.dual_cell_volume
    chunk = max(1, (1 << 20) // size)
    kernel_cache: Dict[int, np.ndarray] = {}

    def kernel(start: int) -> np.ndarray:
        if start in kernel_cache:
            return kernel_cache[start]
        xs = x[start:start + chunk]
        values = sym.evaluate(t, xs[:, None, :], xi[None, :, :])
        phase = np.exp(1j * xs @ xi.T) * scale
        block = values * (phase[..., None, None] if sym.is_matrix else phase)
        if size * size <= (1 << 22):
            kernel_cache[start] = block
        return block

    def apply_fn(u: SpectralField) -> SpectralField:
        lead = u.lead_shape
        coeffs = u.coefficients.reshape(lead + (size,))
        out = np.zeros(lead + (size,), dtype=complex)
        for start in range(0, size, chunk):
            block = kernel(start)
            if sym.is_matrix:
                out[..., start:start + chunk] = np.einsum('pkij,jk->ip', block, coeffs)
            else:
                out[..., start:start + chunk] = coeffs @ block.T
        return u.with_values(out.reshape(lead + grid.shape))

    return QuantizedOperator(grid, apply_fn, 'kohn-nirenberg', sym, None, f"KN[{sym.name}]")


def _weyl_operator(sym: Symbol, grid: Grid, t: float, budget: int) -> QuantizedOperator:
    """K[m,p] = B_{m+p}((m-p) mod n)，B_s(r) 为中点 z_s 处符号关于 ξ 的逆 DFT"""
    if sym.is_matrix:
        raise SymbolError("Weyl 量子化只支持标量符号")
    d, n = grid.dim, grid.n
    size = n ** d
    _check_budget((2 ** d) * size * size, budget, grid, "Weyl 量子化")
    half_axis = -grid.half_width + 0.5 * grid.spacing * np.arange(2 * n)
    half_points = np.stack(np.meshgrid(*([half_axis] * d), indexing='ij'), axis=-1).reshape(-1, d)
    midpoints = half_points.reshape((-1,) + (1,) * d + (d,))
    table = sym.evaluate(t, midpoints, grid.xi[None])
    table = scipy.fft.ifftn(table, axes=tuple(range(1, d + 1))).reshape(half_points.shape[0], size)

    idx = np.stack(np.meshgrid(*([np.arange(n)] * d), indexing='ij'), axis=-1).reshape(-1, d)
    half_strides = (2 * n) ** np.arange(d - 1, -1, -1)
    strides = n ** np.arange(d - 1, -1, -1)
    s_index = (idx[:, None, :] + idx[None, :, :]) @ half_strides
    r_index = np.mod(idx[:, None, :] - idx[None, :, :], n) @ strides
    matrix = table[s_index, r_index]

    def apply_fn(u: SpectralField) -> SpectralField:
        lead = u.lead_shape
        values = u.values.reshape(lead + (size,))
        return u.with_values((values @ matrix.T).reshape(lead + grid.shape))

    def adjoint_fn(u: SpectralField) -> SpectralField:
        lead = u.lead_shape
        values = u.values.reshape(lead + (size,))
        return u.with_values((values @ np.conj(matrix)).reshape(lead + grid.shape))

    return QuantizedOperator(grid, apply_fn, 'weyl', sym, adjoint_fn, f"Weyl[{sym.name}]")


@dataclass(frozen=True)
class FrequencyBin:
    """频率分解中的一格：中心 ξ_m 与乘子 ψ_m^{1/2}"""
    band: int
    center: Tuple[float, ...]
    sqrt_weight: np.ndarray = field(repr=False, compare=False)


def _fibonacci_sphere(count: int) -> np.ndarray:
    index = np.arange(count) + 0.5
    z = 1.0 - 2.0 * index / count
    phi = np.pi * (1.0 + 5.0 ** 0.5) * index
    rho = np.sqrt(1.0 - z ** 2)
    return np.stack([rho * np.cos(phi), rho * np.sin(phi), z], axis=-1)


def _angular_directions(dim: int) -> np.ndarray:
    if dim == 1:
        return np.array([[-1.0], [1.0]])
    if dim == 2:
        theta = 2.0 * np.pi * np.arange(8) / 8
        return np.stack([np.cos(theta), np.sin(theta)], axis=-1)
    return _fibonacci_sphere(12)


def _angular_weights(grid: Grid, directions: np.ndarray, concentration: float = 4.0) -> np.ndarray:
    """球面上的 softmax 光滑分解，形状 (K, *grid.shape)"""
    norm = np.where(grid.freq_norm > 0, grid.freq_norm, 1.0)
    unit = grid.xi / norm[..., None]
    if grid.dim == 1:
        positive = (unit[..., 0] > 0).astype(float)
        return np.stack([1.0 - positive, positive])
    logits = concentration * np.einsum('...i,ki->k...', unit, directions)
    logits -= np.max(logits, axis=0, keepdims=True)
    weights = np.exp(logits)
    return weights / np.sum(weights, axis=0, keepdims=True)


@lru_cache(maxsize=16)
def frequency_bins(grid: Grid) -> Tuple[FrequencyBin, ...]:
    """二进径向频带 × 角向扇区的光滑单位分解，Σ_m ψ_m = 1 对所有格点频率成立"""
    directions = _angular_directions(grid.dim)
    angular = _angular_weights(grid, directions)
    j_lo, j_hi = resolvable_band(grid)
    bins = []
    for j in range(j_lo, j_hi + 1):
        radial = littlewood_paley_multiplier(grid, j, floor=(j == j_lo), ceiling=(j == j_hi))
        if j == j_lo:
            bins.append(FrequencyBin(j, (0.0,) * grid.dim, np.sqrt(radial)))
            continue
        for direction, weight in zip(directions, angular):
            center = tuple(float(c) for c in (2.0 ** j) * direction)
            bins.append(FrequencyBin(j, center, np.sqrt(radial * weight)))
    return tuple(bins)


def binned_operator(grid: Grid, factors: Sequence[np.ndarray], bins: Sequence[FrequencyBin],
                    description: str = 'binned') -> QuantizedOperator:
    """Σ_m ψ_m^{1/2} a_m(x) ψ_m^{1/2}，a_m 为标量场或 (…,4,4) 矩阵场"""
    def _apply(u: SpectralField, conjugate: bool) -> SpectralField:
        total = np.zeros(u.values.shape, dtype=complex)
        for b, factor in zip(bins, factors):
            if factor is None:
                continue
            piece = grid.inverse(u.coefficients * b.sqrt_weight)
            if factor.shape == grid.shape:
                piece = (np.conj(factor) if conjugate else factor) * piece
            else:
                mat = np.conj(np.swapaxes(factor, -1, -2)) if conjugate else factor
                piece = _apply_pointwise_matrix(mat, piece)
            total += grid.inverse(grid.forward(piece) * b.sqrt_weight)
        return u.with_values(total)

    return QuantizedOperator(grid, lambda u: _apply(u, False), 'binned', None,
                             lambda u: _apply(u, True), description)


def _binned_quantization(sym: Symbol, grid: Grid, t: float) -> QuantizedOperator:
    bins = frequency_bins(grid)
    factors = [sym.evaluate(t, grid.points, np.asarray(b.center)) for b in bins]
    op = binned_operator(grid, factors, bins, f"Binned[{sym.name}]")
    op.symbol = sym
    return op


def quantize(sym: Symbol, flavor: str, grid: Grid, t: float = 0.0,
             memory_budget: int = DEFAULT_MEMORY_BUDGET) -> QuantizedOperator:
    """把符号量子化为网格上的算子

    与 x 无关的符号在任何方式下都是精确的傅里叶乘子；可分离符号走 Σ f_m(x) g_m(D) 快速路径。
    """
    if flavor not in FLAVORS:
        raise SymbolError(f"未知量子化方式: {flavor}，可用: {', '.join(FLAVORS)}")
    if sym.dim != grid.dim:
        raise SymbolError(f"符号维数 {sym.dim} 与网格维数 {grid.dim} 不一致")
    if not sym.depends_on_x:
        multiplier = sym.evaluate(t, np.zeros(grid.dim), grid.xi)
        return multiplier_operator(grid, multiplier, f"{flavor}[{sym.name}]", sym)
    if flavor == 'binned':
        return _binned_quantization(sym, grid, t)
    if flavor == 'weyl':
        return _weyl_operator(sym, grid, t, memory_budget)
    terms = _separable_terms(sym)
    if terms is not None:
        return _separable_operator(sym, grid, t, terms)
    return _dense_kn_operator(sym, grid, t, memory_budget)


def operator_norm(op: Union[QuantizedOperator, Callable], grid: Grid, adjoint: Optional[Callable] = None,
                  iterations: int = 20, tol: float = 1e-6, lead: Tuple[int, ...] = (), seed: int = 0) -> float:
    """A*A 的幂迭代估计 ‖A‖；未给伴随时按自伴处理"""
    if adjoint is None and isinstance(op, QuantizedOperator) and op._adjoint is not None:
        adjoint = op._adjoint
    adjoint = adjoint or op
    rng = np.random.default_rng(seed)
    shape = lead + grid.shape
    cls = SpinorField if lead == (4,) else SpectralField
    v = cls(grid, values=rng.standard_normal(shape) + 1j * rng.standard_normal(shape))
    v = v * (1.0 / v.norm())
    estimate = 0.0
    for _ in range(iterations):
        w = adjoint(op(v))
        size = w.norm()
        if size == 0:
            return 0.0
        new_estimate = math.sqrt(size)
        v = w * (1.0 / size)
        if estimate and abs(new_estimate - estimate) <= tol * new_estimate:
            return new_estimate
        estimate = new_estimate
    return estimate


# ---------------------------------------------------------------------------
# Dirac 投影

def flat_dirac_symbol(grid: Grid, mass: float) -> np.ndarray:
    """ξ_jγ⁰γ^j + Mγ⁰，形状 (*grid.shape, 4, 4)；低维时 ξ 只占前 d 个方向"""
    g0 = FLAT_GAMMAS[0]
    out = np.broadcast_to(mass * g0, grid.shape + (4, 4)).astype(complex)
    for j in range(grid.dim):
        out = out + grid.wavenumbers[j][..., None, None] * (g0 @ FLAT_GAMMAS[j + 1])
    return out


def _check_mass(mass: float) -> None:
    if not mass > 0:
        raise SymbolError(f"质量 M 必须为正数，当前为 {mass}")


def flat_projector_multiplier(grid: Grid, mass: float, sign: int) -> np.ndarray:
    """Π±^M(ξ) = ½(I ± (ξ_jγ⁰γ^j + Mγ⁰)/⟨ξ⟩_M)"""
    _check_mass(mass)
    if sign not in (1, -1):
        raise SymbolError(f"投影符号必须为 ±1，当前为 {sign}")
    bracket = grid.bracket(mass)[..., None, None]
    return 0.5 * (np.eye(4) + sign * flat_dirac_symbol(grid, mass) / bracket)


def flat_projector(mass: float, sign: int, grid: Grid) -> QuantizedOperator:
    return multiplier_operator(grid, flat_projector_multiplier(grid, mass, sign),
                               f"Π{'+' if sign > 0 else '-'}(flat)")


@dataclass
class CurvedDiracOperator:
    """L = Σ_j G_j(x) D_j + Z(x)，G_j = γ⁰γ^j，Z = iγ⁰γ^jΓ_j - iΓ_0 + Mγ⁰，满足 ⟨D⟩_M(Π₊-Π₋) = L"""
    grid: Grid
    mass: float
    coefficients: np.ndarray
    zeroth: np.ndarray

    def __call__(self, u: SpectralField) -> SpectralField:
        grid = self.grid
        total = _apply_pointwise_matrix(self.zeroth, u.values)
        for j in range(grid.dim):
            derivative = grid.inverse(u.coefficients * grid.wavenumbers[j])
            total = total + _apply_pointwise_matrix(self.coefficients[j], derivative)
        return SpinorField(grid, values=total)

    def as_operator(self) -> QuantizedOperator:
        return QuantizedOperator(self.grid, self, 'kohn-nirenberg', None, None, 'L')


def curved_dirac_operator(spec: MetricSpec, mass: float, grid: Grid, t: float = 0.0) -> CurvedDiracOperator:
    _check_mass(mass)
    if spec.dim != grid.dim:
        raise GridError(f"度规维数 {spec.dim} 与网格维数 {grid.dim} 不一致")
    gammas = vierbein(spec, t, grid.points).gammas
    connection = spin_connection(spec, t, grid.points)
    g0 = FLAT_GAMMAS[0]
    coefficients = np.stack([g0 @ gammas[..., j + 1, :, :] for j in range(grid.dim)])
    zeroth = mass * np.broadcast_to(g0, grid.shape + (4, 4)) - 1j * connection[..., 0, :, :]
    for j in range(grid.dim):
        zeroth = zeroth + 1j * (coefficients[j] @ connection[..., j + 1, :, :])
    return CurvedDiracOperator(grid, mass, coefficients, zeroth)


def curved_projector(spec: MetricSpec, mass: float, sign: int, grid: Grid, t: float = 0.0) -> QuantizedOperator:
    """Π±^M = ½(I ± ⟨D⟩_M^{-1} L)"""
    if sign not in (1, -1):
        raise SymbolError(f"投影符号必须为 ±1，当前为 {sign}")
    dirac = curved_dirac_operator(spec, mass, grid, t)
    inverse_bracket = 1.0 / grid.bracket(mass)

    def apply_fn(u: SpectralField) -> SpectralField:
        pu = dirac(u).apply_multiplier(inverse_bracket)
        return SpinorField(grid, values=0.5 * (u.values + sign * pu.values))

    return QuantizedOperator(grid, apply_fn, 'kohn-nirenberg', None, None,
                             f"Π{'+' if sign > 0 else '-'}(curved)")


def error_operator_leading(spec: MetricSpec, mass: float, grid: Grid, t: float = 0.0) -> QuantizedOperator:
    """𝓔⁰ = (g^{jk}-δ^{jk})(x) ⟨D⟩_M^{-2} D_j D_k"""
    perturbation = np.moveaxis(eval_metric_on_grid(spec, t, grid) - np.eye(spec.dim), (-2, -1), (0, 1))
    inverse_square = 1.0 / grid.bracket(mass) ** 2

    def apply_fn(u: SpectralField) -> SpectralField:
        total = np.zeros(u.values.shape, dtype=complex)
        for j in range(grid.dim):
            for k in range(grid.dim):
                if not np.any(perturbation[j, k]):
                    continue
                mult = grid.wavenumbers[j] * grid.wavenumbers[k] * inverse_square
                total += perturbation[j, k] * grid.inverse(u.coefficients * mult)
        return u.with_values(total)

    return QuantizedOperator(grid, apply_fn, 'kohn-nirenberg', None, None, 'E0')


def poisson_bracket(a: Symbol, b: Symbol) -> Symbol:
    """{a,b} = ∂_ξa·∂_xb - ∂_xa·∂_ξb"""
    a._require_expr("一阶导数")
    b._require_expr("一阶导数")
    d = a.dim
    total = None
    for j in range(d):
        unit = tuple(1 if i == j else 0 for i in range(d))
        term = a.derivative(xi_beta=unit) * b.derivative(x_alpha=unit) \
            - a.derivative(x_alpha=unit) * b.derivative(xi_beta=unit)
        total = term if total is None else total + term
    total.order = a.order + b.order - 1
    total.name = f"{{{a.name},{b.name}}}"
    return total


def compose_leading(a: Symbol, b: Symbol, order: int = 2) -> Symbol:
    """a∘b 的前 order 项：ab，以及 ab + (1/i)∂_ξa·∂_xb"""
    if order not in (1, 2):
        raise SymbolError(f"复合展开阶数只支持1或2，当前为 {order}")
    product = a * b
    if order == 1:
        return product
    d = a.dim
    for j in range(d):
        unit = tuple(1 if i == j else 0 for i in range(d))
        product = product + a.derivative(xi_beta=unit) * b.derivative(x_alpha=unit) * (-sympy.I)
    product.order = a.order + b.order
    return product


# ---------------------------------------------------------------------------
# 投影缺陷

def dirac_packet(grid: Grid, frequency: float, width: float,
                 spinor: Sequence[complex] = (1.0, 0.5, -0.3j, 0.2)) -> SpinorField:
    """沿第一个坐标方向、频率为 frequency 的高斯旋量波包"""
    envelope = np.exp(-grid.radius ** 2 / (2.0 * width ** 2)) * np.exp(1j * frequency * grid.coords[0])
    direction = np.asarray(spinor, dtype=complex)
    direction = direction / np.linalg.norm(direction)
    return SpinorField(grid, values=direction.reshape((4,) + (1,) * grid.dim) * envelope)


@dataclass
class DefectTable:
    """投影缺陷 ‖(Π±Π± - Π± - ¼𝓔⁰)u_k‖/‖u_k‖ 与逐步拟合的斜率"""
    amplitude: float
    rows: List[Dict[str, float]]

    @property
    def slope(self) -> float:
        return self.rows[-1]['slope'] if self.rows else float('nan')

    @property
    def defects(self) -> np.ndarray:
        return np.array([row['defect'] for row in self.rows])


def _slope(ks: Sequence[float], values: Sequence[float]) -> float:
    if len(ks) < 2 or np.any(np.asarray(values) <= 0):
        return float('nan')
    return float(stats.linregress(ks, np.log2(values)).slope)


def projector_defect(spec: MetricSpec, mass: float, grid: Grid, bands: Sequence[int],
                     packet_width: float = 3.0, sign: int = 1, t: float = 0.0) -> DefectTable:
    """对频率约为 2^k 的波包测量 Π±² - Π± 去掉主部 ¼𝓔⁰ 之后的剩余"""
    projector = curved_projector(spec, mass, sign, grid, t)
    leading = error_operator_leading(spec, mass, grid, t)
    rows = []
    ks, defects = [], []
    for k in bands:
        u = dirac_packet(grid, 2.0 ** k, packet_width)
        pu = projector(u)
        residual = projector(pu) - pu - leading(u) * 0.25
        defect = residual.norm() / u.norm()
        ks.append(k)
        defects.append(defect)
        rows.append({'k': k, 'defect': defect, 'slope': _slope(ks, defects)})
        logger.debug(f"投影缺陷: k={k}, defect={defect:.6g}")
    return DefectTable(spec.amplitude, rows)
