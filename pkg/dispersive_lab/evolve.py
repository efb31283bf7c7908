"""时间推进：平直半 Klein-Gordon 乘子、带度规扰动的分裂步、阻尼演化、外向分解与三次 Dirac 求解

所有格式都是 Strang 分裂：半步平直乘子 e^{∓i dt⟨D⟩_M/2}，中间一整步用中点冻结系数的
生成元 G 做截断 Taylor 指数 e^{-i dt G}，再半步平直乘子。
"""
import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from loguru import logger

from dispersive_lab.exceptions import (
    ConfigError,
    GridError,
    MeasurementError,
    NumericalError,
    SmallDataError,
    StepSizeError,
    SymbolError,
    WraparoundError,
)
from dispersive_lab.flow import DampingSymbol
from dispersive_lab.grid import (
    Grid,
    SpectralField,
    SpinorField,
    dealias_mask,
    dyadic_bump,
    frequency_cutoff_multiplier,
    smooth_step,
)
from dispersive_lab.measure import sobolev_norm
from dispersive_lab.metric import FLAT_GAMMAS, MetricSpec, eval_metric_on_grid
from dispersive_lab.pdo import (
    binned_operator,
    curved_projector,
    flat_projector,
    frequency_bins,
    perturbation_symbol,
    quantize,
)

SCHEMES = ('exact-flat', 'split-step', 'split-step-exact', 'damped')

# 二项级数截断误差相对首项的上限
SERIES_TOL = 1e-13


@dataclass(frozen=True)
class PropagatorConfig:
    """传播器配置；mass 即 λ^{-1}，window 为扰动与阻尼的频率窗口 [lo, hi]"""
    grid: Grid
    metric: MetricSpec
    mass: float = 1.0
    dt: float = 0.05
    scheme: str = 'split-step'
    dealias: bool = False
    window: Optional[Tuple[float, float]] = None
    taylor_tol: float = 1e-15
    max_terms: int = 40

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ConfigError(f"未知时间推进格式: {self.scheme}，可选 {', '.join(SCHEMES)}")
        if not self.mass > 0:
            raise SymbolError(f"质量 M 必须为正数，当前为 {self.mass}")
        if not self.dt > 0:
            raise StepSizeError(f"时间步长必须为正数，当前为 {self.dt}")
        if self.metric.dim != self.grid.dim:
            raise GridError(f"度规维数 {self.metric.dim} 与网格维数 {self.grid.dim} 不一致")
        if self.scheme != 'exact-flat' and self.dt > self.grid.spacing:
            raise StepSizeError(f"时间步长 {self.dt} 超过网格间距 {self.grid.spacing}")
        if self.window is not None:
            lo, hi = self.window
            if not 0 <= lo < hi:
                raise GridError(f"频率窗口需要 0 ≤ lo < hi，当前为 {self.window}")

    @property
    def lam(self) -> float:
        return 1.0 / self.mass

    def window_multiplier(self) -> Optional[np.ndarray]:
        if self.window is None:
            return None
        return frequency_cutoff_multiplier(self.grid, *self.window)

    def max_frequency(self) -> float:
        top = self.grid.nyquist * math.sqrt(self.grid.dim)
        if self.window is not None:
            top = min(top, 2.0 * self.window[1])
        return top


@dataclass
class _Generator:
    """中间子步的生成元 G 与 ‖G‖ 的上界"""
    apply: Callable[[SpectralField], SpectralField]
    bound: float

    def __add__(self, other: Optional['_Generator']) -> '_Generator':
        if other is None:
            return self
        first, second = self.apply, other.apply
        return _Generator(lambda u: first(u) + second(u), self.bound + other.bound)


def _check_sign(sign: int) -> None:
    if sign not in (1, -1):
        raise SymbolError(f"传播方向必须为 ±1，当前为 {sign}")


def flat_halfkg_step(u: SpectralField, mass: float, t0: float, dt: float, sign: int = 1) -> SpectralField:
    """e^{-i·sign·dt⟨D⟩_M}u，对时间精确"""
    if not mass > 0:
        raise SymbolError(f"质量 M 必须为正数，当前为 {mass}")
    _check_sign(sign)
    if dt == 0:
        return u
    return u.apply_multiplier(np.exp(-1j * sign * dt * u.grid.bracket(mass)))


def _metric_perturbation(spec: MetricSpec, grid: Grid, t: float,
                         alpha: Optional[Sequence[int]] = None) -> np.ndarray:
    """(g-δ)^{jk} 或其导数，形状 (d, d, *grid.shape)"""
    values = eval_metric_on_grid(spec, t, grid, alpha)
    if alpha is None or not any(alpha):
        values = values - np.eye(spec.dim)
    return np.moveaxis(values, (-2, -1), (0, 1))


def _apply_second_order(coefficients: np.ndarray, weight: np.ndarray, u: SpectralField) -> SpectralField:
    """Σ_jk c_jk(x) D_jD_k w(D) u"""
    grid = u.grid
    terms = [(coefficients[j, k], grid.wavenumbers[j] * grid.wavenumbers[k] * weight)
             for j in range(grid.dim) for k in range(grid.dim) if np.any(coefficients[j, k])]
    return _apply_terms(terms, u)


def _windowed(apply: Callable[[SpectralField], SpectralField],
              window: Optional[np.ndarray]) -> Callable[[SpectralField], SpectralField]:
    if window is None:
        return apply
    return lambda u: apply(u.apply_multiplier(window)).apply_multiplier(window)


def _series_order(q: float, max_order: int) -> int:
    """√(1+s)-1 的二项级数在 |s| ≤ q 上的截断阶数，余项不超过 SERIES_TOL·q"""
    if q == 0:
        return 1
    if q >= 1.0:
        raise NumericalError(f"|(g-δ)ξξ|/⟨ξ⟩² 可达 {q:.4g} ≥ 1，二项级数不收敛，请改用 split-step-exact")
    coefficient = 0.5
    for n in range(1, max_order + 1):
        coefficient *= (0.5 - n) / (n + 1)
        if abs(coefficient) * q ** (n + 1) / (1.0 - q) <= SERIES_TOL * q:
            return n
    raise NumericalError(f"二项级数在 {max_order} 阶内达不到精度 {SERIES_TOL:g}（q={q:.4g}）")


def _symbol_terms(coefficients: np.ndarray, grid: Grid, mass: float,
                  order: int) -> List[Tuple[np.ndarray, np.ndarray]]:
    """把 (g-δ)ξξ/(√(M²+gξξ)+⟨ξ⟩_M) = ⟨ξ⟩_M Σ_n b_n ((g-δ)ξξ/⟨ξ⟩_M²)^n 展开成 Σ c(x)·m(ξ)

    b_n = C(1/2, n)。各向同性的 (g-δ) = φ(x)δ 每阶只有一项，一般情形按 ξ 的单项式展开。
    """
    d = grid.dim
    bracket = grid.bracket(mass)
    off_diagonal = any(np.any(coefficients[j, k]) for j in range(d) for k in range(d) if j != k)
    isotropic = not off_diagonal and all(np.array_equal(coefficients[j, j], coefficients[0, 0]) for j in range(1, d))
    terms = []
    b = 1.0
    if isotropic:
        phi = coefficients[0, 0]
        ratio = grid.freq_norm ** 2 / bracket ** 2
        for n in range(1, order + 1):
            b *= (1.5 - n) / n
            terms.append((b * phi ** n, bracket * ratio ** n))
        return terms

    unit = [k / bracket for k in grid.wavenumbers]
    base: Dict[Tuple[int, ...], np.ndarray] = {}
    for j in range(d):
        for k in range(d):
            if np.any(coefficients[j, k]):
                e = tuple(int(i == j) + int(i == k) for i in range(d))
                base[e] = base.get(e, 0.0) + coefficients[j, k]
    power: Dict[Tuple[int, ...], np.ndarray] = {(0,) * d: np.ones(grid.shape)}
    for n in range(1, order + 1):
        b *= (1.5 - n) / n
        product: Dict[Tuple[int, ...], np.ndarray] = {}
        for e1, c1 in power.items():
            for e2, c2 in base.items():
                e = tuple(a + c for a, c in zip(e1, e2))
                product[e] = product.get(e, 0.0) + c1 * c2
        power = product
        for e, c in power.items():
            mult = bracket
            for axis, count in enumerate(e):
                if count:
                    mult = mult * unit[axis] ** count
            terms.append((b * c, mult))
    return terms


def _apply_terms(terms: Sequence[Tuple[np.ndarray, np.ndarray]], u: SpectralField,
                 symmetric: bool = False) -> SpectralField:
    """Σ_m c_m(x) m_m(D) u；symmetric 时取 ½(c·m(D) + m(D)·c)"""
    grid = u.grid
    total = np.zeros(u.values.shape, dtype=complex)
    for c, mult in terms:
        piece = c * grid.inverse(u.coefficients * mult)
        if symmetric:
            piece = 0.5 * (piece + grid.inverse(grid.forward(c * u.values) * mult))
        total += piece
    return u.with_values(total)


def _perturbation_generator(cfg: PropagatorConfig, t: float, sign: int = 1) -> Optional[_Generator]:
    """½[Op(p) + Op(p)*]，p = (g-δ)^{jk}ξ_jξ_k / (√(M²+g^{ij}ξ_iξ_j) + ⟨ξ⟩_M)，g 冻结在时刻 t

    展开项在第一次作用时才构造，步长检查先于级数收敛检查。
    """
    if cfg.metric.is_flat:
        return None
    if cfg.scheme == 'split-step-exact':
        return _exact_perturbation_generator(cfg, t, sign)
    grid = cfg.grid
    coefficients = _metric_perturbation(cfg.metric, grid, t)
    size = float(np.max(np.sum(np.abs(coefficients), axis=1)))
    top = cfg.max_frequency()
    q = size * top ** 2 / (cfg.mass ** 2 + top ** 2)
    denominator = (1.0 + math.sqrt(max(1.0 - size, 0.0))) * math.hypot(cfg.mass, top)
    bound = size * top ** 2 / denominator
    terms: List[Tuple[np.ndarray, np.ndarray]] = []

    def apply(u: SpectralField) -> SpectralField:
        if not terms:
            terms.extend(_symbol_terms(coefficients, grid, cfg.mass, _series_order(q, cfg.max_terms)))
        return _apply_terms(terms, u, symmetric=True) * sign

    return _Generator(_windowed(apply, cfg.window_multiplier()), bound)


@lru_cache(maxsize=4)
def _exact_perturbation_matrix(metric: MetricSpec, mass: float, grid: Grid, t: float) -> np.ndarray:
    """精确符号的稠密 Kohn-Nirenberg 矩阵 A 的厄米部分 ½(A + A*)，作用在点值上"""
    op = quantize(perturbation_symbol(metric, mass), 'kohn-nirenberg', grid, t)
    size = grid.n ** grid.dim
    basis = SpectralField(grid, values=np.eye(size, dtype=complex).reshape((size,) + grid.shape))
    matrix = op(basis).values.reshape(size, size).T
    logger.debug(f"稠密扰动矩阵: {metric.name}, {size}×{size}, t={t}")
    return 0.5 * (matrix + matrix.conj().T)


def _exact_perturbation_generator(cfg: PropagatorConfig, t: float, sign: int = 1) -> _Generator:
    """稠密量子化的慢路径，只适合小网格；度规需要符号表达式"""
    grid = cfg.grid
    matrix = _exact_perturbation_matrix(cfg.metric, cfg.mass, grid, 0.0 if cfg.metric.static else t)
    size = matrix.shape[0]

    def apply(u: SpectralField) -> SpectralField:
        lead = u.lead_shape
        values = u.values.reshape(lead + (size,)) @ matrix.T
        return u.with_values(values.reshape(lead + grid.shape)) * sign

    bound = float(np.max(np.abs(np.linalg.eigvalsh(matrix))))
    return _Generator(_windowed(apply, cfg.window_multiplier()), bound)


def _damping_generator(cfg: PropagatorConfig, damping: DampingSymbol, t: float) -> Optional[_Generator]:
    """-i𝔅，𝔅 按频率分格量子化"""
    grid = cfg.grid
    bins = frequency_bins(grid)
    factors = []
    for b in bins:
        values = damping.evaluate(t, grid.points, np.asarray(b.center))
        factors.append(values if np.any(values) else None)
    if all(f is None for f in factors):
        return None
    op = binned_operator(grid, factors, bins, 'damping')
    apply = _windowed(lambda u: op(u) * (-1j), cfg.window_multiplier())
    return _Generator(apply, t ** -damping.exponent)


def _exponential(generator: _Generator, u: SpectralField, dt: float, tol: float, max_terms: int) -> SpectralField:
    """截断 Taylor 级数 Σ_n (-i dt G)^n u / n!"""
    scale = u.norm()
    total = u
    term = u
    for n in range(1, max_terms + 1):
        term = generator.apply(term) * (-1j * dt / n)
        total = total + term
        if term.norm() <= tol * scale:
            return total
    raise NumericalError(f"指数积分在 {max_terms} 项内未收敛，‖G‖dt ≤ {generator.bound * dt:.3g}")


def _strang(u: SpectralField, cfg: PropagatorConfig, t0: float, dt: float, sign: int,
            factory: Callable[[float], Optional[_Generator]]) -> SpectralField:
    mid = t0 + 0.5 * dt
    half = flat_halfkg_step(u, cfg.mass, t0, 0.5 * dt, sign)
    generator = factory(mid)
    if generator is not None:
        if generator.bound * dt > 0.5:
            raise StepSizeError(f"步长过大: ‖G‖·dt = {generator.bound * dt:.4g} > 0.5 (dt={dt}, t={mid})")
        half = _exponential(generator, half, dt, cfg.taylor_tol, cfg.max_terms)
    if cfg.dealias:
        half = half.apply_multiplier(dealias_mask(cfg.grid))
    return flat_halfkg_step(half, cfg.mass, mid, 0.5 * dt, sign)


def perturbed_halfkg_step(u: SpectralField, cfg: PropagatorConfig, t0: float, sign: int = 1,
                          dt: Optional[float] = None) -> SpectralField:
    """一个 Strang 步：半步平直、中点冻结的度规扰动、半步平直；ε=0 时与平直步一致"""
    _check_sign(sign)
    dt = cfg.dt if dt is None else dt
    return _strang(u, cfg, t0, dt, sign, lambda t: _perturbation_generator(cfg, t, sign))


def damped_step(u: SpectralField, cfg: PropagatorConfig, damping: DampingSymbol, t0: float,
                dt: Optional[float] = None) -> SpectralField:
    """(D_t + ⟨D⟩_λ + 𝔄 - i𝔅)u = 0 的一个 Strang 步，只在 t ≥ 1 上定义"""
    if t0 < 1.0:
        raise SymbolError(f"阻尼演化只在 t ≥ 1 上定义，当前 t₀={t0}")
    dt = cfg.dt if dt is None else dt

    def factory(t: float) -> Optional[_Generator]:
        perturbation = _perturbation_generator(cfg, t)
        damping_part = _damping_generator(cfg, damping, t)
        if perturbation is None:
            return damping_part
        return perturbation + damping_part

    return _strang(u, cfg, t0, dt, 1, factory)


def _check_finite(u: SpectralField, t: float) -> None:
    if not np.all(np.isfinite(u.values)):
        raise NumericalError(f"t={t:.6g} 时解中出现 NaN 或 Inf")


def propagate(u0: SpectralField, cfg: PropagatorConfig, t0: float, t1: float,
              callback: Optional[Callable[[float, SpectralField], None]] = None,
              damping: Optional[DampingSymbol] = None, sign: int = 1) -> SpectralField:
    """用配置的格式从 t0 推进到 t1，步长取不超过 cfg.dt 的等分"""
    if t1 < t0:
        raise StepSizeError(f"只支持向前推进: t0={t0}, t1={t1}")
    if cfg.scheme == 'damped' and damping is None:
        raise SymbolError("damped 格式需要阻尼符号")
    if callback is not None:
        callback(t0, u0)
    span = t1 - t0
    if span == 0:
        return u0
    steps = max(1, int(math.ceil(span / cfg.dt - 1e-9)))
    dt = span / steps
    logger.debug(f"时间推进: 格式={cfg.scheme}, [{t0}, {t1}], {steps} 步, dt={dt:.6g}")
    u = u0
    for i in range(steps):
        t = t0 + i * dt
        if cfg.scheme == 'exact-flat':
            u = flat_halfkg_step(u, cfg.mass, t, dt, sign)
        elif cfg.scheme in ('split-step', 'split-step-exact'):
            u = perturbed_halfkg_step(u, cfg, t, sign, dt)
        else:
            u = damped_step(u, cfg, damping, t, dt)
        t_next = t0 + (i + 1) * dt
        if callback is not None:
            _check_finite(u, t_next)
            callback(t_next, u)
    _check_finite(u, t1)
    return u


# ---------------------------------------------------------------------------
# 外向分解 𝒫_j

@dataclass(frozen=True)
class OutgoingPartition:
    """p_j(x,ξ) = χ_j(|x|)·c(x,ξ)·ρ(|ξ|)

    χ_j 为二进径向分解（j=0 吸收 |x| ≤ 1），c 为外向锥截断（x̂·ξ̂ ≤ -cone 时为0，x̂·ξ̂ ≥ 0 时为1），
    ρ 为频率环截断（在 annulus 上为1，支撑在 [lo/2, 2hi]）。
    """
    grid: Grid
    j_max: int
    annulus: Tuple[float, float] = (0.5, 2.0)
    cone: float = 2.0 ** -5

    def _check_index(self, j: int) -> None:
        if not 0 <= j <= self.j_max:
            raise GridError(f"分解指标 j={j} 超出范围 [0, {self.j_max}]")

    def radial(self, j: int, r) -> np.ndarray:
        self._check_index(j)
        with np.errstate(divide='ignore'):
            u = np.log2(np.asarray(r, dtype=float)) - j
        mult = dyadic_bump(u)
        if j == 0:
            mult = np.where(u <= 0.0, 1.0, mult)
        return mult

    def angular(self, x, xi) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        xi = np.asarray(xi, dtype=float)
        scale = np.sqrt(np.sum(x ** 2, axis=-1)) * np.sqrt(np.sum(xi ** 2, axis=-1))
        dot = np.sum(x * xi, axis=-1)
        cosine = np.where(scale > 0, dot / np.where(scale > 0, scale, 1.0), 1.0)
        return smooth_step((cosine + self.cone) / self.cone)

    def frequency(self, xi) -> np.ndarray:
        k = np.sqrt(np.sum(np.asarray(xi, dtype=float) ** 2, axis=-1))
        return frequency_cutoff_multiplier(self.grid, *self.annulus, radius=np.asarray(k))

    def symbol(self, j: int, x, xi) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        r = np.sqrt(np.sum(x ** 2, axis=-1))
        return self.radial(j, r) * self.angular(x, xi) * self.frequency(xi)

    def total(self, x, xi) -> np.ndarray:
        return sum(self.symbol(j, x, xi) for j in range(self.j_max + 1))

    def cone_cutoff(self, x, xi) -> np.ndarray:
        """Σ_j p_j 在 |x| ≤ 2^{j_max} 上应等于的值"""
        return self.angular(x, xi) * self.frequency(xi)


def outgoing_partition(grid: Grid, j_max: int) -> OutgoingPartition:
    if j_max < 0:
        raise GridError(f"j_max 必须非负，当前为 {j_max}")
    if 2.0 ** (j_max + 1) > grid.half_width:
        raise GridError(f"盒子太小: 2^{j_max + 1} > L={grid.half_width}")
    return OutgoingPartition(grid, int(j_max))


def apply_partition(partition: OutgoingPartition, j: int, u: SpectralField) -> SpectralField:
    """𝒫_j u，按频率分格量子化"""
    grid = partition.grid
    bins = frequency_bins(grid)
    factors = []
    for b in bins:
        values = partition.symbol(j, grid.points, np.asarray(b.center))
        factors.append(values if np.any(values) else None)
    return binned_operator(grid, factors, bins, f"P_{j}")(u)


# ---------------------------------------------------------------------------
# 参数解诊断

@dataclass
class ParametrixReport:
    """区域质量随时间的记录，各列都已除以 ‖data‖"""
    j: int
    s: float
    t: float
    rows: List[Dict[str, float]]

    @property
    def final(self) -> Dict[str, float]:
        return self.rows[-1]

    def max_mass(self, key: str) -> float:
        return max(row[key] for row in self.rows)


def _region_row(u: SpectralField, data_norm: float, elapsed: float, j: int, lam: float, theta: float,
                band: np.ndarray) -> Dict[str, float]:
    grid = u.grid
    reach = elapsed + 2.0 ** j
    density = np.abs(u.values) ** 2
    if density.ndim > grid.dim:
        density = np.sum(density, axis=tuple(range(density.ndim - grid.dim)))
    inner = grid.integrate(np.where(grid.radius < 2.0 ** -10 * reach, density, 0.0))
    outer = grid.integrate(np.where(grid.radius > 2.0 ** 10 * reach, density, 0.0))
    leakage = u.apply_multiplier(1.0 - band).norm()
    decay = lam ** theta * (1.0 + elapsed) ** (-(grid.dim - 1 + theta) / 2.0)
    return {
        'elapsed': elapsed,
        'inner_mass': math.sqrt(float(inner)) / data_norm,
        'outer_mass': math.sqrt(float(outer)) / data_norm,
        'frequency_leakage': leakage / data_norm,
        'sup': u.sup() / data_norm,
        'decay_reference': decay,
        'reference_n1': (1.0 + elapsed) ** -1,
        'reference_n2': (1.0 + elapsed) ** -2,
    }


def parametrix_diagnostics(cfg: PropagatorConfig, damping: Optional[DampingSymbol], j: int, s: float, t: float,
                           data: SpectralField, samples: int = 4, theta: float = 1.0) -> ParametrixReport:
    """把 𝒫_j 局部化的数据从 s 推进到 t，记录内区、外区、频带外的质量"""
    grid = cfg.grid
    if t < s:
        raise StepSizeError(f"需要 t ≥ s，当前 s={s}, t={t}")
    if (t - s) + 2.0 ** (j + 1) > grid.half_width:
        raise WraparoundError(f"周期盒子回绕: |t-s| + 2^{j + 1} = {(t - s) + 2.0 ** (j + 1):.6g} > L={grid.half_width}")
    data_norm = data.norm()
    if data_norm == 0:
        raise MeasurementError("参数解诊断的数据为零")
    band = frequency_cutoff_multiplier(grid, 1.0 / 16.0, 16.0)
    times = np.linspace(s, t, max(int(samples), 1) + 1)
    rows = [_region_row(data, data_norm, 0.0, j, cfg.lam, theta, band)]
    u = data
    for start, stop in zip(times[:-1], times[1:]):
        u = propagate(u, cfg, float(start), float(stop), damping=damping)
        rows.append(_region_row(u, data_norm, float(stop - s), j, cfg.lam, theta, band))
    final = rows[-1]
    logger.info(f"参数解诊断: j={j}, t-s={t - s:.4g}, 内区={final['inner_mass']:.3e}, "
                f"外区={final['outer_mass']:.3e}, 频带外={final['frequency_leakage']:.3e}")
    return ParametrixReport(j, s, t, rows)


# ---------------------------------------------------------------------------
# 三次 Dirac

def nonlinear_substep(psi: SpinorField, dt: float) -> SpinorField:
    """∂_tψ = i(ψ†ψ)γ⁰ψ 的逐点精确解 e^{i dt (ψ†ψ)γ⁰}ψ"""
    angle = dt * psi.density()
    gamma_psi = np.einsum('ij,j...->i...', FLAT_GAMMAS[0], psi.values)
    return psi.with_values(np.cos(angle) * psi.values + 1j * np.sin(angle) * gamma_psi)


@dataclass
class DiracSeries:
    """采样时刻的 (Π₊ψ, Π₋ψ) 及其 H^s 范数"""
    times: List[float]
    plus: List[SpinorField] = field(repr=False)
    minus: List[SpinorField] = field(repr=False)
    plus_norms: List[float]
    minus_norms: List[float]
    mass: float
    sobolev_s: float
    eta: float

    def index_of(self, t: float) -> int:
        return int(np.argmin(np.abs(np.asarray(self.times) - t)))

    def state(self, t: float) -> SpinorField:
        i = self.index_of(t)
        return self.plus[i] + self.minus[i]

    @property
    def max_growth(self) -> float:
        initial = max(self.plus_norms[0], self.minus_norms[0])
        peak = max(max(self.plus_norms), max(self.minus_norms))
        return peak / initial if initial > 0 else 0.0

    def rows(self) -> List[Dict[str, float]]:
        out = []
        for t, p, m, hp, hm in zip(self.times, self.plus, self.minus, self.plus_norms, self.minus_norms):
            psi = p + m
            out.append({'t': t, 'l2': psi.norm(), 'hs_plus': hp, 'hs_minus': hm, 'sup': psi.sup()})
        return out


class _DiracLinearPart:
    """投影重写后的线性部分：Π±ψ 分别按 ±⟨D⟩_g 推进，曲率下加上 (1+𝓔)^{-1}[D_t ± ⟨D⟩, 𝓔] 修正"""

    def __init__(self, cfg: PropagatorConfig, neumann_order: int = 2):
        self.cfg = cfg
        self.neumann_order = neumann_order
        self._projector = None

    def projector(self, t: float):
        spec = self.cfg.metric
        if spec.static:
            if self._projector is None:
                self._projector = self._build_projector(0.0)
            return self._projector
        return self._build_projector(t)

    def _build_projector(self, t: float):
        cfg = self.cfg
        if cfg.metric.is_flat:
            return flat_projector(cfg.mass, 1, cfg.grid)
        return curved_projector(cfg.metric, cfg.mass, 1, cfg.grid, t)

    def _correction(self, t: float, sign: int) -> Optional[_Generator]:
        cfg = self.cfg
        spec = cfg.metric
        if spec.is_flat:
            return None
        grid = cfg.grid
        d = grid.dim
        axes = tuple(range(2, 2 + d))
        weight = 0.25 / grid.bracket(cfg.mass) ** 2
        bracket = grid.bracket(cfg.mass)
        coefficients = _metric_perturbation(spec, grid, t)
        size = 0.25 * float(np.sum(np.max(np.abs(coefficients), axis=axes)))
        gradient = 0.0
        for i in range(d):
            alpha = tuple(1 if m == i + 1 else 0 for m in range(d + 1))
            gradient += float(np.sum(np.max(np.abs(_metric_perturbation(spec, grid, t, alpha)), axis=axes)))
        rate = None
        rate_size = 0.0
        if not spec.static:
            rate = _metric_perturbation(spec, grid, t, (1,) + (0,) * d)
            rate_size = 0.25 * float(np.sum(np.max(np.abs(rate), axis=axes)))

        def defect(u: SpectralField) -> SpectralField:
            return _apply_second_order(coefficients, weight, u)

        def apply(u: SpectralField) -> SpectralField:
            commutator = defect(u).apply_multiplier(bracket) - defect(u.apply_multiplier(bracket))
            inner = commutator * sign
            if rate is not None:
                inner = inner + _apply_second_order(rate, weight, u) * (-1j)
            out = inner
            term = inner
            for _ in range(self.neumann_order):
                term = -defect(term)
                out = out + term
            return out

        neumann = sum(size ** n for n in range(self.neumann_order + 1))
        return _Generator(apply, neumann * (0.25 * gradient + rate_size))

    def half_step(self, psi: SpinorField, t: float, dt: float) -> SpinorField:
        plus = self.projector(t)(psi)
        minus = psi - plus
        out = []
        for sign, part in ((1, plus), (-1, minus)):
            def factory(tm: float, sign=sign) -> Optional[_Generator]:
                perturbation = _perturbation_generator(self.cfg, tm, sign)
                correction = self._correction(tm, sign)
                if perturbation is None:
                    return correction
                return perturbation + correction
            out.append(_strang(part, self.cfg, t, dt, sign, factory))
        return out[0] + out[1]

    def split(self, psi: SpinorField, t: float) -> Tuple[SpinorField, SpinorField]:
        plus = self.projector(t)(psi)
        return plus, psi - plus


def cubic_dirac_solve(psi0: SpinorField, spec: MetricSpec, mass: float, horizon: float, dt: float,
                      sobolev_s: float = 1.5, eta: Optional[float] = None, nonlinear: bool = True,
                      samples: int = 10, neumann_order: int = 2) -> DiracSeries:
    """(−iγ^μ𝐃_μ + M)ψ = (ψ†ψ)γ⁰ψ 的 Strang 分裂求解

    线性半步作用在 Π±ψ 上，非线性子步逐点精确旋转并做 2/3 去混叠。
    H^s 范数超过 4η 时抛出 SmallDataError。
    """
    if not sobolev_s > 1:
        raise SymbolError(f"Sobolev 指数 s 必须大于1，当前为 {sobolev_s}")
    if not horizon > 0:
        raise StepSizeError(f"时间范围必须为正数，当前为 {horizon}")
    grid = psi0.grid
    cfg = PropagatorConfig(grid, spec, mass, dt, 'split-step')
    linear = _DiracLinearPart(cfg, neumann_order)
    mask = dealias_mask(grid)

    def norms(psi: SpinorField, t: float) -> Tuple[SpinorField, SpinorField, float, float]:
        plus, minus = linear.split(psi, t)
        return plus, minus, sobolev_norm(plus, sobolev_s, mass), sobolev_norm(minus, sobolev_s, mass)

    plus, minus, hp, hm = norms(psi0, 0.0)
    initial = max(hp, hm)
    if eta is None:
        eta = initial
    elif initial > eta:
        raise SmallDataError(initial, eta)
    bound = 4.0 * eta
    steps = max(1, int(math.ceil(horizon / dt - 1e-9)))
    step = horizon / steps
    every = max(1, steps // max(int(samples), 1))
    series = DiracSeries([0.0], [plus], [minus], [hp], [hm], mass, sobolev_s, eta)
    logger.info(f"三次 Dirac 求解: T={horizon}, {steps} 步, 非线性={'开' if nonlinear else '关'}, "
                f"初始 H^{sobolev_s} 范数={initial:.4g}")

    psi = psi0
    for i in range(steps):
        t = i * step
        psi = linear.half_step(psi, t, 0.5 * step)
        if nonlinear:
            psi = nonlinear_substep(psi, step).apply_multiplier(mask)
        psi = linear.half_step(psi, t + 0.5 * step, 0.5 * step)
        if (i + 1) % every == 0 or i + 1 == steps:
            t_next = (i + 1) * step
            _check_finite(psi, t_next)
            plus, minus, hp, hm = norms(psi, t_next)
            if max(hp, hm) > bound:
                logger.error(f"t={t_next:.4g} 时离开小数据区域: {max(hp, hm):.4g} > {bound:.4g}")
                raise SmallDataError(max(hp, hm), bound)
            series.times.append(t_next)
            series.plus.append(plus)
            series.minus.append(minus)
            series.plus_norms.append(hp)
            series.minus_norms.append(hm)
            logger.debug(f"Dirac 采样: t={t_next:.4g}, H^s(Π₊ψ)={hp:.6g}, H^s(Π₋ψ)={hm:.6g}")
    return series


@dataclass
class TailTable:
    """c(t,t′) = ‖U₀(-t)Π±ψ(t) - U₀(-t′)Π±ψ(t′)‖_{H^s}"""
    rows: List[Dict[str, float]]

    def values(self, sign: int) -> List[float]:
        """固定最大的 t，按 t′ 递增排列"""
        chosen = [row for row in self.rows if row['sign'] == sign]
        if not chosen:
            return []
        top = max(row['t'] for row in chosen)
        return [row['tail'] for row in sorted(chosen, key=lambda r: r['t_prime']) if row['t'] == top]

    @property
    def decreasing(self) -> bool:
        return all(all(b <= a for a, b in zip(v, v[1:])) for v in (self.values(1), self.values(-1)))

    @property
    def final(self) -> float:
        return max((v[-1] for v in (self.values(1), self.values(-1)) if v), default=0.0)


def scattering_tail(series: DiracSeries, sobolev_s: Optional[float], times: Sequence[float]) -> TailTable:
    """对 T_list 中的每对 t > t′ 计算自由演化拉回后的差"""
    s = series.sobolev_s if sobolev_s is None else sobolev_s
    grid = series.plus[0].grid
    pulled = {}
    for sign, parts in ((1, series.plus), (-1, series.minus)):
        for t in times:
            i = series.index_of(t)
            pulled[(sign, t)] = flat_halfkg_step(parts[i], series.mass, series.times[i], -series.times[i], sign)
    rows = []
    ordered = sorted(times)
    for sign in (1, -1):
        for a, t_prime in enumerate(ordered):
            for t in ordered[a + 1:]:
                diff = pulled[(sign, t)] - pulled[(sign, t_prime)]
                rows.append({'sign': sign, 't': float(t), 't_prime': float(t_prime),
                             'tail': sobolev_norm(diff, s, series.mass)})
    logger.debug(f"散射尾项: {len(rows)} 对, 网格={grid}")
    return TailTable(rows)


def evolution_row(t: float, u: SpectralField, sobolev_s: float, mass: float = 1.0,
                  masses: Optional[Dict[str, float]] = None) -> Dict[str, float]:
    """时间序列 CSV 的一行：t, L², H^s, sup 以及可选的区域质量"""
    row = {'t': t, 'l2': u.norm(), 'hs': sobolev_norm(u, sobolev_s, mass), 'sup': u.sup()}
    row.update(masses or {})
    return row
