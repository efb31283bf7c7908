"""范数与拟合：混合时空范数、Sobolev 范数、局部能量 X_k / X^s、Strichartz 容许对与衰减指数"""
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from loguru import logger
from scipy import integrate, stats

from dispersive_lab.exceptions import (
    ForbiddenEndpointError,
    GridError,
    MeasurementError,
    NonAdmissibleError,
)
from dispersive_lab.grid import Grid, SpectralField, littlewood_paley_multiplier, resolvable_band

# L^∞ 端点用高次 L^q 代替
HIGH_Q = 64.0


def sobolev_norm(f: SpectralField, s: float, mass: float = 1.0) -> float:
    """‖⟨D⟩_M^s f‖_{L²}"""
    if s == 0:
        return f.norm()
    return f.apply_multiplier(f.grid.bracket(mass) ** s).norm()


def _pointwise_modulus(f: SpectralField) -> np.ndarray:
    values = np.abs(f.values)
    if values.ndim > f.grid.dim:
        values = np.sqrt(np.sum(values ** 2, axis=tuple(range(values.ndim - f.grid.dim))))
    return values


def lq_norm(f: SpectralField, q: float) -> float:
    """‖f‖_{L^q}；旋量场逐点取向量模长"""
    if not q >= 1:
        raise MeasurementError(f"L^q 指数必须 ≥ 1，当前为 {q}")
    modulus = _pointwise_modulus(f)
    if math.isinf(q):
        return float(np.max(modulus))
    return float(f.grid.integrate(modulus ** q) ** (1.0 / q))


@dataclass
class TimeSeriesNorms:
    """逐个采样时刻记录 ⟨D⟩^derivative u 的 L^q、H^s 与 sup 范数；可直接作为 propagate 的回调"""
    qs: Tuple[float, ...] = (2.0,)
    sobolev: Tuple[float, ...] = (0.0,)
    derivative: float = 0.0
    mass: float = 1.0
    times: List[float] = field(default_factory=list)
    lq: Dict[float, List[float]] = field(default_factory=dict)
    hs: Dict[float, List[float]] = field(default_factory=dict)
    sup: List[float] = field(default_factory=list)

    def record(self, t: float, u: SpectralField) -> None:
        if self.times and t <= self.times[-1]:
            raise MeasurementError(f"采样时刻必须递增: {t} ≤ {self.times[-1]}")
        v = u if self.derivative == 0 else u.apply_multiplier(u.grid.bracket(self.mass) ** self.derivative)
        self.times.append(float(t))
        for q in self.qs:
            self.lq.setdefault(q, []).append(lq_norm(v, q))
        for s in self.sobolev:
            self.hs.setdefault(s, []).append(sobolev_norm(u, s, self.mass))
        self.sup.append(float(np.max(_pointwise_modulus(v))))

    __call__ = record

    def rows(self) -> List[Dict[str, float]]:
        out = []
        for i, t in enumerate(self.times):
            row = {'t': t, 'sup': self.sup[i]}
            for q in self.qs:
                row[f"L{q:g}"] = self.lq[q][i]
            for s in self.sobolev:
                row[f"H{s:g}"] = self.hs[s][i]
            out.append(row)
        return out


def _time_norm(times: Sequence[float], values: Sequence[float], p: float) -> float:
    values = np.asarray(values, dtype=float)
    if math.isinf(p):
        return float(np.max(values))
    if len(values) < 2:
        raise MeasurementError("有限 p 的时间积分至少需要两个采样")
    return float(integrate.trapezoid(values ** p, np.asarray(times, dtype=float)) ** (1.0 / p))


def mixed_norm(series: TimeSeriesNorms, p: float, q: float) -> float:
    """‖u‖_{L^p_t L^q_x}，时间方向用梯形公式，p=∞ 取最大值"""
    if q not in series.lq:
        raise MeasurementError(f"时间序列没有记录 L^{q} 范数，已有 {sorted(series.lq)}")
    if not p >= 1:
        raise MeasurementError(f"时间指数 p 必须 ≥ 1，当前为 {p}")
    if not series.times:
        raise MeasurementError("时间序列为空")
    return _time_norm(series.times, series.lq[q], p)


# ---------------------------------------------------------------------------
# Strichartz 容许对

@dataclass(frozen=True)
class AdmissiblePair:
    """2/p + (d-1+θ)/q = (d-1+θ)/2，σ = ((d+1+θ)/4)(1-2/q)"""
    d: int
    theta: float
    q: float
    p: float
    sigma: float

    def residuals(self) -> Tuple[float, float]:
        k = self.d - 1 + self.theta
        inv_p = 0.0 if math.isinf(self.p) else 1.0 / self.p
        inv_q = 0.0 if math.isinf(self.q) else 1.0 / self.q
        scaling = 2.0 * inv_p + k * inv_q - k / 2.0
        smoothing = self.sigma - (self.d + 1 + self.theta) / 4.0 * (1.0 - 2.0 * inv_q)
        return scaling, smoothing


def admissible_pair(d: int, theta: float, q: float) -> AdmissiblePair:
    if not 0.0 <= theta <= 1.0:
        raise NonAdmissibleError(f"θ 必须位于 [0,1]，当前为 {theta}")
    if not q >= 2:
        raise NonAdmissibleError(f"q 必须 ≥ 2，当前为 {q}")
    if d == 3 and theta == 0 and math.isinf(q):
        raise ForbiddenEndpointError("forbidden endpoint: d=3, θ=0 时 (p,q)=(2,∞) 不允许")
    k = d - 1 + theta
    inv_q = 0.0 if math.isinf(q) else 1.0 / q
    inv_p = k * (0.5 - inv_q) / 2.0
    if inv_p > 0.5 + 1e-15:
        raise NonAdmissibleError(f"non-admissible: (d,θ,q)=({d},{theta},{q}) 给出 p={1.0 / inv_p:.6g} < 2")
    p = math.inf if inv_p == 0 else 1.0 / inv_p
    sigma = (d + 1 + theta) / 4.0 * (1.0 - 2.0 * inv_q)
    return AdmissiblePair(d, float(theta), float(q), p, sigma)


def strichartz_ratio(series: TimeSeriesNorms, pair: AdmissiblePair, s: float, data: SpectralField,
                     forcing: Optional[object] = None) -> float:
    """‖⟨D⟩^{s-σ}u‖_{L^pL^q} / ‖u₀‖_{H^s}；series 必须按 derivative = s-σ 记录"""
    if forcing is not None:
        raise MeasurementError("Strichartz 比值只对齐次解 (f=0) 定义")
    if abs(series.derivative - (s - pair.sigma)) > 1e-12:
        raise MeasurementError(f"时间序列的导数阶 {series.derivative} 与 s-σ = {s - pair.sigma} 不一致")
    q = HIGH_Q if math.isinf(pair.q) else pair.q
    denominator = sobolev_norm(data, s, series.mass)
    if denominator == 0:
        raise MeasurementError("初值的 H^s 范数为零")
    ratio = mixed_norm(series, pair.p, q) / denominator
    logger.debug(f"Strichartz 比值: (p,q)=({pair.p:g},{pair.q:g}), σ={pair.sigma:.4g}, ratio={ratio:.6g}")
    return ratio


# ---------------------------------------------------------------------------
# 局部能量

def _shell_range(grid: Grid, k: int) -> Tuple[int, int]:
    if 2.0 ** -k < grid.spacing:
        raise GridError(f"壳层 |x| < 2^{-k} 小于网格间距 {grid.spacing}")
    top = int(math.ceil(math.log2(grid.half_width * math.sqrt(grid.dim)))) + 1
    return -k, top


class LocalEnergyAccumulator:
    """流式累积各壳层 A_j 上的 ∫|x|^{-1}|u|² 与低区 ∫_{|x|<2^{-k}}|u|²，时间方向梯形积分

    localize=True 时先做频率投影 S_k，用来计算 X^s。
    """

    def __init__(self, grid: Grid, ks: Iterable[int], localize: bool = False, offset: bool = False):
        self.grid = grid
        self.ks = [int(k) for k in ks]
        self.localize = localize
        self.offset = offset
        self.ranges = {k: _shell_range(grid, k) for k in self.ks}
        self.times: List[float] = []
        self._low: Dict[int, List[float]] = {k: [] for k in self.ks}
        self._shells: Dict[int, List[np.ndarray]] = {k: [] for k in self.ks}
        j_lo, _ = resolvable_band(grid)
        self._j_lo = j_lo

    def _piece(self, u: SpectralField, k: int) -> SpectralField:
        if not self.localize:
            return u
        return u.apply_multiplier(littlewood_paley_multiplier(self.grid, k, floor=(k == self._j_lo)))

    def record(self, t: float, u: SpectralField) -> None:
        if self.times and t <= self.times[-1]:
            raise MeasurementError(f"采样时刻必须递增: {t} ≤ {self.times[-1]}")
        grid = self.grid
        r = grid.radius
        self.times.append(float(t))
        for k in self.ks:
            density = _pointwise_modulus(self._piece(u, k)) ** 2
            lo, hi = self.ranges[k]
            self._low[k].append(float(grid.integrate(np.where(r < 2.0 ** -k, density, 0.0))))
            weight = 1.0 / (r + 2.0 ** -k) if self.offset else 1.0 / np.where(r > 0, r, np.inf)
            shells = []
            for j in range(lo, hi + 1):
                mask = (r > 2.0 ** (j - 1)) & (r < 2.0 ** (j + 1))
                shells.append(float(grid.integrate(np.where(mask, weight * density, 0.0))))
            self._shells[k].append(np.array(shells))

    __call__ = record

    @property
    def horizon(self) -> float:
        return self.times[-1] - self.times[0] if self.times else 0.0

    def _integrated(self, k: int) -> Tuple[float, np.ndarray]:
        if k not in self._low:
            raise MeasurementError(f"没有累积频带 k={k}")
        if len(self.times) < 2:
            raise MeasurementError("局部能量的时间积分至少需要两个采样")
        low = integrate.trapezoid(np.array(self._low[k]), self.times)
        shells = integrate.trapezoid(np.stack(self._shells[k]), self.times, axis=0)
        return float(low), shells

    def x_k(self, k: int) -> float:
        """2^k‖u‖_{L²(A_{<-k})} + 2^{k/2} sup_j ‖|x|^{-1/2}u‖_{L²(A_j)}"""
        low, shells = self._integrated(k)
        return 2.0 ** k * math.sqrt(low) + 2.0 ** (k / 2.0) * math.sqrt(float(np.max(shells)))

    def weighted(self, k: int, alpha: Optional[Sequence[float]] = None) -> float:
        """X_{k,α}: 2^{2k}‖u‖²_{L²(A_{<-k})} + 2^k Σ_j α_j ‖(|x|+2^{-k})^{-1/2}u‖²_{L²(A_j)} 的平方根"""
        if not self.offset:
            raise MeasurementError("加权局部能量需要 offset=True 的累积器")
        low, shells = self._integrated(k)
        alpha = default_alpha(len(shells)) if alpha is None else np.asarray(alpha, dtype=float)
        if alpha.shape != shells.shape or np.any(alpha <= 0):
            raise MeasurementError(f"α 需要 {len(shells)} 个正数")
        return math.sqrt(2.0 ** (2 * k) * low + 2.0 ** k * float(np.sum(alpha * shells)))


def default_alpha(count: int) -> np.ndarray:
    """缓变的正序列，和为1"""
    alpha = (1.0 + np.arange(count)) ** -2.0
    return alpha / np.sum(alpha)


Samples = Sequence[Tuple[float, SpectralField]]


def _accumulate(samples: Samples, acc: LocalEnergyAccumulator) -> LocalEnergyAccumulator:
    for t, u in samples:
        acc.record(t, u)
    return acc


def local_energy_norm(samples: Samples, k: int) -> float:
    """X_k 范数，时间积分截断在采样区间上"""
    grid = samples[0][1].grid
    return _accumulate(samples, LocalEnergyAccumulator(grid, [k])).x_k(k)


def x_s_norm(samples: Samples, s: float, bands: Optional[Sequence[int]] = None) -> float:
    """‖u‖²_{X^s} = Σ_k ⟨2^k⟩^{2s}‖S_k u‖²_{X_k}"""
    grid = samples[0][1].grid
    if bands is None:
        j_lo, j_hi = resolvable_band(grid)
        bands = [k for k in range(j_lo, j_hi + 1) if 2.0 ** -k >= grid.spacing]
    acc = _accumulate(samples, LocalEnergyAccumulator(grid, bands, localize=True))
    total = sum((1.0 + 4.0 ** k) ** s * acc.x_k(k) ** 2 for k in bands)
    return math.sqrt(total)


def weighted_local_energy_norm(samples: Samples, k: int, alpha: Optional[Sequence[float]] = None) -> float:
    grid = samples[0][1].grid
    return _accumulate(samples, LocalEnergyAccumulator(grid, [k], offset=True)).weighted(k, alpha)


def _phi_table(alpha: Callable[[np.ndarray], np.ndarray], top: float, count: int = 4097):
    """sφ(s) = ∫₀^s α(r)(1+r²)^{-1/2} dr 的表"""
    r = np.linspace(0.0, max(top, 1.0), count)
    primitive = integrate.cumulative_trapezoid(alpha(r) / np.sqrt(1.0 + r ** 2), r, initial=0.0)
    phi = np.empty_like(r)
    phi[1:] = primitive[1:] / r[1:]
    phi[0] = float(alpha(np.zeros(1))[0])
    return r, phi


def morawetz_positivity(u: SpectralField, delta: float, alpha: Optional[Callable] = None,
                        mass: float = 1.0) -> float:
    """⟨i[⟨D⟩,Q]u,u⟩ / ⟨δα(δ|x|)(1+δ|x|)^{-1}u,u⟩，Q = δ(D·xφ(δ|x|) + φ(δ|x|)x·D)"""
    if not delta > 0:
        raise MeasurementError(f"δ 必须为正数，当前为 {delta}")
    alpha = alpha or (lambda r: (1.0 + np.asarray(r, dtype=float)) ** -0.25)
    grid = u.grid
    scaled = delta * grid.radius
    table_r, table_phi = _phi_table(alpha, float(np.max(scaled)))
    phi = np.interp(scaled, table_r, table_phi)
    coords = grid.coords

    def q_op(v: SpectralField) -> SpectralField:
        total = np.zeros(v.values.shape, dtype=complex)
        for j in range(grid.dim):
            moved = grid.forward(coords[j] * phi * v.values)
            total += grid.inverse(moved * grid.wavenumbers[j])
            total += phi * coords[j] * grid.inverse(v.coefficients * grid.wavenumbers[j])
        return v.with_values(delta * total)

    bracket = grid.bracket(mass)
    commutator = (q_op(u).apply_multiplier(bracket) - q_op(u.apply_multiplier(bracket))) * 1j
    numerator = commutator.inner(u).real
    weight = delta * alpha(scaled) / (1.0 + scaled)
    denominator = float(grid.integrate(weight * _pointwise_modulus(u) ** 2))
    if denominator == 0:
        raise MeasurementError("Morawetz 分母为零")
    return numerator / denominator


# ---------------------------------------------------------------------------
# 衰减拟合

@dataclass
class DecayFit:
    exponent: float
    intercept: float
    stderr: float
    rvalue: float
    residual: float
    count: int
    window: Tuple[float, float]

    def as_dict(self) -> Dict[str, float]:
        return {'exponent': self.exponent, 'intercept': self.intercept, 'stderr': self.stderr,
                'rvalue': self.rvalue, 'residual': self.residual, 'count': self.count,
                'window_lo': self.window[0], 'window_hi': self.window[1]}


def decay_fit(times: Sequence[float], sup_norms: Sequence[float],
              window: Optional[Tuple[float, float]] = None) -> DecayFit:
    """log‖u(t)‖_∞ 对 log t 的最小二乘斜率"""
    times = np.asarray(times, dtype=float)
    values = np.asarray(sup_norms, dtype=float)
    if times.shape != values.shape:
        raise MeasurementError(f"时刻与范数长度不一致: {times.shape} vs {values.shape}")
    lo, hi = window if window is not None else (float(np.min(times)), float(np.max(times)))
    if times.size == 0 or lo > np.max(times) or hi < np.min(times) or lo >= hi:
        raise MeasurementError(f"拟合窗口 [{lo}, {hi}] 不在数据范围内")
    chosen = (times >= lo) & (times <= hi)
    if np.count_nonzero(chosen) < 6:
        raise MeasurementError(f"拟合窗口内只有 {np.count_nonzero(chosen)} 个采样，至少需要6个")
    if np.any(times[chosen] <= 0) or np.any(values[chosen] <= 0):
        raise MeasurementError("衰减拟合需要正的时刻与范数")
    log_t = np.log(times[chosen])
    log_v = np.log(values[chosen])
    fit = stats.linregress(log_t, log_v)
    residual = float(np.max(np.abs(log_v - (fit.intercept + fit.slope * log_t))))
    logger.debug(f"衰减拟合: 指数={fit.slope:.6g} ± {fit.stderr:.2g}, 窗口=[{lo}, {hi}]")
    return DecayFit(float(fit.slope), float(fit.intercept), float(fit.stderr), float(fit.rvalue),
                    residual, int(np.count_nonzero(chosen)), (float(lo), float(hi)))
