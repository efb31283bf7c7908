"""Hamilton 流、流的 Jacobian、缓变剖面 ε(s)/e(s) 与阻尼符号 𝔅

轨道满足 ẋ = ∂_ξH，ξ̇ = -∂_xH，H = ⟨ξ⟩_λ + 𝔄。积分使用经典四阶 Runge-Kutta，
按步长加倍估计局部误差并自适应调整步长；同一批相点共享步长。
"""
import math
import threading
import weakref
from dataclasses import dataclass, field
from functools import cached_property
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import sympy
from loguru import logger
from scipy import integrate, interpolate

from dispersive_lab.exceptions import FlowError, NumericalError, SymbolError
from dispersive_lab.grid import smooth_step
from dispersive_lab.metric import MetricSpec
from dispersive_lab.pdo import Symbol, metric_expression, symbol_variables
from dispersive_lab.phasespace import kg_jacobian_matrix

PhasePoint = Tuple[np.ndarray, np.ndarray]

SLOW_VARIATION = 2.0 ** -10
_SUBSTEPS_PER_SHELL = 256


# ---------------------------------------------------------------------------
# Hamilton 量

def flat_hamiltonian(dim: int, lam: float = 1.0) -> Symbol:
    """⟨ξ⟩_λ = √(λ^{-2} + |ξ|²)"""
    if not lam > 0:
        raise SymbolError(f"λ 必须为正数，当前为 {lam}")
    _, _, xis = symbol_variables(dim)
    return Symbol(sympy.sqrt(sympy.nsimplify(1.0 / lam) ** 2 + sum(k ** 2 for k in xis)), dim, 1.0, 'flat-halfkg')


def halfkg_hamiltonian(spec: MetricSpec, lam: float = 1.0) -> Symbol:
    """√(λ^{-2} + g^{ij}(t,x)ξ_iξ_j)，即 ⟨ξ⟩_λ + 𝔄"""
    if not lam > 0:
        raise SymbolError(f"λ 必须为正数，当前为 {lam}")
    if spec.is_flat:
        return flat_hamiltonian(spec.dim, lam)
    _, _, xis = symbol_variables(spec.dim)
    xi = sympy.Matrix(xis)
    quad = (xi.T * metric_expression(spec) * xi)[0, 0]
    return Symbol(sympy.sqrt(sympy.nsimplify(1.0 / lam) ** 2 + quad), spec.dim, 1.0, f'halfkg[{spec.name}]')


class HamiltonianField:
    """编译后的 (∂_ξH, -∂_xH)"""

    def __init__(self, sym: Symbol):
        if sym.expr is None:
            raise SymbolError(f"数值符号 {sym.name or '<anonymous>'} 不提供导数，无法构造 Hamilton 向量场")
        if sym.is_matrix:
            raise SymbolError("Hamilton 流需要标量符号")
        self.dim = sym.dim
        velocity = [sympy.diff(sym.expr, k) for k in sym.xis]
        force = [-sympy.diff(sym.expr, v) for v in sym.xs]
        self._raw = sympy.lambdify(sym.variables, velocity + force, modules='numpy')

    def __call__(self, t, x: np.ndarray, xi: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        d = self.dim
        batch = np.broadcast_shapes(np.shape(t), x.shape[:-1], xi.shape[:-1])
        raw = self._raw(t, *[x[..., i] for i in range(d)], *[xi[..., i] for i in range(d)])
        parts = [np.broadcast_to(np.asarray(v, dtype=float), batch) for v in raw]
        return np.stack(parts[:d], axis=-1), np.stack(parts[d:], axis=-1)


_FIELDS: 'weakref.WeakKeyDictionary[Symbol, HamiltonianField]' = weakref.WeakKeyDictionary()
_FIELDS_LOCK = threading.Lock()


def _field_for(sym: Symbol) -> HamiltonianField:
    with _FIELDS_LOCK:
        compiled = _FIELDS.get(sym)
        if compiled is None:
            compiled = HamiltonianField(sym)
            _FIELDS[sym] = compiled
        return compiled


def hamiltonian_field(sym: Symbol, t: float, p: PhasePoint) -> Tuple[np.ndarray, np.ndarray]:
    """Hamilton 向量场 (ẋ, ξ̇) 在相点 p 处的值"""
    x = np.asarray(p[0], dtype=float)
    xi = np.asarray(p[1], dtype=float)
    if x.shape[-1] != sym.dim or xi.shape[-1] != sym.dim:
        raise SymbolError(f"相点维数与符号维数 {sym.dim} 不一致")
    return _field_for(sym)(t, x, xi)


# ---------------------------------------------------------------------------
# ε(s) 剖面

def _lipschitz_envelope(log_base: np.ndarray, slope: float) -> np.ndarray:
    """max_i(log b_i - slope|j-i|)，相邻差不超过 slope"""
    index = np.arange(len(log_base))
    return np.max(log_base[None, :] - slope * np.abs(index[:, None] - index[None, :]), axis=1)


@dataclass(frozen=True, eq=False)
class EpsProfile:
    """缓变序列 {ε_j} 及其插值 ε(s)

    ε(2^j) = 1.5ε_j，壳层之间对 log ε 做 PCHIP 插值；壳层范围外 log ε 按 slow 的斜率线性衰减，
    因此 ∫₀^∞ ε(s)/s ds 有限并被归一化为 budget。
    """
    budget: float
    shells: Tuple[int, int]
    log_shell_values: np.ndarray
    slow: float = SLOW_VARIATION

    @cached_property
    def _log_interp(self) -> interpolate.PchipInterpolator:
        lo, hi = self.shells
        return interpolate.PchipInterpolator(np.arange(lo, hi + 1, dtype=float),
                                             self.log_shell_values + math.log(1.5))

    def _log_eps(self, u: np.ndarray) -> np.ndarray:
        lo, hi = self.shells
        inner = self._log_interp(np.clip(u, lo, hi))
        below = float(self._log_interp(lo)) - self.slow * (lo - u)
        above = float(self._log_interp(hi)) - self.slow * (u - hi)
        return np.where(u < lo, below, np.where(u > hi, above, inner))

    @cached_property
    def _cumulative_table(self) -> Tuple[np.ndarray, np.ndarray, float, float]:
        lo, hi = self.shells
        u = np.linspace(lo, hi, (hi - lo) * _SUBSTEPS_PER_SHELL + 1)
        inner = integrate.cumulative_trapezoid(np.exp(self._log_eps(u)), u, initial=0.0)
        tail_lo = math.exp(float(self._log_eps(np.asarray(float(lo))))) / self.slow
        tail_hi = math.exp(float(self._log_eps(np.asarray(float(hi))))) / self.slow
        return u, inner, tail_lo, tail_hi

    def shell_value(self, j) -> np.ndarray:
        """ε_j，壳层范围外按同一斜率延拓"""
        return np.exp(self._log_eps(np.asarray(j, dtype=float))) / 1.5

    def __call__(self, s) -> np.ndarray:
        s = np.asarray(s, dtype=float)
        with np.errstate(divide='ignore'):
            u = np.log2(np.where(s > 0, s, 1.0))
        return np.where(s > 0, np.exp(self._log_eps(u)), 0.0)

    def log_derivative(self, s) -> np.ndarray:
        """s ε'(s)/ε(s)"""
        s = np.asarray(s, dtype=float)
        u = np.log2(s)
        lo, hi = self.shells
        inner = self._log_interp.derivative()(np.clip(u, lo, hi))
        slope = np.where(u < lo, self.slow, np.where(u > hi, -self.slow, inner))
        return slope / math.log(2.0)

    def integral_up_to(self, s) -> np.ndarray:
        """∫₀^s ε(σ)/σ dσ"""
        s = np.asarray(s, dtype=float)
        lo, hi = self.shells
        u_table, inner, tail_lo, tail_hi = self._cumulative_table
        with np.errstate(divide='ignore'):
            u = np.log2(np.where(s > 0, s, 1.0))
        below = np.exp(self._log_eps(u)) / self.slow
        middle = tail_lo + np.interp(u, u_table, inner)
        above = tail_lo + inner[-1] + tail_hi * (1.0 - np.exp(-self.slow * (u - hi)))
        value = np.where(u < lo, below, np.where(u > hi, above, middle)) * math.log(2.0)
        return np.where(s > 0, value, 0.0)

    def total(self) -> float:
        """∫₀^∞ ε(s)/s ds"""
        _, inner, tail_lo, tail_hi = self._cumulative_table
        return float((tail_lo + inner[-1] + tail_hi) * math.log(2.0))

    def cumulative(self, s) -> np.ndarray:
        """e(s) = ε^{-1}∫₀^s ε(σ)/σ dσ，递增且以 total/ε 为上界"""
        return self.integral_up_to(s) / self.budget

    def max_log_step(self, margin: int = 2) -> float:
        """max |log ε_j - log ε_{j-1}|"""
        lo, hi = self.shells
        logs = np.log(self.shell_value(np.arange(lo - margin, hi + margin + 1)))
        return float(np.max(np.abs(np.diff(logs))))

    def shell_bracket(self, per_shell: int = 25, margin: int = 2) -> Tuple[float, float]:
        """壳层 2^j < s < 2^{j+1} 内 ε(s)/ε_j 的最小值与最大值，应位于 (1, 2)"""
        lo, hi = self.shells
        ratios = []
        for j in range(lo - margin, hi + margin + 1):
            s = 2.0 ** (j + np.linspace(0.0, 1.0, per_shell + 2)[1:-1])
            ratios.append(self(s) / self.shell_value(j))
        ratios = np.concatenate(ratios)
        return float(ratios.min()), float(ratios.max())


def make_eps_profile(eps: float, decay: float = 2.0, shells: Tuple[int, int] = (-20, 20),
                     slow: float = SLOW_VARIATION) -> EpsProfile:
    """由基础序列 (1+|j|)^{-decay} 构造缓变剖面并归一化到 ∫ε(s)/s ds = eps"""
    if not eps > 0:
        raise SymbolError(f"ε 预算必须为正数，当前为 {eps}")
    lo, hi = int(shells[0]), int(shells[1])
    if hi - lo < 2:
        raise SymbolError(f"壳层范围 [{lo}, {hi}] 太短，无法归一化")
    if not 0 < slow <= SLOW_VARIATION:
        raise SymbolError(f"缓变斜率必须位于 (0, 2^-10]，当前为 {slow}")
    j = np.arange(lo, hi + 1, dtype=float)
    log_base = -decay * np.log1p(np.abs(j))
    envelope = _lipschitz_envelope(log_base, slow)
    draft = EpsProfile(float(eps), (lo, hi), envelope, slow)
    shift = math.log(eps / draft.total())
    profile = EpsProfile(float(eps), (lo, hi), envelope + shift, slow)
    logger.debug(f"ε 剖面: ε={eps:g}, 壳层 [{lo}, {hi}], ε(1)={float(profile(1.0)):.4g}")
    return profile


# ---------------------------------------------------------------------------
# 阻尼符号

DAMPING_VARIANTS = ('full', 'low')


@dataclass(frozen=True, eq=False)
class DampingSymbol:
    """𝔅_λ(t,x,ξ) = t^{-κ}(1 - Π_j φ(b_j))

    variant='low' 为低频版本：去掉 b₂，b₁ 的截断频率改为 8。
    """
    profile: EpsProfile
    lam: float = 1.0
    c: float = 2.0 ** -4
    exponent: float = 0.75
    variant: str = 'full'

    def __post_init__(self):
        if not 0.5 < self.exponent < 1.0:
            raise SymbolError(f"阻尼指数必须位于 (1/2, 1)，当前为 {self.exponent}")
        if self.variant not in DAMPING_VARIANTS:
            raise SymbolError(f"未知阻尼版本: {self.variant}，可选 {DAMPING_VARIANTS}")
        if not self.lam > 0:
            raise SymbolError(f"λ 必须为正数，当前为 {self.lam}")

    def factors(self, t, x, xi) -> np.ndarray:
        """(b₁,…,b₅)，堆叠在最后一个轴；低频版本的 b₂ 取 +∞"""
        t = np.asarray(t, dtype=float)
        x = np.asarray(x, dtype=float)
        xi = np.asarray(xi, dtype=float)
        r = np.sqrt(np.sum(x ** 2, axis=-1))
        k = np.sqrt(np.sum(xi ** 2, axis=-1))
        dot = np.sum(x * xi, axis=-1)
        eps_t = self.profile(t)
        e_t = self.profile.cumulative(t)
        if self.variant == 'low':
            b1 = (8.0 + e_t - k) / eps_t
            b2 = np.full(np.broadcast_shapes(np.shape(t), k.shape), np.inf)
        else:
            b1 = (2.0 ** 3.5 + e_t - k) / eps_t
            b2 = (k - 2.0 ** -3.5 + self.c * e_t) / eps_t
        safe_r = np.where(r > 0, r, 1.0)
        b3 = np.where(r > 0, (2.0 ** -0.5 * r * k + dot) / (2.0 ** -12 * safe_r), 0.0)
        b4 = (64.0 * t - r) / t
        b5 = (r * k - t * k / 32.0 + dot) / (2.0 ** -10 * t)
        return np.stack(np.broadcast_arrays(b1, b2, b3, b4, b5), axis=-1)

    def evaluate(self, t, x, xi) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        if np.any(t < 1.0):
            raise SymbolError(f"阻尼符号只在 t ≥ 1 上定义，当前最小 t={float(np.min(t))}")
        weight = np.prod(smooth_step(self.factors(t, x, xi)), axis=-1)
        return t ** -self.exponent * (1.0 - weight)

    __call__ = evaluate

    def in_region(self, t, x, xi) -> np.ndarray:
        """D_t = {1/16<|ξ|<16} ∩ {2^{-6}t<|x|<2^6t} ∩ {x·ξ > -2^{-1/2}|x||ξ|}"""
        x = np.asarray(x, dtype=float)
        xi = np.asarray(xi, dtype=float)
        r = np.sqrt(np.sum(x ** 2, axis=-1))
        k = np.sqrt(np.sum(xi ** 2, axis=-1))
        dot = np.sum(x * xi, axis=-1)
        return (k > 1 / 16) & (k < 16) & (r > t / 64) & (r < 64 * t) & (dot > -2.0 ** -0.5 * r * k)

    def describe(self) -> Dict[str, object]:
        return {'lam': self.lam, 'c': self.c, 'exponent': self.exponent, 'variant': self.variant,
                'eps_budget': self.profile.budget, 'shells': list(self.profile.shells)}


def damping_symbol_eval(damping: DampingSymbol, t, x, xi) -> np.ndarray:
    """𝔅(t,x,ξ) ∈ [0, t^{-κ}]"""
    return damping.evaluate(t, x, xi)


# ---------------------------------------------------------------------------
# 积分

@dataclass
class PhaseTrajectory:
    """采样时刻上的 (x_t, ξ_t)，形状 (T, *batch, d)；psi 为累积阻尼 Ψ(t)"""
    times: np.ndarray
    x: np.ndarray
    xi: np.ndarray
    psi: Optional[np.ndarray]
    tol: float
    accepted_steps: int
    rejected_steps: int
    symbol: Symbol = field(repr=False)
    damping: Optional[DampingSymbol] = field(default=None, repr=False)

    @property
    def batch_shape(self) -> Tuple[int, ...]:
        return self.x.shape[1:-1]

    @property
    def end(self) -> PhasePoint:
        return self.x[-1], self.xi[-1]

    def members(self) -> List['PhaseTrajectory']:
        """按批次拆成单条轨道"""
        d = self.x.shape[-1]
        count = int(np.prod(self.batch_shape)) if self.batch_shape else 1
        x = self.x.reshape(len(self.times), count, d)
        xi = self.xi.reshape(len(self.times), count, d)
        psi = None if self.psi is None else self.psi.reshape(len(self.times), count)
        return [PhaseTrajectory(self.times, x[:, i], xi[:, i], None if psi is None else psi[:, i], self.tol,
                                self.accepted_steps, self.rejected_steps, self.symbol, self.damping)
                for i in range(count)]


def _rk4(rhs, t: float, y: np.ndarray, h: float) -> np.ndarray:
    k1 = rhs(t, y)
    k2 = rhs(t + 0.5 * h, y + 0.5 * h * k1)
    k3 = rhs(t + 0.5 * h, y + 0.5 * h * k2)
    k4 = rhs(t + h, y + h * k3)
    return y + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


class _Stepper:
    """步长加倍的自适应 RK4，局部误差按状态分量的最大绝对值控制"""

    def __init__(self, rhs, tol: float, span: float, start: float):
        self.rhs = rhs
        self.tol = tol
        self.floor = 1e-13 * max(abs(span), abs(start), 1.0)
        self.h = min(abs(span), 0.05 * max(abs(start), 1.0))
        self.accepted = 0
        self.rejected = 0

    def advance(self, t0: float, t1: float, y: np.ndarray) -> np.ndarray:
        direction = 1.0 if t1 > t0 else -1.0
        t = t0
        while (t1 - t) * direction > 0:
            h = min(self.h, abs(t1 - t)) * direction
            full = _rk4(self.rhs, t, y, h)
            half = _rk4(self.rhs, t + 0.5 * h, _rk4(self.rhs, t, y, 0.5 * h), 0.5 * h)
            error = float(np.max(np.abs(half - full))) / 15.0
            if not np.isfinite(error):
                raise NumericalError(f"流积分在 t={t:.6g} 处出现 NaN/Inf")
            if error <= self.tol:
                y = half + (half - full) / 15.0
                t = t1 if abs(t1 - t - h) <= 1e-15 * max(abs(t1), 1.0) else t + h
                self.accepted += 1
            else:
                self.rejected += 1
                if abs(h) <= self.floor:
                    raise FlowError(f"流积分步长下溢: t={t:.6g}, h={abs(h):.3g}, 误差 {error:.3g} > {self.tol:.3g}")
            factor = 4.0 if error == 0 else min(4.0, max(0.2, 0.9 * (self.tol / error) ** 0.2))
            self.h = max(abs(h) * factor, self.floor)
        return y


def _sample_times(s: float, t: float, samples) -> np.ndarray:
    if samples is None:
        times = np.array([s, t])
    elif np.isscalar(samples):
        times = np.linspace(s, t, max(int(samples), 2))
    else:
        inner = np.asarray(samples, dtype=float)
        lo, hi = min(s, t), max(s, t)
        if np.any(inner < lo) or np.any(inner > hi):
            raise FlowError(f"采样时刻必须位于 [{lo:g}, {hi:g}] 内")
        times = np.unique(np.concatenate([[s, t], inner]))
    times = np.sort(times)
    return times if t >= s else times[::-1]


def integrate_flow(sym: Symbol, p0: PhasePoint, s: float, t: float, tol: float = 1e-10,
                   samples: Union[None, int, Sequence[float]] = None,
                   damping: Optional[DampingSymbol] = None) -> PhaseTrajectory:
    """从 (s, p0) 积分到 t；p0 可以是一批相点，共享自适应步长

    给出 damping 时同时积分 Ψ(t) = ∫_{max(1,s)}^t 𝔅(σ, x_σ, ξ_σ)dσ。
    """
    if not (s > 0 and t > 0):
        raise FlowError(f"积分时刻必须为正数: s={s}, t={t}")
    if not tol > 0:
        raise FlowError(f"容差必须为正数，当前为 {tol}")
    x0 = np.asarray(p0[0], dtype=float)
    xi0 = np.asarray(p0[1], dtype=float)
    d = sym.dim
    if x0.shape != xi0.shape or x0.shape[-1] != d:
        raise FlowError(f"相点形状 {x0.shape}/{xi0.shape} 与维数 {d} 不一致")
    batch = x0.shape[:-1]
    field_fn = _field_for(sym)
    y = np.concatenate([x0.reshape(-1, d), xi0.reshape(-1, d)], axis=1)
    if damping is not None:
        y = np.concatenate([y, np.zeros((y.shape[0], 1))], axis=1)

    def rhs(tau: float, state: np.ndarray) -> np.ndarray:
        velocity, force = field_fn(tau, state[:, :d], state[:, d:2 * d])
        parts = [velocity, force]
        if damping is not None:
            rate = damping.evaluate(tau, state[:, :d], state[:, d:2 * d]) if tau >= 1.0 else np.zeros(len(state))
            parts.append(rate[:, None])
        return np.concatenate(parts, axis=1)

    times = _sample_times(float(s), float(t), samples)
    stepper = _Stepper(rhs, tol, t - s, s)
    states = [y]
    for t0, t1 in zip(times[:-1], times[1:]):
        y = stepper.advance(float(t0), float(t1), y)
        states.append(y)
    stack = np.stack(states)
    x = stack[:, :, :d].reshape((len(times),) + batch + (d,))
    xi = stack[:, :, d:2 * d].reshape((len(times),) + batch + (d,))
    psi = None if damping is None else stack[:, :, 2 * d].reshape((len(times),) + batch)
    logger.debug(f"流积分 [{s:g}, {t:g}]: 批量 {int(np.prod(batch)) if batch else 1}, "
                 f"接受 {stepper.accepted} 步, 拒绝 {stepper.rejected} 步")
    return PhaseTrajectory(times, x, xi, psi, tol, stepper.accepted, stepper.rejected, sym, damping)


def damping_integral(traj: PhaseTrajectory, damping: DampingSymbol) -> np.ndarray:
    """沿轨道的 Ψ(t)，与 traj.times 对齐"""
    if traj.psi is not None and traj.damping is damping:
        return traj.psi
    again = integrate_flow(traj.symbol, (traj.x[0], traj.xi[0]), float(traj.times[0]), float(traj.times[-1]),
                           tol=traj.tol, samples=traj.times, damping=damping)
    return again.psi


def trajectory_rows(traj: PhaseTrajectory, damping: DampingSymbol) -> List[Dict[str, float]]:
    """轨道导出行 (t, x…, ξ…, Ψ, b₁…b₅, 𝔅)"""
    psi = damping_integral(traj, damping)
    rows = []
    for index, member in enumerate(traj.members()):
        member_psi = psi.reshape(len(traj.times), -1)[:, index]
        for i, time in enumerate(member.times):
            x, xi = member.x[i], member.xi[i]
            row = {'trajectory': index, 't': float(time)}
            row.update({f'x{k + 1}': float(v) for k, v in enumerate(x)})
            row.update({f'xi{k + 1}': float(v) for k, v in enumerate(xi)})
            row['psi'] = float(member_psi[i])
            if time >= 1.0:
                b = damping.factors(time, x, xi)
                row.update({f'b{k + 1}': float(v) for k, v in enumerate(b)})
                row['damping'] = float(damping.evaluate(time, x, xi))
            rows.append(row)
    return rows


# ---------------------------------------------------------------------------
# Jacobian

@dataclass
class FlowJacobian:
    """forward = ∂(x_t,ξ_t)/∂(x_s,ξ_s)，mixed = ∂(x_t,ξ_s)/∂(x_s,ξ_t)"""
    s: float
    t: float
    forward: np.ndarray
    mixed: np.ndarray
    reference: np.ndarray
    step: float

    @property
    def dim(self) -> int:
        return self.forward.shape[0] // 2

    def block(self, row: int, col: int) -> np.ndarray:
        d = self.dim
        return self.mixed[row * d:(row + 1) * d, col * d:(col + 1) * d]

    @property
    def determinant(self) -> float:
        return float(np.linalg.det(self.forward))

    @property
    def deviation(self) -> float:
        """max|∂x_t/∂ξ_t - (t-s)Φ_KG| / max|(t-s)Φ_KG|"""
        return float(np.max(np.abs(self.block(0, 1) - self.reference)) / np.max(np.abs(self.reference)))

    @property
    def prefactor(self) -> float:
        """∂x_t/∂ξ_t 在 (t-s)Φ_KG 方向上的投影系数"""
        ref = self.reference
        return float(np.sum(self.block(0, 1) * ref) / np.sum(ref * ref))

    def eigen_match(self) -> Tuple[float, float]:
        """(特征值比的最大偏差, 特征向量 1-|cos| 的最大值)"""
        measured = 0.5 * (self.block(0, 1) + self.block(0, 1).T)
        m_values, m_vectors = np.linalg.eigh(measured)
        r_values, r_vectors = np.linalg.eigh(self.reference)
        ratio = float(np.max(np.abs(m_values / r_values - 1.0)))
        overlap = np.abs(np.sum(m_vectors * r_vectors, axis=0))
        gaps = np.abs(np.subtract.outer(r_values, r_values))
        gaps = np.where(np.eye(len(r_values), dtype=bool), np.inf, gaps)
        distinct = np.min(gaps, axis=1) > 1e-6 * np.max(np.abs(r_values))
        misalignment = float(np.max(1.0 - overlap[distinct])) if distinct.any() else 0.0
        return ratio, misalignment


def flow_jacobian(sym: Symbol, p0: PhasePoint, s: float, t: float, step: float = 1e-3, tol: float = 1e-12,
                  lam: float = 1.0) -> FlowJacobian:
    """中心差分 (h, h/2) 加 Richardson 外推的流 Jacobian"""
    x0 = np.asarray(p0[0], dtype=float)
    xi0 = np.asarray(p0[1], dtype=float)
    d = sym.dim
    base = np.concatenate([x0, xi0])
    offsets = []
    for h in (step, 0.5 * step):
        for c in range(2 * d):
            for sign in (1.0, -1.0):
                delta = np.zeros(2 * d)
                delta[c] = sign * h
                offsets.append(delta)
    points = base[None, :] + np.array(offsets)
    traj = integrate_flow(sym, (points[:, :d], points[:, d:]), s, t, tol=tol)
    end = np.concatenate(traj.end, axis=1).reshape(2, 2 * d, 2, 2 * d)
    coarse = (end[0, :, 0] - end[0, :, 1]).T / (2.0 * step)
    fine = (end[1, :, 0] - end[1, :, 1]).T / step
    forward = (4.0 * fine - coarse) / 3.0
    scale = max(1.0, float(np.max(np.abs(forward))))
    gap = float(np.max(np.abs(fine - coarse)))
    if not np.all(np.isfinite(forward)) or gap > 1e-3 * scale:
        raise FlowError(f"有限差分失效: h 与 h/2 的 Jacobian 相差 {gap:.3g}（尺度 {scale:.3g}），流在此处不光滑")
    a, b = forward[:d, :d], forward[:d, d:]
    c, dd = forward[d:, :d], forward[d:, d:]
    dd_inv = np.linalg.inv(dd)
    mixed = np.block([[a - b @ dd_inv @ c, b @ dd_inv], [-dd_inv @ c, dd_inv]])
    xi_t = traj.end[1].mean(axis=0)
    reference = (t - s) * kg_jacobian_matrix(xi_t, lam)[0]
    jac = FlowJacobian(float(s), float(t), forward, mixed, reference, step)
    logger.debug(f"流 Jacobian [{s:g}, {t:g}]: 偏差 {jac.deviation:.3g}, 系数 {jac.prefactor:.6g}")
    return jac


def inverse_lipschitz_constants(sym: Symbol, xi_pairs: Sequence[Tuple[Sequence[float], Sequence[float]]],
                                s: float, t: float, lam: float = 1.0,
                                x0: Optional[Sequence[float]] = None, tol: float = 1e-11) -> Dict[str, float]:
    """流适配坐标下 ξ ↦ x_t(ξ) 的逆 Lipschitz 常数

    横向：|ξ_⊥-η_⊥| ≤ C t^{-1}|x_⊥(ξ)-x_⊥(η)|；纵向：|ξ_∥-η_∥| ≤ C t^{-1}λ²|x_∥(ξ)-x_∥(η)|。
    """
    d = sym.dim
    pairs = np.asarray(xi_pairs, dtype=float)
    if pairs.ndim != 3 or pairs.shape[1:] != (2, d):
        raise FlowError(f"频率对的形状应为 (N, 2, {d})，当前为 {pairs.shape}")
    start = np.zeros(d) if x0 is None else np.asarray(x0, dtype=float)
    count = len(pairs)
    xis = pairs.reshape(2 * count, d)
    traj = integrate_flow(sym, (np.broadcast_to(start, xis.shape).copy(), xis), s, t, tol=tol)
    x_end = traj.end[0].reshape(count, 2, d)
    transverse = []
    longitudinal = []
    for (xi, eta), (x_xi, x_eta) in zip(pairs, x_end):
        size = np.linalg.norm(xi)
        if size == 0:
            continue
        unit = xi / size
        dxi = xi - eta
        dx = x_xi - x_eta
        dxi_par, dx_par = float(dxi @ unit), float(dx @ unit)
        dxi_perp = np.linalg.norm(dxi - dxi_par * unit)
        dx_perp = np.linalg.norm(dx - dx_par * unit)
        if dx_perp > 1e-12 and dxi_perp > 1e-12:
            transverse.append(dxi_perp * t / dx_perp)
        if abs(dx_par) > 1e-12 and abs(dxi_par) > 1e-12:
            longitudinal.append(abs(dxi_par) * t / (lam ** 2 * abs(dx_par)))
    return {'transverse': max(transverse, default=0.0), 'longitudinal': max(longitudinal, default=0.0),
            'pairs': count}


# ---------------------------------------------------------------------------
# 单调性检查

@dataclass
class DampingReport:
    trajectories: int = 0
    samples: int = 0
    range_violations: int = 0
    active_samples: int = 0
    derivative_violations: int = 0
    min_derivative_ratio: float = math.inf
    monotone_violations: int = 0
    max_increase: float = 0.0
    doubling_checked: int = 0
    doubling_violations: int = 0

    @property
    def passed(self) -> bool:
        return not (self.range_violations or self.derivative_violations or self.monotone_violations
                    or self.doubling_violations)

    def as_dict(self) -> Dict[str, object]:
        data = dict(self.__dict__)
        data['min_derivative_ratio'] = None if math.isinf(self.min_derivative_ratio) else self.min_derivative_ratio
        data['passed'] = self.passed
        return data


def _factor_rate(damping: DampingSymbol, field_fn: HamiltonianField, t: float, x: np.ndarray,
                 xi: np.ndarray) -> np.ndarray:
    """沿流的 d/dt b_j，中心差分"""
    velocity, force = field_fn(t, x, xi)
    delta = 1e-6 * t
    with np.errstate(invalid='ignore'):
        plus = damping.factors(t + delta, x + delta * velocity, xi + delta * force)
        minus = damping.factors(t - delta, x - delta * velocity, xi - delta * force)
        return (plus - minus) / (2.0 * delta)


def verify_damping_monotone(damping: DampingSymbol, trajectories: Sequence[PhaseTrajectory],
                            tol: float = 0.1) -> DampingReport:
    """检查 db_j/dt ≥ 2/t、t^κ𝔅 沿轨道不增以及加倍性质"""
    report = DampingReport()
    kappa = damping.exponent
    for bundle in trajectories:
        field_fn = _field_for(bundle.symbol)
        for member in bundle.members():
            report.trajectories += 1
            keep = member.times >= 1.0
            times, xs, xis = member.times[keep], member.x[keep], member.xi[keep]
            if len(times) == 0:
                continue
            values = damping.evaluate(times, xs, xis)
            report.samples += len(times)
            report.range_violations += int(np.sum((values < 0) | (values > times ** -kappa * (1 + 1e-12))))
            b = damping.factors(times, xs, xis)
            region = damping.in_region(times, xs, xis)
            for i in np.nonzero(region)[0]:
                active = (b[i] >= 0) & (b[i] <= 1)
                if not active.any():
                    continue
                report.active_samples += 1
                rate = _factor_rate(damping, field_fn, float(times[i]), xs[i], xis[i])[active]
                ratio = float(np.min(rate) * times[i] / 2.0)
                report.min_derivative_ratio = min(report.min_derivative_ratio, ratio)
                if ratio < 1.0 - tol:
                    report.derivative_violations += 1
            scaled = times ** kappa * values
            order = np.argsort(times)
            increase = np.diff(scaled[order])
            if len(increase):
                report.max_increase = max(report.max_increase, float(np.max(increase)))
                report.monotone_violations += int(np.sum(increase > tol))
            for i in np.nonzero((scaled > tol) & (scaled < 1.0 - tol))[0]:
                match = np.nonzero(np.abs(times - 2.0 * times[i]) <= 1e-9 * times[i])[0]
                if len(match) == 0:
                    continue
                report.doubling_checked += 1
                if scaled[match[0]] > tol:
                    report.doubling_violations += 1
    logger.info(f"阻尼单调性检查: {report.trajectories} 条轨道, 活跃样本 {report.active_samples}, "
                f"{'通过' if report.passed else '未通过'}")
    return report
