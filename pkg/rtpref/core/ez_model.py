"""EZ 扩散模型 — 选择/反应时闭式矩 + (选择, 反应时) 联合采样器

所有闭式函数接受标量或 numpy 数组；标量输入返回 float。
噪声系数固定为 1（吸收进 r 和 a）。
"""

import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from rtpref.errors import ConfigError, DomainError, SimulationError

logger = logging.getLogger(__name__)

# tanh(u)/u 在 |u| 小于该值时用 Taylor 展开
_TANHC_SERIES_BELOW = 1e-4
# Var(T) 在 |a·r| 小于该值时用级数展开
_VAR_SERIES_BELOW = 1e-3

# 采样默认步长 dt = a² / 2500
_DEFAULT_DT_DIVISOR = 2500.0
# 截断保证：max_steps · dt ≥ 50 a²
_MIN_HORIZON = 50.0
_DEFAULT_HORIZON = 60.0


@dataclass(frozen=True)
class EZParams:
    """扩散边界 a 与非决策时间 t_nd（秒）"""

    barrier_a: float = 1.0
    t_nd: float = 0.0

    def __post_init__(self):
        if not (math.isfinite(self.barrier_a) and self.barrier_a > 0):
            raise ConfigError(f"barrier_a 必须为正数，当前: {self.barrier_a}")
        if not (math.isfinite(self.t_nd) and self.t_nd >= 0):
            raise ConfigError(f"t_nd 必须非负，当前: {self.t_nd}")

    def to_dict(self) -> dict:
        return {"a": self.barrier_a, "t_nd": self.t_nd}

    @classmethod
    def from_dict(cls, raw: dict) -> "EZParams":
        return cls(barrier_a=float(raw.get("a", 1.0)), t_nd=float(raw.get("t_nd", 0.0)))


@dataclass(frozen=True)
class EZSampleConfig:
    """Euler 采样配置；dt / max_steps 为 None 时按边界 a 取默认值"""

    dt: float | None = None
    bridge_correction: bool = True
    max_steps: int | None = None

    def resolve(self, params: EZParams) -> tuple[float, int]:
        """返回校验后的 (dt, max_steps)"""
        a2 = params.barrier_a ** 2
        dt = self.dt if self.dt is not None else a2 / _DEFAULT_DT_DIVISOR
        if not dt > 0:
            raise ConfigError(f"dt 必须为正数，当前: {dt}")
        if dt > a2 / 100.0 * (1 + 1e-12):
            raise ConfigError(f"dt={dt} 过大，要求 dt ≤ a²/100 = {a2 / 100.0}")
        max_steps = self.max_steps
        if max_steps is None:
            max_steps = int(math.ceil(_DEFAULT_HORIZON * a2 / dt))
        if max_steps < 1:
            raise ConfigError(f"max_steps 必须为正整数，当前: {max_steps}")
        if max_steps * dt < _MIN_HORIZON * a2 * (1 - 1e-12):
            raise ConfigError(
                f"max_steps·dt = {max_steps * dt} 不足 {_MIN_HORIZON}·a² = {_MIN_HORIZON * a2}，"
                f"首达时间尾部会被截断"
            )
        return dt, max_steps

    def to_dict(self) -> dict:
        return {"dt": self.dt, "bridge_correction": self.bridge_correction, "max_steps": self.max_steps}

    @classmethod
    def from_dict(cls, raw: dict | None) -> "EZSampleConfig":
        raw = raw or {}
        max_steps = raw.get("max_steps")
        return cls(
            dt=None if raw.get("dt") is None else float(raw["dt"]),
            bridge_correction=bool(raw.get("bridge_correction", True)),
            max_steps=None if max_steps is None else int(max_steps),
        )


def _as_finite(x, name: str) -> tuple[np.ndarray, bool]:
    arr = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise DomainError(f"{name} 必须是有限实数")
    return arr, arr.ndim == 0


def _out(arr: np.ndarray, scalar: bool):
    return float(arr) if scalar else arr


def tanhc(u):
    """tanh(u)/u，u=0 处取极限 1"""
    u, scalar = _as_finite(u, "u")
    flat = np.atleast_1d(u)
    out = np.ones_like(flat)
    small = np.abs(flat) < _TANHC_SERIES_BELOW
    u2 = flat[small] ** 2
    out[small] = 1.0 - u2 / 3.0 + 2.0 * u2 * u2 / 15.0
    big = ~small
    out[big] = np.tanh(flat[big]) / flat[big]
    return _out(out.reshape(u.shape), scalar)


def choice_prob(rdiff, params: EZParams):
    """P(Y=+1 | X) = 1 / (1 + exp(-2·a·r))"""
    r, scalar = _as_finite(rdiff, "rdiff")
    return _out(expit(2.0 * params.barrier_a * r), scalar)


def choice_mean(rdiff, params: EZParams):
    """E[Y | X] = tanh(a·r)"""
    r, scalar = _as_finite(rdiff, "rdiff")
    return _out(np.tanh(params.barrier_a * r), scalar)


def expected_time(rdiff, params: EZParams):
    """E[T | X]（仅决策部分，不含 t_nd）= a·tanh(a·r)/r，r=0 时为 a²"""
    r, scalar = _as_finite(rdiff, "rdiff")
    a = params.barrier_a
    return _out(a * a * np.asarray(tanhc(a * r)), scalar)


def _scaled_time_variance(u: np.ndarray) -> np.ndarray:
    """Var(T)/a⁴ 作为 u = a·r 的函数：(tanh u − u·sech²u) / u³"""
    out = np.empty_like(u)
    small = np.abs(u) < _VAR_SERIES_BELOW
    u2 = u[small] ** 2
    out[small] = 2.0 / 3.0 - 8.0 * u2 / 15.0 + 34.0 * u2 * u2 / 105.0
    big = ~small
    ub = u[big]
    th = np.tanh(ub)
    out[big] = (th - ub * (1.0 - th * th)) / ub ** 3
    return out


def time_variance(rdiff, params: EZParams):
    """Var(T | X)，r=0 时为 2a⁴/3"""
    r, scalar = _as_finite(rdiff, "rdiff")
    a = params.barrier_a
    return _out(a ** 4 * _scaled_time_variance(np.atleast_1d(a * r)).reshape(r.shape), scalar)


def reward_identity(y_mean, t_mean, params: EZParams):
    """由 E[Y]、E[T] 反推奖励差：r = a·E[Y]/E[T]"""
    y, y_scalar = _as_finite(y_mean, "y_mean")
    t, t_scalar = _as_finite(t_mean, "t_mean")
    if np.any(t <= 0):
        raise DomainError("t_mean 必须为正")
    return _out(params.barrier_a * y / t, y_scalar and t_scalar)


def _simulate(drift: np.ndarray, a: float, dt: float, max_steps: int,
              bridge: bool, rng: np.random.Generator):
    """向量化 Euler-Maruyama；返回 (y, 决策时间, 未退出的下标)"""
    n = drift.size
    y = np.zeros(n, dtype=np.int64)
    t = np.full(n, np.nan)
    idx = np.arange(n)
    e = np.zeros(n)
    mu = drift.astype(float, copy=True)
    sqdt = math.sqrt(dt)

    for k in range(max_steps):
        if idx.size == 0:
            break
        e_new = e + mu * dt + sqdt * rng.standard_normal(idx.size)
        up = e_new >= a
        low = e_new <= -a
        if bridge:
            inside = ~(up | low)
            # 只对较近的边界做一次 Bernoulli 判定
            toward_up = (e + e_new) >= 0.0
            gap = np.where(toward_up, (a - e) * (a - e_new), (a + e) * (a + e_new))
            p_hit = np.exp(-2.0 * np.maximum(gap, 0.0) / dt)
            hit = inside & (rng.random(idx.size) < p_hit)
            up |= hit & toward_up
            low |= hit & ~toward_up
        done = up | low
        if done.any():
            finished = idx[done]
            y[finished] = np.where(up[done], 1, -1)
            t[finished] = (k + 0.5) * dt
            keep = ~done
            idx, e, mu = idx[keep], e_new[keep], mu[keep]
        else:
            e = e_new
    return y, t, idx


def sample_trials(rdiff, params: EZParams, cfg: EZSampleConfig,
                  rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """批量采样 (y ∈ {±1}, t_total = t_nd + 决策时间)

    max_steps 内未退出的试次重抽一次；仍未退出则抛 SimulationError。
    """
    r, _ = _as_finite(rdiff, "rdiff")
    r = np.atleast_1d(r)
    dt, max_steps = cfg.resolve(params)
    a = params.barrier_a

    y, t, pending = _simulate(r, a, dt, max_steps, cfg.bridge_correction, rng)
    if pending.size:
        logger.warning(f"{pending.size} 个试次在 {max_steps} 步内未到达边界，重抽一次")
        y2, t2, still = _simulate(r[pending], a, dt, max_steps, cfg.bridge_correction, rng)
        if still.size:
            raise SimulationError(
                f"{still.size} 个试次两次均未在 max_steps={max_steps} 内退出，max_steps 设置过小"
            )
        y[pending] = y2
        t[pending] = t2
    return y, t + params.t_nd


def sample_trial(rdiff: float, params: EZParams, cfg: EZSampleConfig,
                 rng: np.random.Generator) -> tuple[int, float]:
    """单次试次采样"""
    y, t = sample_trials(np.array([rdiff], dtype=float), params, cfg, rng)
    return int(y[0]), float(t[0])


def property_report(barriers=(0.5, 1.0, 2.0)) -> dict[str, bool]:
    """闭式矩性质检查（r ∈ [-10, 10]，步长 0.01）"""
    grid = np.arange(-1000, 1001) / 100.0
    report = {}
    var_ok, identity_ok, parity_ok = True, True, True
    for a in barriers:
        p = EZParams(barrier_a=a)
        et = expected_time(grid, p)
        vt = time_variance(grid, p)
        ym = choice_mean(grid, p)
        var_ok &= bool(np.all(vt <= et ** 2))
        lhs = et ** 2 * (1.0 - ym ** 2) + vt * ym ** 2
        identity_ok &= bool(np.max(np.abs(lhs - et ** 3 / a ** 2)) <= 1e-10)
        parity_ok &= bool(np.array_equal(et, expected_time(-grid, p)))
        parity_ok &= bool(np.array_equal(ym, -choice_mean(-grid, p)))
        cp = choice_prob(grid, p) + choice_prob(-grid, p)
        parity_ok &= bool(np.allclose(cp, 1.0, rtol=0, atol=1e-15))
    report["variance_bounded_by_squared_mean"] = var_ok
    report["cubic_time_identity"] = identity_ok
    report["parity"] = parity_ok

    lhs = 4.0 * expit(2.0 * grid) * expit(-2.0 * grid)
    rhs = np.asarray(tanhc(grid)) ** 2
    nonzero = grid != 0
    report["sigmoid_tanh_inequality"] = bool(
        np.all(lhs[nonzero] < rhs[nonzero]) and np.isclose(lhs[~nonzero], rhs[~nonzero]).all()
    )

    near_ok = True
    for a in barriers:
        p = EZParams(barrier_a=a)
        near_ok &= abs(expected_time(1e-12, p) - expected_time(0.0, p)) < 1e-8
        near_ok &= abs(time_variance(1e-12, p) - time_variance(0.0, p)) < 1e-8
    report["near_zero_stability"] = bool(near_ok)
    return report
