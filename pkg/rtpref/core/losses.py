"""四种逐点损失及其对 rdiff 的导数、截断时间、经验损失

所有逐点函数都向量化，返回 (loss, d loss / d rdiff)。
损失名称 "logloss" / "nonortho" / "ortho" / "ortho2" 同时用于配置文件和 CLI。
"""

import logging
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.special import expit, log_expit

from rtpref.core.reward_models import QueryPair, RewardModel, reward_diff_batch, reward_diff_vjp
from rtpref.errors import ConfigError, DomainError

logger = logging.getLogger(__name__)

LOSS_KINDS = ("logloss", "nonortho", "ortho", "ortho2")

# 各损失需要的 nuisance 分量
REQUIRED_NUISANCE = {
    "logloss": (),
    "nonortho": ("t_hat",),
    "ortho": ("r_nuis", "t_hat"),
    "ortho2": ("y_hat", "t_hat"),
}

# 默认截断 B̆ = 50·a²
DEFAULT_CAP_FACTOR = 50.0


def check_loss_kind(kind: str) -> str:
    if kind not in LOSS_KINDS:
        raise ConfigError(f"未知损失 {kind!r}，可选: {', '.join(LOSS_KINDS)}")
    return kind


@dataclass(frozen=True, eq=False)
class Observation:
    """一次试次：查询对、选择 y ∈ {±1}、总反应时（秒）"""

    pair: QueryPair
    y: int
    t_total: float

    def __post_init__(self):
        if self.y not in (-1, 1):
            raise DomainError(f"y 必须是 ±1，当前: {self.y}")
        if not (math.isfinite(self.t_total) and self.t_total > 0):
            raise DomainError(f"t_total 必须为正，当前: {self.t_total}")

    def decision_time(self, t_nd: float) -> float:
        if self.t_total <= t_nd:
            raise DomainError(f"t_total={self.t_total} 不大于非决策时间 t_nd={t_nd}")
        return self.t_total - t_nd


@dataclass(frozen=True)
class CapConfig:
    """决策时间截断 B̆；cap=None 表示 "none"""

    cap: float | None = None

    def __post_init__(self):
        if self.cap is not None and not (math.isfinite(self.cap) and self.cap > 0):
            raise ConfigError(f"cap 必须为正数或 \"none\"，当前: {self.cap}")

    @classmethod
    def default_for(cls, a: float) -> "CapConfig":
        return cls(DEFAULT_CAP_FACTOR * a * a)

    @classmethod
    def parse(cls, raw, a: float) -> "CapConfig":
        """配置值："none" → 不截断；缺省/"default" → 50·a²；数字 → 该值"""
        if raw is None or raw == "default":
            return cls.default_for(a)
        if raw == "none":
            return cls(None)
        try:
            return cls(float(raw))
        except (TypeError, ValueError):
            raise ConfigError(f"cap 取值非法: {raw!r}（数字、\"none\" 或 \"default\"）")

    def to_value(self):
        return "none" if self.cap is None else self.cap


def cap_time(t_decision, cap: CapConfig):
    """T̆ = min(T, B̆)"""
    t = np.asarray(t_decision, dtype=float)
    if np.any(t < 0):
        raise DomainError("决策时间不能为负")
    out = t if cap.cap is None else np.minimum(t, cap.cap)
    return float(out) if out.ndim == 0 else out


def decision_times(t_total, t_nd: float, cap: CapConfig) -> np.ndarray:
    """总反应时 → 截断后的决策时间（t_nd 设定偏大时截到 0）"""
    t = np.maximum(np.asarray(t_total, dtype=float) - t_nd, 0.0)
    return np.asarray(cap_time(t, cap))


def logloss_point(y, rdiff, a):
    """log(1 + exp(−2·a·y·r)) = −log σ(u)"""
    y = np.asarray(y, dtype=float)
    u = 2.0 * a * y * np.asarray(rdiff, dtype=float)
    loss = -log_expit(u)
    grad = -2.0 * a * y * expit(-u)
    return loss, grad


def nonortho_point(y, rdiff, t_hat, a):
    """(y − r·t̂/a)²"""
    t_hat = np.asarray(t_hat, dtype=float)
    resid = np.asarray(y, dtype=float) - np.asarray(rdiff, dtype=float) * t_hat / a
    return resid ** 2, -2.0 * (t_hat / a) * resid


def ortho_point(y, t_decision, rdiff, r_nuis, t_hat, a):
    """(y − (T − t̂)·𝔯/a − r·t̂/a)²"""
    t_hat = np.asarray(t_hat, dtype=float)
    resid = (np.asarray(y, dtype=float)
             - (np.asarray(t_decision, dtype=float) - t_hat) * np.asarray(r_nuis, dtype=float) / a
             - np.asarray(rdiff, dtype=float) * t_hat / a)
    return resid ** 2, -2.0 * (t_hat / a) * resid


def ortho2_point(y, t_decision, rdiff, y_hat, t_hat, a_internal):
    """(y − (T − t̂)·ŷ/t̂ − r·t̂/a)²；未知边界时 a_internal = 1"""
    t_hat = np.asarray(t_hat, dtype=float)
    if np.any(t_hat <= 0):
        raise DomainError("t̂ 必须为正")
    resid = (np.asarray(y, dtype=float)
             - (np.asarray(t_decision, dtype=float) - t_hat) * np.asarray(y_hat, dtype=float) / t_hat
             - np.asarray(rdiff, dtype=float) * t_hat / a_internal)
    return resid ** 2, -2.0 * (t_hat / a_internal) * resid


@dataclass(frozen=True, eq=False)
class NuisanceValues:
    """按观测对齐的 nuisance 取值"""

    t_hat: np.ndarray | None = None
    r_nuis: np.ndarray | None = None
    y_hat: np.ndarray | None = None

    def __post_init__(self):
        if self.t_hat is not None and np.any(~(np.asarray(self.t_hat) > 0)):
            raise DomainError("时间 nuisance 必须严格为正")
        if self.y_hat is not None and np.any(np.abs(np.asarray(self.y_hat)) >= 1):
            raise DomainError("选择均值 nuisance 必须落在 (−1, 1)")

    def take(self, idx) -> "NuisanceValues":
        pick = (lambda v: None if v is None else np.asarray(v)[idx])
        return NuisanceValues(t_hat=pick(self.t_hat), r_nuis=pick(self.r_nuis), y_hat=pick(self.y_hat))

    def require(self, kind: str):
        missing = [name for name in REQUIRED_NUISANCE[kind] if getattr(self, name) is None]
        if missing:
            raise ConfigError(f"损失 {kind} 缺少 nuisance: {', '.join(missing)}")


PairFn = Callable[[np.ndarray, np.ndarray], np.ndarray]


@dataclass(frozen=True, eq=False)
class NuisanceSet:
    """第一阶段估计：𝔯（奖励差）、t̂（期望决策时间）、可选 ŷ（选择均值）

    每个分量都是作用在批量查询对 (X1, X2) 上的函数。
    """

    reward_nuisance: PairFn | None = None
    time_nuisance: PairFn | None = None
    choice_nuisance: PairFn | None = None

    def evaluate(self, X1, X2) -> NuisanceValues:
        call = (lambda fn: None if fn is None else np.asarray(fn(X1, X2), dtype=float))
        return NuisanceValues(
            t_hat=call(self.time_nuisance),
            r_nuis=call(self.reward_nuisance),
            y_hat=call(self.choice_nuisance),
        )


def pointwise(kind: str, y, t_decision, rdiff, nuis: NuisanceValues, a: float):
    """按损失名分派逐点损失"""
    if kind == "logloss":
        return logloss_point(y, rdiff, a)
    nuis.require(kind)
    if kind == "nonortho":
        return nonortho_point(y, rdiff, nuis.t_hat, a)
    if kind == "ortho":
        return ortho_point(y, t_decision, rdiff, nuis.r_nuis, nuis.t_hat, a)
    if kind == "ortho2":
        return ortho2_point(y, t_decision, rdiff, nuis.y_hat, nuis.t_hat, a)
    raise ConfigError(f"未知损失 {kind!r}，可选: {', '.join(LOSS_KINDS)}")


def empirical_loss(kind: str, data, model: RewardModel,
                   nuisances: NuisanceSet | NuisanceValues | None = None,
                   cap: CapConfig = CapConfig(), a: float = 1.0, t_nd: float = 0.0,
                   idx=None) -> tuple[float, np.ndarray]:
    """切片上逐点损失的均值及其参数梯度

    data 需要有 x1, x2, y, t_total 四个数组属性；idx 为 None 时用全部观测。
    nuisances 为 NuisanceValues 时须与 data 的全部观测对齐。
    """
    check_loss_kind(kind)
    if idx is None:
        idx = np.arange(len(data.y))
    X1, X2 = data.x1[idx], data.x2[idx]
    if nuisances is None:
        nuis = NuisanceValues()
    elif isinstance(nuisances, NuisanceSet):
        nuis = nuisances.evaluate(X1, X2)
    else:
        nuis = nuisances.take(idx)

    t_dec = decision_times(data.t_total[idx], t_nd, cap)
    rdiff = reward_diff_batch(model, X1, X2)
    loss, dl = pointwise(kind, data.y[idx], t_dec, rdiff, nuis, a)
    n = len(idx)
    grad = reward_diff_vjp(model, X1, X2, dl / n)
    return float(np.mean(loss)), grad


def mixed_derivative(kind: str, y, t_decision, rdiff, nuis: NuisanceValues, a: float,
                     reward_dir, nuisance_dir: dict, eps: float = 0.05) -> tuple[float, float]:
    """(奖励 × nuisance) 混合方向导数的样本均值与 Monte-Carlo 标准误

    reward_dir: 每个观测上 rdiff 的扰动方向 k；
    nuisance_dir: {"t_hat"/"r_nuis"/"y_hat": 每个观测上的扰动方向 h}。
    ε 与 ε/2 两个中心混合差分做 Richardson 外推，对多项式损失恰好消去 ε² 项。
    """
    nuis.require(kind)
    k = np.asarray(reward_dir, dtype=float)

    def shifted(u: float) -> NuisanceValues:
        vals = {}
        for name in ("t_hat", "r_nuis", "y_hat"):
            base = getattr(nuis, name)
            if base is not None and name in nuisance_dir:
                base = base + u * np.asarray(nuisance_dir[name], dtype=float)
            vals[name] = base
        return NuisanceValues(**vals)

    def central(e: float) -> np.ndarray:
        total = 0.0
        for s, u, sign in ((e, e, 1.0), (e, -e, -1.0), (-e, e, -1.0), (-e, -e, 1.0)):
            loss, _ = pointwise(kind, y, t_decision, rdiff + s * k, shifted(u), a)
            total = total + sign * loss
        return total / (4.0 * e * e)

    per_obs = (4.0 * central(eps / 2.0) - central(eps)) / 3.0
    n = per_obs.size
    return float(np.mean(per_obs)), float(np.std(per_obs, ddof=1) / np.sqrt(n))
