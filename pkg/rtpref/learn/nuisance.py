"""第一阶段 nuisance 估计 — logistic 奖励、plug-in 时间/选择均值、MLP 时间回归"""

import logging
from dataclasses import dataclass

import numpy as np

from rtpref.core.ez_model import tanhc
from rtpref.core.losses import CapConfig, decision_times, empirical_loss
from rtpref.core.reward_models import (
    FIT_HIDDEN, MlpReward, RewardModel, random_init, reward_diff_batch,
)
from rtpref.errors import FitError
from rtpref.learn.optimizer import OptimizerConfig, OptimizeResult, run_optimizer

logger = logging.getLogger(__name__)

# 选择均值 plug-in 的截断
CHOICE_CLAMP = 1.0 - 1e-9
# 时间回归输出的下限
_TIME_FLOOR = 1e-12


def ridge_for(n: int) -> float:
    """默认岭惩罚 λ = 1e-4 / n"""
    return 1e-4 / n


def fit_logistic(dataset, template: RewardModel, a_internal: float, optimizer: OptimizerConfig,
                 rng: np.random.Generator, idx=None, ridge: float | None = None
                 ) -> tuple[RewardModel, OptimizeResult]:
    """最小化 logloss + λ‖θ‖²

    未知边界时 a_internal = 1，得到的模型估计 a·r。
    """
    if idx is None:
        idx = np.arange(len(dataset))
    idx = np.asarray(idx)
    if idx.size == 0:
        raise FitError("logistic 拟合的数据集为空")
    lam = ridge_for(idx.size) if ridge is None else ridge

    def objective(params, sub):
        loss, grad = empirical_loss("logloss", dataset, template.with_params(params),
                                    a=a_internal, idx=idx[sub])
        return loss + lam * float(params @ params), grad + 2.0 * lam * params

    result = run_optimizer(objective, template.params, idx.size, optimizer, rng)
    return template.with_params(result.params), result


def reward_nuisance(model: RewardModel):
    """𝔯(X1, X2) = 模型的奖励差"""
    return lambda X1, X2: reward_diff_batch(model, X1, X2)


def plugin_time_nuisance(model: RewardModel, a: float, scale: float | None = None):
    """t̂ = a²·tanh(a𝔯)/(a𝔯)；给出 scale 时用 scale 代替 a²"""
    s = a * a if scale is None else scale

    def time_nuisance(X1, X2):
        return s * np.asarray(tanhc(a * reward_diff_batch(model, X1, X2)))
    return time_nuisance


def plugin_choice_nuisance(model: RewardModel, a: float):
    """ŷ = tanh(a𝔯)，截断到 ±(1 − 1e-9)"""
    def choice_nuisance(X1, X2):
        return np.clip(np.tanh(a * reward_diff_batch(model, X1, X2)), -CHOICE_CLAMP, CHOICE_CLAMP)
    return choice_nuisance


def estimate_barrier_sq(model_u: RewardModel, dataset, cap: CapConfig, t_nd: float, idx=None) -> float:
    """未知边界时 a² 的矩估计：mean(T̆) / mean(tanh(𝔯̂)/𝔯̂)，𝔯̂ 估计 a·r"""
    if idx is None:
        idx = np.arange(len(dataset))
    u = reward_diff_batch(model_u, dataset.x1[idx], dataset.x2[idx])
    t = decision_times(dataset.t_total[idx], t_nd, cap)
    denom = float(np.mean(np.asarray(tanhc(u))))
    scale = float(np.mean(t)) / denom
    if not scale > 0:
        raise FitError(f"a² 估计非正（mean(T̆)={np.mean(t):.4g}），检查 t_nd 是否过大")
    return scale


@dataclass(frozen=True, eq=False)
class TimeRegression:
    """以拼接特征 (X1, X2) 为输入的 softplus MLP 时间回归"""

    model: MlpReward

    def __call__(self, X1, X2) -> np.ndarray:
        Z = np.hstack([np.atleast_2d(X1), np.atleast_2d(X2)])
        return np.maximum(self.model.forward(Z), _TIME_FLOOR)


def time_regression_template(d: int, rng: np.random.Generator, hidden=FIT_HIDDEN) -> MlpReward:
    return random_init("mlp", (2 * d, *hidden, 1), rng, mode="fit", output="softplus")


def time_mse(time_fn, dataset, cap: CapConfig, t_nd: float, idx=None) -> float:
    if idx is None:
        idx = np.arange(len(dataset))
    t = decision_times(dataset.t_total[idx], t_nd, cap)
    pred = time_fn(dataset.x1[idx], dataset.x2[idx])
    return float(np.mean((pred - t) ** 2))


def fit_time_regression(dataset, template: MlpReward, cap: CapConfig, t_nd: float,
                        optimizer: OptimizerConfig, rng: np.random.Generator, idx=None
                        ) -> tuple[TimeRegression, OptimizeResult]:
    """最小化 MLP 输出与截断决策时间的均方误差"""
    if idx is None:
        idx = np.arange(len(dataset))
    idx = np.asarray(idx)
    if idx.size == 0:
        raise FitError("时间回归的数据集为空")
    if template.input_dim != 2 * dataset.dim:
        raise FitError(f"时间回归输入维度应为 2d={2 * dataset.dim}，模板为 {template.input_dim}")
    Z = np.hstack([dataset.x1[idx], dataset.x2[idx]])
    target = decision_times(dataset.t_total[idx], t_nd, cap)

    def objective(params, sub):
        model = template.with_params(params)
        resid = model.forward(Z[sub]) - target[sub]
        m = sub.size
        return float(np.mean(resid ** 2)), model.vjp(Z[sub], 2.0 * resid / m)

    result = run_optimizer(objective, template.params, idx.size, optimizer, rng)
    return TimeRegression(template.with_params(result.params)), result
