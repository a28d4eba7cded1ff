"""拟合模型评估 — 奖励差 MSE（原始 / 尺度对齐）、regret、参数误差"""

import logging
from dataclasses import asdict, dataclass

import numpy as np

from rtpref.core.reward_models import LinearReward, RewardModel
from rtpref.errors import ConfigError

logger = logging.getLogger(__name__)


@dataclass
class EvalReport:
    mse_raw: float
    mse_scale_aligned: float
    scale_factor: float
    regret: float
    regret_mean: float
    n_test: int
    l2_param_error: float | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def _require_oracle(dataset):
    if not dataset.has_oracle:
        raise ConfigError("测试集缺少 oracle 分数（sidecar），无法评估")


def reward_mse(model: RewardModel, dataset) -> tuple[float, float, float]:
    """返回 (mse_raw, mse_scale_aligned, c*)，c* = ⟨r̂, r_o⟩ / ⟨r̂, r̂⟩，r̂ ≡ 0 时为 0"""
    _require_oracle(dataset)
    fitted = model.forward(dataset.x1) - model.forward(dataset.x2)
    truth = dataset.oracle_diff
    mse_raw = float(np.mean((fitted - truth) ** 2))
    denom = float(fitted @ fitted)
    c = float(fitted @ truth) / denom if denom > 0 else 0.0
    mse_aligned = float(np.mean((c * fitted - truth) ** 2))
    # 浮点误差下仍保证 aligned ≤ raw
    return mse_raw, min(mse_aligned, mse_raw), c


def regret_terms(model: RewardModel, dataset) -> np.ndarray:
    """逐查询 max(r_o(X1), r_o(X2)) − r_o(X̂)，r̂(X1) ≥ r̂(X2) 时选 X1"""
    _require_oracle(dataset)
    pick_first = model.forward(dataset.x1) >= model.forward(dataset.x2)
    s1, s2 = dataset.oracle_scores[:, 0], dataset.oracle_scores[:, 1]
    chosen = np.where(pick_first, s1, s2)
    return np.maximum(s1, s2) - chosen


def regret(model: RewardModel, dataset) -> float:
    return float(np.sum(regret_terms(model, dataset)))


def param_error(model: RewardModel, theta_o) -> float:
    """‖θ̂ − θ_o‖₂"""
    if not isinstance(model, LinearReward):
        raise ConfigError(f"参数误差只对线性模型有定义，当前: {model.kind}")
    theta_o = np.asarray(theta_o, dtype=float).ravel()
    if theta_o.shape != model.theta.shape:
        raise ConfigError(f"维度不一致: θ̂ {model.theta.shape} vs θ_o {theta_o.shape}")
    return float(np.linalg.norm(model.theta - theta_o))


def evaluate(model: RewardModel, dataset, theta_o=None) -> EvalReport:
    mse_raw, mse_aligned, c = reward_mse(model, dataset)
    terms = regret_terms(model, dataset)
    report = EvalReport(
        mse_raw=mse_raw, mse_scale_aligned=mse_aligned, scale_factor=c,
        regret=float(np.sum(terms)), regret_mean=float(np.mean(terms)), n_test=len(dataset),
        l2_param_error=None if theta_o is None else param_error(model, theta_o),
    )
    logger.debug(
        f"评估: n={report.n_test} mse={mse_raw:.4g} (对齐后 {mse_aligned:.4g}, c*={c:.3g}) "
        f"regret={report.regret:.4g} (均值 {report.regret_mean:.4g})"
    )
    return report
