"""参数优化（Adam / 梯度下降 / L-BFGS-B）

目标函数签名统一为 objective(params, idx) -> (loss, grad)，idx 是训练观测下标。
全批量 adam/gd 拒绝使损失上升超过 1e-9 的步并把步长减半，保证逐 epoch 单调下降。
"""

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np
from scipy.optimize import minimize

from rtpref.errors import ConfigError, FitError

logger = logging.getLogger(__name__)

ALGORITHMS = ("adam", "gd", "lbfgs")

# 单调性容差
_MONOTONE_TOL = 1e-9
# 单个 epoch 内最多减半次数
_MAX_HALVINGS = 40
_ADAM_BETA1, _ADAM_BETA2, _ADAM_EPS = 0.9, 0.999, 1e-8

Objective = Callable[[np.ndarray, np.ndarray], tuple[float, np.ndarray]]


@dataclass(frozen=True)
class OptimizerConfig:
    algorithm: str = "lbfgs"
    step_size: float = 1e-3
    batch_size: int | None = None  # None → 全批量
    max_epochs: int = 2000
    grad_tol: float = 1e-8
    validation_frac: float = 0.0
    patience: int = 50

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ConfigError(f"未知优化器 {self.algorithm!r}，可选: {', '.join(ALGORITHMS)}")
        if not (math.isfinite(self.step_size) and self.step_size > 0):
            raise ConfigError(f"optimizer.step_size 必须为正数，当前: {self.step_size}")
        if self.max_epochs < 1:
            raise ConfigError(f"optimizer.max_epochs 至少为 1，当前: {self.max_epochs}")
        if self.batch_size is not None and self.batch_size < 1:
            raise ConfigError(f"optimizer.batch_size 必须为正整数或 null，当前: {self.batch_size}")
        if not (0 <= self.validation_frac < 1):
            raise ConfigError(f"optimizer.validation_frac 必须在 [0, 1)，当前: {self.validation_frac}")
        if self.patience < 1:
            raise ConfigError(f"optimizer.patience 至少为 1，当前: {self.patience}")
        if self.grad_tol < 0:
            raise ConfigError(f"optimizer.grad_tol 不能为负，当前: {self.grad_tol}")

    @classmethod
    def for_model(cls, kind: str) -> "OptimizerConfig":
        """线性模型默认 L-BFGS-B 全批量；MLP 默认 Adam 1e-3、batch 256、10% 验证集早停"""
        if kind == "mlp":
            return cls(algorithm="adam", step_size=1e-3, batch_size=256, max_epochs=2000,
                       grad_tol=1e-8, validation_frac=0.1, patience=50)
        return cls()

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, raw: dict | None, kind: str = "linear") -> "OptimizerConfig":
        base = cls.for_model(kind).to_dict()
        raw = dict(raw or {})
        unknown = sorted(set(raw) - set(base))
        if unknown:
            raise ConfigError(f"optimizer 未知字段: {', '.join(unknown)}，可选: {', '.join(base)}")
        base.update(raw)
        try:
            return cls(
                algorithm=str(base["algorithm"]),
                step_size=float(base["step_size"]),
                batch_size=None if base["batch_size"] is None else int(base["batch_size"]),
                max_epochs=int(base["max_epochs"]),
                grad_tol=float(base["grad_tol"]),
                validation_frac=float(base["validation_frac"]),
                patience=int(base["patience"]),
            )
        except (TypeError, ValueError) as e:
            raise ConfigError(f"optimizer 字段类型错误: {e}") from e


@dataclass
class OptimizeResult:
    params: np.ndarray
    loss: float
    grad_norm: float
    epochs: int
    algorithm: str
    stop_reason: str
    history: list[float] = field(default_factory=list)
    val_loss: float | None = None

    def summary(self) -> dict:
        return {
            "algorithm": self.algorithm,
            "final_loss": self.loss,
            "grad_norm": self.grad_norm,
            "epochs": self.epochs,
            "stop_reason": self.stop_reason,
            "val_loss": self.val_loss,
        }


def _check_finite(loss: float, grad: np.ndarray, where: str):
    if not (math.isfinite(loss) and np.all(np.isfinite(grad))):
        raise FitError(f"优化发散（{where}）：loss={loss}, |grad| 含非有限值")


def _holdout(n: int, frac: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray | None]:
    """按比例切出验证集；样本太少时不切"""
    n_val = int(math.floor(frac * n))
    if n_val < 1 or n - n_val < 1:
        return np.arange(n), None
    perm = rng.permutation(n)
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


class _EarlyStop:
    def __init__(self, objective: Objective, val_idx: np.ndarray | None, patience: int):
        self.objective = objective
        self.val_idx = val_idx
        self.patience = patience
        self.best = math.inf
        self.best_params = None
        self.stale = 0

    def update(self, params: np.ndarray) -> bool:
        """返回 True 表示应停止"""
        if self.val_idx is None:
            return False
        val, _ = self.objective(params, self.val_idx)
        if val < self.best:
            self.best, self.best_params, self.stale = val, params.copy(), 0
            return False
        self.stale += 1
        return self.stale >= self.patience

    @property
    def val_loss(self) -> float | None:
        return None if self.val_idx is None else self.best


def _direction(algorithm: str, grad: np.ndarray, state: dict) -> tuple[np.ndarray, dict]:
    """返回下降方向和提交后的 Adam 状态（未提交前不改 state）"""
    if algorithm == "gd":
        return grad, state
    t = state["t"] + 1
    m = _ADAM_BETA1 * state["m"] + (1 - _ADAM_BETA1) * grad
    v = _ADAM_BETA2 * state["v"] + (1 - _ADAM_BETA2) * grad ** 2
    m_hat = m / (1 - _ADAM_BETA1 ** t)
    v_hat = v / (1 - _ADAM_BETA2 ** t)
    return m_hat / (np.sqrt(v_hat) + _ADAM_EPS), {"t": t, "m": m, "v": v}


def _run_full_batch(objective: Objective, params: np.ndarray, train_idx: np.ndarray,
                    cfg: OptimizerConfig, stopper: _EarlyStop) -> OptimizeResult:
    state = {"t": 0, "m": np.zeros_like(params), "v": np.zeros_like(params)}
    lr = cfg.step_size
    loss, grad = objective(params, train_idx)
    _check_finite(loss, grad, "初始点")
    history = [loss]
    reason = "max_epochs"
    epochs = 0
    for epoch in range(1, cfg.max_epochs + 1):
        if np.linalg.norm(grad) <= cfg.grad_tol:
            reason = "grad_tol"
            break
        delta, new_state = _direction(cfg.algorithm, grad, state)
        for _ in range(_MAX_HALVINGS):
            cand = params - lr * delta
            c_loss, c_grad = objective(cand, train_idx)
            if math.isfinite(c_loss) and c_loss <= loss + _MONOTONE_TOL:
                break
            lr *= 0.5
        else:
            reason = "no_descent"
            break
        _check_finite(c_loss, c_grad, f"epoch {epoch}")
        params, loss, grad, state = cand, c_loss, c_grad, new_state
        history.append(loss)
        epochs = epoch
        if stopper.update(params):
            reason = "early_stop"
            break
    return OptimizeResult(params=params, loss=loss, grad_norm=float(np.linalg.norm(grad)),
                          epochs=epochs, algorithm=cfg.algorithm, stop_reason=reason, history=history)


def _run_minibatch(objective: Objective, params: np.ndarray, train_idx: np.ndarray,
                   cfg: OptimizerConfig, stopper: _EarlyStop, rng: np.random.Generator) -> OptimizeResult:
    state = {"t": 0, "m": np.zeros_like(params), "v": np.zeros_like(params)}
    history = []
    reason = "max_epochs"
    epochs = 0
    for epoch in range(1, cfg.max_epochs + 1):
        order = train_idx[rng.permutation(train_idx.size)]
        for start in range(0, order.size, cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            b_loss, b_grad = objective(params, batch)
            _check_finite(b_loss, b_grad, f"epoch {epoch} 批次 {start // cfg.batch_size}")
            delta, state = _direction(cfg.algorithm, b_grad, state)
            params = params - cfg.step_size * delta
        loss, grad = objective(params, train_idx)
        _check_finite(loss, grad, f"epoch {epoch}")
        history.append(loss)
        epochs = epoch
        if np.linalg.norm(grad) <= cfg.grad_tol:
            reason = "grad_tol"
            break
        if stopper.update(params):
            reason = "early_stop"
            break
    if not history:
        loss, grad = objective(params, train_idx)
    return OptimizeResult(params=params, loss=loss, grad_norm=float(np.linalg.norm(grad)),
                          epochs=epochs, algorithm=cfg.algorithm, stop_reason=reason, history=history)


def _run_lbfgs(objective: Objective, params: np.ndarray, train_idx: np.ndarray,
               cfg: OptimizerConfig) -> OptimizeResult:
    history = []

    def fun(p):
        loss, grad = objective(p, train_idx)
        if not (math.isfinite(loss) and np.all(np.isfinite(grad))):
            raise FitError(f"优化发散（L-BFGS-B 第 {len(history)} 次迭代）：loss={loss}")
        return loss, grad

    def record(intermediate_result):
        history.append(float(intermediate_result.fun))

    init_loss, _ = fun(params)
    history.append(init_loss)
    res = minimize(fun, params, jac=True, method="L-BFGS-B", callback=record,
                   options={"maxiter": cfg.max_epochs, "gtol": cfg.grad_tol, "ftol": 1e-15})
    loss, grad = objective(res.x, train_idx)
    if not res.success:
        logger.debug(f"L-BFGS-B 未报告收敛: {res.message}")
    reason = "grad_tol" if res.success else "max_epochs"
    return OptimizeResult(params=np.asarray(res.x, dtype=float), loss=float(loss),
                          grad_norm=float(np.linalg.norm(grad)), epochs=int(res.nit),
                          algorithm="lbfgs", stop_reason=reason, history=history)


def run_optimizer(objective: Objective, params0, n: int, cfg: OptimizerConfig,
                  rng: np.random.Generator) -> OptimizeResult:
    """最小化 objective；validation_frac > 0 时按验证损失早停并回退到最优点"""
    if n < 1:
        raise FitError("训练样本为空")
    params = np.array(params0, dtype=float)
    train_idx, val_idx = _holdout(n, cfg.validation_frac, rng)
    stopper = _EarlyStop(objective, val_idx, cfg.patience)
    full_batch = cfg.batch_size is None or cfg.batch_size >= train_idx.size

    if cfg.algorithm == "lbfgs":
        result = _run_lbfgs(objective, params, train_idx, cfg)
        stopper.update(result.params)
    elif full_batch:
        result = _run_full_batch(objective, params, train_idx, cfg, stopper)
    else:
        result = _run_minibatch(objective, params, train_idx, cfg, stopper, rng)

    if stopper.best_params is not None and cfg.algorithm != "lbfgs":
        if not np.array_equal(stopper.best_params, result.params):
            result.params = stopper.best_params
            result.loss, grad = objective(result.params, train_idx)
            result.grad_norm = float(np.linalg.norm(grad))
    result.val_loss = stopper.val_loss
    logger.debug(
        f"优化结束 [{result.algorithm}] epochs={result.epochs} loss={result.loss:.6g} "
        f"|grad|={result.grad_norm:.3g} ({result.stop_reason})"
    )
    return result
