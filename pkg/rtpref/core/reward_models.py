"""奖励模型 — 线性 / sigmoid MLP，手写反向传播

参数统一存成一维向量（MLP 按层展开：W 行主序，然后 b），
forward / vjp 都按批量 (n, d) 计算，单样本接口是批量接口的薄包装。
"""

import logging
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from rtpref.errors import ConfigError, DomainError

logger = logging.getLogger(__name__)

MODEL_KINDS = ("linear", "mlp")
OUTPUT_KINDS = ("identity", "softplus")

# 默认宽度：真值网络 / 拟合网络
TRUTH_HIDDEN = (64, 32)
FIT_HIDDEN = (32, 16)


@dataclass(frozen=True, eq=False)
class QueryPair:
    """一次查询的两个候选项特征"""

    x1: np.ndarray
    x2: np.ndarray

    def __post_init__(self):
        x1 = np.asarray(self.x1, dtype=float)
        x2 = np.asarray(self.x2, dtype=float)
        if x1.ndim != 1 or x1.size < 1 or x1.shape != x2.shape:
            raise DomainError(f"查询对两侧维度不一致: {x1.shape} vs {x2.shape}")
        if not (np.all(np.isfinite(x1)) and np.all(np.isfinite(x2))):
            raise DomainError("查询对特征必须有限")
        object.__setattr__(self, "x1", x1)
        object.__setattr__(self, "x2", x2)

    @property
    def dim(self) -> int:
        return self.x1.size

    def swapped(self) -> "QueryPair":
        return QueryPair(self.x2, self.x1)


class RewardModel:
    """参数化奖励函数的公共接口；实例在求值期间不可变"""

    kind = ""

    def __init__(self, dims, params):
        self.dims = tuple(int(v) for v in dims)
        params = np.array(params, dtype=float).ravel()
        if params.size != self.n_params_for(self.dims):
            raise ConfigError(
                f"{self.kind} 模型参数个数应为 {self.n_params_for(self.dims)}，实际 {params.size}"
            )
        params.flags.writeable = False
        self.params = params

    @staticmethod
    def n_params_for(dims) -> int:
        raise NotImplementedError

    @property
    def input_dim(self) -> int:
        return self.dims[0]

    @property
    def n_params(self) -> int:
        return self.params.size

    def with_params(self, params) -> "RewardModel":
        return type(self)(self.dims, params)

    def _check_input(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[None, :]
        if X.ndim != 2 or X.shape[1] != self.input_dim:
            raise DomainError(f"输入维度应为 {self.input_dim}，实际形状 {X.shape}")
        return X

    def forward(self, X) -> np.ndarray:
        raise NotImplementedError

    def vjp(self, X, weights) -> np.ndarray:
        """Σ_i w_i · ∂f(x_i)/∂params"""
        raise NotImplementedError

    def to_dict(self) -> dict:
        return {"kind": self.kind, "dims": list(self.dims), "params": self.params.tolist()}


class LinearReward(RewardModel):
    """r(x) = ⟨θ, x⟩"""

    kind = "linear"

    @staticmethod
    def n_params_for(dims) -> int:
        if len(dims) != 1 or dims[0] < 1:
            raise ConfigError(f"线性模型 dims 应为 [d]，当前 {list(dims)}")
        return dims[0]

    @property
    def theta(self) -> np.ndarray:
        return self.params

    def forward(self, X) -> np.ndarray:
        return self._check_input(X) @ self.params

    def vjp(self, X, weights) -> np.ndarray:
        X = self._check_input(X)
        return np.asarray(weights, dtype=float) @ X


class MlpReward(RewardModel):
    """sigmoid 隐层 + 仿射输出（时间 nuisance 用 softplus 输出保证为正）"""

    kind = "mlp"

    def __init__(self, dims, params, output: str = "identity"):
        if output not in OUTPUT_KINDS:
            raise ConfigError(f"未知输出层 {output!r}，可选: {', '.join(OUTPUT_KINDS)}")
        self.output = output
        super().__init__(dims, params)

    @staticmethod
    def n_params_for(dims) -> int:
        if len(dims) < 2 or dims[-1] != 1 or min(dims) < 1:
            raise ConfigError(f"MLP dims 应为 [d, h..., 1]，当前 {list(dims)}")
        return sum(i * o + o for i, o in zip(dims[:-1], dims[1:]))

    def with_params(self, params) -> "MlpReward":
        return MlpReward(self.dims, params, output=self.output)

    def layers(self) -> list[tuple[np.ndarray, np.ndarray]]:
        out, pos = [], 0
        for fan_in, fan_out in zip(self.dims[:-1], self.dims[1:]):
            w = self.params[pos:pos + fan_in * fan_out].reshape(fan_in, fan_out)
            pos += fan_in * fan_out
            b = self.params[pos:pos + fan_out]
            pos += fan_out
            out.append((w, b))
        return out

    def _forward_cache(self, X):
        acts = [X]
        h = X
        layers = self.layers()
        for w, b in layers[:-1]:
            h = expit(h @ w + b)
            acts.append(h)
        w, b = layers[-1]
        z = (h @ w + b)[:, 0]
        return acts, z

    def forward(self, X) -> np.ndarray:
        _, z = self._forward_cache(self._check_input(X))
        if self.output == "softplus":
            return np.logaddexp(0.0, z)
        return z

    def vjp(self, X, weights) -> np.ndarray:
        X = self._check_input(X)
        acts, z = self._forward_cache(X)
        g = np.asarray(weights, dtype=float)
        if self.output == "softplus":
            g = g * expit(z)
        delta = g[:, None]
        layers = self.layers()
        grads = []
        for li in range(len(layers) - 1, -1, -1):
            w, _ = layers[li]
            h_prev = acts[li]
            grads.append((h_prev.T @ delta).ravel())
            grads.append(delta.sum(axis=0))
            if li > 0:
                delta = (delta @ w.T) * h_prev * (1.0 - h_prev)
        # 反向收集的是 [W_L, b_L, W_{L-1}, ...]，按层正序拼回
        ordered = []
        for i in range(len(grads) - 2, -1, -2):
            ordered.extend((grads[i], grads[i + 1]))
        return np.concatenate(ordered)

    def to_dict(self) -> dict:
        out = super().to_dict()
        if self.output != "identity":
            out["output"] = self.output
        return out


def model_from_dict(raw: dict) -> RewardModel:
    kind = raw.get("kind")
    if kind == "linear":
        return LinearReward(raw["dims"], raw["params"])
    if kind == "mlp":
        return MlpReward(raw["dims"], raw["params"], output=raw.get("output", "identity"))
    raise ConfigError(f"未知模型类型 {kind!r}，可选: {', '.join(MODEL_KINDS)}")


def reward(model: RewardModel, x) -> float:
    x = np.asarray(x, dtype=float)
    if x.ndim != 1:
        raise DomainError("reward 只接受单个特征向量")
    return float(model.forward(x[None, :])[0])


def reward_diff(model: RewardModel, pair: QueryPair) -> float:
    """r(x1) − r(x2)"""
    return float(reward_diff_batch(model, pair.x1[None, :], pair.x2[None, :])[0])


def reward_diff_batch(model: RewardModel, X1, X2) -> np.ndarray:
    return model.forward(X1) - model.forward(X2)


def reward_diff_grad(model: RewardModel, pair: QueryPair) -> np.ndarray:
    """∂[r(x1) − r(x2)]/∂params"""
    one = np.ones(1)
    return model.vjp(pair.x1[None, :], one) - model.vjp(pair.x2[None, :], one)


def reward_diff_vjp(model: RewardModel, X1, X2, weights) -> np.ndarray:
    """Σ_i w_i · ∂rdiff_i/∂params"""
    return model.vjp(X1, weights) - model.vjp(X2, weights)


def random_init(kind: str, dims, rng: np.random.Generator, mode: str = "fit",
                output: str = "identity") -> RewardModel:
    """truth: 所有权重 i.i.d. N(0,1)、偏置 0；fit: 线性为 0，MLP 权重 N(0, 1/fan_in)、偏置 0"""
    dims = tuple(int(v) for v in dims)
    if mode not in ("fit", "truth"):
        raise ConfigError(f"未知初始化模式 {mode!r}，可选: fit, truth")
    if kind == "linear":
        n = LinearReward.n_params_for(dims)
        theta = rng.standard_normal(n) if mode == "truth" else np.zeros(n)
        return LinearReward(dims, theta)
    if kind == "mlp":
        MlpReward.n_params_for(dims)
        chunks = []
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            scale = 1.0 if mode == "truth" else 1.0 / np.sqrt(fan_in)
            chunks.append(scale * rng.standard_normal(fan_in * fan_out))
            chunks.append(np.zeros(fan_out))
        return MlpReward(dims, np.concatenate(chunks), output=output)
    raise ConfigError(f"未知模型类型 {kind!r}，可选: {', '.join(MODEL_KINDS)}")
