"""特征分布采样"""

import numpy as np

from rtpref.errors import ConfigError

FEATURE_KINDS = ("sphere", "gaussian", "rademacher", "constant")


def sample_features(kind: str, n: int, d: int, rng: np.random.Generator) -> np.ndarray:
    """sphere: 标准正态归一化到单位范数；gaussian: 标准正态；rademacher: 各坐标 ±1；constant: 全 1（退化分布，闭式检查用）"""
    if kind == "sphere":
        x = rng.standard_normal((n, d))
        norms = np.linalg.norm(x, axis=1, keepdims=True)
        # 零向量概率为 0，仍做保护
        norms[norms == 0] = 1.0
        return x / norms
    if kind == "gaussian":
        return rng.standard_normal((n, d))
    if kind == "rademacher":
        return rng.choice(np.array([-1.0, 1.0]), size=(n, d))
    if kind == "constant":
        return np.ones((n, d))
    raise ConfigError(f"未知特征分布 {kind!r}，可选: {', '.join(FEATURE_KINDS)}")


def feature_sampler(kind: str, d: int):
    """返回 (n, rng) → (n, d) 的采样函数"""
    if kind not in FEATURE_KINDS:
        raise ConfigError(f"未知特征分布 {kind!r}，可选: {', '.join(FEATURE_KINDS)}")
    return lambda n, rng: sample_features(kind, n, d, rng)
