"""数据划分与 K 折分配（纯函数：只依赖 seed、n、K）"""

import math
from dataclasses import dataclass

import numpy as np

from rtpref.errors import ConfigError


@dataclass(frozen=True, eq=False)
class FoldAssignment:
    """每条观测的折编号 ∈ [0, K)"""

    folds: np.ndarray
    k: int

    def sizes(self) -> list[int]:
        return np.bincount(self.folds, minlength=self.k).tolist()

    def indices(self, fold: int) -> np.ndarray:
        return np.flatnonzero(self.folds == fold)

    def train_indices(self, fold: int) -> np.ndarray:
        return np.flatnonzero(self.folds != fold)


def _n_of(data) -> int:
    return data if isinstance(data, (int, np.integer)) else len(data)


def fold_assign(data, k: int, seed: int) -> FoldAssignment:
    """打乱后轮流发牌，各折大小相差不超过 1"""
    n = _n_of(data)
    if not (2 <= k <= n):
        raise ConfigError(f"折数 K={k} 非法，要求 2 ≤ K ≤ n={n}")
    perm = np.random.default_rng(seed).permutation(n)
    folds = np.empty(n, dtype=np.int64)
    folds[perm] = np.arange(n) % k
    return FoldAssignment(folds=folds, k=k)


def split_indices(data, frac: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """前 ⌈frac·n⌉ 个打乱下标为第一部分，其余为第二部分"""
    n = _n_of(data)
    if not (0 < frac < 1):
        raise ConfigError(f"split_frac={frac} 非法，要求 0 < frac < 1")
    perm = np.random.default_rng(seed).permutation(n)
    cut = int(math.ceil(frac * n - 1e-9))
    return np.sort(perm[:cut]), np.sort(perm[cut:])


def split(dataset, frac: float, seed: int):
    first, second = split_indices(dataset, frac, seed)
    return dataset.subset(first), dataset.subset(second)
