"""数据集容器（查询对特征、选择、总反应时、来源信息）"""

from dataclasses import dataclass, field

import numpy as np

from rtpref.core.losses import Observation
from rtpref.core.reward_models import QueryPair
from rtpref.errors import DataError


@dataclass(eq=False)
class Dataset:
    """n 条观测；oracle_scores 为 (n, 2) 的逐项真值奖励（可选）"""

    x1: np.ndarray
    x2: np.ndarray
    y: np.ndarray
    t_total: np.ndarray
    provenance: dict = field(default_factory=dict)
    oracle_scores: np.ndarray | None = None

    def __post_init__(self):
        self.x1 = np.asarray(self.x1, dtype=float)
        self.x2 = np.asarray(self.x2, dtype=float)
        self.y = np.asarray(self.y, dtype=np.int64)
        self.t_total = np.asarray(self.t_total, dtype=float)
        n = self.y.shape[0]
        if self.x1.ndim != 2 or self.x1.shape != self.x2.shape or self.x1.shape[0] != n:
            raise DataError(f"特征形状不一致: x1 {self.x1.shape}, x2 {self.x2.shape}, n={n}")
        if self.x1.shape[1] < 1:
            raise DataError("特征维度 d 至少为 1")
        if self.t_total.shape != (n,):
            raise DataError(f"t_total 形状应为 ({n},)，实际 {self.t_total.shape}")
        if not (np.all(np.isfinite(self.x1)) and np.all(np.isfinite(self.x2))):
            raise DataError("特征必须有限")
        bad_y = np.flatnonzero(np.abs(self.y) != 1)
        if bad_y.size:
            raise DataError(f"第 {bad_y[0]} 条观测 y={self.y[bad_y[0]]}，必须是 ±1")
        bad_t = np.flatnonzero(~(self.t_total > 0) | ~np.isfinite(self.t_total))
        if bad_t.size:
            raise DataError(f"第 {bad_t[0]} 条观测 t_total={self.t_total[bad_t[0]]}，必须为正")
        if self.oracle_scores is not None:
            self.oracle_scores = np.asarray(self.oracle_scores, dtype=float)
            if self.oracle_scores.shape != (n, 2):
                raise DataError(f"oracle_scores 形状应为 ({n}, 2)，实际 {self.oracle_scores.shape}")

    def __len__(self) -> int:
        return int(self.y.shape[0])

    @property
    def dim(self) -> int:
        return int(self.x1.shape[1])

    @property
    def has_oracle(self) -> bool:
        return self.oracle_scores is not None

    @property
    def oracle_diff(self) -> np.ndarray:
        if self.oracle_scores is None:
            raise DataError("数据集没有 oracle 分数")
        return self.oracle_scores[:, 0] - self.oracle_scores[:, 1]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(
            x1=self.x1[idx], x2=self.x2[idx], y=self.y[idx], t_total=self.t_total[idx],
            provenance={**self.provenance, "subset_size": int(idx.size)},
            oracle_scores=None if self.oracle_scores is None else self.oracle_scores[idx],
        )

    def observations(self):
        for i in range(len(self)):
            yield Observation(QueryPair(self.x1[i], self.x2[i]), int(self.y[i]), float(self.t_total[i]))

    def check_non_decision(self, t_nd: float):
        """已知 t_nd 时校验 t_total > t_nd"""
        bad = np.flatnonzero(self.t_total <= t_nd)
        if bad.size:
            raise DataError(f"第 {bad[0]} 条观测 t_total={self.t_total[bad[0]]} 不大于 t_nd={t_nd}")

    @classmethod
    def from_observations(cls, observations, provenance: dict | None = None) -> "Dataset":
        obs = list(observations)
        if not obs:
            raise DataError("观测列表为空")
        return cls(
            x1=np.stack([o.pair.x1 for o in obs]),
            x2=np.stack([o.pair.x2 for o in obs]),
            y=np.array([o.y for o in obs]),
            t_total=np.array([o.t_total for o in obs]),
            provenance=provenance or {},
        )
