"""合成数据生成 + 预计算 embedding 表的摄入"""

import hashlib
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd

from rtpref.core.ez_model import EZParams, EZSampleConfig, sample_trials
from rtpref.core.reward_models import RewardModel, model_from_dict
from rtpref.data.dataset import Dataset
from rtpref.data.features import sample_features
from rtpref.errors import ConfigError, DataError

logger = logging.getLogger(__name__)

PAIRINGS = ("independent", "against_zero")
# 摄入 embedding 表时忽略的标识列
_ID_COLUMNS = ("id", "item_id")


@dataclass(frozen=True, eq=False)
class OracleSpec:
    """真值奖励 + 特征分布 + EZ 参数 + 样本量

    pairing="against_zero" 时 x2 ≡ 0，查询对的差向量就是 x1（渐近协方差实验使用）。
    """

    truth: RewardModel
    feature: str
    ez: EZParams
    n: int
    pairing: str = "independent"

    def __post_init__(self):
        if self.n < 1:
            raise ConfigError(f"样本量 n 必须 ≥ 1，当前: {self.n}")
        if self.pairing not in PAIRINGS:
            raise ConfigError(f"未知配对方式 {self.pairing!r}，可选: {', '.join(PAIRINGS)}")

    def to_dict(self) -> dict:
        return {
            "truth": self.truth.to_dict(),
            "feature": self.feature,
            "ez": self.ez.to_dict(),
            "n": self.n,
            "pairing": self.pairing,
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "OracleSpec":
        return cls(
            truth=model_from_dict(raw["truth"]),
            feature=raw["feature"],
            ez=EZParams.from_dict(raw["ez"]),
            n=int(raw["n"]),
            pairing=raw.get("pairing", "independent"),
        )


def spec_hash(payload: dict) -> str:
    text = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def generate(oracle: OracleSpec, cfg: EZSampleConfig, seed: int) -> Dataset:
    """按真值奖励独立抽取查询对，再经 EZ 扩散采样 (y, t_total)"""
    rng = np.random.default_rng(seed)
    d = oracle.truth.input_dim
    X1 = sample_features(oracle.feature, oracle.n, d, rng)
    if oracle.pairing == "against_zero":
        X2 = np.zeros_like(X1)
    else:
        X2 = sample_features(oracle.feature, oracle.n, d, rng)
    scores = np.column_stack([oracle.truth.forward(X1), oracle.truth.forward(X2)])
    y, t_total = sample_trials(scores[:, 0] - scores[:, 1], oracle.ez, cfg, rng)

    spec = oracle.to_dict()
    provenance = {
        "generator": {"spec": spec, "spec_hash": spec_hash(spec), "sampler": cfg.to_dict()},
        "seed": int(seed),
        "ez": oracle.ez.to_dict(),
    }
    logger.info(f"生成数据集: n={oracle.n}, d={d}, feature={oracle.feature}, a={oracle.ez.barrier_a}")
    return Dataset(X1, X2, y, t_total, provenance=provenance, oracle_scores=scores)


def regenerate(provenance: dict) -> Dataset:
    """由来源信息重新生成（仅合成数据集）"""
    gen = provenance.get("generator")
    if not gen or "spec" not in gen:
        raise DataError("来源信息里没有生成器描述，无法重新生成")
    return generate(OracleSpec.from_dict(gen["spec"]), EZSampleConfig.from_dict(gen.get("sampler")),
                    int(provenance["seed"]))


def _item_pairs(m: int, n_pairs: int | None, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    if n_pairs is None:
        first = np.arange(0, m - 1, 2)
        return first, first + 1
    if n_pairs < 1:
        raise ConfigError(f"n_pairs 必须 ≥ 1，当前: {n_pairs}")
    i = rng.integers(0, m, size=n_pairs)
    j = rng.integers(0, m - 1, size=n_pairs)
    j = j + (j >= i)
    return i, j


def ingest_embeddings(path, score_column: str, ez: EZParams, cfg: EZSampleConfig, seed: int,
                      n_pairs: int | None = None) -> Dataset:
    """读取逐项 embedding 表（特征列 + oracle 分数列），按分数差模拟 (y, t_total)

    n_pairs 为 None 时按相邻两行配对 (0,1), (2,3), …；否则有放回地随机抽取不同的两项。
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"embedding 文件不存在: {path}")
    try:
        table = pd.read_csv(path, float_precision="round_trip")
    except (pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise DataError(f"embedding 文件解析失败 {path}: {e}") from e
    if score_column not in table.columns:
        raise DataError(f"embedding 文件缺少分数列 {score_column!r}，现有列: {', '.join(map(str, table.columns))}")

    feature_cols = [c for c in table.columns if c != score_column and c not in _ID_COLUMNS]
    if not feature_cols:
        raise DataError("embedding 文件没有特征列")
    for col in feature_cols + [score_column]:
        values = pd.to_numeric(table[col], errors="coerce")
        bad = np.flatnonzero(values.isna().to_numpy() | ~np.isfinite(values.to_numpy(dtype=float)))
        if bad.size:
            raise DataError(f"列 {col!r} 第 {bad[0] + 2} 行不是有限数值: {table[col].iloc[bad[0]]!r}")
    m = len(table)
    if m < 2:
        raise DataError(f"embedding 文件至少需要 2 项，当前 {m}")

    features = table[feature_cols].to_numpy(dtype=float)
    scores = table[score_column].to_numpy(dtype=float)
    rng = np.random.default_rng(seed)
    i, j = _item_pairs(m, n_pairs, rng)
    oracle = np.column_stack([scores[i], scores[j]])
    y, t_total = sample_trials(oracle[:, 0] - oracle[:, 1], ez, cfg, rng)

    provenance = {
        "source": {"digest": file_digest(path), "path": str(path), "score_column": score_column,
                   "n_pairs": n_pairs, "sampler": cfg.to_dict()},
        "seed": int(seed),
        "ez": ez.to_dict(),
    }
    logger.info(f"摄入 embedding: {m} 项 → {len(i)} 个查询对, d={len(feature_cols)}")
    return Dataset(features[i], features[j], y, t_total, provenance=provenance, oracle_scores=oracle)
