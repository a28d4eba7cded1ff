"""文件读写 — 数据集 CSV + 来源 sidecar、模型 JSON、报告 JSON

CSV 浮点数一律 17 位有效数字，读回时按 round_trip 解析，保证数值精确往返。
时间戳只写进 sidecar，主输出在相同输入下字节一致。
"""

import hashlib
import json
import logging
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import pandas as pd

from rtpref.core.reward_models import RewardModel, model_from_dict
from rtpref.data.dataset import Dataset
from rtpref.errors import ConfigError, DataError

logger = logging.getLogger(__name__)

FLOAT_FORMAT = "%.17g"


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


def sidecar_path(path) -> Path:
    return Path(path).with_suffix(".json")


def csv_columns(d: int) -> list[str]:
    return [f"x1_{i}" for i in range(d)] + [f"x2_{i}" for i in range(d)] + ["y", "t_total"]


def digest_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def save_dataset(dataset: Dataset, path) -> str:
    """写 CSV 与 sidecar，返回 CSV 的 sha256"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    d = dataset.dim
    frame = pd.DataFrame(np.hstack([dataset.x1, dataset.x2]), columns=csv_columns(d)[:2 * d])
    frame["y"] = dataset.y
    frame["t_total"] = dataset.t_total
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
    digest = digest_bytes(path.read_bytes())

    sidecar = {
        "provenance": {**dataset.provenance, "created": _now()},
        "oracle_scores": None if dataset.oracle_scores is None else dataset.oracle_scores.tolist(),
        "digest": digest,
    }
    sidecar_path(path).write_text(json.dumps(sidecar, indent=2, ensure_ascii=False), encoding="utf-8")
    logger.info(f"数据集已保存: {path} ({len(dataset)} 行, sha256={digest[:12]}…)")
    return digest


def _infer_dim(columns: list[str]) -> int:
    if len(columns) < 4 or (len(columns) - 2) % 2:
        raise DataError(f"CSV 列数 {len(columns)} 不是 2d + 2")
    d = (len(columns) - 2) // 2
    expected = csv_columns(d)
    if columns != expected:
        raise DataError(f"CSV 表头应为 {','.join(expected)}，实际 {','.join(columns)}")
    return d


def load_dataset(path, require_oracle: bool = False) -> Dataset:
    """读 CSV（和存在时的 sidecar）；格式错误报告行号"""
    path = Path(path)
    if not path.exists():
        raise DataError(f"数据文件不存在: {path}")
    try:
        frame = pd.read_csv(path, float_precision="round_trip", keep_default_na=False)
    except (pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise DataError(f"数据文件解析失败 {path}: {e}") from e
    d = _infer_dim([str(c) for c in frame.columns])

    # 数值列已由 round_trip 解析；object 列里含非数值字段，只用来定位出错行
    bad = np.zeros(len(frame), dtype=bool)
    for col in frame.columns:
        if not pd.api.types.is_numeric_dtype(frame[col]):
            bad |= pd.to_numeric(frame[col], errors="coerce").isna().to_numpy()
    bad_rows = np.flatnonzero(bad)
    if bad_rows.size:
        row = bad_rows[0]
        raise DataError(f"{path} 第 {row + 2} 行包含非数值字段: {','.join(map(str, frame.iloc[row].tolist()))}")
    numeric = frame.astype(float)
    y = numeric["y"].to_numpy(dtype=float)
    bad_y = np.flatnonzero((y != 1.0) & (y != -1.0))
    if bad_y.size:
        raise DataError(f"{path} 第 {bad_y[0] + 2} 行 y={frame['y'].iloc[bad_y[0]]}，必须是 −1 或 1")
    t_total = numeric["t_total"].to_numpy(dtype=float)
    bad_t = np.flatnonzero(~(t_total > 0) | ~np.isfinite(t_total))
    if bad_t.size:
        raise DataError(f"{path} 第 {bad_t[0] + 2} 行 t_total 必须为正")

    values = numeric.to_numpy(dtype=float)
    provenance, oracle = {}, None
    side = sidecar_path(path)
    if side.exists():
        meta = json.loads(side.read_text(encoding="utf-8"))
        provenance = meta.get("provenance") or {}
        if meta.get("oracle_scores") is not None:
            oracle = np.asarray(meta["oracle_scores"], dtype=float)
    if require_oracle and oracle is None:
        raise ConfigError(f"{path} 缺少带 oracle 分数的 sidecar {side.name}")
    dataset = Dataset(
        x1=values[:, :d], x2=values[:, d:2 * d], y=y.astype(np.int64), t_total=t_total,
        provenance=provenance, oracle_scores=oracle,
    )
    t_nd = float((provenance.get("ez") or {}).get("t_nd", 0.0))
    if t_nd > 0:
        dataset.check_non_decision(t_nd)
    return dataset


def save_model(model: RewardModel, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(model.to_dict()), encoding="utf-8")


def load_model(path) -> RewardModel:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"模型文件不存在: {path}")
    try:
        return model_from_dict(json.loads(path.read_text(encoding="utf-8")))
    except (json.JSONDecodeError, KeyError) as e:
        raise ConfigError(f"模型文件格式错误 {path}: {e}") from e


def save_json(payload: dict, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, ensure_ascii=False, sort_keys=True), encoding="utf-8")


def load_json(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"配置文件不存在: {path}")
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ConfigError(f"配置文件不是合法 JSON {path}: {e}") from e
