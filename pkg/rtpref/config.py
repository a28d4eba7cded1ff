"""环境变量配置"""

import os
from pathlib import Path
from dotenv import load_dotenv

from rtpref.errors import ConfigError

# 加载 .env
_env_path = Path(__file__).resolve().parent.parent / ".env"
load_dotenv(_env_path)

# 日志级别
LOG_LEVEL = os.getenv("RT_PREF_LOG_LEVEL", "INFO")

# 输出目录（容器部署时指向挂载目录）
OUTPUT_DIR = Path(os.getenv("RT_PREF_OUTPUT_DIR", str(Path(__file__).resolve().parent.parent / "results")))

# 默认并行度（--jobs 未给出时）
DEFAULT_JOBS = int(os.getenv("RT_PREF_JOBS", "1"))

# 模拟默认值
DEFAULT_BARRIER = 1.0
DEFAULT_T_ND = 0.0


def seed_override() -> int | None:
    """RT_PREF_SEED 设置时覆盖所有配置文件里的 seed（每次调用重新读取环境）"""
    raw = os.getenv("RT_PREF_SEED", "").strip()
    if not raw:
        return None
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"RT_PREF_SEED 必须是整数，当前值: {raw!r}")


def resolve_seed(seed: int | None) -> int:
    """环境变量优先，其次配置值，最后默认 0"""
    override = seed_override()
    if override is not None:
        return override
    return int(seed) if seed is not None else 0
