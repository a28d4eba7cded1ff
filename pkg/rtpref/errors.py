"""异常层级（每类异常自带 CLI 退出码）"""


class RtPrefError(Exception):
    """所有 rtpref 异常的基类"""

    exit_code = 1


class ConfigError(RtPrefError):
    """配置/用法错误（非法 loss 名、缺少 nuisance、参数越界）"""

    exit_code = 2


class FitError(RtPrefError):
    """拟合失败（优化发散、损失非有限）"""

    exit_code = 3


class DegeneracyError(FitError):
    """矩阵奇异或条件数过大"""


class ExperimentError(RtPrefError):
    """实验整体失败（失败比例超过阈值）"""

    exit_code = 3


class DataError(RtPrefError):
    """数据文件或数据集不合法"""

    exit_code = 4


class SimulationError(DataError):
    """扩散模拟在 max_steps 内未到达边界"""


class DomainError(RtPrefError, ValueError):
    """闭式公式的输入超出定义域（非有限值、非正时间）"""

    exit_code = 2
