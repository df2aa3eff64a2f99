"""
异常定义模块
统一的结构化异常层级，CLI 根据类别映射退出码
"""

from typing import Any, Optional, Sequence, Tuple


# 退出码：与 CLI 的错误类别一一对应
EXIT_OK = 0
EXIT_UNKNOWN = 1
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERIC = 4


class GDanceError(Exception):
    """所有领域异常的基类"""

    error_type = "unknown_error"
    exit_code = EXIT_UNKNOWN


# ---------------------------------------------------------------- 配置类

class ConfigError(GDanceError):
    """配置错误，携带失败的 key"""

    error_type = "config_error"
    exit_code = EXIT_CONFIG

    def __init__(self, message: str, key: Optional[str] = None):
        self.key = key
        if key and key not in message:
            message = f"{message} (key: {key})"
        super().__init__(message)


# ---------------------------------------------------------------- 文件类

class MotionIOError(GDanceError):
    """动作/音乐文件读写错误"""

    error_type = "io_error"
    exit_code = EXIT_IO

    def __init__(self, message: str, path: Optional[str] = None):
        self.path = path
        if path:
            message = f"{message}: {path}"
        super().__init__(message)


class BadMagicError(MotionIOError):
    """文件魔数不匹配"""


class TruncatedPayloadError(MotionIOError):
    """数据负载长度不足"""


class HeaderMismatchError(MotionIOError):
    """文件头字段与期望不符（例如 D != 151）"""


# ---------------------------------------------------------------- 数值类

class NumericError(GDanceError):
    """数值计算错误"""

    error_type = "numeric_error"
    exit_code = EXIT_NUMERIC


class ShapeError(NumericError):
    """算子形状不匹配，记录参与运算的全部形状"""

    def __init__(self, op: str, *shapes: Sequence[int], detail: str = ""):
        self.op = op
        self.shapes: Tuple[Tuple[int, ...], ...] = tuple(tuple(s) for s in shapes)
        shapes_text = " 与 ".join(str(list(s)) for s in self.shapes)
        message = f"算子 {op} 形状不匹配: {shapes_text}"
        if detail:
            message += f" ({detail})"
        super().__init__(message)


class NaNProducedError(NumericError):
    """算子输出包含 NaN"""

    def __init__(self, op: str):
        self.op = op
        super().__init__(f"算子 {op} 产生了 NaN")


class DegenerateRotationError(NumericError):
    """6D 旋转输入退化，vector 指出塌缩的向量（'a1' 或 'a2'）"""

    def __init__(self, vector: str, norm: float):
        self.vector = vector
        self.norm = norm
        super().__init__(f"6D 旋转退化: 向量 {vector} 投影后范数 {norm:.3e} 过小")


class InvalidTimestepError(NumericError):
    """扩散时间步越界"""


class ScheduleError(NumericError):
    """噪声调度参数非法（未知类型、相位越界等）"""


class MaskError(NumericError):
    """注意力掩码非法（窗口为负、整行被屏蔽）"""


class GraphError(NumericError):
    """图构建输入非法（非有限坐标、非对称邻接）"""


class NonFiniteLossError(NumericError):
    """训练损失非有限，记录步数与分量名"""

    def __init__(self, step: int, component: str, value: Any):
        self.step = step
        self.component = component
        self.value = value
        super().__init__(f"第 {step} 步损失分量 {component} 非有限: {value}")


class StreamError(GDanceError):
    """流式引擎状态错误"""

    error_type = "numeric_error"
    exit_code = EXIT_NUMERIC
