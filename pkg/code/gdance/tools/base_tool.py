"""
命令工具基类
统一的进度事件发送与异常到结果字典的转换
"""

import logging
from typing import Any, Dict, Optional

from ..config import RunConfig
from ..exceptions import ConfigError, GDanceError, MotionIOError
from ..utils import StepCallbackSystem

logger = logging.getLogger(__name__)


def error_result(error: Exception, **extra) -> Dict[str, Any]:
    """
    把异常转换为 {"success": False, "error", "error_type"} 结果

    领域异常带上失败的 key 或 path，未知异常归为 unknown_error。
    """
    result = {
        "success": False,
        "error": str(error),
        "error_type": error.error_type if isinstance(error, GDanceError) else "unknown_error",
    }
    if isinstance(error, ConfigError) and error.key:
        result["key"] = error.key
    if isinstance(error, MotionIOError) and error.path:
        result["path"] = error.path
    result.update(extra)
    return result


class BaseTool:
    """命令工具基类"""

    title = "命令"

    def __init__(self, run_config: RunConfig, step_callback_system: Optional[StepCallbackSystem] = None):
        """
        Args:
            run_config: 已校验的运行配置
            step_callback_system: 步骤回调系统（可选）
        """
        self.run_config = run_config
        self.step_callback_system = step_callback_system

    def _emit_text(self, content: Any, status: str = "processing"):
        if self.step_callback_system:
            self.step_callback_system.emit_text(content, self.title, status)

    def _emit_json(self, content: Any, status: str = "processing"):
        if self.step_callback_system:
            self.step_callback_system.emit_json(content, self.title, status)

    def _fail(self, error: Exception, **extra) -> Dict[str, Any]:
        if isinstance(error, GDanceError):
            logger.error(f"{self.title}失败: {error}")
        else:
            logger.exception(f"{self.title}出现未预期错误: {error}")
        self._emit_text(str(error), "error")
        return error_result(error, **extra)

    @staticmethod
    def require_seed(seed: Optional[int]) -> int:
        if seed is None:
            raise ConfigError("该命令必须提供随机种子", key='--seed')
        return seed
