"""
进度回调系统
负责分发训练、采样、评测与基准过程中的进度事件
"""

import logging
from typing import Dict, List, Any, Callable, Optional
from datetime import datetime

logger = logging.getLogger(__name__)


class StepCallbackSystem:
    """进度事件分发器，回调函数接收事件字典"""

    def __init__(self, keep_history: bool = True):
        self.callback_function: Optional[Callable[[Dict[str, Any]], None]] = None
        self.current_run_id: Optional[str] = None
        self.keep_history = keep_history
        self.output_history: List[Dict[str, Any]] = []

    def set_callback(self, callback_function: Callable[[Dict[str, Any]], None]):
        """设置回调函数"""
        self.callback_function = callback_function

    def set_run_id(self, run_id: str):
        """设置当前运行标识（命令名 + 种子）"""
        self.current_run_id = run_id

    def emit_output(self, data_type: str, content: Any, title: str = None, status: str = "processing"):
        """
        发送进度事件

        Args:
            data_type: 数据类型 ("text", "json", "table")
            content: 事件内容
            title: 事件标题
            status: 状态 (processing, success, error)
        """
        event = {
            "type": "output",
            "run_id": self.current_run_id,
            "data_type": data_type,
            "content": content,
            "title": title or f"{data_type.upper()} 输出",
            "status": status,
            "timestamp": datetime.now().isoformat(),
        }
        if self.keep_history:
            self.output_history.append(event)
        if self.callback_function:
            try:
                self.callback_function(event)
            except Exception as e:
                # 回调失败不影响计算本身
                logger.error(f"进度回调失败: {str(e)}")
        logger.debug(f"发送{data_type}事件: {event['title']}")

    def emit_text(self, content: Any, title: str = None, status: str = "processing"):
        self.emit_output("text", content, title, status)

    def emit_json(self, content: Any, title: str = None, status: str = "processing"):
        self.emit_output("json", content, title, status)

    def emit_table(self, content: Any, title: str = None, status: str = "processing"):
        """发送表格事件（content 为记录列表）"""
        self.emit_output("table", content, title, status)

    def get_output_history(self) -> List[Dict[str, Any]]:
        return self.output_history.copy()

    def clear_history(self):
        self.output_history.clear()


def logging_callback(target: logging.Logger, level: int = logging.INFO) -> Callable[[Dict[str, Any]], None]:
    """生成把事件写入日志的回调，CLI 默认注册"""

    def callback(event: Dict[str, Any]):
        content = event.get("content")
        if event.get("data_type") == "text":
            target.log(level, f"[{event.get('title')}] {content}")
        else:
            target.log(logging.DEBUG, f"[{event.get('title')}] {content}")

    return callback
