"""
评测工具
对生成目录与参考目录计算群舞指标并写出 JSON 报告
"""

import json
import logging
from typing import Any, Dict, Optional

from ..metrics import evaluate_directory
from ..motion_io import atomic_write
from .base_tool import BaseTool

logger = logging.getLogger(__name__)


class EvalTool(BaseTool):
    """评测工具类"""

    title = "评测"

    def run(self, generated_dir: str, reference_dir: str, out_path: Optional[str] = None,
            threads: Optional[int] = None) -> Dict[str, Any]:
        """
        Args:
            generated_dir: 生成动作目录（*.gdm）
            reference_dir: 参考动作目录（*.gdm）
            out_path: MetricReport JSON 输出路径，None 时只返回结果
            threads: 按文件并行的线程数，默认取 GDANCE_THREADS

        Returns:
            Dict[str, Any]: {"success", "report", "table", "out"}
        """
        try:
            self._emit_text(f"评测 {generated_dir} 对比 {reference_dir}")
            report = evaluate_directory(generated_dir, reference_dir, threads)
            if out_path:
                atomic_write(out_path, json.dumps(report.as_dict(), ensure_ascii=False, indent=2))
            table = report.table()
            logger.info(f"评测结果:\n{table}")
            self._emit_table(report.per_file)
            summary = {k: v for k, v in report.as_dict().items() if k != 'per_file'}
            self._emit_json(summary, "success")
            return {"success": True, "report": report.as_dict(), "table": table, "out": out_path}
        except Exception as e:
            return self._fail(e, out=out_path)

    def _emit_table(self, rows):
        if self.step_callback_system:
            self.step_callback_system.emit_table(rows, "逐文件指标")
