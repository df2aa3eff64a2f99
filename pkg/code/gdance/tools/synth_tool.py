"""
合成数据工具
按数据集配置生成确定性的群舞数据集目录
"""

import logging
from typing import Any, Dict, Optional

from ..motion import synth_dataset
from ..motion_io import write_dataset
from .base_tool import BaseTool

logger = logging.getLogger(__name__)


class SynthTool(BaseTool):
    """合成数据集工具类"""

    title = "合成数据"

    def run(self, out_dir: str, seed: Optional[int] = None) -> Dict[str, Any]:
        """
        生成数据集并写入 out_dir

        Args:
            out_dir: 输出目录
            seed: 随机种子，缺省为 0

        Returns:
            Dict[str, Any]: {"success", "out", "count", "files"}
        """
        try:
            seed = 0 if seed is None else seed
            config = self.run_config.dataset
            self._emit_text(f"生成 {config.count} 条序列 (N={config.dancers}, L={config.frames})")
            paths = write_dataset(out_dir, synth_dataset(config, seed))
            result = {"success": True, "out": out_dir, "count": len(paths), "seed": seed, "files": paths}
            self._emit_json({k: v for k, v in result.items() if k != "files"}, "success")
            return result
        except Exception as e:
            return self._fail(e, out=out_dir)
