"""
导出工具
逐帧关节位置 JSON 导出（供外部查看器使用）以及二进制/JSON 格式互转
"""

import logging
from typing import Any, Dict

from ..motion import load_skeleton, motion_joint_positions
from ..motion_io import convert_file, read_motion, write_json
from .base_tool import BaseTool

logger = logging.getLogger(__name__)


class ExportTool(BaseTool):
    """导出工具类"""

    title = "导出"

    def export_json(self, motion_path: str, out_path: str) -> Dict[str, Any]:
        """
        把 GDM1 动作的 FK 关节位置写成 JSON

        键名: fps, frames, dancers, parents, joints[L][N][24][3]
        """
        try:
            motion = read_motion(motion_path)
            skeleton = load_skeleton()
            joints = motion_joint_positions(motion.poses, skeleton)
            write_json(out_path, {
                'fps': motion.fps,
                'frames': motion.frames,
                'dancers': motion.dancers,
                'parents': list(skeleton.parents),
                'joints': joints.round(6).tolist(),
            })
            logger.info(f"关节位置已导出: {out_path} (L={motion.frames}, N={motion.dancers})")
            return {"success": True, "out": out_path, "frames": motion.frames, "dancers": motion.dancers}
        except Exception as e:
            return self._fail(e, out=out_path)

    def convert(self, source: str, out_path: str) -> Dict[str, Any]:
        """GDM1 / GDMU 与 JSON 镜像之间双向转换，格式由源文件自动识别"""
        try:
            kind = convert_file(source, out_path)
            logger.info(f"格式转换完成: {source} -> {out_path} ({kind})")
            return {"success": True, "out": out_path, "format": kind}
        except Exception as e:
            return self._fail(e, out=out_path)
