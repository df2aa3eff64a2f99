"""
基准工具
缩放测量、解析 FLOPs、参数量与差分注意力稀疏度
"""

import os
import json
import logging
from typing import Any, Dict, Optional

from ..bench import flop_count, parameter_count, run_scaling, sparsity_probe, write_scaling_report
from ..model import GroupDanceDecoder, load_checkpoint
from ..motion import POSE_DIM
from ..motion_io import atomic_write
from ..numerics import RngStream
from ..temporal import identity_swap
from .base_tool import BaseTool

logger = logging.getLogger(__name__)

PROBE_FRAMES = 60


class BenchTool(BaseTool):
    """基准工具类"""

    title = "效率基准"

    def run(self, out_dir: str, seed: Optional[int] = None, plot: Optional[bool] = None,
            sparsity: bool = False, checkpoint: Optional[str] = None) -> Dict[str, Any]:
        """
        Args:
            out_dir: 输出目录（scaling.json / scaling.csv / scaling.dat / scaling.html）
            seed: 模型初始化与输入的随机种子，缺省为 0
            plot: 是否输出 plotly HTML，缺省取 bench.plot
            sparsity: 是否运行稀疏度探针（随机初始化模型，提供检查点时另测训练模型）
            checkpoint: 训练好的检查点（可选）

        Returns:
            Dict[str, Any]: {"success", "report", "files", "sparsity"}
        """
        try:
            seed = 0 if seed is None else seed
            bench = self.run_config.bench
            config = self.run_config.decoder
            self._emit_text(f"缩放测量: axis={bench.axis}, sizes={bench.sizes}, repeats={bench.repeats}")
            report = run_scaling(bench, config, seed, self.run_config.schedule.T, self.step_callback_system)
            files = write_scaling_report(report, out_dir, bench.plot if plot is None else plot)
            result = {"success": True, "report": report.as_dict(), "files": files}

            if sparsity:
                probes = {"random": self._probe(GroupDanceDecoder(config, bench.dancers, RngStream(seed).substream(4),
                                                                  self.run_config.schedule.T), seed)}
                if checkpoint:
                    probes["trained"] = self._probe(load_checkpoint(checkpoint), seed)
                path = os.path.join(out_dir, 'sparsity.json')
                atomic_write(path, json.dumps(probes, ensure_ascii=False, indent=2))
                files['sparsity'] = path
                result["sparsity"] = probes

            self._emit_json({"decoupled_exponent": report.decoupled_exponent,
                             "dense_exponent": report.dense_exponent,
                             "advisories": report.advisories,
                             "measured_model": report.measured_model}, "success")
            return result
        except Exception as e:
            return self._fail(e, out=out_dir)

    def _probe(self, decoder: GroupDanceDecoder, seed: int) -> Dict[str, Any]:
        generator = RngStream(seed).substream(5).generator
        x_t = generator.standard_normal((PROBE_FRAMES, decoder.dancers, POSE_DIM))
        t_frames = generator.integers(1, decoder.steps + 1, size=PROBE_FRAMES)
        music = generator.standard_normal((PROBE_FRAMES, decoder.config.music_dim))
        probe = sparsity_probe(decoder, x_t, t_frames, music, identity_swap(decoder.dancers))
        probe["parameters"] = parameter_count(decoder)
        probe["flops"] = flop_count(decoder.config, PROBE_FRAMES, decoder.dancers)
        return probe
