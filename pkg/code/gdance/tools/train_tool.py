"""
训练工具
读取数据集目录，训练解码器并写出检查点与损失曲线
"""

import os
import logging
from typing import Any, Dict, Optional

from ..exceptions import ConfigError
from ..model import load_checkpoint, read_checkpoint_meta, save_checkpoint, train_loop
from ..motion import rearrange_dancers
from ..motion_io import read_dataset
from .base_tool import BaseTool

logger = logging.getLogger(__name__)

CHECKPOINT_NAME = 'checkpoint.gdck'
LOSS_NAME = 'losses.csv'


class TrainTool(BaseTool):
    """训练工具类"""

    title = "训练"

    def run(self, data_dir: str, out_dir: str, seed: Optional[int], resume: Optional[str] = None) -> Dict[str, Any]:
        """
        Args:
            data_dir: synth 生成的（或同格式的）数据集目录
            out_dir: 输出目录，写入 checkpoint.gdck(.json) 与 losses.csv
            seed: 随机种子（必填）
            resume: 可选的初始检查点

        Returns:
            Dict[str, Any]: {"success", "checkpoint", "losses", "final_loss", "steps", "step"}（step 为累计步数）
        """
        try:
            seed = self.require_seed(seed)
            dataset = [(rearrange_dancers(motion)[0], music) for motion, music in read_dataset(data_dir)]
            music_dim = dataset[0][1].dim
            if music_dim != self.run_config.decoder.music_dim:
                raise ConfigError(f"数据集音乐维度 {music_dim} 与解码器配置 {self.run_config.decoder.music_dim} 不符",
                                  key='decoder.music_dim')
            decoder, start_step = None, 0
            if resume:
                decoder = load_checkpoint(resume)
                start_step = int(read_checkpoint_meta(resume).get('step') or 0)
                logger.info(f"从检查点继续训练: {resume} (已训练 {start_step} 步)")
            self._emit_text(f"开始训练: {len(dataset)} 条序列, {self.run_config.train.steps} 步")
            result = train_loop(dataset, self.run_config, seed, self.step_callback_system, decoder=decoder,
                                start_step=start_step)
            total_steps = start_step + self.run_config.train.steps

            os.makedirs(out_dir, exist_ok=True)
            checkpoint = os.path.join(out_dir, CHECKPOINT_NAME)
            losses = os.path.join(out_dir, LOSS_NAME)
            save_checkpoint(checkpoint, result.decoder, self.run_config, total_steps)
            result.history.save_csv(losses)
            summary = {
                "success": True,
                "checkpoint": checkpoint,
                "losses": losses,
                "steps": len(result.history),
                "step": total_steps,
                "final_loss": result.history.recent_mean(1),
                "parameters": result.decoder.parameter_count(),
            }
            self._emit_json(summary, "success")
            return summary
        except Exception as e:
            return self._fail(e, out=out_dir)
