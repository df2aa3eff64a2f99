"""
训练历史管理器
记录逐步损失分解，提供滑动平均与 CSV 导出
"""

import logging
from typing import Dict, List, Any, Optional

import pandas as pd

logger = logging.getLogger(__name__)

LOSS_COLUMNS = ['step', 'simple', 'vel', 'fk', 'contact', 'dist', 'total']


class TrainingHistoryManager:
    """训练历史管理器类"""

    def __init__(self, max_history_length: Optional[int] = None):
        """
        Args:
            max_history_length: 最大保留步数，None 表示不截断
        """
        self.history: List[Dict[str, Any]] = []
        self.max_history_length = max_history_length

    def add_step(self, step: int, losses: Dict[str, float]):
        """添加一步的损失分解"""
        entry = {'step': int(step)}
        entry.update({key: float(losses[key]) for key in LOSS_COLUMNS[1:]})
        self.history.append(entry)
        if self.max_history_length and len(self.history) > self.max_history_length:
            self.history = self.history[-self.max_history_length:]

    def __len__(self) -> int:
        return len(self.history)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.history, columns=LOSS_COLUMNS)

    def recent_mean(self, window: int = 10, column: str = 'total') -> float:
        """最近 window 步的平均损失"""
        if not self.history:
            return float('nan')
        return float(self.to_frame()[column].tail(window).mean())

    def window_mean(self, start: int, stop: int, column: str = 'total') -> float:
        """步号落在 [start, stop) 的平均损失"""
        frame = self.to_frame()
        selected = frame[(frame['step'] >= start) & (frame['step'] < stop)]
        return float(selected[column].mean()) if len(selected) else float('nan')

    def save_csv(self, path: str):
        """导出损失曲线 CSV（step, simple, vel, fk, contact, dist, total）"""
        self.to_frame().to_csv(path, index=False)
        logger.info(f"损失曲线已写入: {path} ({len(self.history)} 步)")

    def clear_history(self):
        self.history.clear()


def load_loss_csv(path: str) -> pd.DataFrame:
    return pd.read_csv(path)
