"""
工具模块包
包含进度回调与训练历史管理器
"""

from .history_manager import TrainingHistoryManager, load_loss_csv
from .step_callback_system import StepCallbackSystem, logging_callback

__all__ = [
    'TrainingHistoryManager',
    'load_loss_csv',
    'StepCallbackSystem',
    'logging_callback',
]
