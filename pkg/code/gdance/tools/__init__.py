"""
命令工具模块包
每个命令一个工具类，统一返回 {"success", ...} 结果字典
"""

from .base_tool import BaseTool, error_result
from .synth_tool import SynthTool
from .train_tool import TrainTool
from .sample_tool import SampleTool, StreamTool
from .eval_tool import EvalTool
from .bench_tool import BenchTool
from .export_tool import ExportTool

__all__ = [
    'BaseTool',
    'error_result',
    'SynthTool',
    'TrainTool',
    'SampleTool',
    'StreamTool',
    'EvalTool',
    'BenchTool',
    'ExportTool',
]
