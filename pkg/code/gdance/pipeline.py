"""
命令编排模块
持有运行配置、进度回调系统与全部命令工具，按命令名分发执行
"""

import logging
from typing import Any, Callable, Dict, Optional

from .config import RunConfig
from .exceptions import ConfigError
from .tools import BenchTool, EvalTool, ExportTool, SampleTool, StreamTool, SynthTool, TrainTool, error_result
from .utils import StepCallbackSystem

logger = logging.getLogger(__name__)

COMMANDS = ('train', 'sample', 'stream', 'eval', 'bench', 'synth', 'export-json', 'convert')


class GDancePipeline:
    """群舞生成命令编排器"""

    def __init__(self, run_config: RunConfig, step_callback_system: Optional[StepCallbackSystem] = None):
        """
        Args:
            run_config: 已校验的运行配置
            step_callback_system: 进度事件分发器，缺省新建
        """
        self.run_config = run_config
        self.step_callback_system = step_callback_system or StepCallbackSystem()

        self.synth_tool = SynthTool(run_config, self.step_callback_system)
        self.train_tool = TrainTool(run_config, self.step_callback_system)
        self.sample_tool = SampleTool(run_config, self.step_callback_system)
        self.stream_tool = StreamTool(run_config, self.step_callback_system)
        self.eval_tool = EvalTool(run_config, self.step_callback_system)
        self.bench_tool = BenchTool(run_config, self.step_callback_system)
        self.export_tool = ExportTool(run_config, self.step_callback_system)

        self.handlers: Dict[str, Callable[..., Dict[str, Any]]] = {
            'synth': self.synth_tool.run,
            'train': self.train_tool.run,
            'sample': self.sample_tool.run,
            'stream': self.stream_tool.run,
            'eval': self.eval_tool.run,
            'bench': self.bench_tool.run,
            'export-json': self.export_tool.export_json,
            'convert': self.export_tool.convert,
        }

    def set_step_callback(self, callback_function: Callable[[Dict[str, Any]], None]):
        """设置步骤回调函数"""
        self.step_callback_system.set_callback(callback_function)

    def set_run_id(self, run_id: str):
        """设置当前运行标识"""
        self.step_callback_system.set_run_id(run_id)

    def process_command(self, command: str, **arguments) -> Dict[str, Any]:
        """
        执行一个命令的主入口

        Args:
            command: 命令名，见 COMMANDS
            **arguments: 传给对应工具的参数

        Returns:
            Dict[str, Any]: 工具结果，失败时含 error 与 error_type
        """
        handler = self.handlers.get(command)
        if handler is None:
            return error_result(ConfigError(f"未知命令: {command}", key='command'))
        seed = arguments.get('seed')
        self.set_run_id(command if seed is None else f"{command}-{seed}")
        logger.info(f"执行命令: {command}")
        try:
            result = handler(**arguments)
        except TypeError as e:
            # 参数与工具签名不符
            logger.error(f"命令参数错误: {command} ({e})")
            return error_result(ConfigError(f"命令 {command} 的参数错误: {e}", key=command))
        if result.get("success"):
            logger.info(f"命令完成: {command}")
        return result
