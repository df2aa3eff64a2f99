"""
命令行入口
train | sample | stream | eval | bench | synth | export-json | convert

退出码: 0 成功，1 未知错误，2 配置错误，3 文件读写错误，4 数值错误。
"""

import sys
import json
import logging
import argparse
from typing import Any, Dict, List, Optional

from .config import get_config, load_run_config, validate_config
from .exceptions import EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC, EXIT_OK, EXIT_UNKNOWN, GDanceError
from .pipeline import GDancePipeline
from .utils import StepCallbackSystem, logging_callback

logger = logging.getLogger(__name__)

EXIT_CODES = {
    "config_error": EXIT_CONFIG,
    "io_error": EXIT_IO,
    "numeric_error": EXIT_NUMERIC,
}

# 命令行参数 -> 配置 key
FLAG_OVERRIDES = {
    'dancers': 'dataset.dancers',
    'frames': 'dataset.frames',
    'count': 'dataset.count',
    'window': 'decoder.window',
    'segments': 'stream.window_segments',
    'mode': 'mode',
    'steps': 'train.steps',
    'axis': 'bench.axis',
    'sizes': 'bench.sizes',
    'repeats': 'bench.repeats',
    'seed': 'seed',
}


def u64(text: str) -> int:
    try:
        value = int(text, 0)
    except ValueError:
        raise argparse.ArgumentTypeError(f"不是整数: {text}") from None
    if not 0 <= value < 2 ** 64:
        raise argparse.ArgumentTypeError(f"种子必须在 [0, 2^64): {text}")
    return value


def build_parser() -> argparse.ArgumentParser:
    formatter = argparse.ArgumentDefaultsHelpFormatter
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', metavar='PATH', default=None, help='JSON 运行配置文件')
    common.add_argument('--seed', metavar='U64', type=u64, default=None, help='随机种子（train/sample/stream 必填）')
    common.add_argument('--verbose', action='store_true', help='输出 DEBUG 日志')

    parser = argparse.ArgumentParser(prog='gdance', description='多人群舞时空扩散生成', formatter_class=formatter)
    commands = parser.add_subparsers(dest='command', required=True, metavar='COMMAND')

    synth = commands.add_parser('synth', parents=[common], formatter_class=formatter, help='生成合成数据集目录')
    synth.add_argument('--out', metavar='PATH', required=True, help='输出目录')
    synth.add_argument('--dancers', metavar='N', type=int, default=None, help='舞者人数（覆盖 dataset.dancers）')
    synth.add_argument('--frames', metavar='L', type=int, default=None, help='帧数（覆盖 dataset.frames）')
    synth.add_argument('--count', type=int, default=None, help='序列条数（覆盖 dataset.count）')

    train = commands.add_parser('train', parents=[common], formatter_class=formatter, help='训练解码器')
    train.add_argument('--data', metavar='PATH', required=True, help='数据集目录（*.gdm + *.gdmu）')
    train.add_argument('--out', metavar='PATH', required=True, help='输出目录（检查点与 losses.csv）')
    train.add_argument('--steps', type=int, default=None, help='训练步数（覆盖 train.steps）')
    train.add_argument('--window', metavar='W', type=int, default=None, help='AAM 半径（覆盖 decoder.window）')
    train.add_argument('--resume', metavar='PATH', default=None, help='从已有检查点继续训练')

    sample = commands.add_parser('sample', parents=[common], formatter_class=formatter, help='整段采样')
    sample.add_argument('--checkpoint', metavar='PATH', required=True, help='检查点路径')
    sample.add_argument('--music', metavar='PATH', required=True, help='GDMU 音乐文件')
    sample.add_argument('--out', metavar='PATH', required=True, help='输出 .gdm 文件')
    sample.add_argument('--frames', metavar='L', type=int, default=None, help='生成帧数，缺省为音乐长度')
    sample.add_argument('--mode', choices=('offline', 'streaming'), default=None,
                        help='offline 统一时间步；streaming 三角调度推演（覆盖 mode）')
    sample.add_argument('--segments', metavar='S', type=int, default=None,
                        help='三角调度窗口段数（覆盖 stream.window_segments）')
    sample.add_argument('--swap-from', metavar='PATH', default=None, help='提供换位编码的参考动作')

    stream = commands.add_parser('stream', parents=[common], formatter_class=formatter, help='逐段流式生成')
    stream.add_argument('--checkpoint', metavar='PATH', required=True, help='检查点路径')
    stream.add_argument('--music', metavar='PATH', required=True, help='GDMU 音乐文件或命名管道')
    stream.add_argument('--out', metavar='PATH', required=True, help='输出目录（逐段 .gdm 与 stream.gdm）')
    stream.add_argument('--segments', metavar='S', type=int, default=None,
                        help='窗口段数（覆盖 stream.window_segments）')
    stream.add_argument('--swap-from', metavar='PATH', default=None, help='提供换位编码的参考动作')

    evaluate = commands.add_parser('eval', parents=[common], formatter_class=formatter, help='计算群舞指标')
    evaluate.add_argument('--generated', metavar='PATH', required=True, help='生成动作目录')
    evaluate.add_argument('--reference', metavar='PATH', required=True, help='参考动作目录')
    evaluate.add_argument('--out', metavar='PATH', default=None, help='MetricReport JSON 输出路径')

    bench = commands.add_parser('bench', parents=[common], formatter_class=formatter, help='效率缩放基准')
    bench.add_argument('--out', metavar='PATH', required=True, help='输出目录')
    bench.add_argument('--axis', choices=('L', 'N'), default=None, help='缩放轴（覆盖 bench.axis）')
    bench.add_argument('--sizes', type=int, nargs='+', default=None, help='规模序列（覆盖 bench.sizes）')
    bench.add_argument('--repeats', type=int, default=None, help='每个规模的重复次数（覆盖 bench.repeats）')
    bench.add_argument('--dancers', metavar='N', type=int, default=None, help='axis=L 时的舞者人数（覆盖 bench.dancers）')
    bench.add_argument('--frames', metavar='L', type=int, default=None, help='axis=N 时的帧数（覆盖 bench.frames）')
    bench.add_argument('--window', metavar='W', type=int, default=None, help='AAM 半径（覆盖 decoder.window）')
    bench.add_argument('--plot', action='store_true', help='输出 plotly 缩放曲线 HTML')
    bench.add_argument('--sparsity', action='store_true', help='运行差分注意力稀疏度探针')
    bench.add_argument('--checkpoint', metavar='PATH', default=None, help='稀疏度探针使用的训练检查点')

    export = commands.add_parser('export-json', parents=[common], formatter_class=formatter,
                                 help='导出逐帧关节位置 JSON')
    export.add_argument('input', metavar='MOTION', help='GDM1 动作文件')
    export.add_argument('--out', metavar='PATH', required=True, help='输出 JSON 路径')

    convert = commands.add_parser('convert', parents=[common], formatter_class=formatter,
                                  help='GDM1/GDMU 与 JSON 镜像互转')
    convert.add_argument('input', metavar='SOURCE', help='源文件（格式自动识别）')
    convert.add_argument('--out', metavar='PATH', required=True, help='目标文件')
    return parser


def collect_overrides(args: argparse.Namespace) -> Dict[str, Any]:
    """命令行参数到配置 key 的覆盖表，bench 的人数/帧数作用于 bench 段"""
    overrides = {}
    for flag, key in FLAG_OVERRIDES.items():
        value = getattr(args, flag, None)
        if value is None:
            continue
        if args.command == 'bench' and flag in ('dancers', 'frames'):
            key = f"bench.{flag}"
        if args.command == 'sample' and flag == 'frames':
            continue
        overrides[key] = value
    return overrides


def command_arguments(args: argparse.Namespace, seed: Optional[int]) -> Dict[str, Any]:
    """把解析后的参数整理为工具调用参数"""
    command = args.command
    if command == 'synth':
        return {'out_dir': args.out, 'seed': seed}
    if command == 'train':
        return {'data_dir': args.data, 'out_dir': args.out, 'seed': seed, 'resume': args.resume}
    if command == 'sample':
        return {'checkpoint': args.checkpoint, 'music_path': args.music, 'out_path': args.out, 'seed': seed,
                'frames': args.frames, 'mode': None, 'swap_from': args.swap_from}
    if command == 'stream':
        return {'checkpoint': args.checkpoint, 'music_path': args.music, 'out_dir': args.out, 'seed': seed,
                'swap_from': args.swap_from}
    if command == 'eval':
        return {'generated_dir': args.generated, 'reference_dir': args.reference, 'out_path': args.out}
    if command == 'bench':
        return {'out_dir': args.out, 'seed': seed, 'plot': args.plot or None, 'sparsity': args.sparsity,
                'checkpoint': args.checkpoint}
    if command == 'export-json':
        return {'motion_path': args.input, 'out_path': args.out}
    return {'source': args.input, 'out_path': args.out}


def setup_logging(verbose: bool = False):
    level = logging.DEBUG if verbose else getattr(logging, get_config('LOG_LEVEL', 'INFO'), logging.INFO)
    logging.basicConfig(level=level, format=get_config('LOG_FORMAT'), stream=sys.stderr, force=True)
    status = validate_config()
    for issue in status['issues']:
        logger.warning(f"全局配置问题: {issue}")


def exit_code(result: Dict[str, Any]) -> int:
    if result.get('success'):
        return EXIT_OK
    return EXIT_CODES.get(result.get('error_type'), EXIT_UNKNOWN)


def main(argv: Optional[List[str]] = None) -> int:
    """
    命令行主函数

    Returns:
        int: 进程退出码
    """
    args = build_parser().parse_args(argv)
    setup_logging(args.verbose)
    try:
        run_config = load_run_config(args.config, collect_overrides(args))
    except GDanceError as e:
        logger.error(f"配置加载失败: {e}")
        print(f"错误 [{e.error_type}]: {e}", file=sys.stderr)
        return e.exit_code

    pipeline = GDancePipeline(run_config, StepCallbackSystem(keep_history=False))
    pipeline.set_step_callback(logging_callback(logger))
    arguments = command_arguments(args, run_config.seed)
    if args.command == 'sample':
        arguments['mode'] = run_config.mode
    result = pipeline.process_command(args.command, **arguments)

    code = exit_code(result)
    if code != EXIT_OK:
        print(f"错误 [{result.get('error_type')}]: {result.get('error')}", file=sys.stderr)
        return code
    if args.command == 'eval':
        print(result['table'])
    else:
        print(json.dumps(result, ensure_ascii=False, indent=2, default=str))
    return EXIT_OK
