"""
多人群舞时空扩散生成库
空间图建模（SMB）+ 时间建模（差分注意力、对齐掩码交叉注意力、SSM）+ 三角噪声调度流式生成

包入口不导入任何子模块，python -m gdance 需要先设置 BLAS 线程环境变量再加载 numpy。
"""

__version__ = '0.1.0'

__all__ = ['__version__']
