"""
数值计算基础模块
基于 numpy 的不可变稠密张量、反向模式自动微分、计数器随机数流与梯度检查
"""

import logging
import threading
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Any, Callable, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from .exceptions import NaNProducedError, NumericError, ShapeError

logger = logging.getLogger(__name__)

RNG_ALGORITHM = "philox4x64-10"

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence[float]]

# 线程局部状态：梯度开关与 FLOP 计数器栈
_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad() -> Iterator[None]:
    """关闭梯度记录（推理、有限差分、基准测量）"""
    previous = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


class FlopCounter:
    """
    收缩乘法计数器

    只统计 matmul、einsum、图传播与 SSM 扫描中的乘法次数，
    与 bench.flop_count 的解析公式口径一致。
    """

    def __init__(self):
        self.total = 0
        self.by_op: Dict[str, int] = {}

    def add(self, op: str, count: int):
        self.total += int(count)
        self.by_op[op] = self.by_op.get(op, 0) + int(count)

    def __enter__(self) -> "FlopCounter":
        counters = getattr(_state, "counters", None)
        if counters is None:
            counters = []
            _state.counters = counters
        counters.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _state.counters.remove(self)


def count_flops(op: str, count: int):
    """向当前线程所有活动计数器累加乘法次数"""
    for counter in getattr(_state, "counters", ()):
        counter.add(op, count)


class Tensor:
    """
    不可变 64 位稠密张量

    data 为只读 numpy 数组；0 维标量统一表示为形状 [1]。
    requires_grad 为 True 的叶子张量在 backward() 后持有 grad。
    """

    __array_priority__ = 1000

    def __init__(self, data: Any, requires_grad: bool = False):
        array = np.array(data.data if isinstance(data, Tensor) else data, dtype=np.float64)
        if array.ndim == 0:
            array = array.reshape(1)
        array.setflags(write=False)
        self.data = array
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: Tuple["Tensor", ...] = ()
        self._backward: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = None
        self.op = "leaf"

    # ------------------------------------------------------------ 基本属性

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return np.array(self.data)

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError("item", self.shape, (1,), detail="只能对单元素张量取值")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"Tensor(shape={list(self.shape)}, op={self.op}, requires_grad={self.requires_grad})"

    # ------------------------------------------------------------ 反向传播

    def backward(self, grad: Optional[np.ndarray] = None):
        """
        从当前张量反向传播

        Args:
            grad: 上游梯度，默认全 1（标量损失）
        """
        if not self.requires_grad:
            return
        seed = np.ones_like(self.data) if grad is None else np.asarray(grad, dtype=np.float64).reshape(self.shape)
        grads: Dict[int, np.ndarray] = {id(self): seed}
        for node in reversed(_topological_order(self)):
            node_grad = grads.pop(id(node), None)
            if node_grad is None:
                continue
            if node._backward is None:
                node.grad = node_grad if node.grad is None else node.grad + node_grad
                continue
            for parent, parent_grad in zip(node._parents, node._backward(node_grad)):
                if parent_grad is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = parent_grad if key not in grads else grads[key] + parent_grad

    def zero_grad(self):
        self.grad = None

    # ------------------------------------------------------------ 运算符

    def __add__(self, other: ArrayLike) -> "Tensor":
        return add(self, other)

    def __radd__(self, other: ArrayLike) -> "Tensor":
        return add(other, self)

    def __sub__(self, other: ArrayLike) -> "Tensor":
        return sub(self, other)

    def __rsub__(self, other: ArrayLike) -> "Tensor":
        return sub(other, self)

    def __mul__(self, other: ArrayLike) -> "Tensor":
        return mul(self, other)

    def __rmul__(self, other: ArrayLike) -> "Tensor":
        return mul(other, self)

    def __truediv__(self, other: ArrayLike) -> "Tensor":
        return div(self, other)

    def __rtruediv__(self, other: ArrayLike) -> "Tensor":
        return div(other, self)

    def __neg__(self) -> "Tensor":
        return neg(self)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __getitem__(self, index: Any) -> "Tensor":
        return getitem(self, index)


def _topological_order(root: Tensor) -> List[Tensor]:
    order: List[Tensor] = []
    visited = set()
    stack: List[Tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    return order


def as_tensor(value: ArrayLike) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def custom_op(data: np.ndarray, parents: Sequence[Tensor],
              backward_fn: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]],
              op: str) -> Tensor:
    """
    以给定前向结果与反向函数构造结果张量

    backward_fn 接收输出梯度，按 parents 顺序返回各父节点梯度（不需要时为 None）。
    """
    data = np.asarray(data, dtype=np.float64)
    if np.isnan(data).any():
        raise NaNProducedError(op)
    if data.ndim == 0:
        data = data.reshape(1)
    data.setflags(write=False)
    result = Tensor.__new__(Tensor)
    result.data = data
    result.grad = None
    result.op = op
    requires = is_grad_enabled() and any(p.requires_grad for p in parents)
    result.requires_grad = requires
    result._parents = tuple(parents) if requires else ()
    result._backward = backward_fn if requires else None
    return result


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, size in enumerate(shape) if size == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> Tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# ================================================================ 逐元素运算

def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)
    return custom_op(a.data + b.data, (a, b),
                     lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)
    return custom_op(a.data - b.data, (a, b),
                     lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)
    return custom_op(a.data * b.data, (a, b),
                     lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
                     "mul")


def div(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("div", a, b)
    out = a.data / b.data

    def backward(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return custom_op(out, (a, b), backward, "div")


def neg(x: Tensor) -> Tensor:
    return custom_op(-x.data, (x,), lambda g: (-g,), "neg")


def scale(x: Tensor, factor: float) -> Tensor:
    factor = float(factor)
    return custom_op(x.data * factor, (x,), lambda g: (g * factor,), "scale")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return custom_op(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    return custom_op(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return custom_op(out, (x,), lambda g: (g * 0.5 / out,), "sqrt")


def square(x: Tensor) -> Tensor:
    return custom_op(x.data * x.data, (x,), lambda g: (2.0 * g * x.data,), "square")


def relu(x: Tensor) -> Tensor:
    positive = x.data > 0
    return custom_op(np.where(positive, x.data, 0.0), (x,), lambda g: (g * positive,), "relu")


def softplus(x: Tensor) -> Tensor:
    out = np.logaddexp(0.0, x.data)
    sigmoid = np.exp(x.data - out)
    return custom_op(out, (x,), lambda g: (g * sigmoid,), "softplus")


def masked_fill(x: Tensor, mask: np.ndarray, value: float) -> Tensor:
    """mask 为 True 的位置替换为 value，梯度在这些位置为 0"""
    mask = np.asarray(mask, dtype=bool)
    try:
        np.broadcast_shapes(x.shape, mask.shape)
    except ValueError:
        raise ShapeError("masked_fill", x.shape, mask.shape) from None
    out = np.where(mask, value, x.data)
    if out.shape != x.shape:
        raise ShapeError("masked_fill", x.shape, mask.shape, detail="掩码不能扩展张量形状")
    return custom_op(out, (x,), lambda g: (np.where(mask, 0.0, g),), "masked_fill")


# ================================================================ 收缩运算

def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    try:
        batch = np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError("matmul", a.shape, b.shape) from None
    count_flops("matmul", int(np.prod(batch, dtype=np.int64)) * a.shape[-2] * a.shape[-1] * b.shape[-1])
    out = np.matmul(a.data, b.data)

    def backward(g):
        grad_a = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        grad_b = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return grad_a, grad_b

    return custom_op(out, (a, b), backward, "matmul")


def einsum(subscripts: str, a: ArrayLike, b: ArrayLike) -> Tensor:
    """
    双操作数 einsum（只支持显式字母下标与 '->' 输出，不支持省略号与对角线）

    每个操作数的字母都必须出现在另一个操作数或输出中；
    计数口径为全部下标尺寸之积。
    """
    a, b = as_tensor(a), as_tensor(b)
    inputs, output = subscripts.replace(" ", "").split("->")
    sub_a, sub_b = inputs.split(",")
    if len(sub_a) != a.ndim or len(sub_b) != b.ndim:
        raise ShapeError("einsum", a.shape, b.shape, detail=subscripts)
    sizes: Dict[str, int] = {}
    for letters, tensor in ((sub_a, a), (sub_b, b)):
        for letter, size in zip(letters, tensor.shape):
            if sizes.setdefault(letter, size) != size:
                raise ShapeError("einsum", a.shape, b.shape, detail=subscripts)
    out = np.einsum(subscripts, a.data, b.data)
    count_flops("einsum", int(np.prod(list(sizes.values()), dtype=np.int64)))

    def backward(g):
        grad_a = np.einsum(f"{output},{sub_b}->{sub_a}", g, b.data)
        grad_b = np.einsum(f"{output},{sub_a}->{sub_b}", g, a.data)
        return grad_a, grad_b

    return custom_op(out, (a, b), backward, "einsum")


# ================================================================ 形状运算

def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = x.data.reshape(tuple(shape))
    except ValueError:
        raise ShapeError("reshape", x.shape, tuple(shape)) from None
    return custom_op(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    """按 axes 重排维度；默认交换最后两维"""
    if axes is None:
        axes = list(range(x.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
    axes = tuple(a % x.ndim for a in axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError("transpose", x.shape, axes)
    inverse = tuple(np.argsort(axes))
    return custom_op(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),), "transpose")


def swapaxes(x: Tensor, axis1: int, axis2: int) -> Tensor:
    axes = list(range(x.ndim))
    axes[axis1], axes[axis2] = axes[axis2], axes[axis1]
    return transpose(x, axes)


def broadcast_to(x: Tensor, shape: Sequence[int]) -> Tensor:
    """沿大小为 1 的轴（或新增前导轴）扩展"""
    shape = tuple(shape)
    try:
        out = np.broadcast_to(x.data, shape)
    except ValueError:
        raise ShapeError("broadcast_to", x.shape, shape) from None
    return custom_op(np.array(out), (x,), lambda g: (_unbroadcast(g, x.shape),), "broadcast_to")


def concat(tensors: Sequence[ArrayLike], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError("concat", *[t.shape for t in tensors]) from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return custom_op(out, tensors, backward, "concat")


def stack(tensors: Sequence[ArrayLike], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.stack([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError("stack", *[t.shape for t in tensors]) from None

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return custom_op(out, tensors, backward, "stack")


def split(x: Tensor, sections: Union[int, Sequence[int]], axis: int = -1) -> List[Tensor]:
    """sections 为整数时均分，否则为各段长度"""
    size = x.shape[axis]
    if isinstance(sections, int):
        if size % sections != 0:
            raise ShapeError("split", x.shape, (sections,), detail="无法均分")
        lengths = [size // sections] * sections
    else:
        lengths = list(sections)
        if int(np.sum(lengths)) != size:
            raise ShapeError("split", x.shape, tuple(lengths))
    pieces, start = [], 0
    axis = axis % x.ndim
    for length in lengths:
        index = [slice(None)] * x.ndim
        index[axis] = slice(start, start + length)
        pieces.append(getitem(x, tuple(index)))
        start += length
    return pieces


def _is_basic_index(index: Any) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, np.integer, slice)) or i is Ellipsis or i is None for i in items)


def getitem(x: Tensor, index: Any) -> Tensor:
    """切片取值；基本索引反向直接写回，高级索引用散射相加"""
    try:
        out = x.data[index]
    except IndexError:
        raise ShapeError("getitem", x.shape, detail=str(index)) from None
    basic = _is_basic_index(index)

    def backward(g):
        full = np.zeros_like(x.data)
        g = g.reshape(np.shape(x.data[index]))
        if basic:
            full[index] += g
        else:
            np.add.at(full, index, g)
        return (full,)

    return custom_op(np.array(out), (x,), backward, "getitem")


def gather(x: Tensor, index: np.ndarray, axis: int = 0) -> Tensor:
    """按整数索引数组沿 axis 取值（np.take 语义），反向为散射相加"""
    index = np.asarray(index, dtype=np.int64)
    axis = axis % x.ndim
    if index.size and (index.min() < 0 or index.max() >= x.shape[axis]):
        raise ShapeError("gather", x.shape, index.shape, detail=f"索引越界 axis={axis}")
    out = np.take(x.data, index, axis=axis)

    def backward(g):
        moved = np.moveaxis(g, list(range(axis, axis + index.ndim)), list(range(index.ndim)))
        full = np.zeros((x.shape[axis],) + x.shape[:axis] + x.shape[axis + 1:])
        np.add.at(full, index, moved)
        return (np.moveaxis(full, 0, axis),)

    return custom_op(out, (x,), backward, "gather")


# ================================================================ 归约与归一化

def sum(x: Tensor, axis: Optional[Union[int, Tuple[int, ...]]] = None, keepdims: bool = False) -> Tensor:
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g.reshape(()), x.shape).copy(),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return custom_op(out, (x,), backward, "sum")


def mean(x: Tensor, axis: Optional[Union[int, Tuple[int, ...]]] = None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([x.shape[a] for a in axes]))
    return scale(sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def cumsum(x: Tensor, axis: int = -1) -> Tensor:
    out = np.cumsum(x.data, axis=axis)
    return custom_op(out, (x,),
                     lambda g: (np.flip(np.cumsum(np.flip(g, axis=axis), axis=axis), axis=axis),),
                     "cumsum")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """数值稳定 softmax；-inf 位置权重严格为 0"""
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    weights = np.exp(shifted)
    out = weights / np.sum(weights, axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)

    return custom_op(out, (x,), backward, "softmax")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """最后一维上的层归一化"""
    if gamma.shape[-1] != x.shape[-1] or beta.shape[-1] != x.shape[-1]:
        raise ShapeError("layer_norm", x.shape, gamma.shape, beta.shape)
    mu = np.mean(x.data, axis=-1, keepdims=True)
    centered = x.data - mu
    inv_std = 1.0 / np.sqrt(np.mean(centered * centered, axis=-1, keepdims=True) + eps)
    normed = centered * inv_std
    out = normed * gamma.data + beta.data
    width = x.shape[-1]

    def backward(g):
        g_normed = g * gamma.data
        grad_x = inv_std / width * (width * g_normed
                                    - np.sum(g_normed, axis=-1, keepdims=True)
                                    - normed * np.sum(g_normed * normed, axis=-1, keepdims=True))
        return (grad_x, _unbroadcast(g * normed, gamma.shape), _unbroadcast(g, beta.shape))

    return custom_op(out, (x, gamma, beta), backward, "layer_norm")


# ================================================================ 随机数

class RngStream:
    """
    计数器随机数流（Philox4x64-10 + SeedSequence 派生）

    同一 (seed, spawn_key) 在任何平台上产生逐位相同的序列；
    substream(*keys) 派生独立子流，流式与离线采样靠它共享噪声。
    """

    algorithm = RNG_ALGORITHM

    def __init__(self, seed: int, spawn_key: Tuple[int, ...] = ()):
        if seed < 0:
            raise NumericError(f"随机种子必须非负: {seed}")
        self.seed = int(seed)
        self.spawn_key = tuple(int(k) for k in spawn_key)
        self._generator: Optional[np.random.Generator] = None

    @property
    def generator(self) -> np.random.Generator:
        if self._generator is None:
            sequence = np.random.SeedSequence(self.seed, spawn_key=self.spawn_key)
            self._generator = np.random.Generator(np.random.Philox(sequence))
        return self._generator

    def substream(self, *keys: int) -> "RngStream":
        return RngStream(self.seed, self.spawn_key + tuple(keys))

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, spawn_key={self.spawn_key}, algorithm={self.algorithm})"


def gaussian(rng: RngStream, shape: Sequence[int]) -> Tensor:
    """独立同分布标准正态采样"""
    return Tensor(rng.generator.standard_normal(tuple(shape)))


def uniform(rng: RngStream, shape: Sequence[int], low: float = 0.0, high: float = 1.0) -> Tensor:
    return Tensor(rng.generator.uniform(low, high, tuple(shape)))


# ================================================================ 梯度检查

@dataclass
class CheckReport:
    """梯度检查报告"""
    passed: bool
    max_rel_error: float
    worst_index: Optional[Tuple[int, ...]]
    tolerance: float
    checked: int
    message: str = ""


def grad_check(function: Callable[[Tensor], Tensor], input: ArrayLike, tolerance: float,
               step: float = 1e-5, max_coords: Optional[int] = None,
               rng: Optional[RngStream] = None) -> CheckReport:
    """
    对比反向模式梯度与中心有限差分

    相对误差定义为 |a - n| / max(|a|, |n|, 1e-3)。
    max_coords 给定时只抽查部分坐标（由 rng 决定，默认种子 0）。
    """
    if tolerance <= 0:
        raise NumericError(f"tolerance 必须为正: {tolerance}")
    base = np.array(as_tensor(input).data, dtype=np.float64)
    leaf = Tensor(base, requires_grad=True)
    output = function(leaf)
    if output.size != 1:
        raise ShapeError("grad_check", output.shape, (1,), detail="函数必须是标量值")
    output.backward()
    analytic = leaf.grad if leaf.grad is not None else np.zeros_like(base)

    coords = list(np.ndindex(base.shape))
    if max_coords is not None and max_coords < len(coords):
        picker = (rng or RngStream(0)).generator
        chosen = np.sort(picker.choice(len(coords), size=max_coords, replace=False))
        coords = [coords[i] for i in chosen]

    worst, worst_index = 0.0, None
    for index in coords:
        plus, minus = base.copy(), base.copy()
        plus[index] += step
        minus[index] -= step
        with no_grad():
            numeric = (function(Tensor(plus)).item() - function(Tensor(minus)).item()) / (2.0 * step)
        value = analytic[index]
        if not (np.isfinite(numeric) and np.isfinite(value)):
            return CheckReport(False, float("inf"), index, tolerance, len(coords),
                               f"坐标 {index} 梯度非有限: analytic={value}, numeric={numeric}")
        rel = abs(value - numeric) / max(abs(value), abs(numeric), 1e-3)
        if rel > worst:
            worst, worst_index = rel, index
    passed = worst <= tolerance
    if not passed:
        logger.debug(f"梯度检查失败: 最大相对误差 {worst:.3e} 位于 {worst_index}")
    return CheckReport(passed, float(worst), worst_index, tolerance, len(coords))


# ================================================================ 参数容器

class Module:
    """参数容器基类：按属性插入顺序枚举参数，名称以点号连接"""

    def named_parameters(self, prefix: str = "") -> List[Tuple[str, Tensor]]:
        items: List[Tuple[str, Tensor]] = []
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                items.append((prefix + name, value))
            elif isinstance(value, Module):
                items.extend(value.named_parameters(f"{prefix}{name}."))
            elif isinstance(value, (list, tuple)):
                for i, child in enumerate(value):
                    if isinstance(child, Module):
                        items.extend(child.named_parameters(f"{prefix}{name}.{i}."))
        return items

    def parameters(self) -> List[Tensor]:
        return [p for _, p in self.named_parameters()]

    def parameter_count(self) -> int:
        return int(np.sum([p.size for p in self.parameters()], dtype=np.int64))

    def set_parameter(self, name: str, value: ArrayLike):
        """按点号路径替换参数（参数不可变，更新即替换）"""
        owner: Any = self
        parts = name.split(".")
        for part in parts[:-1]:
            owner = owner[int(part)] if part.isdigit() else getattr(owner, part)
        current = getattr(owner, parts[-1])
        array = as_tensor(value).data
        if current.shape != array.shape:
            raise ShapeError("set_parameter", current.shape, array.shape, detail=name)
        setattr(owner, parts[-1], Tensor(array, requires_grad=True))

    def load_parameters(self, mapping: Dict[str, np.ndarray]):
        for name, _ in self.named_parameters():
            if name not in mapping:
                raise NumericError(f"缺少参数: {name}")
            self.set_parameter(name, mapping[name])

    def zero_grad(self):
        for parameter in self.parameters():
            parameter.zero_grad()

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def init_normal(rng: RngStream, shape: Sequence[int], std: float) -> Tensor:
    return Tensor(rng.generator.standard_normal(tuple(shape)) * std, requires_grad=True)


class Linear(Module):
    """仿射层 y = x W + b，W 形状 (in, out)"""

    def __init__(self, in_features: int, out_features: int, rng: RngStream, bias: bool = True):
        self.in_features = in_features
        self.out_features = out_features
        self.weight = init_normal(rng, (in_features, out_features), 1.0 / np.sqrt(in_features))
        self.bias = Tensor(np.zeros(out_features), requires_grad=True) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.in_features:
            raise ShapeError("linear", x.shape, self.weight.shape)
        lead = x.shape[:-1]
        out = matmul(reshape(x, (-1, self.in_features)), self.weight)
        if self.bias is not None:
            out = add(out, self.bias)
        return reshape(out, lead + (self.out_features,))


class LayerNorm(Module):
    def __init__(self, width: int, eps: float = 1e-5):
        self.eps = eps
        self.gamma = Tensor(np.ones(width), requires_grad=True)
        self.beta = Tensor(np.zeros(width), requires_grad=True)

    def forward(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gamma, self.beta, self.eps)
