"""
最小稠密张量库与反向模式自动微分

所有数值统一为 float64。每个可微运算在前向时把 (输出, 输入, 反向规则) 追加到
当前线程的计算带 (Tape)，backward() 按逆序回放计算带得到梯度。
"""

import logging
import threading
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import AxisError, BatchError, ConfigError, ShapeMismatchError, TapeError

logger = logging.getLogger(__name__)

# 加性掩码中 -inf 的有限替代值
MASK_DROP = -1e30

ArrayLike = Union[np.ndarray, float, int, Sequence]
GradList = Sequence[Optional[np.ndarray]]
BackwardFn = Callable[[np.ndarray], GradList]

_local = threading.local()


@dataclass
class TapeRecord:
    """计算带上的一条记录"""
    node_id: int
    op: str
    output: "Tensor"
    inputs: Tuple["Tensor", ...]
    backward: BackwardFn


class Tape:
    """按执行顺序记录运算的计算带，天然满足拓扑序"""

    def __init__(self):
        self.records: List[TapeRecord] = []
        self.consumed = False

    def record(self, op: str, output: "Tensor", inputs: Tuple["Tensor", ...], backward_fn: BackwardFn) -> None:
        if self.consumed:
            raise TapeError("计算带已完成反向传播，不能继续记录")
        for inp in inputs:
            if inp._tape is not None and inp._tape is not self:
                raise TapeError(f"{op}: 输入张量属于另一条计算带")
        output._tape = self
        output._node_id = len(self.records)
        self.records.append(TapeRecord(len(self.records), op, output, inputs, backward_fn))

    def __len__(self) -> int:
        return len(self.records)


def current_tape() -> Tape:
    """返回当前线程的计算带；上一条已被消费时自动开启新带"""
    tape = getattr(_local, "tape", None)
    if tape is None or tape.consumed:
        tape = Tape()
        _local.tape = tape
    return tape


def reset_tape() -> Tape:
    """丢弃当前线程的计算带并开启新带"""
    _local.tape = Tape()
    return _local.tape


def grad_enabled() -> bool:
    return not getattr(_local, "no_grad", False)


@contextmanager
def no_grad() -> Iterator[None]:
    """在上下文内不记录计算带（评估用）"""
    previous = getattr(_local, "no_grad", False)
    _local.no_grad = True
    try:
        yield
    finally:
        _local.no_grad = previous


class Tensor:
    """带可选梯度跟踪的稠密 float64 数组"""

    __array_priority__ = 100

    def __init__(self, data: ArrayLike, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._tape: Optional[Tape] = None
        self._node_id: Optional[int] = None

    @classmethod
    def _wrap(cls, data: np.ndarray, requires_grad: bool) -> "Tensor":
        out = cls.__new__(cls)
        out.data = np.asarray(data, dtype=np.float64)
        out.requires_grad = requires_grad
        out.grad = None
        out._tape = None
        out._node_id = None
        return out

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._tape is None

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeMismatchError("item", self.shape, ())
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data, False)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # 运算符重载
    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __rtruediv__(self, other): return div(other, self)
    def __neg__(self): return neg(self)
    def __matmul__(self, other): return matmul(self, other)
    def __rmatmul__(self, other): return matmul(other, self)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        return transpose(self, axes if axes else None)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tensor_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tensor_mean(self, axis, keepdims)


Params = Dict[str, Tensor]


def parameter(data: ArrayLike) -> Tensor:
    return Tensor(data, requires_grad=True)


def as_tensor(value: Union[Tensor, ArrayLike]) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def _make(op: str, data: np.ndarray, inputs: Tuple[Tensor, ...], backward_fn: BackwardFn) -> Tensor:
    requires = grad_enabled() and any(t.requires_grad for t in inputs)
    out = Tensor._wrap(data, requires)
    if requires:
        current_tape().record(op, out, inputs, backward_fn)
    return out


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """把广播后的梯度求和回原始形状"""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _normalize_axis(axis: int, ndim: int, op: str) -> int:
    if not -ndim <= axis < ndim:
        raise AxisError(f"{op}: 轴 {axis} 超出范围 (ndim={ndim})")
    return axis % ndim


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> Tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatchError(op, a.shape, b.shape) from None


# ---------------------------------------------------------------- 逐元素运算

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)

    def backward_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)
    return _make("add", a.data + b.data, (a, b), backward_fn)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)

    def backward_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)
    return _make("sub", a.data - b.data, (a, b), backward_fn)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)

    def backward_fn(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)
    return _make("mul", a.data * b.data, (a, b), backward_fn)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a, b)

    def backward_fn(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.shape))
    return _make("div", a.data / b.data, (a, b), backward_fn)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make("neg", -a.data, (a,), lambda g: (-g,))


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(x: Tensor) -> Tensor:
    """tanh 近似 GELU"""
    x = as_tensor(x)
    u = _GELU_C * (x.data + 0.044715 * x.data ** 3)
    t = np.tanh(u)

    def backward_fn(g):
        du = _GELU_C * (1.0 + 3.0 * 0.044715 * x.data ** 2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x.data * (1.0 - t * t) * du),)
    return _make("gelu", 0.5 * x.data * (1.0 + t), (x,), backward_fn)


# ---------------------------------------------------------------- 矩阵与形状

def matmul(a, b) -> Tensor:
    """带批维广播的矩阵乘法 [.., m, k] x [.., k, n] -> [.., m, n]"""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeMismatchError("matmul", a.shape, b.shape)
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeMismatchError("matmul", a.shape, b.shape) from None

    def backward_fn(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)
    return _make("matmul", a.data @ b.data, (a, b), backward_fn)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(tuple(shape))
    except ValueError:
        raise ShapeMismatchError("reshape", x.shape, tuple(shape)) from None
    return _make("reshape", out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    x = as_tensor(x)
    axes = tuple(range(x.ndim))[::-1] if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _make("transpose", np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),))


# ---------------------------------------------------------------- 归约

def tensor_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    if axis is not None:
        axis = _normalize_axis(axis, x.ndim, "sum")

    def backward_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)
    return _make("sum", np.sum(x.data, axis=axis, keepdims=keepdims), (x,), backward_fn)


def tensor_mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    count = x.size if axis is None else x.shape[_normalize_axis(axis, x.ndim, "mean")]
    return tensor_sum(x, axis, keepdims) * (1.0 / count)


def masked_sum(x: Tensor, mask: np.ndarray, axis: int, keepdims: bool = False) -> Tensor:
    """沿 axis 只对 mask 为真的元素求和"""
    x = as_tensor(x)
    axis = _normalize_axis(axis, x.ndim, "masked_sum")
    weights = np.broadcast_to(np.asarray(mask, dtype=np.float64), x.shape)
    out = np.sum(np.where(weights > 0, x.data, 0.0), axis=axis, keepdims=keepdims)

    def backward_fn(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.where(weights > 0, np.broadcast_to(g, x.shape), 0.0),)
    return _make("masked_sum", out, (x,), backward_fn)


def masked_mean(x: Tensor, mask: np.ndarray, axis: int, keepdims: bool = False) -> Tensor:
    """沿 axis 只对 mask 为真的元素取平均；计数为零的位置输出 0"""
    x = as_tensor(x)
    axis = _normalize_axis(axis, x.ndim, "masked_mean")
    weights = np.broadcast_to(np.asarray(mask, dtype=np.float64), x.shape)
    count = np.sum(weights > 0, axis=axis, keepdims=True).astype(np.float64)
    safe = np.where(count > 0, count, 1.0)
    total = np.sum(np.where(weights > 0, x.data, 0.0), axis=axis, keepdims=True)
    out = np.where(count > 0, total / safe, 0.0)

    def backward_fn(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.where(weights > 0, np.broadcast_to(g / safe, x.shape), 0.0),)
    return _make("masked_mean", out if keepdims else np.squeeze(out, axis=axis), (x,), backward_fn)


# ---------------------------------------------------------------- softmax 族

def softmax(x: Tensor, axis: int = -1, additive_mask: Optional[Union[np.ndarray, Tensor]] = None) -> Tensor:
    """带加性掩码的 softmax；被整行掩掉的位置输出全零"""
    x = as_tensor(x)
    axis = _normalize_axis(axis, x.ndim, "softmax")
    if additive_mask is None:
        z = x.data
        zmax = np.max(z, axis=axis, keepdims=True)
        e = np.exp(z - zmax)
        y = e / np.sum(e, axis=axis, keepdims=True)
    else:
        mask = additive_mask.data if isinstance(additive_mask, Tensor) else np.asarray(additive_mask, dtype=np.float64)
        try:
            z = x.data + mask
        except ValueError:
            raise ShapeMismatchError("softmax", x.shape, mask.shape) from None
        if z.shape != x.shape:
            raise ShapeMismatchError("softmax", x.shape, mask.shape)
        kept = np.broadcast_to(mask > MASK_DROP / 2, z.shape)
        zmax = np.max(np.where(kept, z, -np.inf), axis=axis, keepdims=True)
        zmax = np.where(np.isfinite(zmax), zmax, 0.0)
        e = np.where(kept, np.exp(np.where(kept, z - zmax, 0.0)), 0.0)
        s = np.sum(e, axis=axis, keepdims=True)
        y = np.where(s > 0, e / np.where(s > 0, s, 1.0), 0.0)

    def backward_fn(g):
        return (y * (g - np.sum(g * y, axis=axis, keepdims=True)),)
    return _make("softmax", y, (x,), backward_fn)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    axis = _normalize_axis(axis, x.ndim, "log_softmax")
    zmax = np.max(x.data, axis=axis, keepdims=True)
    shifted = x.data - zmax
    lse = np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))
    out = shifted - lse
    probs = np.exp(out)

    def backward_fn(g):
        return (g - probs * np.sum(g, axis=axis, keepdims=True),)
    return _make("log_softmax", out, (x,), backward_fn)


# ---------------------------------------------------------------- 网络层原语

def rms_norm(x: Tensor, weight: Tensor, eps: float = 1e-6) -> Tensor:
    """沿最后一维做 RMS 归一化并乘以逐通道缩放"""
    x, weight = as_tensor(x), as_tensor(weight)
    if weight.shape != (x.shape[-1],):
        raise ShapeMismatchError("rms_norm", x.shape, weight.shape)
    r = 1.0 / np.sqrt(np.mean(x.data * x.data, axis=-1, keepdims=True) + eps)
    xhat = x.data * r

    def backward_fn(g):
        gw = np.sum((g * xhat).reshape(-1, x.shape[-1]), axis=0)
        gxhat = g * weight.data
        gx = r * (gxhat - xhat * np.mean(gxhat * xhat, axis=-1, keepdims=True))
        return gx, gw
    return _make("rms_norm", xhat * weight.data, (x, weight), backward_fn)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """按 id 取行；反向用 scatter-add 累加到词表"""
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise BatchError(f"token id 越界: 取值范围 [{ids.min()}, {ids.max()}]，词表大小 {table.shape[0]}")

    def backward_fn(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)
    return _make("embedding", table.data[ids], (table,), backward_fn)


def gather_positions(x: Tensor, positions: np.ndarray) -> Tensor:
    """x [B, L, D] 按每行的位置索引 positions [B, K] 取出 [B, K, D]"""
    x = as_tensor(x)
    positions = np.asarray(positions, dtype=np.int64)
    if x.ndim != 3 or positions.ndim != 2 or positions.shape[0] != x.shape[0]:
        raise ShapeMismatchError("gather_positions", x.shape, positions.shape)
    rows = np.arange(x.shape[0])[:, None]

    def backward_fn(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, (np.broadcast_to(rows, positions.shape), positions), g)
        return (gx,)
    return _make("gather_positions", x.data[rows, positions], (x,), backward_fn)


def rope(x: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """旋转位置编码（前后半维配对）。x [..., L, dh]，cos/sin [L, dh/2]"""
    x = as_tensor(x)
    half = x.shape[-1] // 2
    if x.shape[-1] % 2 or cos.shape != (x.shape[-2], half) or sin.shape != cos.shape:
        raise ShapeMismatchError("rope", x.shape, cos.shape)
    x1, x2 = x.data[..., :half], x.data[..., half:]
    out = np.concatenate([x1 * cos - x2 * sin, x2 * cos + x1 * sin], axis=-1)

    def backward_fn(g):
        g1, g2 = g[..., :half], g[..., half:]
        return (np.concatenate([g1 * cos + g2 * sin, g2 * cos - g1 * sin], axis=-1),)
    return _make("rope", out, (x,), backward_fn)


def dropout(x: Tensor, p: float, rng: Optional[np.random.Generator], train: bool) -> Tensor:
    """训练模式下以概率 p 置零并把保留元素放大 1/(1-p)；评估模式为恒等"""
    x = as_tensor(x)
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"dropout 概率必须在 [0, 1) 内: {p}")
    if not train or p == 0.0:
        return x
    if rng is None:
        raise ConfigError("训练模式 dropout 需要随机数发生器")
    scale = 1.0 / (1.0 - p)
    keep = rng.random(x.shape) >= p
    return _make("dropout", np.where(keep, x.data * scale, 0.0), (x,),
                 lambda g: (np.where(keep, g * scale, 0.0),))


def dropout_rng(seed: int, site: int, step: int) -> np.random.Generator:
    """以 (seed, site, step) 为键的计数器型发生器，与求值顺序无关"""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, site, step])))


# ---------------------------------------------------------------- 反向传播

def backward(loss: Tensor) -> None:
    """从标量损失逆序回放计算带，把梯度累加到所有需要梯度的叶子张量"""
    if loss.size != 1:
        raise TapeError(f"backward 需要标量损失，实际形状 {loss.shape}")
    if not loss.requires_grad or loss._tape is None:
        raise TapeError("损失张量没有连接到计算带")
    tape = loss._tape
    if tape.consumed:
        raise TapeError("该计算带已经执行过 backward，请重新前向计算")

    grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for record in reversed(tape.records[: loss._node_id + 1]):
        g = grads.pop(id(record.output), None)
        if g is None:
            continue
        for inp, ig in zip(record.inputs, record.backward(g)):
            if ig is None or not inp.requires_grad:
                continue
            if inp._tape is None:
                inp.grad = np.array(ig, dtype=np.float64) if inp.grad is None else inp.grad + ig
            elif id(inp) in grads:
                grads[id(inp)] = grads[id(inp)] + ig
            else:
                grads[id(inp)] = ig
    logger.debug("反向传播完成，回放 %d 条记录", loss._node_id + 1)
    tape.consumed = True
    tape.records.clear()
