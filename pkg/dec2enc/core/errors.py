"""
异常定义
所有模块抛出的领域异常都继承自 Dec2EncError，CLI 据此统一映射退出码
"""

from typing import Sequence


class Dec2EncError(Exception):
    """工具包异常基类"""


class ShapeMismatchError(Dec2EncError, ValueError):
    """张量形状不匹配"""

    def __init__(self, op: str, *shapes: Sequence[int]):
        self.op = op
        self.shapes = [tuple(s) for s in shapes]
        described = " 与 ".join(str(s) for s in self.shapes)
        super().__init__(f"{op}: 形状不匹配 {described}")


class AxisError(Dec2EncError, IndexError):
    """归约/softmax 轴越界"""


class TapeError(Dec2EncError, RuntimeError):
    """计算带使用错误：非标量损失、脱离计算带、重复反向传播"""


class ConfigError(Dec2EncError, ValueError):
    """配置非法"""


class BatchError(Dec2EncError, ValueError):
    """批数据违反不变量"""


class LabelError(Dec2EncError, ValueError):
    """标签非法（负标签、全零排序列表等）"""


class NonFiniteError(Dec2EncError, FloatingPointError):
    """激活值出现 NaN/Inf"""


class DivergenceError(Dec2EncError, RuntimeError):
    """训练发散（损失为 NaN）"""

    def __init__(self, step: int, recent_losses: Sequence[float]):
        self.step = step
        self.recent_losses = list(recent_losses)
        tail = ", ".join(f"{x:.6g}" for x in self.recent_losses)
        super().__init__(f"训练在第 {step} 步发散，最近损失: [{tail}]")


class AblationRunError(Dec2EncError, RuntimeError):
    """消融网格中某个单元运行失败"""

    def __init__(self, resolved_config: str, cause: BaseException):
        self.resolved_config = resolved_config
        self.cause = cause
        super().__init__(f"消融运行失败: {cause}\n配置: {resolved_config}")
