"""
中心有限差分梯度校验
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, Optional

import numpy as np

from .tensor import Tensor, backward, no_grad, reset_tape

logger = logging.getLogger(__name__)


@dataclass
class GradCheckResult:
    """一次梯度校验的结果"""
    name: str
    rel_errors: Dict[str, float] = field(default_factory=dict)
    tolerance: float = 1e-4

    @property
    def max_rel_error(self) -> float:
        return max(self.rel_errors.values()) if self.rel_errors else 0.0

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """基于范数的相对误差 ||a-n|| / max(||a||, ||n||)"""
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-10)
    return float(np.linalg.norm(analytic - numeric) / scale)


def check_gradients(
    loss_fn: Callable[[], Tensor],
    inputs: Dict[str, Tensor],
    name: str = "gradcheck",
    eps: float = 1e-5,
    tolerance: float = 1e-4,
    max_entries: Optional[int] = None,
    seed: int = 0,
) -> GradCheckResult:
    """
    比较解析梯度与中心有限差分

    Args:
        loss_fn: 无参闭包，读取 inputs 的当前数值并返回标量损失
        inputs: 待校验的叶子张量（requires_grad=True）
        max_entries: 每个张量最多抽查的坐标数，None 表示全部
    """
    for t in inputs.values():
        t.zero_grad()
    reset_tape()
    loss = loss_fn()
    backward(loss)
    analytic = {k: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data)) for k, t in inputs.items()}

    rng = np.random.default_rng(seed)
    result = GradCheckResult(name=name, tolerance=tolerance)
    with no_grad():
        for key, t in inputs.items():
            flat = t.data.reshape(-1)
            if max_entries is not None and flat.size > max_entries:
                coords = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
            else:
                coords = np.arange(flat.size)
            numeric = np.empty(coords.size)
            for j, idx in enumerate(coords):
                original = flat[idx]
                flat[idx] = original + eps
                plus = loss_fn().item()
                flat[idx] = original - eps
                minus = loss_fn().item()
                flat[idx] = original
                numeric[j] = (plus - minus) / (2.0 * eps)
            result.rel_errors[key] = relative_error(analytic[key].reshape(-1)[coords], numeric)
    logger.debug("梯度校验 %s: 最大相对误差 %.3e", name, result.max_rel_error)
    return result
