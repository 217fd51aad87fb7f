"""
评估指标：分类 (accuracy / F1 / Matthews)、回归 (Spearman / MSE)、排序 (MRR@k / NDCG@k)
"""

from dataclasses import dataclass
from typing import Dict, List, Sequence

import numpy as np
import pandas as pd

# 取值范围 [-1, 1] 的指标，其余有界指标在 [0, 1]
SIGNED_METRICS = {"matthews", "spearman"}
UNBOUNDED_METRICS = {"mse"}


@dataclass
class MetricReport:
    """单个指标的评估结果"""
    name: str
    value: float
    support: int

    def __post_init__(self):
        low = -1.0 if self.name in SIGNED_METRICS else 0.0
        high = np.inf if self.name.split("@")[0] in UNBOUNDED_METRICS else 1.0
        if not low - 1e-12 <= self.value <= high + 1e-12:
            raise ValueError(f"指标 {self.name}={self.value} 超出范围 [{low}, {high}]")

    def to_dict(self) -> Dict[str, object]:
        return {"metric": self.name, "value": float(self.value), "support": int(self.support)}


def _confusion(preds: Sequence[int], labels: Sequence[int]) -> Dict[str, int]:
    p = np.asarray(preds).astype(int)
    y = np.asarray(labels).astype(int)
    if p.shape != y.shape:
        raise ValueError(f"预测与标签长度不一致: {p.shape} vs {y.shape}")
    if not (set(np.unique(p)) | set(np.unique(y))) <= {0, 1}:
        raise ValueError("F1 / Matthews 只支持二分类标签 {0, 1}")
    return {
        "tp": int(np.sum((p == 1) & (y == 1))),
        "tn": int(np.sum((p == 0) & (y == 0))),
        "fp": int(np.sum((p == 1) & (y == 0))),
        "fn": int(np.sum((p == 0) & (y == 1))),
    }


def accuracy(preds: Sequence[int], labels: Sequence[int]) -> float:
    p, y = np.asarray(preds), np.asarray(labels)
    if p.shape != y.shape:
        raise ValueError(f"预测与标签长度不一致: {p.shape} vs {y.shape}")
    if p.size == 0:
        return 0.0
    return float(np.mean(p == y))


def f1_binary(preds: Sequence[int], labels: Sequence[int]) -> float:
    """2PR/(P+R)；P+R=0 时返回 0"""
    c = _confusion(preds, labels)
    precision = c["tp"] / (c["tp"] + c["fp"]) if c["tp"] + c["fp"] else 0.0
    recall = c["tp"] / (c["tp"] + c["fn"]) if c["tp"] + c["fn"] else 0.0
    if precision + recall == 0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def matthews_corr(preds: Sequence[int], labels: Sequence[int]) -> float:
    """Matthews 相关系数；分母任一因子为 0 时返回 0"""
    c = _confusion(preds, labels)
    tp, tn, fp, fn = c["tp"], c["tn"], c["fp"], c["fn"]
    factors = [tp + fp, tp + fn, tn + fp, tn + fn]
    if any(f == 0 for f in factors):
        return 0.0
    return float((tp * tn - fp * fn) / np.sqrt(float(np.prod(np.array(factors, dtype=np.float64)))))


def spearman_corr(x: Sequence[float], y: Sequence[float]) -> float:
    """平均秩（并列取平均）后的 Pearson 相关；任一侧为常数时返回 0"""
    rx = pd.Series(np.asarray(x, dtype=np.float64)).rank(method="average").to_numpy()
    ry = pd.Series(np.asarray(y, dtype=np.float64)).rank(method="average").to_numpy()
    if rx.shape != ry.shape:
        raise ValueError(f"两个序列长度不一致: {rx.shape} vs {ry.shape}")
    dx, dy = rx - rx.mean(), ry - ry.mean()
    denom = np.sqrt(np.sum(dx * dx) * np.sum(dy * dy))
    if denom == 0:
        return 0.0
    return float(np.clip(np.sum(dx * dy) / denom, -1.0, 1.0))


def mean_squared_error(preds: Sequence[float], targets: Sequence[float]) -> float:
    p, t = np.asarray(preds, dtype=np.float64), np.asarray(targets, dtype=np.float64)
    return float(np.mean((p - t) ** 2)) if p.size else 0.0


def rank_by_scores(scores: Sequence[float], labels: Sequence[float]) -> np.ndarray:
    """按分数降序排列标签；同分保持原始下标顺序"""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape:
        raise ValueError(f"分数与标签长度不一致: {scores.shape} vs {labels.shape}")
    order = np.argsort(-scores, kind="stable")
    return labels[order]


def mrr_at_k(ranked_labels: Sequence[Sequence[float]], k: int = 10) -> float:
    """每个查询取前 k 个中第一个相关文档的倒数排名，否则为 0；对查询取平均"""
    if k < 1:
        raise ValueError(f"k 必须 >= 1: {k}")
    reciprocal: List[float] = []
    for labels in ranked_labels:
        hits = np.flatnonzero(np.asarray(labels, dtype=np.float64)[:k] > 0)
        reciprocal.append(1.0 / (hits[0] + 1) if hits.size else 0.0)
    return float(np.mean(reciprocal)) if reciprocal else 0.0


def dcg_at_k(labels: Sequence[float], k: int) -> float:
    rel = np.asarray(labels, dtype=np.float64)[:k]
    discounts = np.log2(np.arange(2, rel.size + 2))
    return float(np.sum((2.0 ** rel - 1.0) / discounts))


def ndcg_at_k(ranked_labels: Sequence[Sequence[float]], k: int = 10) -> float:
    """DCG@k / 理想排序 DCG@k；没有正例的查询跳过"""
    if k < 1:
        raise ValueError(f"k 必须 >= 1: {k}")
    values: List[float] = []
    for labels in ranked_labels:
        labels = np.asarray(labels, dtype=np.float64)
        if not np.any(labels > 0):
            continue
        ideal = dcg_at_k(np.sort(labels)[::-1], k)
        values.append(dcg_at_k(labels, k) / ideal)
    return float(np.mean(values)) if values else 0.0


def ranking_support(ranked_labels: Sequence[Sequence[float]]) -> int:
    """NDCG 实际参与计算的查询数"""
    return int(sum(1 for labels in ranked_labels if np.any(np.asarray(labels) > 0)))
