"""
任务头、训练目标与训练循环

分类 / 回归 / 排序三类任务共用 编码器 -> 池化 -> MLP 任务头 的结构。
排序任务把 [B, M, L] 的列表输入展平为 [B*M, L] 逐行打分，再还原为 [B, M]。
"""

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import Any, Dict, List, Optional, Sequence

import numpy as np

from ..api.synthetic_provider import Dataset, RankingDataset, SequenceDataset, pair_tokens
from .encoder import Batch, EncoderConfig, PaddingSide, forward, init_params
from .errors import ConfigError, DivergenceError, LabelError, NonFiniteError, ShapeMismatchError
from .metrics import (
    MetricReport,
    accuracy,
    f1_binary,
    matthews_corr,
    mean_squared_error,
    mrr_at_k,
    ndcg_at_k,
    rank_by_scores,
    ranking_support,
    spearman_corr,
)
from .pooling import PoolingSpec, init_pooler_params, pool
from .tensor import (
    Params,
    Tensor,
    as_tensor,
    backward,
    gelu,
    log_softmax,
    matmul,
    no_grad,
    parameter,
    reshape,
    reset_tape,
    tensor_sum,
)

logger = logging.getLogger(__name__)


class HeadKind(Enum):
    CLASSIFICATION = "classification"
    REGRESSION = "regression"
    RANKING = "ranking"


@dataclass
class TaskHead:
    """任务头：两层 MLP（D -> d_hidden -> 输出宽度）"""
    kind: HeadKind = HeadKind.CLASSIFICATION
    n_classes: int = 2
    d_hidden: int = 64

    def __post_init__(self):
        if isinstance(self.kind, str):
            try:
                self.kind = HeadKind(self.kind)
            except ValueError:
                raise ConfigError(f"未知任务类型: {self.kind}") from None
        if self.kind is HeadKind.CLASSIFICATION and self.n_classes < 2:
            raise ConfigError(f"分类任务至少两个类别: {self.n_classes}")
        if self.d_hidden < 1:
            raise ConfigError(f"d_hidden 必须为正: {self.d_hidden}")

    def per_vector(self, arity: int) -> bool:
        """分类且池化向量数等于类别数时，每个池化向量经共享打分器给出一个类别 logit"""
        return self.kind is HeadKind.CLASSIFICATION and arity > 1 and arity == self.n_classes

    def input_width(self, arity: int, d_model: int) -> int:
        return d_model if self.per_vector(arity) else arity * d_model

    def output_width(self, arity: int) -> int:
        if self.kind is not HeadKind.CLASSIFICATION or self.per_vector(arity):
            return 1
        return self.n_classes

    def to_dict(self) -> Dict[str, Any]:
        return {"kind": self.kind.value, "n_classes": self.n_classes, "d_hidden": self.d_hidden}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "TaskHead":
        return cls(**dict(data or {}))


def init_head_params(head: TaskHead, spec: PoolingSpec, d_model: int, seed: int) -> Params:
    rng = np.random.default_rng(seed)
    fan_in = head.input_width(spec.arity, d_model)
    width = head.output_width(spec.arity)
    return {
        "head.w1": parameter(rng.standard_normal((fan_in, head.d_hidden)) / np.sqrt(fan_in)),
        "head.b1": parameter(np.zeros(head.d_hidden)),
        "head.w2": parameter(rng.standard_normal((head.d_hidden, width)) / np.sqrt(head.d_hidden)),
        "head.b2": parameter(np.zeros(width)),
    }


def head_forward(head: TaskHead, params: Params, pooled: Tensor) -> Tensor:
    """[B, A, D] -> 分类 logits [B, C]，回归/排序分数 [B]"""
    batch, arity, d_model = pooled.shape
    x = pooled if head.per_vector(arity) else reshape(pooled, (batch, arity * d_model))
    hidden = gelu(matmul(x, params["head.w1"]) + params["head.b1"])
    out = matmul(hidden, params["head.w2"]) + params["head.b2"]
    if head.per_vector(arity):
        return reshape(out, (batch, arity))
    if head.kind is HeadKind.CLASSIFICATION:
        return out
    return reshape(out, (batch,))


@dataclass
class EncoderModel:
    """编码器 + 池化器 + 任务头，参数合并在同一个字典里"""
    encoder: EncoderConfig
    pooling: PoolingSpec
    head: TaskHead
    params: Params = field(default_factory=dict)

    @classmethod
    def build(cls, encoder: EncoderConfig, pooling: PoolingSpec, head: TaskHead, seed: int) -> "EncoderModel":
        pooling.validate(encoder.d_model)
        params: Params = {}
        params.update(init_params(encoder, seed))
        params.update(init_pooler_params(pooling, encoder.d_model, seed + 1))
        params.update(init_head_params(head, pooling, encoder.d_model, seed + 2))
        return cls(encoder, pooling, head, params)

    @property
    def n_parameters(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def make_batch(self, sequences: Sequence[Sequence[int]]) -> Batch:
        return Batch.from_sequences(sequences, self.encoder.padding_side)

    def predict(self, batch: Batch, train_mode: bool = False, step: int = 0) -> Tensor:
        hidden = forward(self.encoder, self.params, batch, train_mode, step)
        return head_forward(self.head, self.params, pool(self.pooling, self.params, hidden))


@dataclass
class RankingBatch:
    """列表输入 token_ids [B, M, L]、pad_mask [B, M, L] 与相关性标签 [B, M]"""
    token_ids: np.ndarray
    pad_mask: np.ndarray
    labels: np.ndarray
    padding_side: PaddingSide = PaddingSide.RIGHT

    @classmethod
    def from_lists(
        cls,
        queries: Sequence[Sequence[int]],
        docs: Sequence[Sequence[Sequence[int]]],
        labels: np.ndarray,
        padding_side: PaddingSide = PaddingSide.RIGHT,
    ) -> "RankingBatch":
        list_size = len(docs[0])
        if any(len(d) != list_size for d in docs):
            raise ShapeMismatchError("RankingBatch", (len(docs), list_size), tuple(len(d) for d in docs))
        rows = [pair_tokens(q, d) for q, ds in zip(queries, docs) for d in ds]
        flat = Batch.from_sequences(rows, padding_side)
        shape = (len(queries), list_size, flat.shape[1])
        return cls(flat.token_ids.reshape(shape), flat.pad_mask.reshape(shape),
                   np.asarray(labels, dtype=np.float64), padding_side)

    def flatten(self) -> Batch:
        b, m, width = self.token_ids.shape
        pad_mask = self.pad_mask.reshape(b * m, width)
        return Batch(self.token_ids.reshape(b * m, width), pad_mask, pad_mask.sum(axis=1), self.padding_side)

    def validate(self) -> None:
        if self.token_ids.ndim != 3 or self.token_ids.shape != self.pad_mask.shape:
            raise ShapeMismatchError("RankingBatch", self.token_ids.shape, self.pad_mask.shape)
        if self.labels.shape != self.token_ids.shape[:2]:
            raise ShapeMismatchError("RankingBatch", self.token_ids.shape, self.labels.shape)
        if np.any(self.labels < 0):
            raise LabelError("相关性标签必须非负")


def score_list(model: EncoderModel, rb: RankingBatch, train_mode: bool = False, step: int = 0) -> Tensor:
    """展平 [B, M, L] -> [B*M, L] 逐行打分，再还原为 [B, M]"""
    rb.validate()
    b, m, _ = rb.token_ids.shape
    scores = model.predict(rb.flatten(), train_mode, step)
    return reshape(scores, (b, m))


# ---------------------------------------------------------------- 损失函数

def listwise_softmax_loss(y: np.ndarray, yhat: Tensor) -> Tensor:
    """列表 softmax 交叉熵 -sum_j y_j log softmax(yhat)_j，对 B 个列表取平均；标签按原值使用"""
    y = np.asarray(y, dtype=np.float64)
    yhat = as_tensor(yhat)
    if y.shape != yhat.shape or y.ndim != 2:
        raise ShapeMismatchError("listwise_softmax_loss", y.shape, yhat.shape)
    if np.any(y < 0):
        raise LabelError("排序标签必须非负")
    if np.any(y.sum(axis=1) <= 0):
        raise LabelError("存在没有正例的列表")
    per_list = tensor_sum(log_softmax(yhat, axis=1) * y, axis=1)
    return -tensor_sum(per_list) * (1.0 / y.shape[0])


def classification_loss(labels: np.ndarray, logits: Tensor) -> Tensor:
    """softmax 交叉熵，对批取平均"""
    labels = np.asarray(labels, dtype=np.int64)
    logits = as_tensor(logits)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeMismatchError("classification_loss", labels.shape, logits.shape)
    if labels.min() < 0 or labels.max() >= logits.shape[1]:
        raise LabelError(f"类别标签超出 [0, {logits.shape[1]})")
    one_hot = np.eye(logits.shape[1])[labels]
    return -tensor_sum(log_softmax(logits, axis=1) * one_hot) * (1.0 / labels.shape[0])


def regression_loss(targets: np.ndarray, preds: Tensor) -> Tensor:
    """均方误差"""
    targets = np.asarray(targets, dtype=np.float64)
    preds = as_tensor(preds)
    if targets.shape != preds.shape or targets.ndim != 1:
        raise ShapeMismatchError("regression_loss", targets.shape, preds.shape)
    diff = preds - targets
    return tensor_sum(diff * diff) * (1.0 / targets.shape[0])


# ---------------------------------------------------------------- 优化与训练

@dataclass
class TrainConfig:
    """训练超参数（桌面规模默认值）"""
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 16
    steps: int = 500
    seed: int = 0
    eval_every: int = 0
    eval_batch_size: int = 64

    def __post_init__(self):
        if self.lr < 0 or self.batch_size < 1 or self.steps < 0:
            raise ConfigError(f"训练配置非法: lr={self.lr}, batch_size={self.batch_size}, steps={self.steps}")

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "TrainConfig":
        data = dict(data or {})
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"TrainConfig 不认识的字段: {sorted(unknown)}")
        return cls(**data)


class Adam:
    """Adam 优化器，直接更新参数张量的 data"""

    def __init__(self, params: Params, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    def step(self) -> None:
        self.t += 1
        bias1 = 1.0 - self.beta1 ** self.t
        bias2 = 1.0 - self.beta2 ** self.t
        for name, p in self.params.items():
            if p.grad is None:
                continue
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * p.grad
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * p.grad * p.grad
            update = (self.m[name] / bias1) / (np.sqrt(self.v[name] / bias2) + self.eps)
            p.data -= self.lr * update

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()


@dataclass
class TrainResult:
    params: Params
    losses: List[float]
    eval_trace: List[Dict[str, Any]] = field(default_factory=list)


def batch_loss(model: EncoderModel, dataset: Dataset, indices: Sequence[int],
               train_mode: bool = True, step: int = 0) -> Tensor:
    """按任务类型计算一个小批量的损失"""
    if model.head.kind is HeadKind.RANKING:
        if not isinstance(dataset, RankingDataset):
            raise ConfigError("排序任务需要 RankingDataset")
        part = dataset.subset(indices)
        rb = RankingBatch.from_lists(part.queries, part.docs, part.labels, model.encoder.padding_side)
        return listwise_softmax_loss(rb.labels, score_list(model, rb, train_mode, step))
    if not isinstance(dataset, SequenceDataset) or dataset.kind != model.head.kind.value:
        raise ConfigError(f"任务类型 {model.head.kind.value} 与数据集不匹配")
    batch = model.make_batch([dataset.sequences[i] for i in indices])
    outputs = model.predict(batch, train_mode, step)
    labels = dataset.labels[np.asarray(indices, dtype=np.int64)]
    if model.head.kind is HeadKind.CLASSIFICATION:
        return classification_loss(labels, outputs)
    return regression_loss(labels, outputs)


def train(
    model: EncoderModel,
    dataset: Dataset,
    config: TrainConfig,
    eval_dataset: Optional[Dataset] = None,
    n_threads: int = 1,
) -> TrainResult:
    """
    Adam 训练循环；给定种子时完全确定

    每个 epoch 用 config.seed 派生的发生器重新打乱样本顺序。
    config.eval_every > 0 且提供 eval_dataset 时，按间隔记录评估指标（含第 0 步）。
    """
    optimizer = Adam(model.params, config.lr, config.beta1, config.beta2, config.eps)
    rng = np.random.default_rng(config.seed)
    order = rng.permutation(len(dataset))
    cursor = 0
    losses: List[float] = []
    trace: List[Dict[str, Any]] = []

    def record_eval(step: int) -> None:
        for report in evaluate(model, eval_dataset, config.eval_batch_size, n_threads):
            trace.append({"step": step, **report.to_dict()})

    if config.eval_every > 0 and eval_dataset is not None:
        record_eval(0)
    logger.info("开始训练: %d 步，batch=%d，lr=%g，参数量 %d", config.steps, config.batch_size, config.lr,
                model.n_parameters)
    for step in range(config.steps):
        if cursor + config.batch_size > len(order):
            order = rng.permutation(len(dataset))
            cursor = 0
        indices = order[cursor: cursor + config.batch_size]
        cursor += config.batch_size

        optimizer.zero_grad()
        reset_tape()
        try:
            loss = batch_loss(model, dataset, indices, train_mode=True, step=step)
        except NonFiniteError:
            # 参数已发散，前向计算先于损失检查报错
            losses.append(float("nan"))
            raise DivergenceError(step, losses[-5:]) from None
        value = loss.item()
        losses.append(value)
        if not np.isfinite(value):
            raise DivergenceError(step, losses[-5:])
        backward(loss)
        optimizer.step()
        logger.debug("step %d loss %.6f", step, value)

        if config.eval_every > 0 and eval_dataset is not None and (step + 1) % config.eval_every == 0:
            record_eval(step + 1)
    logger.info("训练完成，最终损失 %.6f", losses[-1] if losses else float("nan"))
    return TrainResult(model.params, losses, trace)


# ---------------------------------------------------------------- 评估

def resolve_threads(n_threads: Optional[int] = None) -> int:
    """线程数：显式参数优先，其次环境变量 DEC2ENC_THREADS，默认 1"""
    if n_threads is not None:
        return max(1, int(n_threads))
    try:
        return max(1, int(os.getenv("DEC2ENC_THREADS", "1")))
    except ValueError:
        logger.warning("DEC2ENC_THREADS 不是整数，按 1 处理")
        return 1


def predict_scores(model: EncoderModel, dataset: Dataset, batch_size: int = 64,
                   n_threads: Optional[int] = None) -> np.ndarray:
    """评估模式批量预测；多线程分片后按原顺序合并"""
    starts = list(range(0, len(dataset), batch_size))

    def run(start: int) -> np.ndarray:
        indices = np.arange(start, min(start + batch_size, len(dataset)))
        with no_grad():
            if isinstance(dataset, RankingDataset):
                part = dataset.subset(indices)
                rb = RankingBatch.from_lists(part.queries, part.docs, part.labels, model.encoder.padding_side)
                return score_list(model, rb).data
            batch = model.make_batch([dataset.sequences[i] for i in indices])
            return model.predict(batch).data

    workers = resolve_threads(n_threads)
    if workers == 1:
        chunks = [run(s) for s in starts]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool_executor:
            chunks = list(pool_executor.map(run, starts))
    return np.concatenate(chunks, axis=0)


def evaluate(model: EncoderModel, dataset: Dataset, batch_size: int = 64,
             n_threads: Optional[int] = None) -> List[MetricReport]:
    """按任务类型计算评估指标"""
    outputs = predict_scores(model, dataset, batch_size, n_threads)
    n = len(dataset)
    if model.head.kind is HeadKind.CLASSIFICATION:
        preds = np.argmax(outputs, axis=1)
        reports = [MetricReport("accuracy", accuracy(preds, dataset.labels), n)]
        if model.head.n_classes == 2:
            reports.append(MetricReport("f1", f1_binary(preds, dataset.labels), n))
            reports.append(MetricReport("matthews", matthews_corr(preds, dataset.labels), n))
        return reports
    if model.head.kind is HeadKind.REGRESSION:
        return [
            MetricReport("spearman", spearman_corr(outputs, dataset.labels), n),
            MetricReport("mse", mean_squared_error(outputs, dataset.labels), n),
        ]
    ranked = [rank_by_scores(scores, labels) for scores, labels in zip(outputs, dataset.labels)]
    return [
        MetricReport("mrr@10", mrr_at_k(ranked, 10), n),
        MetricReport("ndcg@10", ndcg_at_k(ranked, 10), ranking_support(ranked)),
    ]
