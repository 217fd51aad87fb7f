"""
合成任务数据提供器

三个桌面规模任务：cue-recall（分类）、count-regression（回归）、overlap-ranking（排序）。
训练/评估集按样本内容哈希划分，同一内容只会出现在一个划分中。
"""

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from ..core.errors import ConfigError

logger = logging.getLogger(__name__)

PAD_ID = 0
CUE_ID = 1
SEP_ID = 2
MARKER_ID = 3
FIRST_CONTENT_ID = 4

# 内容哈希落在该桶的样本进入评估集（约 20%）
EVAL_BUCKETS = 5


class TaskName(Enum):
    CUE_RECALL = "cue-recall"
    COUNT_REGRESSION = "count-regression"
    OVERLAP_RANKING = "overlap-ranking"


@dataclass
class SyntheticTaskSpec:
    """合成任务参数"""
    name: TaskName = TaskName.CUE_RECALL
    seq_len: int = 24
    min_len: int = 12
    vocab: int = 260
    n_train: int = 2000
    n_eval: int = 400
    n_classes: int = 4
    # 分类：标签随机替换的概率；回归：目标高斯扰动标准差；排序：正例丢失一个查询词的概率
    noise: float = 0.0
    list_size: int = 8
    query_len: int = 3
    doc_len: int = 8
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.name, str):
            try:
                self.name = TaskName(self.name)
            except ValueError:
                raise ConfigError(f"未知合成任务: {self.name}") from None
        self.validate()

    @property
    def n_content(self) -> int:
        return self.vocab - FIRST_CONTENT_ID

    @property
    def row_len(self) -> int:
        """单条输入的最大长度；排序任务为 query + SEP + doc"""
        if self.name is TaskName.OVERLAP_RANKING:
            return self.query_len + 1 + self.doc_len
        return self.seq_len

    def validate(self) -> None:
        if self.n_content < 2:
            raise ConfigError(f"词表 {self.vocab} 太小，没有足够的内容 token")
        if not 1 <= self.min_len <= self.seq_len:
            raise ConfigError(f"需要 1 <= min_len <= seq_len，实际 {self.min_len}, {self.seq_len}")
        if self.n_train < 1 or self.n_eval < 1:
            raise ConfigError("n_train 与 n_eval 必须为正")
        if not 0.0 <= self.noise <= 1.0:
            raise ConfigError(f"noise 必须在 [0, 1] 内: {self.noise}")
        if self.name is TaskName.CUE_RECALL:
            if self.n_classes < 2 or self.n_classes > self.n_content:
                raise ConfigError(f"n_classes={self.n_classes} 非法")
            if self.min_len < 2 * self.n_classes + 2:
                raise ConfigError(f"cue-recall 需要 min_len >= 2*n_classes+2 = {2 * self.n_classes + 2}")
        if self.name is TaskName.OVERLAP_RANKING:
            if self.list_size < 2:
                raise ConfigError("list_size 至少为 2")
            if not 1 <= self.query_len <= self.doc_len:
                raise ConfigError("需要 1 <= query_len <= doc_len")
            if self.n_content < self.query_len + self.doc_len:
                raise ConfigError("词表不足以生成不重叠的填充词")

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["name"] = self.name.value
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "SyntheticTaskSpec":
        data = dict(data or {})
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"SyntheticTaskSpec 不认识的字段: {sorted(unknown)}")
        return cls(**data)


@dataclass
class SequenceDataset:
    """分类/回归数据集"""
    sequences: List[List[int]]
    labels: np.ndarray
    kind: str = "classification"
    n_classes: int = 0

    def __len__(self) -> int:
        return len(self.sequences)

    def subset(self, indices: Sequence[int]) -> "SequenceDataset":
        return SequenceDataset([self.sequences[i] for i in indices], self.labels[np.asarray(indices, dtype=np.int64)],
                               self.kind, self.n_classes)


@dataclass
class RankingDataset:
    """排序数据集：每条为一个查询及其 M 个候选文档"""
    queries: List[List[int]]
    docs: List[List[List[int]]]
    labels: np.ndarray
    kind: str = "ranking"

    def __len__(self) -> int:
        return len(self.queries)

    @property
    def list_size(self) -> int:
        return int(self.labels.shape[1])

    def subset(self, indices: Sequence[int]) -> "RankingDataset":
        return RankingDataset([self.queries[i] for i in indices], [self.docs[i] for i in indices],
                              self.labels[np.asarray(indices, dtype=np.int64)])


Dataset = Union[SequenceDataset, RankingDataset]


@dataclass
class DatasetSplits:
    train: Dataset
    eval: Dataset
    spec: Optional[SyntheticTaskSpec] = None
    meta: Dict[str, Any] = field(default_factory=dict)


def pair_tokens(query: Sequence[int], doc: Sequence[int]) -> List[int]:
    """排序输入行：query + [SEP] + doc"""
    return [int(t) for t in query] + [SEP_ID] + [int(t) for t in doc]


def token_class(token: int, n_classes: int) -> int:
    return (int(token) - FIRST_CONTENT_ID) % n_classes


def _content_key(payload: Any) -> str:
    return hashlib.sha256(json.dumps(payload, separators=(",", ":")).encode("utf-8")).hexdigest()


def _is_eval(key: str) -> bool:
    return int(key[:8], 16) % EVAL_BUCKETS == 0


def _fill_splits(spec: SyntheticTaskSpec, sample: Callable[[], Tuple[Any, Any]]) -> Tuple[List, List]:
    """反复采样直到两个划分都填满；按内容哈希分桶并去重"""
    train, evaluation = [], []
    seen = set()
    attempts = 0
    limit = 50 * (spec.n_train + spec.n_eval)
    while len(train) < spec.n_train or len(evaluation) < spec.n_eval:
        attempts += 1
        if attempts > limit:
            raise ConfigError(f"{spec.name.value}: 采样 {limit} 次仍无法填满训练/评估集，请增大词表或序列长度")
        content, label = sample()
        key = _content_key(content)
        if key in seen:
            continue
        seen.add(key)
        target, quota = (evaluation, spec.n_eval) if _is_eval(key) else (train, spec.n_train)
        if len(target) < quota:
            target.append((content, label))
    return train, evaluation


def gen_cue_recall(spec: SyntheticTaskSpec, seed: Optional[int] = None) -> DatasetSplits:
    """
    标签 = 唯一 CUE 之后那个 token 的类别

    CUE 位置在 [L/2, L-2] 内均匀分布。每个类别都被强制放置两个 token：答案类别是
    CUE 后的答案和它在别处的一个副本，其余类别是两个干扰 token，因此只看词频的分类器接近随机。
    """
    rng = np.random.default_rng(spec.seed if seed is None else seed)
    n_classes = spec.n_classes
    by_class = [np.arange(FIRST_CONTENT_ID + c, spec.vocab, n_classes) for c in range(n_classes)]

    def sample():
        length = int(rng.integers(spec.min_len, spec.seq_len + 1))
        seq = rng.integers(FIRST_CONTENT_ID, spec.vocab, size=length)
        cue = int(rng.integers(length // 2, length - 1))
        answer = int(rng.integers(FIRST_CONTENT_ID, spec.vocab))
        label = token_class(answer, n_classes)
        free = np.array([i for i in range(length) if i not in (cue, cue + 1)])
        slots = rng.choice(free, size=2 * n_classes - 1, replace=False)
        decoys = [answer]
        for c in range(n_classes):
            decoys.extend(int(rng.choice(by_class[c])) for _ in range(2 if c != label else 0))
        seq[slots] = decoys
        seq[cue] = CUE_ID
        seq[cue + 1] = answer
        if spec.noise > 0 and rng.random() < spec.noise:
            label = int(rng.integers(n_classes))
        return [int(t) for t in seq], label

    train, evaluation = _fill_splits(spec, sample)
    make = lambda rows: SequenceDataset([r[0] for r in rows], np.array([r[1] for r in rows], dtype=np.int64),
                                        "classification", n_classes)
    return DatasetSplits(make(train), make(evaluation), spec)


def gen_count_regression(spec: SyntheticTaskSpec, seed: Optional[int] = None) -> DatasetSplits:
    """目标 = MARKER 出现次数 / 序列长度"""
    rng = np.random.default_rng(spec.seed if seed is None else seed)

    def sample():
        length = int(rng.integers(spec.min_len, spec.seq_len + 1))
        seq = rng.integers(FIRST_CONTENT_ID, spec.vocab, size=length)
        n_markers = int(rng.integers(0, length + 1))
        seq[rng.choice(length, size=n_markers, replace=False)] = MARKER_ID
        target = n_markers / length
        if spec.noise > 0:
            target = float(np.clip(target + spec.noise * rng.standard_normal(), 0.0, 1.0))
        return [int(t) for t in seq], target

    train, evaluation = _fill_splits(spec, sample)
    make = lambda rows: SequenceDataset([r[0] for r in rows], np.array([r[1] for r in rows], dtype=np.float64),
                                        "regression")
    return DatasetSplits(make(train), make(evaluation), spec)


def gen_overlap_ranking(spec: SyntheticTaskSpec, seed: Optional[int] = None) -> DatasetSplits:
    """
    每个查询一个正例（包含全部查询词）和 list_size-1 个负例（部分或不包含查询词），二值标签
    """
    rng = np.random.default_rng(spec.seed if seed is None else seed)
    content = np.arange(FIRST_CONTENT_ID, spec.vocab)

    def make_doc(query: np.ndarray, overlap: int) -> List[int]:
        fillers = rng.choice(np.setdiff1d(content, query), size=spec.doc_len - overlap, replace=False)
        tokens = np.concatenate([rng.choice(query, size=overlap, replace=False), fillers])
        return [int(t) for t in rng.permutation(tokens)]

    def sample():
        query = rng.choice(content, size=spec.query_len, replace=False)
        overlap = spec.query_len
        if spec.noise > 0 and rng.random() < spec.noise:
            overlap -= 1
        docs = [make_doc(query, overlap)]
        docs += [make_doc(query, int(rng.integers(0, spec.query_len))) for _ in range(spec.list_size - 1)]
        labels = [1.0] + [0.0] * (spec.list_size - 1)
        order = rng.permutation(spec.list_size)
        payload = {"query": [int(t) for t in query], "docs": [docs[i] for i in order]}
        return payload, [labels[i] for i in order]

    train, evaluation = _fill_splits(spec, sample)
    make = lambda rows: RankingDataset([r[0]["query"] for r in rows], [r[0]["docs"] for r in rows],
                                       np.array([r[1] for r in rows], dtype=np.float64))
    return DatasetSplits(make(train), make(evaluation), spec)


GENERATORS: Dict[TaskName, Callable[[SyntheticTaskSpec, Optional[int]], DatasetSplits]] = {
    TaskName.CUE_RECALL: gen_cue_recall,
    TaskName.COUNT_REGRESSION: gen_count_regression,
    TaskName.OVERLAP_RANKING: gen_overlap_ranking,
}


def generate(spec: SyntheticTaskSpec, seed: Optional[int] = None) -> DatasetSplits:
    splits = GENERATORS[spec.name](spec, seed)
    logger.info("生成任务 %s: 训练 %d 条，评估 %d 条", spec.name.value, len(splits.train), len(splits.eval))
    return splits


def overlap_heuristic_scores(query: Sequence[int], docs: Sequence[Sequence[int]]) -> np.ndarray:
    """按文档包含的查询词个数打分的启发式排序器"""
    q = set(int(t) for t in query)
    return np.array([len(q & set(int(t) for t in doc)) for doc in docs], dtype=np.float64)


# ---------------------------------------------------------------- JSONL 读写

def dataset_to_frame(dataset: Dataset) -> pd.DataFrame:
    if isinstance(dataset, RankingDataset):
        return pd.DataFrame({
            "query": dataset.queries,
            "docs": dataset.docs,
            "labels": [[float(x) for x in row] for row in dataset.labels],
        })
    labels = [int(x) for x in dataset.labels] if dataset.kind == "classification" else [float(x) for x in dataset.labels]
    return pd.DataFrame({"tokens": dataset.sequences, "label": labels})


def write_jsonl(dataset: Dataset, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    dataset_to_frame(dataset).to_json(path, orient="records", lines=True, force_ascii=False, double_precision=15)
    logger.info("数据集已写入: %s (%d 条)", path, len(dataset))
    return path


def read_jsonl(path: Union[str, Path], kind: str, n_classes: int = 0) -> Dataset:
    """读取 JSONL 数据集；kind 取 classification / regression / ranking"""
    frame = pd.read_json(Path(path), orient="records", lines=True)
    if kind == "ranking":
        missing = {"query", "docs", "labels"} - set(frame.columns)
        if missing:
            raise ConfigError(f"排序数据集缺少字段: {sorted(missing)}")
        return RankingDataset(
            [[int(t) for t in q] for q in frame["query"]],
            [[[int(t) for t in d] for d in docs] for docs in frame["docs"]],
            np.array([list(row) for row in frame["labels"]], dtype=np.float64),
        )
    missing = {"tokens", "label"} - set(frame.columns)
    if missing:
        raise ConfigError(f"数据集缺少字段: {sorted(missing)}")
    dtype = np.int64 if kind == "classification" else np.float64
    labels = frame["label"].to_numpy(dtype=dtype)
    if kind == "classification" and not n_classes:
        n_classes = int(labels.max()) + 1
    return SequenceDataset([[int(t) for t in row] for row in frame["tokens"]], labels, kind, n_classes)
