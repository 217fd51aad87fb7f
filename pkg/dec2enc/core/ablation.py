"""
实验配置与消融网格

每个网格只改变一个轴；每个 (取值, 重复) 单元使用由基础种子派生的新初始化，
训练后在评估集上计算指标，按 (取值顺序, 重复) 有序写入 CSV。
"""

import copy
import hashlib
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import yaml

from ..api.synthetic_provider import DatasetSplits, SyntheticTaskSpec, TaskName, generate
from ..utils.report_formatter import build_ablation_frame, write_csv
from .encoder import EncoderConfig, PaddingSide, parse_mask_mode
from .errors import AblationRunError, ConfigError
from .metrics import MetricReport
from .pooling import PoolingKind, PoolingSpec
from .tasks import EncoderModel, HeadKind, TaskHead, TrainConfig, TrainResult, evaluate, resolve_threads, train

logger = logging.getLogger(__name__)

PROJECT_ROOT = Path(__file__).parent.parent.parent
DEFAULT_CONFIG_PATH = PROJECT_ROOT / "config" / "experiment.yaml"

TASK_HEADS = {
    TaskName.CUE_RECALL: HeadKind.CLASSIFICATION,
    TaskName.COUNT_REGRESSION: HeadKind.REGRESSION,
    TaskName.OVERLAP_RANKING: HeadKind.RANKING,
}


class AblationAxis(Enum):
    POOLING = "pooling"
    MASK_MODE = "mask_mode"
    DROPOUT = "dropout"
    PADDING_SIDE = "padding_side"
    POOLER_CAPACITY = "pooler_capacity"


DEFAULT_GRIDS: Dict[AblationAxis, List[Any]] = {
    AblationAxis.POOLING: ["first_k:1", "last_k:1", "mean", "attention_q:1:1", "attention_kv:1:1"],
    AblationAxis.MASK_MODE: ["causal", "bidirectional"],
    AblationAxis.DROPOUT: [0.0, 0.05, 0.10, 0.15],
    AblationAxis.PADDING_SIDE: ["left", "right"],
    AblationAxis.POOLER_CAPACITY: ["1x1", "2x1", "1x4", "2x4"],
}


def desk_cue_recall() -> SyntheticTaskSpec:
    """
    方向性消融的默认任务

    每个类别只有两个 token，几千条样本即可学会 token 到类别的映射；行长 32-48，
    causal 掩码下只有 CUE 之后的少数位置能看到答案，Mean 池化时信号被稀释。
    """
    return SyntheticTaskSpec(TaskName.CUE_RECALL, seq_len=48, min_len=32, vocab=12, n_train=4000, n_eval=400,
                             n_classes=4)


def _default_head() -> TaskHead:
    return TaskHead(HeadKind.CLASSIFICATION, n_classes=desk_cue_recall().n_classes)


@dataclass
class ExperimentConfig:
    """一次实验（或消融基线）的完整配置"""
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    pooling: PoolingSpec = field(default_factory=PoolingSpec)
    head: TaskHead = field(default_factory=_default_head)
    train: TrainConfig = field(default_factory=TrainConfig)
    task: SyntheticTaskSpec = field(default_factory=desk_cue_recall)
    repeats: int = 3
    output_csv: str = "reports/ablation.csv"
    run_id: str = "dec2enc"
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.repeats < 1:
            raise ConfigError(f"repeats 必须 >= 1: {self.repeats}")
        expected = TASK_HEADS[self.task.name]
        if self.head.kind is not expected:
            raise ConfigError(f"任务 {self.task.name.value} 需要 {expected.value} 任务头，实际 {self.head.kind.value}")
        if expected is HeadKind.CLASSIFICATION and self.head.n_classes != self.task.n_classes:
            raise ConfigError(f"任务头类别数 {self.head.n_classes} 与任务类别数 {self.task.n_classes} 不一致")
        if self.task.vocab > self.encoder.vocab_size:
            raise ConfigError(f"任务词表 {self.task.vocab} 大于编码器词表 {self.encoder.vocab_size}")
        if self.task.row_len > self.encoder.max_len:
            raise ConfigError(f"任务序列长度 {self.task.row_len} 超过 max_len={self.encoder.max_len}")
        self.pooling.validate(self.encoder.d_model)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "run_id": self.run_id,
            "seed": self.seed,
            "repeats": self.repeats,
            "output_csv": self.output_csv,
            "encoder": self.encoder.to_dict(),
            "pooling": self.pooling.to_dict(),
            "head": self.head.to_dict(),
            "train": self.train.to_dict(),
            "task": self.task.to_dict(),
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ExperimentConfig":
        data = dict(data or {})
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"ExperimentConfig 不认识的字段: {sorted(unknown)}")
        task = SyntheticTaskSpec.from_dict(data["task"]) if data.get("task") else desk_cue_recall()
        head_data = dict(data.get("head") or {})
        head_data.setdefault("kind", TASK_HEADS[task.name].value)
        if head_data["kind"] == HeadKind.CLASSIFICATION.value:
            head_data.setdefault("n_classes", task.n_classes)
        return cls(
            encoder=EncoderConfig.from_dict(data.get("encoder", {})),
            pooling=PoolingSpec.from_dict(data.get("pooling", "mean")),
            head=TaskHead.from_dict(head_data),
            train=TrainConfig.from_dict(data.get("train", {})),
            task=task,
            repeats=int(data.get("repeats", 3)),
            output_csv=str(data.get("output_csv", "reports/ablation.csv")),
            run_id=str(data.get("run_id", "dec2enc")),
            seed=int(data.get("seed", 0)),
        )

    def copy(self) -> "ExperimentConfig":
        return copy.deepcopy(self)

    def with_seed(self, seed: int) -> "ExperimentConfig":
        """派生一个使用新种子的配置：初始化、dropout 键与数据顺序都随之改变"""
        cfg = self.copy()
        cfg.seed = seed
        cfg.encoder.seed = seed
        cfg.train.seed = seed
        return cfg


def config_hash(config: ExperimentConfig) -> str:
    canonical = json.dumps(config.to_dict(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:12]


def derive_seed(base_seed: int, repeat: int) -> int:
    return int(np.random.SeedSequence([base_seed, repeat]).generate_state(1)[0])


def load_config_file(path: Optional[Union[str, Path]] = None) -> Dict[str, Any]:
    """读取 YAML/JSON 配置；默认文件不存在时回退到内置默认配置"""
    config_path = Path(path) if path else DEFAULT_CONFIG_PATH
    try:
        with open(config_path, "r", encoding="utf-8") as f:
            raw = yaml.safe_load(f) or {}
    except FileNotFoundError:
        if path:
            raise ConfigError(f"配置文件不存在: {config_path}") from None
        logger.warning("配置文件 %s 不存在，使用默认实验配置", config_path)
        return {"experiment": ExperimentConfig().to_dict()}
    except yaml.YAMLError as e:
        raise ConfigError(f"配置文件解析失败 {config_path}: {e}") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"配置文件顶层必须是映射: {config_path}")
    return raw


def experiment_section(raw: Dict[str, Any]) -> Dict[str, Any]:
    """配置文件可以把实验参数放在 experiment 键下，也可以直接写在顶层"""
    if "experiment" in raw:
        return dict(raw["experiment"] or {})
    return {k: v for k, v in raw.items() if k != "ablation"}


def load_experiment_config(path: Optional[Union[str, Path]] = None) -> ExperimentConfig:
    return ExperimentConfig.from_dict(experiment_section(load_config_file(path)))


def apply_axis(base: ExperimentConfig, axis: AblationAxis, value: Any) -> Tuple[ExperimentConfig, str]:
    """在基础配置上只修改一个轴，返回 (新配置, 取值标签)"""
    cfg = base.copy()
    if axis is AblationAxis.POOLING:
        cfg.pooling = PoolingSpec.from_dict(value)
        label = cfg.pooling.label
    elif axis is AblationAxis.MASK_MODE:
        mode, prefix_len = parse_mask_mode(value)
        cfg.encoder.mask_mode, cfg.encoder.prefix_len = mode, prefix_len
        label = cfg.encoder.mask_label
    elif axis is AblationAxis.DROPOUT:
        rate = float(value)
        cfg.encoder.attn_dropout = cfg.encoder.ffn_dropout = rate
        label = f"{rate:g}"
    elif axis is AblationAxis.PADDING_SIDE:
        try:
            cfg.encoder.padding_side = PaddingSide(str(value).lower())
        except ValueError:
            raise ConfigError(f"未知填充方向: {value}") from None
        label = cfg.encoder.padding_side.value
    else:
        if cfg.pooling.kind is not PoolingKind.ATTENTION:
            raise ConfigError("pooler_capacity 轴要求基础配置使用注意力池化")
        try:
            heads, latents = (int(x) for x in str(value).lower().split("x"))
        except ValueError:
            raise ConfigError(f"pooler_capacity 取值应为 HxV，例如 2x4: {value}") from None
        cfg.pooling.n_heads, cfg.pooling.n_latents = heads, latents
        label = f"{heads}x{latents}"
    cfg.encoder.validate()
    cfg.validate()
    return cfg, label


def run_cell(config: ExperimentConfig, splits: DatasetSplits,
             n_threads: int = 1) -> Tuple[EncoderModel, TrainResult, List[MetricReport]]:
    """一次完整运行：按配置种子初始化、训练、评估"""
    model = EncoderModel.build(config.encoder, config.pooling, config.head, config.seed)
    result = train(model, splits.train, config.train, splits.eval if config.train.eval_every else None, n_threads)
    reports = evaluate(model, splits.eval, config.train.eval_batch_size, n_threads)
    return model, result, reports


def run_ablation(
    base: ExperimentConfig,
    axis: Union[str, AblationAxis],
    values: Optional[Sequence[Any]] = None,
    n_threads: Optional[int] = None,
    output_csv: Optional[Union[str, Path]] = None,
) -> pd.DataFrame:
    """
    沿单个轴运行消融网格

    Returns:
        每个 (取值, 重复, 指标) 一行，外加每个 (取值, 指标) 的均值行
    """
    try:
        axis = AblationAxis(axis) if not isinstance(axis, AblationAxis) else axis
    except ValueError:
        raise ConfigError(f"未知消融轴: {axis}") from None
    values = list(DEFAULT_GRIDS[axis] if values is None else values)
    if not values:
        raise ConfigError("消融取值列表为空")

    cells = []
    labels: List[str] = []
    for value in values:
        cfg, label = apply_axis(base, axis, value)
        if label in labels:
            raise ConfigError(f"消融取值重复: {label}")
        labels.append(label)
        value_hash = config_hash(cfg)
        for repeat in range(base.repeats):
            cells.append((label, repeat, cfg.with_seed(derive_seed(base.seed, repeat)), value_hash))

    splits = generate(base.task)
    workers = resolve_threads(n_threads)
    logger.info("消融 %s: %d 个取值 x %d 次重复，%d 个线程", axis.value, len(values), base.repeats, workers)

    def run(cell) -> List[Dict[str, Any]]:
        label, repeat, cfg, value_hash = cell
        try:
            _, _, reports = run_cell(cfg, splits)
        except Exception as e:
            raise AblationRunError(json.dumps(cfg.to_dict(), sort_keys=True), e) from e
        logger.info("  %s=%s 重复 %d: %s", axis.value, label, repeat,
                    ", ".join(f"{r.name}={r.value:.4f}" for r in reports))
        return [
            {
                "run_id": base.run_id,
                "axis": axis.value,
                "axis_value": label,
                "repeat": repeat,
                "metric": r.name,
                "value": r.value,
                "support": r.support,
                "config_hash": config_hash(cfg),
                "value_hash": value_hash,
            }
            for r in reports
        ]

    if workers == 1:
        results = [run(cell) for cell in cells]
    else:
        with ThreadPoolExecutor(max_workers=workers) as executor:
            results = list(executor.map(run, cells))
    frame = build_ablation_frame([row for rows in results for row in rows], labels)
    if output_csv:
        write_csv(frame, output_csv)
    return frame
