"""
CSV 报告格式化：消融结果、损失曲线、评估轨迹
"""

import logging
from pathlib import Path
from typing import Any, Dict, List, Sequence, Union

import pandas as pd

logger = logging.getLogger(__name__)

REPORT_COLUMNS = ["run_id", "axis", "axis_value", "repeat", "metric", "value", "support", "config_hash"]


def build_ablation_frame(rows: List[Dict[str, Any]], value_order: Sequence[str]) -> pd.DataFrame:
    """按 (axis_value 在网格中的顺序, repeat) 排序；每个 (axis_value, metric) 追加一行均值"""
    frame = pd.DataFrame(rows, columns=REPORT_COLUMNS + ["value_hash"])
    if frame.empty:
        return frame[REPORT_COLUMNS]
    frame["_order"] = frame["axis_value"].map({value: i for i, value in enumerate(value_order)})
    frame["_rank"] = frame["repeat"].astype(int)

    # 均值行的 config_hash 取该轴取值在派生种子之前的配置哈希
    means = (
        frame.groupby(["_order", "metric"], sort=True)
        .agg(run_id=("run_id", "first"), axis_name=("axis", "first"), axis_value=("axis_value", "first"),
             value=("value", "mean"), support=("support", "mean"), config_hash=("value_hash", "first"))
        .reset_index()
        # "axis" 与 GroupBy.agg 自身的关键字参数同名，先聚合到 axis_name 再改名
        .rename(columns={"axis_name": "axis"})
    )
    means["repeat"] = "mean"
    means["support"] = means["support"].round().astype(int)
    means["_rank"] = int(frame["_rank"].max()) + 1

    merged = pd.concat([frame, means], ignore_index=True)
    merged = merged.sort_values(["_order", "_rank", "metric"], kind="stable")
    merged["repeat"] = merged["repeat"].astype(str)
    return merged[REPORT_COLUMNS].reset_index(drop=True)


def write_csv(frame: pd.DataFrame, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, lineterminator="\n")
    logger.info("CSV 已写入: %s (%d 行)", path, len(frame))
    return path


def loss_curve_frame(losses: Sequence[float]) -> pd.DataFrame:
    return pd.DataFrame({"step": range(len(losses)), "loss": list(losses)})


def metric_frame(rows: List[Dict[str, Any]]) -> pd.DataFrame:
    return pd.DataFrame(rows)


def summarize_means(frame: pd.DataFrame) -> pd.DataFrame:
    """只保留均值行，转成 axis_value x metric 的宽表，便于终端打印"""
    means = frame[frame["repeat"] == "mean"]
    if means.empty:
        return means
    table = means.pivot_table(index="axis_value", columns="metric", values="value", sort=False)
    return table
