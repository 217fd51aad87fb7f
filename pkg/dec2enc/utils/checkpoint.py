"""
参数检查点读写

文件布局：8 字节小端 uint64 头长度 N | N 字节 JSON 头 | 小端 float64 参数数据。
JSON 头把参数名映射到 shape 与数据区内的字节偏移，"__metadata__" 存放模型配置。
"""

import json
import logging
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Union

import numpy as np

from ..core.encoder import EncoderConfig
from ..core.errors import ConfigError
from ..core.pooling import PoolingSpec
from ..core.tasks import EncoderModel, TaskHead
from ..core.tensor import Params, parameter

logger = logging.getLogger(__name__)

_LE_F64 = np.dtype("<f8")
_LE_U64 = np.dtype("<u8")


def save_checkpoint(path: Union[str, Path], params: Params, metadata: Optional[Dict[str, Any]] = None) -> Path:
    """按参数名排序写出检查点，同样的参数总是得到逐字节相同的文件"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    entries: Dict[str, Any] = {}
    offset = 0
    for name in sorted(params):
        nbytes = params[name].size * _LE_F64.itemsize
        entries[name] = {"shape": list(params[name].shape), "offset": offset, "nbytes": nbytes}
        offset += nbytes
    header = {"tensors": entries, "__metadata__": metadata or {}}
    header_bytes = json.dumps(header, sort_keys=True, ensure_ascii=False).encode("utf-8")
    with open(path, "wb") as f:
        f.write(np.array([len(header_bytes)], dtype=_LE_U64).tobytes())
        f.write(header_bytes)
        for name in sorted(params):
            f.write(np.ascontiguousarray(params[name].data, dtype=_LE_F64).tobytes())
    logger.info("检查点已保存: %s (%d 个参数张量)", path, len(params))
    return path


def load_checkpoint(path: Union[str, Path]) -> Tuple[Params, Dict[str, Any]]:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"检查点不存在: {path}")
    raw = path.read_bytes()
    if len(raw) < 8:
        raise ConfigError(f"检查点文件损坏: {path}")
    header_len = int(np.frombuffer(raw[:8], dtype=_LE_U64)[0])
    header = json.loads(raw[8: 8 + header_len].decode("utf-8"))
    body = raw[8 + header_len:]
    params: Params = {}
    for name, entry in header.get("tensors", {}).items():
        start, nbytes = entry["offset"], entry["nbytes"]
        if start + nbytes > len(body):
            raise ConfigError(f"检查点参数 {name} 超出数据区")
        values = np.frombuffer(body[start: start + nbytes], dtype=_LE_F64)
        params[name] = parameter(values.reshape(entry["shape"]).astype(np.float64))
    return params, header.get("__metadata__", {})


def save_model(path: Union[str, Path], model: EncoderModel, extra: Optional[Dict[str, Any]] = None) -> Path:
    metadata = {
        "encoder": model.encoder.to_dict(),
        "pooling": model.pooling.to_dict(),
        "head": model.head.to_dict(),
    }
    metadata.update(extra or {})
    return save_checkpoint(path, model.params, metadata)


def load_model(path: Union[str, Path]) -> Tuple[EncoderModel, Dict[str, Any]]:
    """从检查点重建模型（配置取自 JSON 头中的元数据）"""
    params, metadata = load_checkpoint(path)
    try:
        model = EncoderModel(
            EncoderConfig.from_dict(metadata["encoder"]),
            PoolingSpec.from_dict(metadata["pooling"]),
            TaskHead.from_dict(metadata["head"]),
            params,
        )
    except KeyError as e:
        raise ConfigError(f"检查点缺少模型元数据: {e}") from None
    return model, metadata
