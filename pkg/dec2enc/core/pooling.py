"""
池化策略：First-K、Last-K、Mean 以及 Query-probe / KV-probe 两种注意力池化

所有策略都只读取真实 token 位置，填充位置的隐藏状态不影响输出，梯度也不回传到填充位置。
"""

import logging
from dataclasses import dataclass
from enum import Enum
from typing import Any, Dict, Optional

import numpy as np

from .encoder import HiddenStates, merge_heads, split_heads
from .errors import BatchError, ConfigError
from .tensor import (
    MASK_DROP,
    Params,
    Tensor,
    gather_positions,
    masked_mean,
    matmul,
    parameter,
    reshape,
    softmax,
    transpose,
)

logger = logging.getLogger(__name__)


class PoolingKind(Enum):
    FIRST_K = "first_k"
    LAST_K = "last_k"
    MEAN = "mean"
    ATTENTION = "attention"


class ProbeVariant(Enum):
    QUERY = "query"
    KV = "kv"


@dataclass
class PoolingSpec:
    """池化方式及其参数"""
    kind: PoolingKind = PoolingKind.MEAN
    k: int = 1
    variant: ProbeVariant = ProbeVariant.QUERY
    n_latents: int = 1
    n_heads: int = 1
    # False 时 First-K/Last-K 直接取数组下标，不跳过填充
    skip_pads: bool = True

    def __post_init__(self):
        if isinstance(self.kind, str):
            self.kind = PoolingKind(self.kind)
        if isinstance(self.variant, str):
            self.variant = ProbeVariant(self.variant)
        self.validate()

    @property
    def arity(self) -> int:
        """输出的池化向量个数"""
        if self.kind in (PoolingKind.FIRST_K, PoolingKind.LAST_K):
            return self.k
        if self.kind is PoolingKind.ATTENTION:
            return self.n_latents
        return 1

    @property
    def label(self) -> str:
        """紧凑字符串形式，与 parse() 互逆"""
        if self.kind is PoolingKind.MEAN:
            return "mean"
        if self.kind is PoolingKind.ATTENTION:
            tag = "attention_q" if self.variant is ProbeVariant.QUERY else "attention_kv"
            return f"{tag}:{self.n_heads}:{self.n_latents}"
        suffix = "" if self.skip_pads else "_literal"
        return f"{self.kind.value}{suffix}:{self.k}"

    def validate(self, d_model: Optional[int] = None) -> None:
        if self.k < 1 or self.n_latents < 1 or self.n_heads < 1:
            raise ConfigError(f"池化参数必须为正: k={self.k}, V={self.n_latents}, H={self.n_heads}")
        if d_model is not None and self.kind is PoolingKind.ATTENTION and d_model % self.n_heads:
            raise ConfigError(f"池化头数 H={self.n_heads} 不能整除 d_model={d_model}")

    @classmethod
    def parse(cls, text: str) -> "PoolingSpec":
        """解析 first_k:K / last_k:K / first_k_literal:K / last_k_literal:K / mean / attention_q:H:V / attention_kv:H:V"""
        parts = str(text).strip().lower().split(":")
        name, args = parts[0], parts[1:]
        try:
            if name == "mean":
                return cls(PoolingKind.MEAN)
            if name in ("first_k", "last_k", "first_k_literal", "last_k_literal"):
                kind = PoolingKind.FIRST_K if name.startswith("first") else PoolingKind.LAST_K
                k = int(args[0]) if args else 1
                return cls(kind, k=k, skip_pads=not name.endswith("_literal"))
            if name in ("attention_q", "attention_kv"):
                heads = int(args[0]) if args else 1
                latents = int(args[1]) if len(args) > 1 else 1
                variant = ProbeVariant.QUERY if name == "attention_q" else ProbeVariant.KV
                return cls(PoolingKind.ATTENTION, variant=variant, n_heads=heads, n_latents=latents)
        except ValueError as e:
            raise ConfigError(f"无法解析池化配置 {text}: {e}") from None
        raise ConfigError(f"未知池化方式: {text}")

    def to_dict(self) -> Dict[str, Any]:
        return {
            "kind": self.kind.value,
            "k": self.k,
            "variant": self.variant.value,
            "n_latents": self.n_latents,
            "n_heads": self.n_heads,
            "skip_pads": self.skip_pads,
        }

    @classmethod
    def from_dict(cls, data: Any) -> "PoolingSpec":
        if isinstance(data, str):
            return cls.parse(data)
        if isinstance(data, PoolingSpec):
            return data
        return cls(**dict(data or {}))


def init_pooler_params(spec: PoolingSpec, d_model: int, seed: int) -> Params:
    """注意力池化的潜变量与投影矩阵；无参数池化返回空字典"""
    spec.validate(d_model)
    if spec.kind is not PoolingKind.ATTENTION:
        return {}
    rng = np.random.default_rng(seed)
    n_latents = spec.n_latents

    def dense() -> Tensor:
        return parameter(rng.standard_normal((d_model, d_model)) / np.sqrt(d_model))

    if spec.variant is ProbeVariant.QUERY:
        return {
            "pooler.latents": parameter(rng.standard_normal((n_latents, d_model))),
            "pooler.wq": dense(),
            "pooler.wk": dense(),
            "pooler.wv": dense(),
            "pooler.wo": dense(),
        }
    return {
        "pooler.wq": dense(),
        "pooler.latent_keys": parameter(rng.standard_normal((n_latents, d_model))),
        "pooler.latent_values": parameter(rng.standard_normal((n_latents, d_model))),
        "pooler.wo": dense(),
    }


def token_positions(spec: PoolingSpec, pad_mask: np.ndarray) -> np.ndarray:
    """First-K / Last-K 选取的位置 [B, k]"""
    pad_mask = np.asarray(pad_mask, dtype=bool)
    width = pad_mask.shape[1]
    shortest = int(pad_mask.sum(axis=1).min())
    if spec.k > shortest:
        raise BatchError(f"k={spec.k} 超过批内最短序列长度 {shortest}")
    offsets = np.arange(spec.k)[None, :]
    if not spec.skip_pads:
        start = 0 if spec.kind is PoolingKind.FIRST_K else width - spec.k
        return np.broadcast_to(start + offsets, (pad_mask.shape[0], spec.k)).copy()
    if spec.kind is PoolingKind.FIRST_K:
        first_real = np.argmax(pad_mask, axis=1)
        return first_real[:, None] + offsets
    last_real = width - 1 - np.argmax(pad_mask[:, ::-1], axis=1)
    return last_real[:, None] - spec.k + 1 + offsets


def _latents_by_head(latents: Tensor, n_heads: int) -> Tensor:
    """[V, D] -> [1, H, V, D/H]"""
    n_latents, d = latents.shape
    heads = transpose(reshape(latents, (n_latents, n_heads, d // n_heads)), (1, 0, 2))
    return reshape(heads, (1, n_heads, n_latents, d // n_heads))


def _query_probe(spec: PoolingSpec, params: Params, x: Tensor, pad_mask: np.ndarray) -> Tensor:
    n_heads = spec.n_heads
    head_dim = x.shape[-1] // n_heads
    q = _latents_by_head(matmul(params["pooler.latents"], params["pooler.wq"]), n_heads)
    k = split_heads(matmul(x, params["pooler.wk"]), n_heads)
    v = split_heads(matmul(x, params["pooler.wv"]), n_heads)
    scores = matmul(q, transpose(k, (0, 1, 3, 2))) * (1.0 / np.sqrt(head_dim))
    key_mask = np.where(pad_mask, 0.0, MASK_DROP)[:, None, None, :]
    probs = softmax(scores, axis=-1, additive_mask=key_mask)
    return matmul(merge_heads(matmul(probs, v)), params["pooler.wo"])


def _kv_probe(spec: PoolingSpec, params: Params, x: Tensor, pad_mask: np.ndarray) -> Tensor:
    n_heads = spec.n_heads
    batch = x.shape[0]
    head_dim = x.shape[-1] // n_heads
    q = split_heads(matmul(x, params["pooler.wq"]), n_heads)
    keys = _latents_by_head(params["pooler.latent_keys"], n_heads)
    values = _latents_by_head(params["pooler.latent_values"], n_heads)
    probs = softmax(matmul(q, transpose(keys, (0, 1, 3, 2))) * (1.0 / np.sqrt(head_dim)), axis=-1)
    # 每个潜变量的权重在真实位置上取平均：[B, H, L, V] -> [B, H, V]
    weights = masked_mean(probs, pad_mask[:, None, :, None], axis=2)
    pooled = reshape(weights, (batch, n_heads, spec.n_latents, 1)) * values
    return matmul(merge_heads(pooled), params["pooler.wo"])


def pool(spec: PoolingSpec, params: Params, hidden: HiddenStates) -> Tensor:
    """把 [B, L, D] 隐藏状态聚合为 [B, arity, D]"""
    x = hidden.activations
    pad_mask = np.asarray(hidden.pad_mask, dtype=bool)
    batch, _, d_model = x.shape
    spec.validate(d_model)
    if spec.kind in (PoolingKind.FIRST_K, PoolingKind.LAST_K):
        return gather_positions(x, token_positions(spec, pad_mask))
    if spec.kind is PoolingKind.MEAN:
        return reshape(masked_mean(x, pad_mask[:, :, None], axis=1), (batch, 1, d_model))
    if spec.variant is ProbeVariant.QUERY:
        return _query_probe(spec, params, x, pad_mask)
    return _kv_probe(spec, params, x, pad_mask)
