"""
编码器主体：可切换注意力掩码与填充方式的小型 decoder 风格 Transformer 堆叠

每层结构：预归一化 RMSNorm -> 多头注意力 (RoPE) -> 注意力概率 dropout -> 残差，
预归一化 RMSNorm -> GEGLU 前馈 -> 前馈输出 dropout -> 残差。最后再做一次 RMSNorm。
"""

import logging
from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import BatchError, ConfigError, NonFiniteError
from .tensor import (
    MASK_DROP,
    Params,
    Tensor,
    dropout,
    dropout_rng,
    embedding,
    gelu,
    matmul,
    parameter,
    reshape,
    rms_norm,
    rope,
    softmax,
    transpose,
)

logger = logging.getLogger(__name__)

PAD_ID = 0


class MaskMode(Enum):
    """注意力掩码模式"""
    CAUSAL = "causal"
    BIDIRECTIONAL = "bidirectional"
    PREFIX = "prefix"


class PaddingSide(Enum):
    """填充方向"""
    LEFT = "left"
    RIGHT = "right"


def parse_mask_mode(text: str) -> Tuple[MaskMode, int]:
    """解析 'causal' / 'bidirectional' / 'prefix:N'"""
    name, _, arg = str(text).strip().lower().partition(":")
    try:
        mode = MaskMode(name)
    except ValueError:
        raise ConfigError(f"未知掩码模式: {text}") from None
    if mode is MaskMode.PREFIX:
        if not arg:
            raise ConfigError("prefix 掩码需要前缀长度，例如 prefix:8")
        try:
            return mode, int(arg)
        except ValueError:
            raise ConfigError(f"prefix 长度必须是整数: {text}") from None
    return mode, 0


@dataclass
class EncoderConfig:
    """编码器完整结构描述"""
    vocab_size: int = 260
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 256
    max_len: int = 64
    mask_mode: MaskMode = MaskMode.BIDIRECTIONAL
    prefix_len: int = 0
    padding_side: PaddingSide = PaddingSide.RIGHT
    attn_dropout: float = 0.0
    ffn_dropout: float = 0.0
    seed: int = 0
    rope_base: float = 10000.0

    def __post_init__(self):
        if isinstance(self.mask_mode, str):
            mode, prefix = parse_mask_mode(self.mask_mode)
            self.mask_mode = mode
            if mode is MaskMode.PREFIX:
                self.prefix_len = prefix
        if isinstance(self.padding_side, str):
            try:
                self.padding_side = PaddingSide(self.padding_side.lower())
            except ValueError:
                raise ConfigError(f"未知填充方向: {self.padding_side}") from None
        self.validate()

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def mask_label(self) -> str:
        if self.mask_mode is MaskMode.PREFIX:
            return f"prefix:{self.prefix_len}"
        return self.mask_mode.value

    def validate(self) -> None:
        for name in ("vocab_size", "d_model", "n_layers", "n_heads", "d_ff", "max_len"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} 必须为正数: {getattr(self, name)}")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} 不能被 n_heads={self.n_heads} 整除")
        if self.head_dim % 2:
            raise ConfigError(f"RoPE 需要偶数 head_dim，实际 {self.head_dim}")
        if self.mask_mode is MaskMode.PREFIX and not 0 <= self.prefix_len <= self.max_len:
            raise ConfigError(f"prefix_len={self.prefix_len} 超出 [0, max_len={self.max_len}]")
        for name in ("attn_dropout", "ffn_dropout"):
            rate = getattr(self, name)
            if not 0.0 <= rate < 1.0:
                raise ConfigError(f"{name} 必须在 [0, 1) 内: {rate}")

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["mask_mode"] = self.mask_label
        data["padding_side"] = self.padding_side.value
        data.pop("prefix_len")
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "EncoderConfig":
        data = dict(data or {})
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"EncoderConfig 不认识的字段: {sorted(unknown)}")
        return cls(**data)


@dataclass
class Batch:
    """填充后的 token 矩阵 [B, L] 及逐位置真实 token 掩码"""
    token_ids: np.ndarray
    pad_mask: np.ndarray
    lengths: np.ndarray
    padding_side: PaddingSide = PaddingSide.RIGHT

    @classmethod
    def from_sequences(
        cls,
        sequences: Sequence[Sequence[int]],
        padding_side: PaddingSide = PaddingSide.RIGHT,
        length: Optional[int] = None,
        pad_id: int = PAD_ID,
    ) -> "Batch":
        if not sequences:
            raise BatchError("批为空")
        lengths = np.array([len(s) for s in sequences], dtype=np.int64)
        if lengths.min() < 1:
            raise BatchError("每行至少需要一个真实 token")
        width = int(lengths.max()) if length is None else int(length)
        if lengths.max() > width:
            raise BatchError(f"序列长度 {lengths.max()} 超过批宽度 {width}")
        token_ids = np.full((len(sequences), width), pad_id, dtype=np.int64)
        pad_mask = np.zeros((len(sequences), width), dtype=bool)
        for row, seq in enumerate(sequences):
            n = len(seq)
            span = slice(0, n) if padding_side is PaddingSide.RIGHT else slice(width - n, width)
            token_ids[row, span] = np.asarray(seq, dtype=np.int64)
            pad_mask[row, span] = True
        return cls(token_ids, pad_mask, lengths, padding_side)

    @property
    def shape(self) -> Tuple[int, int]:
        return self.token_ids.shape

    def validate(self, config: Optional[EncoderConfig] = None) -> None:
        if self.token_ids.shape != self.pad_mask.shape or self.token_ids.ndim != 2:
            raise BatchError(f"token_ids {self.token_ids.shape} 与 pad_mask {self.pad_mask.shape} 形状不一致")
        counts = self.pad_mask.sum(axis=1)
        if np.any(counts < 1):
            raise BatchError("存在没有真实 token 的行")
        if not np.array_equal(counts, self.lengths):
            raise BatchError("lengths 与 pad_mask 不一致")
        width = self.token_ids.shape[1]
        positions = np.arange(width)[None, :]
        if self.padding_side is PaddingSide.RIGHT:
            expected = positions < self.lengths[:, None]
        else:
            expected = positions >= (width - self.lengths)[:, None]
        if not np.array_equal(expected, self.pad_mask):
            raise BatchError(f"填充位置与 {self.padding_side.value} 填充方向不一致")
        if config is not None:
            if width > config.max_len:
                raise BatchError(f"序列长度 {width} 超过 max_len={config.max_len}")
            if self.token_ids.min() < 0 or self.token_ids.max() >= config.vocab_size:
                raise BatchError(f"token id 超出词表大小 {config.vocab_size}")


@dataclass
class HiddenStates:
    """编码器输出 [B, L, D]，pad_mask 原样携带"""
    activations: Tensor
    pad_mask: np.ndarray
    attention_probs: List[np.ndarray] = field(default_factory=list)


def build_attention_mask(pad_mask: np.ndarray, mode: MaskMode, prefix_len: int = 0) -> np.ndarray:
    """
    构建加性注意力掩码 [B, 1, L, L]

    (q, k) 保留当且仅当 k 是真实 token 且模式允许：
    Causal 允许 k <= q；Bidirectional 全部允许；Prefix 允许 k < prefix_len 或 k <= q。
    """
    pad_mask = np.asarray(pad_mask, dtype=bool)
    if pad_mask.ndim != 2:
        raise BatchError(f"pad_mask 需要二维，实际 {pad_mask.shape}")
    width = pad_mask.shape[1]
    q = np.arange(width)[:, None]
    k = np.arange(width)[None, :]
    if mode is MaskMode.CAUSAL:
        admitted = k <= q
    elif mode is MaskMode.BIDIRECTIONAL:
        admitted = np.ones((width, width), dtype=bool)
    else:
        admitted = (k < prefix_len) | (k <= q)
    keep = admitted[None, None, :, :] & pad_mask[:, None, None, :]
    return np.where(keep, 0.0, MASK_DROP)


def rotary_tables(length: int, head_dim: int, base: float = 10000.0) -> Tuple[np.ndarray, np.ndarray]:
    """绝对位置 0..L-1（含填充位置）的 RoPE cos/sin 表 [L, head_dim/2]"""
    half = head_dim // 2
    inv_freq = base ** (-np.arange(half, dtype=np.float64) / half)
    angles = np.arange(length, dtype=np.float64)[:, None] * inv_freq[None, :]
    return np.cos(angles), np.sin(angles)


def _dense(rng: np.random.Generator, fan_in: int, fan_out: int) -> Tensor:
    return parameter(rng.standard_normal((fan_in, fan_out)) / np.sqrt(fan_in))


def init_params(config: EncoderConfig, seed: Optional[int] = None) -> Params:
    """按 1/sqrt(fan_in) 尺度随机初始化编码器参数；同一种子结果完全一致"""
    rng = np.random.default_rng(config.seed if seed is None else seed)
    d, f = config.d_model, config.d_ff
    params: Params = {}
    # 词表查找相当于 one-hot 输入，fan_in 取 1
    params["embed.table"] = parameter(rng.standard_normal((config.vocab_size, d)))
    for i in range(config.n_layers):
        p = f"layers.{i}."
        params[p + "attn_norm"] = parameter(np.ones(d))
        params[p + "wq"] = _dense(rng, d, d)
        params[p + "wk"] = _dense(rng, d, d)
        params[p + "wv"] = _dense(rng, d, d)
        params[p + "wo"] = _dense(rng, d, d)
        params[p + "ffn_norm"] = parameter(np.ones(d))
        params[p + "w_gate"] = _dense(rng, d, f)
        params[p + "w_up"] = _dense(rng, d, f)
        params[p + "w_down"] = _dense(rng, f, d)
    params["final_norm"] = parameter(np.ones(d))
    return params


def split_heads(x: Tensor, n_heads: int) -> Tensor:
    """[B, L, D] -> [B, H, L, D/H]"""
    b, length, d = x.shape
    return transpose(reshape(x, (b, length, n_heads, d // n_heads)), (0, 2, 1, 3))


def merge_heads(x: Tensor) -> Tensor:
    """[B, H, L, dh] -> [B, L, H*dh]"""
    b, h, length, dh = x.shape
    return reshape(transpose(x, (0, 2, 1, 3)), (b, length, h * dh))


def _check_finite(x: Tensor, where: str) -> None:
    if not np.all(np.isfinite(x.data)):
        raise NonFiniteError(f"{where} 输出包含 NaN/Inf")


def forward(
    config: EncoderConfig,
    params: Params,
    batch: Batch,
    train_mode: bool = False,
    step: int = 0,
) -> HiddenStates:
    """
    编码器前向计算

    Args:
        step: 训练步编号，与 config.seed 和层号一起作为 dropout 发生器的键
    """
    batch.validate(config)
    _, width = batch.shape
    n_heads = config.n_heads
    mask = build_attention_mask(batch.pad_mask, config.mask_mode, config.prefix_len)
    cos, sin = rotary_tables(width, config.head_dim, config.rope_base)
    scale = 1.0 / np.sqrt(config.head_dim)

    def site_rng(layer: int, kind: int, rate: float) -> Optional[np.random.Generator]:
        if not train_mode or rate == 0.0:
            return None
        return dropout_rng(config.seed, 2 * layer + kind, step)

    x = embedding(params["embed.table"], batch.token_ids)
    attention_probs: List[np.ndarray] = []
    for i in range(config.n_layers):
        p = f"layers.{i}."
        h = rms_norm(x, params[p + "attn_norm"])
        q = rope(split_heads(matmul(h, params[p + "wq"]), n_heads), cos, sin)
        k = rope(split_heads(matmul(h, params[p + "wk"]), n_heads), cos, sin)
        v = split_heads(matmul(h, params[p + "wv"]), n_heads)
        scores = matmul(q, transpose(k, (0, 1, 3, 2))) * scale
        probs = softmax(scores, axis=-1, additive_mask=mask)
        attention_probs.append(probs.data)
        probs = dropout(probs, config.attn_dropout, site_rng(i, 0, config.attn_dropout), train_mode)
        x = x + matmul(merge_heads(matmul(probs, v)), params[p + "wo"])

        h = rms_norm(x, params[p + "ffn_norm"])
        hidden = gelu(matmul(h, params[p + "w_gate"])) * matmul(h, params[p + "w_up"])
        ffn_out = matmul(hidden, params[p + "w_down"])
        ffn_out = dropout(ffn_out, config.ffn_dropout, site_rng(i, 1, config.ffn_dropout), train_mode)
        x = x + ffn_out
        _check_finite(x, f"第 {i} 层")

    x = rms_norm(x, params["final_norm"])
    return HiddenStates(activations=x, pad_mask=batch.pad_mask, attention_probs=attention_probs)
