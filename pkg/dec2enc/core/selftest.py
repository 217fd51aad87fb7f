"""
自检套件：梯度校验、掩码不变量、填充不变性、损失闭式值

CLI 的 selftest 子命令与单元测试共用这里的小模型构造函数。
"""

import itertools
import logging
import math
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from .encoder import Batch, EncoderConfig, MaskMode, PaddingSide, forward, init_params, rotary_tables
from .gradcheck import GradCheckResult, check_gradients
from .metrics import mrr_at_k, ndcg_at_k
from .pooling import PoolingSpec
from .tasks import (
    EncoderModel,
    HeadKind,
    RankingBatch,
    TaskHead,
    classification_loss,
    listwise_softmax_loss,
    regression_loss,
    score_list,
)
from .tensor import (
    Tensor,
    dropout,
    dropout_rng,
    embedding,
    gather_positions,
    gelu,
    log_softmax,
    masked_mean,
    masked_sum,
    matmul,
    no_grad,
    parameter,
    reshape,
    rms_norm,
    rope,
    softmax,
    tensor_mean,
    tensor_sum,
    transpose,
)

logger = logging.getLogger(__name__)

POOLING_CASES = ["first_k:1", "last_k:2", "mean", "attention_q:2:2", "attention_kv:2:3"]
INSTANCE_SHAPES = [(2, 3), (3, 4), (4, 5)]


@dataclass
class CheckOutcome:
    """一项自检的结论"""
    name: str
    passed: bool
    detail: str = ""


def tiny_encoder_config(**overrides) -> EncoderConfig:
    """梯度校验用的小编码器：2 层、d_model=8、2 个头"""
    settings = dict(vocab_size=16, d_model=8, n_layers=2, n_heads=2, d_ff=16, max_len=12, seed=0)
    settings.update(overrides)
    return EncoderConfig(**settings)


def random_sequences(rng: np.random.Generator, n: int, min_len: int, max_len: int, vocab: int) -> List[List[int]]:
    """随机 token 序列（不含 id 0），长度在 [min_len, max_len] 内"""
    lengths = rng.integers(min_len, max_len + 1, size=n)
    return [rng.integers(1, vocab, size=int(length)).tolist() for length in lengths]


def scramble_pads(batch: Batch, rng: np.random.Generator, vocab: int) -> Batch:
    """把填充位置的 token id 换成任意 id，pad_mask 不变"""
    token_ids = batch.token_ids.copy()
    noise = rng.integers(0, vocab, size=token_ids.shape)
    token_ids[~batch.pad_mask] = noise[~batch.pad_mask]
    return Batch(token_ids, batch.pad_mask.copy(), batch.lengths.copy(), batch.padding_side)


# ---------------------------------------------------------------- 梯度校验

def _weighted(out: Tensor, weights: np.ndarray) -> Tensor:
    return tensor_sum(out * weights)


def primitive_gradient_checks(seed: int = 0, shapes: Sequence = INSTANCE_SHAPES) -> List[GradCheckResult]:
    """每个可微原语在若干形状上做有限差分比对"""
    rng = np.random.default_rng(seed)
    results: List[GradCheckResult] = []

    def run(name: str, fn: Callable[[], Tensor], inputs: Dict[str, Tensor]) -> None:
        results.append(check_gradients(fn, inputs, name=name, seed=seed))

    for m, n in shapes:
        a = parameter(rng.standard_normal((m, n)))
        row = parameter(rng.standard_normal(n))
        col = parameter(rng.standard_normal((m, 1)))
        pos = parameter(1.5 + rng.random((m, n)))
        b = parameter(rng.standard_normal((n, m + 1)))
        batched = parameter(rng.standard_normal((2, m, n)))
        w_out = rng.standard_normal((m, n))
        w_mm = rng.standard_normal((m, m + 1))
        tag = f"{m}x{n}"

        run(f"add[{tag}]", lambda: _weighted(a + row, w_out), {"a": a, "row": row})
        run(f"sub[{tag}]", lambda: _weighted(a - col, w_out), {"a": a, "col": col})
        run(f"mul[{tag}]", lambda: _weighted(a * col, w_out), {"a": a, "col": col})
        run(f"div[{tag}]", lambda: _weighted(a / pos, w_out), {"a": a, "pos": pos})
        run(f"matmul[{tag}]", lambda: _weighted(matmul(a, b), w_mm), {"a": a, "b": b})
        run(f"matmul_batched[{tag}]", lambda: _weighted(matmul(batched, b), rng_weights(seed, (2, m, m + 1))),
            {"batched": batched, "b": b})
        run(f"gelu[{tag}]", lambda: _weighted(gelu(a), w_out), {"a": a})
        run(f"rms_norm[{tag}]", lambda: _weighted(rms_norm(a, row), w_out), {"a": a, "row": row})
        run(f"reshape_transpose[{tag}]",
            lambda: _weighted(transpose(reshape(a, (n, m))), rng_weights(seed, (m, n))), {"a": a})
        run(f"sum_mean[{tag}]", lambda: tensor_sum(tensor_mean(a * a, axis=0) * row), {"a": a, "row": row})

        keep = rng.random((m, n)) > 0.3
        keep[:, 0] = True
        keep[-1] = False  # 整行掩掉
        additive = np.where(keep, 0.0, -1e30)
        run(f"softmax_masked[{tag}]", lambda: _weighted(softmax(a, axis=1, additive_mask=additive), w_out), {"a": a})
        run(f"softmax[{tag}]", lambda: _weighted(softmax(a, axis=0), w_out), {"a": a})
        run(f"log_softmax[{tag}]", lambda: _weighted(log_softmax(a, axis=1), w_out), {"a": a})
        run(f"masked_sum[{tag}]", lambda: _weighted(masked_sum(a, keep, axis=1), rng_weights(seed, (m,))), {"a": a})
        run(f"masked_mean[{tag}]", lambda: _weighted(masked_mean(a, keep, axis=1), rng_weights(seed, (m,))), {"a": a})

        table = parameter(rng.standard_normal((n + 2, m)))
        ids = rng.integers(0, n + 2, size=(2, m))
        run(f"embedding[{tag}]", lambda: _weighted(embedding(table, ids), rng_weights(seed, (2, m, m))),
            {"table": table})

        seq = parameter(rng.standard_normal((2, n, m)))
        positions = np.stack([rng.choice(n, size=2, replace=False) for _ in range(2)])
        run(f"gather_positions[{tag}]",
            lambda: _weighted(gather_positions(seq, positions), rng_weights(seed, (2, 2, m))), {"seq": seq})

        heads = parameter(rng.standard_normal((2, n, 2 * m)))
        cos, sin = rotary_tables(n, 2 * m)
        run(f"rope[{tag}]", lambda: _weighted(rope(heads, cos, sin), rng_weights(seed, (2, n, 2 * m))),
            {"heads": heads})
        run(f"dropout[{tag}]",
            lambda: _weighted(dropout(a, 0.3, dropout_rng(seed, 0, 0), True), w_out), {"a": a})
    return results


def rng_weights(seed: int, shape) -> np.ndarray:
    """按形状确定的随机权重，保证闭包内多次求值得到同一损失"""
    return np.random.default_rng([seed, *shape]).standard_normal(shape)


def _model_inputs(model: EncoderModel, rng: np.random.Generator, padding_side: PaddingSide):
    sequences = random_sequences(rng, 3, 3, 6, model.encoder.vocab_size)
    return Batch.from_sequences(sequences, padding_side)


def model_gradient_checks(
    seed: int = 0,
    instances: int = 3,
    max_entries: Optional[int] = 6,
    pooling_cases: Sequence[str] = POOLING_CASES,
) -> List[GradCheckResult]:
    """2 层编码器 + 每种池化 + 每种损失的端到端梯度校验（抽样坐标）"""
    results: List[GradCheckResult] = []
    for instance in range(instances):
        rng = np.random.default_rng([seed, instance])
        side = PaddingSide.RIGHT if instance % 2 == 0 else PaddingSide.LEFT
        # 第三个实例打开 dropout，同一 step 的掩码固定，有限差分依然有效
        rate = 0.1 if instance == 2 else 0.0
        config = tiny_encoder_config(padding_side=side, attn_dropout=rate, ffn_dropout=rate, seed=seed + instance)
        train_mode = rate > 0

        for text in pooling_cases:
            spec = PoolingSpec.parse(text)
            model = EncoderModel.build(config, spec, TaskHead(HeadKind.CLASSIFICATION, 3, 8), seed + instance)
            batch = _model_inputs(model, rng, side)
            labels = rng.integers(0, 3, size=batch.shape[0])
            results.append(check_gradients(
                lambda: classification_loss(labels, model.predict(batch, train_mode, step=1)),
                model.params, name=f"classification/{text}/{instance}", max_entries=max_entries, seed=seed))

        model = EncoderModel.build(config, PoolingSpec.parse("mean"), TaskHead(HeadKind.REGRESSION, d_hidden=8),
                                   seed + instance)
        batch = _model_inputs(model, rng, side)
        targets = rng.random(batch.shape[0])
        results.append(check_gradients(
            lambda: regression_loss(targets, model.predict(batch, train_mode, step=1)),
            model.params, name=f"regression/mean/{instance}", max_entries=max_entries, seed=seed))

        model = EncoderModel.build(config, PoolingSpec.parse("last_k:1"), TaskHead(HeadKind.RANKING, d_hidden=8),
                                   seed + instance)
        queries = random_sequences(rng, 2, 2, 3, config.vocab_size)
        docs = [random_sequences(rng, 3, 2, 4, config.vocab_size) for _ in queries]
        relevance = np.zeros((2, 3))
        relevance[:, 0] = 1.0
        rb = RankingBatch.from_lists(queries, docs, relevance, side)
        results.append(check_gradients(
            lambda: listwise_softmax_loss(rb.labels, score_list(model, rb, train_mode, step=1)),
            model.params, name=f"ranking/last_k:1/{instance}", max_entries=max_entries, seed=seed))
    return results


# ---------------------------------------------------------------- 掩码与填充不变量

def causality_check(seed: int = 0, trials: int = 100) -> CheckOutcome:
    """Causal 模式下扰动位置 j 的 token，位置 < j 的激活逐位相同"""
    rng = np.random.default_rng(seed)
    config = tiny_encoder_config(mask_mode=MaskMode.CAUSAL)
    params = init_params(config, seed)
    with no_grad():
        for trial in range(trials):
            side = PaddingSide.RIGHT if trial % 2 == 0 else PaddingSide.LEFT
            batch = Batch.from_sequences(random_sequences(rng, 3, 2, 8, config.vocab_size), side)
            row = int(rng.integers(0, batch.shape[0]))
            real = np.flatnonzero(batch.pad_mask[row])
            j = int(rng.choice(real))
            token_ids = batch.token_ids.copy()
            token_ids[row, j] = (token_ids[row, j] % (config.vocab_size - 1)) + 1
            perturbed = Batch(token_ids, batch.pad_mask, batch.lengths, side)
            before = forward(config, params, batch).activations.data
            after = forward(config, params, perturbed).activations.data
            if not np.array_equal(before[:, :j], after[:, :j]):
                return CheckOutcome("causality", False, f"第 {trial} 次扰动 (row={row}, j={j}) 改变了更早位置的激活")
    return CheckOutcome("causality", True, f"{trials} 次扰动")


def prefix_equivalence_check(seed: int = 0) -> CheckOutcome:
    """Prefix(L) 与 Bidirectional、Prefix(0) 与 Causal 输出逐位相同"""
    rng = np.random.default_rng(seed)
    base = tiny_encoder_config()
    params = init_params(base, seed)
    with no_grad():
        for side in PaddingSide:
            batch = Batch.from_sequences(random_sequences(rng, 4, 2, 8, base.vocab_size), side)
            width = batch.shape[1]

            def run(mode: MaskMode, prefix_len: int = 0) -> np.ndarray:
                config = tiny_encoder_config(mask_mode=mode, prefix_len=prefix_len, padding_side=side)
                return forward(config, params, batch).activations.data

            if not np.array_equal(run(MaskMode.PREFIX, width), run(MaskMode.BIDIRECTIONAL)):
                return CheckOutcome("prefix_equivalence", False, f"Prefix(L) != Bidirectional ({side.value})")
            if not np.array_equal(run(MaskMode.PREFIX, 0), run(MaskMode.CAUSAL)):
                return CheckOutcome("prefix_equivalence", False, f"Prefix(0) != Causal ({side.value})")
    return CheckOutcome("prefix_equivalence", True)


def attention_rows_check(seed: int = 0) -> CheckOutcome:
    """真实 query 行的注意力概率在保留的 key 上求和为 1"""
    rng = np.random.default_rng(seed)
    worst = 0.0
    with no_grad():
        for mode, side in itertools.product((MaskMode.CAUSAL, MaskMode.BIDIRECTIONAL), PaddingSide):
            config = tiny_encoder_config(mask_mode=mode, padding_side=side)
            batch = Batch.from_sequences(random_sequences(rng, 3, 2, 8, config.vocab_size), side)
            hidden = forward(config, init_params(config, seed), batch)
            for probs in hidden.attention_probs:
                sums = probs.sum(axis=-1)  # [B, H, L]
                real = np.broadcast_to(batch.pad_mask[:, None, :], sums.shape)
                worst = max(worst, float(np.max(np.abs(sums[real] - 1.0))))
    return CheckOutcome("attention_rows", worst <= 1e-9, f"最大偏差 {worst:.2e}")


def pad_invariance_check(seed: int = 0, pooling_cases: Sequence[str] = POOLING_CASES) -> CheckOutcome:
    """所有 掩码模式 x 池化方式 x 填充方向 组合下，改写填充 token 不改变 logits"""
    rng = np.random.default_rng(seed)
    modes = [(MaskMode.CAUSAL, 0), (MaskMode.BIDIRECTIONAL, 0), (MaskMode.PREFIX, 3)]
    with no_grad():
        for (mode, prefix_len), text, side in itertools.product(modes, pooling_cases, PaddingSide):
            config = tiny_encoder_config(mask_mode=mode, prefix_len=prefix_len, padding_side=side)
            model = EncoderModel.build(config, PoolingSpec.parse(text), TaskHead(HeadKind.CLASSIFICATION, 3, 8), seed)
            batch = model.make_batch(random_sequences(rng, 4, 2, 8, config.vocab_size))
            scrambled = scramble_pads(batch, rng, config.vocab_size)
            if not np.array_equal(model.predict(batch).data, model.predict(scrambled).data):
                return CheckOutcome("pad_invariance", False, f"{config.mask_label}/{text}/{side.value}")
    return CheckOutcome("pad_invariance", True, f"{len(modes) * len(pooling_cases) * 2} 个组合")


# ---------------------------------------------------------------- 损失与指标闭式值

def loss_oracle_check() -> CheckOutcome:
    cases = {
        "listwise uniform = ln 4": (
            listwise_softmax_loss(np.array([[1.0, 0, 0, 0]]), Tensor(np.zeros((1, 4)))).item(), math.log(4)),
        "listwise margin 20": (
            listwise_softmax_loss(np.array([[1.0, 0]]), Tensor([[10.0, -10.0]])).item(), math.log1p(math.exp(-20))),
        "classification uniform = ln 3": (
            classification_loss(np.array([1]), Tensor(np.zeros((1, 3)))).item(), math.log(3)),
        "regression (1+9)/2": (regression_loss(np.zeros(2), Tensor([1.0, 3.0])).item(), 5.0),
        "ndcg second place": (ndcg_at_k([[0, 1, 0]], 10), 1.0 / math.log2(3)),
        "mrr cutoff": (mrr_at_k([[0, 0, 1]], 2), 0.0),
        "mrr third": (mrr_at_k([[0, 0, 1]], 3), 1.0 / 3.0),
    }
    failed = [name for name, (got, expected) in cases.items() if abs(got - expected) > 1e-9]
    return CheckOutcome("loss_oracles", not failed, ", ".join(failed) or f"{len(cases)} 个闭式值")


def run_selftest(seed: int = 0, quick: bool = False) -> List[CheckOutcome]:
    """
    运行完整自检套件

    Args:
        quick: 端到端梯度校验只跑一个实例，掩码扰动减少到 20 次
    """
    outcomes: List[CheckOutcome] = []
    grad_results = primitive_gradient_checks(seed) + model_gradient_checks(seed, instances=1 if quick else 3)
    for result in grad_results:
        if not result.passed:
            logger.error("梯度校验失败 %s: 相对误差 %.3e", result.name, result.max_rel_error)
    worst = max(grad_results, key=lambda r: r.max_rel_error)
    outcomes.append(CheckOutcome(
        "gradients", all(r.passed for r in grad_results),
        f"{len(grad_results)} 项，最大相对误差 {worst.max_rel_error:.2e} ({worst.name})"))
    outcomes.append(causality_check(seed, trials=20 if quick else 100))
    outcomes.append(prefix_equivalence_check(seed))
    outcomes.append(attention_rows_check(seed))
    outcomes.append(pad_invariance_check(seed))
    outcomes.append(loss_oracle_check())
    for outcome in outcomes:
        log = logger.info if outcome.passed else logger.error
        log("%s %s: %s", "通过" if outcome.passed else "失败", outcome.name, outcome.detail)
    return outcomes
