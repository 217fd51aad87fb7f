"""
评估指标单元测试
测试 metrics.py 中的分类、回归与排序指标
"""

import unittest
import sys
from pathlib import Path

import numpy as np
from itertools import permutations

# 添加项目根目录到路径
project_root = Path(__file__).parent.parent.parent
sys.path.insert(0, str(project_root))

from dec2enc.core.metrics import (
    MetricReport,
    accuracy,
    dcg_at_k,
    f1_binary,
    matthews_corr,
    mean_squared_error,
    mrr_at_k,
    ndcg_at_k,
    rank_by_scores,
    ranking_support,
    spearman_corr,
)


def brute_mrr(ranked, k):
    total = 0.0
    for labels in ranked:
        for i, label in enumerate(labels[:k]):
            if label > 0:
                total += 1.0 / (i + 1)
                break
    return total / len(ranked)


def brute_ndcg(labels, k):
    """枚举所有排列取最大 DCG 作为理想值"""
    def dcg(seq):
        return sum((2.0 ** rel - 1.0) / np.log2(i + 2) for i, rel in enumerate(seq[:k]))
    ideal = max(dcg(list(p)) for p in permutations(labels))
    return dcg(list(labels)) / ideal


def brute_confusion(preds, labels):
    tp = tn = fp = fn = 0
    for p, y in zip(preds, labels):
        if p == 1 and y == 1:
            tp += 1
        elif p == 0 and y == 0:
            tn += 1
        elif p == 1:
            fp += 1
        else:
            fn += 1
    return tp, tn, fp, fn


def brute_average_ranks(values):
    ranks = []
    for v in values:
        below = sum(1 for w in values if w < v)
        ties = sum(1 for w in values if w == v)
        ranks.append(below + (ties + 1) / 2.0)
    return ranks


def brute_spearman(x, y):
    rx, ry = brute_average_ranks(list(x)), brute_average_ranks(list(y))
    mx, my = sum(rx) / len(rx), sum(ry) / len(ry)
    cov = sum((a - mx) * (b - my) for a, b in zip(rx, ry))
    vx = sum((a - mx) ** 2 for a in rx)
    vy = sum((b - my) ** 2 for b in ry)
    return 0.0 if vx == 0 or vy == 0 else cov / (vx * vy) ** 0.5


class TestClassificationMetrics(unittest.TestCase):
    """分类指标测试"""

    def test_closed_forms(self):
        """测试手算的 accuracy / F1 / Matthews"""
        preds = [1, 1, 0, 0, 1, 0]
        labels = [1, 0, 0, 1, 1, 0]
        # tp=2 fp=1 tn=2 fn=1
        self.assertAlmostEqual(accuracy(preds, labels), 4 / 6)
        self.assertAlmostEqual(f1_binary(preds, labels), 2 / 3)
        self.assertAlmostEqual(matthews_corr(preds, labels), (4 - 1) / 9)
        print("✓ 分类指标闭式值正确")

    def test_degenerate_cases(self):
        """测试全负预测与分母为零的情形"""
        self.assertEqual(f1_binary([0, 0, 0], [1, 0, 1]), 0.0)
        self.assertEqual(matthews_corr([1, 1, 1], [1, 0, 1]), 0.0)
        self.assertEqual(matthews_corr([1, 0], [1, 0]), 1.0)
        self.assertEqual(accuracy([], []), 0.0)
        with self.assertRaises(ValueError):
            f1_binary([2, 0], [1, 0])
        print("✓ 退化情形处理正确")

    def test_brute_force_oracles(self):
        """测试 F1 / Matthews 在 1000 个随机实例上与逐项计数实现一致"""
        rng = np.random.default_rng(3)
        for _ in range(1000):
            n = int(rng.integers(1, 12))
            preds, labels = rng.integers(0, 2, size=n), rng.integers(0, 2, size=n)
            tp, tn, fp, fn = brute_confusion(preds, labels)
            precision = tp / (tp + fp) if tp + fp else 0.0
            recall = tp / (tp + fn) if tp + fn else 0.0
            f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
            denom = ((tp + fp) * (tp + fn) * (tn + fp) * (tn + fn)) ** 0.5
            mcc = (tp * tn - fp * fn) / denom if denom else 0.0
            self.assertAlmostEqual(f1_binary(preds, labels), f1, delta=1e-12)
            self.assertAlmostEqual(matthews_corr(preds, labels), mcc, delta=1e-12)
        print("✓ F1 / Matthews 与逐项计数一致")


class TestRegressionMetrics(unittest.TestCase):
    """回归指标测试"""

    def test_spearman(self):
        """测试单调变换不变、反序为 -1、常数为 0"""
        rng = np.random.default_rng(0)
        x = rng.standard_normal(50)
        y = x + 0.3 * rng.standard_normal(50)
        rho = spearman_corr(x, y)
        self.assertAlmostEqual(spearman_corr(np.exp(x), y ** 3), rho, places=12)
        self.assertAlmostEqual(spearman_corr(x, -x), -1.0, places=12)
        self.assertEqual(spearman_corr(x, np.ones(50)), 0.0)
        self.assertAlmostEqual(spearman_corr([1, 2, 2, 3], [1, 2, 2, 3]), 1.0, places=12)
        print(f"✓ Spearman 性质成立 (rho={rho:.3f})")

    def test_spearman_oracle(self):
        """测试 1000 个含并列值的随机实例与逐项秩计算一致"""
        rng = np.random.default_rng(4)
        for _ in range(1000):
            n = int(rng.integers(2, 10))
            x = rng.integers(0, 4, size=n).astype(float)
            y = rng.standard_normal(n)
            self.assertAlmostEqual(spearman_corr(x, y), brute_spearman(x, y), delta=1e-12)
        print("✓ Spearman 与逐项秩计算一致")

    def test_mse(self):
        """测试 MSE"""
        self.assertAlmostEqual(mean_squared_error([0.0, 0.0], [1.0, 3.0]), 5.0)
        print("✓ MSE 正确")


class TestRankingMetrics(unittest.TestCase):
    """排序指标测试"""

    def test_rank_by_scores_is_stable(self):
        """测试同分时保持原始顺序"""
        np.testing.assert_array_equal(rank_by_scores([0.5, 0.9, 0.5], [1, 0, 2]), [0, 1, 2])
        print("✓ 同分稳定排序")

    def test_mrr_examples(self):
        """测试第 3 位命中为 1/3，k 截断后为 0"""
        self.assertAlmostEqual(mrr_at_k([[0, 0, 1, 0]], 10), 1 / 3)
        self.assertEqual(mrr_at_k([[0, 0, 1, 0]], 2), 0.0)
        with self.assertRaises(ValueError):
            mrr_at_k([[1]], 0)
        print("✓ MRR 示例正确")

    def test_ndcg_examples(self):
        """测试唯一正例排第 2 为 1/log2(3)，无正例查询被跳过"""
        self.assertAlmostEqual(ndcg_at_k([[0, 1, 0]], 10), 1 / np.log2(3), places=12)
        ranked = [[0, 1, 0], [0, 0, 0]]
        self.assertAlmostEqual(ndcg_at_k(ranked, 10), 1 / np.log2(3), places=12)
        self.assertEqual(ranking_support(ranked), 1)
        self.assertEqual(ndcg_at_k([[0, 0]], 10), 0.0)
        self.assertAlmostEqual(dcg_at_k([3, 0, 1], 2), 7.0)
        print("✓ NDCG 示例正确")

    def test_brute_force_oracles(self):
        """测试 1000 个随机列表与枚举实现一致 (1e-12)"""
        rng = np.random.default_rng(1)
        for _ in range(1000):
            m = int(rng.integers(2, 6))
            labels = rng.integers(0, 3, size=m).astype(float)
            labels[int(rng.integers(m))] = float(rng.integers(1, 3))
            scores = rng.standard_normal(m)
            k = int(rng.integers(1, m + 2))
            ranked = rank_by_scores(scores, labels)
            self.assertAlmostEqual(mrr_at_k([ranked], k), brute_mrr([list(ranked)], k), delta=1e-12)
            self.assertAlmostEqual(ndcg_at_k([ranked], k), brute_ndcg(tuple(ranked), k), delta=1e-12)
        print("✓ 1000 个随机实例与枚举实现一致")

    def test_monotone_in_k_and_swap_up(self):
        """测试 k 增大不降低 MRR；把更相关的文档往前换不降低 MRR 与 NDCG"""
        rng = np.random.default_rng(5)
        for _ in range(200):
            m = int(rng.integers(2, 8))
            ranked = rng.integers(0, 3, size=m).astype(float)
            ranked[int(rng.integers(m))] = 1.0
            for k in range(1, m + 1):
                self.assertGreaterEqual(mrr_at_k([ranked], k + 1), mrr_at_k([ranked], k))
            i, j = sorted(rng.choice(m, size=2, replace=False))
            if ranked[j] > ranked[i]:
                swapped = ranked.copy()
                swapped[i], swapped[j] = ranked[j], ranked[i]
                for k in range(1, m + 1):
                    self.assertGreaterEqual(mrr_at_k([swapped], k), mrr_at_k([ranked], k))
                    self.assertGreaterEqual(ndcg_at_k([swapped], k) + 1e-12, ndcg_at_k([ranked], k))
        print("✓ MRR 对 k 单调，前移相关文档不降低指标")

    def test_monotone_score_transform(self):
        """测试分数做单调变换后排序指标不变"""
        rng = np.random.default_rng(2)
        scores = rng.standard_normal((20, 6))
        labels = (rng.random((20, 6)) > 0.6).astype(float)
        labels[:, 0] = 1.0
        a = [rank_by_scores(s, y) for s, y in zip(scores, labels)]
        b = [rank_by_scores(np.tanh(s) * 5 + 2, y) for s, y in zip(scores, labels)]
        self.assertEqual(mrr_at_k(a), mrr_at_k(b))
        self.assertEqual(ndcg_at_k(a), ndcg_at_k(b))
        print("✓ 排序指标对单调变换不变")


class TestMetricReport(unittest.TestCase):
    """指标结果测试"""

    def test_range_checks(self):
        """测试取值范围校验"""
        MetricReport("matthews", -0.5, 10)
        MetricReport("mse", 12.0, 10)
        MetricReport("ndcg@10", 1.0, 3)
        with self.assertRaises(ValueError):
            MetricReport("accuracy", 1.2, 10)
        with self.assertRaises(ValueError):
            MetricReport("mrr@10", -0.1, 10)
        self.assertEqual(MetricReport("accuracy", 0.5, 4).to_dict(), {"metric": "accuracy", "value": 0.5, "support": 4})
        print("✓ 指标范围校验生效")


if __name__ == "__main__":
    unittest.main(verbosity=2)
