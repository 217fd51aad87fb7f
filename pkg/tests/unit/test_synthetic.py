"""
合成数据提供器单元测试
测试 synthetic_provider.py 中三个任务的生成规则、划分与 JSONL 读写
"""

import unittest
import sys
import tempfile
from collections import Counter
from dataclasses import replace
from pathlib import Path

import numpy as np

# 添加项目根目录到路径
project_root = Path(__file__).parent.parent.parent
sys.path.insert(0, str(project_root))

from dec2enc.api.synthetic_provider import (
    CUE_ID,
    FIRST_CONTENT_ID,
    MARKER_ID,
    SEP_ID,
    SyntheticTaskSpec,
    TaskName,
    generate,
    overlap_heuristic_scores,
    pair_tokens,
    read_jsonl,
    token_class,
    write_jsonl,
)
from dec2enc.core.ablation import ExperimentConfig, desk_cue_recall
from dec2enc.core.errors import ConfigError
from dec2enc.core.metrics import mrr_at_k, rank_by_scores


def small_spec(name: TaskName, **overrides) -> SyntheticTaskSpec:
    settings = dict(name=name, n_train=300, n_eval=80, seed=3)
    settings.update(overrides)
    return SyntheticTaskSpec(**settings)


class TestCueRecall(unittest.TestCase):
    """cue-recall 任务测试"""

    @classmethod
    def setUpClass(cls):
        cls.spec = small_spec(TaskName.CUE_RECALL)
        cls.splits = generate(cls.spec)

    def test_label_follows_cue(self):
        """测试标签等于唯一 CUE 后一个 token 的类别，且 CUE 位于 [L/2, L-2]"""
        for seq, label in zip(self.splits.train.sequences, self.splits.train.labels):
            self.assertEqual(seq.count(CUE_ID), 1)
            cue = seq.index(CUE_ID)
            self.assertTrue(len(seq) // 2 <= cue <= len(seq) - 2, (cue, len(seq)))
            self.assertEqual(token_class(seq[cue + 1], self.spec.n_classes), label)
            self.assertTrue(self.spec.min_len <= len(seq) <= self.spec.seq_len)
        print("✓ cue-recall 标签规则成立")

    def test_bag_of_words_is_near_chance(self):
        """测试只看各类别 token 计数的分类器准确率 < 0.45（4 类）"""
        n_classes = self.spec.n_classes
        correct = 0
        for seq, label in zip(self.splits.eval.sequences, self.splits.eval.labels):
            counts = Counter(token_class(t, n_classes) for t in seq if t >= FIRST_CONTENT_ID)
            guess = max(range(n_classes), key=lambda c: (counts[c], -c))
            correct += int(guess == label)
        acc = correct / len(self.splits.eval)
        self.assertLess(acc, 0.45)
        print(f"✓ 词袋分类器准确率 {acc:.3f}")

    def test_min_len_constraint(self):
        """测试 min_len 小于 2*n_classes+2 时报错"""
        with self.assertRaises(ConfigError):
            SyntheticTaskSpec(TaskName.CUE_RECALL, seq_len=12, min_len=8, n_classes=4)
        print("✓ 序列长度约束生效")


class TestDeskCueRecall(unittest.TestCase):
    """默认实验使用的桌面 cue-recall 任务测试"""

    @classmethod
    def setUpClass(cls):
        cls.spec = replace(desk_cue_recall(), n_train=400, n_eval=100)
        cls.splits = generate(cls.spec)

    def test_is_default_experiment_task(self):
        """测试默认实验配置使用桌面 cue-recall，且每个类别恰有两个 token"""
        task = ExperimentConfig().task
        self.assertEqual(task, desk_cue_recall())
        classes = Counter(token_class(t, task.n_classes) for t in range(FIRST_CONTENT_ID, task.vocab))
        self.assertEqual(set(classes.values()), {2})
        print("✓ 默认任务为每类两个 token 的 cue-recall")

    def test_answer_is_visible_to_few_positions_under_causal(self):
        """测试 CUE 之后（含答案）的位置平均只占行长的三分之一以内"""
        fractions = [(len(seq) - seq.index(CUE_ID) - 1) / len(seq) for seq in self.splits.train.sequences]
        self.assertLess(float(np.mean(fractions)), 1 / 3)
        self.assertLessEqual(max(fractions), 0.5)
        print(f"✓ causal 下能看到答案的位置平均占比 {np.mean(fractions):.3f}")

    def test_bag_of_words_is_near_chance(self):
        """测试只看类别计数的分类器在桌面任务上接近随机"""
        n_classes = self.spec.n_classes
        correct = 0
        for seq, label in zip(self.splits.eval.sequences, self.splits.eval.labels):
            counts = Counter(token_class(t, n_classes) for t in seq if t >= FIRST_CONTENT_ID)
            correct += int(max(range(n_classes), key=lambda c: (counts[c], -c)) == label)
        self.assertLess(correct / len(self.splits.eval), 0.45)
        print(f"✓ 桌面任务词袋准确率 {correct / len(self.splits.eval):.3f}")


class TestCountRegression(unittest.TestCase):
    """count-regression 任务测试"""

    def test_target_is_marker_fraction(self):
        """测试目标等于 MARKER 个数 / 长度"""
        splits = generate(small_spec(TaskName.COUNT_REGRESSION))
        for seq, target in zip(splits.train.sequences, splits.train.labels):
            self.assertAlmostEqual(target, seq.count(MARKER_ID) / len(seq), places=15)
        self.assertEqual(splits.train.kind, "regression")
        print("✓ 计数回归目标正确")


class TestOverlapRanking(unittest.TestCase):
    """overlap-ranking 任务测试"""

    @classmethod
    def setUpClass(cls):
        cls.spec = small_spec(TaskName.OVERLAP_RANKING)
        cls.splits = generate(cls.spec)

    def test_single_positive_contains_query(self):
        """测试每个列表恰有一个正例，且正例包含全部查询词，负例不包含"""
        data = self.splits.train
        for query, docs, labels in zip(data.queries, data.docs, data.labels):
            self.assertEqual(len(docs), self.spec.list_size)
            self.assertEqual(labels.sum(), 1.0)
            for doc, label in zip(docs, labels):
                covered = set(query) <= set(doc)
                self.assertEqual(covered, label == 1.0)
        print("✓ 排序列表结构正确")

    def test_overlap_heuristic_is_perfect(self):
        """测试按查询词重叠数打分的启发式 MRR 为 1.0"""
        data = self.splits.eval
        ranked = [rank_by_scores(overlap_heuristic_scores(q, d), y) for q, d, y in zip(data.queries, data.docs, data.labels)]
        self.assertEqual(mrr_at_k(ranked, 10), 1.0)
        print("✓ 重叠启发式 MRR = 1.0")

    def test_pair_tokens(self):
        """测试 query + [SEP] + doc 拼接"""
        self.assertEqual(pair_tokens([5, 6], [7]), [5, 6, SEP_ID, 7])
        self.assertEqual(self.spec.row_len, self.spec.query_len + 1 + self.spec.doc_len)
        print("✓ 排序输入行拼接正确")


class TestSplitsAndIO(unittest.TestCase):
    """划分、确定性与读写测试"""

    def test_train_eval_disjoint(self):
        """测试训练集与评估集内容不重叠"""
        splits = generate(small_spec(TaskName.CUE_RECALL))
        train = {tuple(s) for s in splits.train.sequences}
        evaluation = {tuple(s) for s in splits.eval.sequences}
        self.assertEqual(train & evaluation, set())
        self.assertEqual((len(splits.train), len(splits.eval)), (300, 80))
        print("✓ 训练/评估集不重叠")

    def test_deterministic(self):
        """测试同种子生成结果相同，不同种子不同"""
        spec = small_spec(TaskName.COUNT_REGRESSION)
        a, b = generate(spec), generate(spec)
        self.assertEqual(a.train.sequences, b.train.sequences)
        np.testing.assert_array_equal(a.train.labels, b.train.labels)
        c = generate(spec, seed=99)
        self.assertNotEqual(a.train.sequences, c.train.sequences)
        print("✓ 生成过程确定")

    def test_jsonl_round_trip(self):
        """测试三种任务的 JSONL 写入后读回一致"""
        with tempfile.TemporaryDirectory() as tmp:
            for name, kind in [(TaskName.CUE_RECALL, "classification"), (TaskName.COUNT_REGRESSION, "regression"),
                               (TaskName.OVERLAP_RANKING, "ranking")]:
                data = generate(small_spec(name, n_train=20, n_eval=5)).train
                path = write_jsonl(data, Path(tmp) / f"{kind}.jsonl")
                loaded = read_jsonl(path, kind, getattr(data, "n_classes", 0))
                np.testing.assert_allclose(loaded.labels, data.labels, rtol=1e-14)
                if kind == "ranking":
                    self.assertEqual((loaded.queries, loaded.docs), (data.queries, data.docs))
                else:
                    self.assertEqual(loaded.sequences, data.sequences)
            with self.assertRaises(ConfigError):
                read_jsonl(Path(tmp) / "regression.jsonl", "ranking")
        print("✓ JSONL 读写一致")

    def test_invalid_specs(self):
        """测试非法任务参数"""
        with self.assertRaises(ConfigError):
            SyntheticTaskSpec(name="sorting")
        with self.assertRaises(ConfigError):
            SyntheticTaskSpec(vocab=5)
        with self.assertRaises(ConfigError):
            SyntheticTaskSpec.from_dict({"colour": "red"})
        with self.assertRaises(ConfigError):
            SyntheticTaskSpec(TaskName.OVERLAP_RANKING, list_size=1)
        print("✓ 非法任务参数被拒绝")


if __name__ == "__main__":
    unittest.main(verbosity=2)
