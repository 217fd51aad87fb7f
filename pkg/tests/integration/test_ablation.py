"""
消融网格集成测试
测试 run_ablation 的行数、确定性、并行一致性与错误处理
"""

import unittest
import sys
import json
import re
import tempfile
from pathlib import Path

# 添加项目根目录到路径
project_root = Path(__file__).parent.parent.parent
sys.path.insert(0, str(project_root))

from dec2enc.core.ablation import (
    AblationAxis,
    ExperimentConfig,
    apply_axis,
    config_hash,
    derive_seed,
    load_config_file,
    load_experiment_config,
    run_ablation,
)
from dec2enc.core.errors import AblationRunError, ConfigError
from dec2enc.core.pooling import PoolingKind
from tests.integration.test_pipeline import SMALL_EXPERIMENT


def small_config(**overrides) -> ExperimentConfig:
    data = json.loads(json.dumps(SMALL_EXPERIMENT))
    data["train"]["steps"] = 3
    data.update(overrides)
    return ExperimentConfig.from_dict(data)


class TestRunAblation(unittest.TestCase):
    """消融运行测试"""

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.dir = Path(self.tmp.name)
        self.base = small_config()

    def tearDown(self):
        self.tmp.cleanup()

    def test_rows_and_hashes(self):
        """测试 2 个取值 x 2 次重复 x 3 个指标 + 6 个均值行 = 18 行"""
        frame = run_ablation(self.base, "mask_mode", ["causal", "bidirectional"], n_threads=1)
        self.assertEqual(len(frame), 18)
        self.assertEqual(list(frame["axis_value"].unique()), ["causal", "bidirectional"])
        means = frame[frame["repeat"] == "mean"]
        self.assertEqual(len(means), 6)
        per_run = frame[frame["repeat"] != "mean"]
        for value_hash in frame["config_hash"]:
            self.assertRegex(value_hash, re.compile(r"^[0-9a-f]{12}$"))
        # 两次重复使用不同的派生种子，因此配置哈希不同
        causal = per_run[per_run["axis_value"] == "causal"]
        self.assertEqual(causal["config_hash"].nunique(), 2)
        print("✓ 消融行数与哈希正确")

    def test_csv_byte_identical(self):
        """测试两次运行与 1/2 线程运行写出的 CSV 逐字节相同"""
        paths = [self.dir / "a.csv", self.dir / "b.csv", self.dir / "c.csv"]
        run_ablation(self.base, AblationAxis.MASK_MODE, ["causal", "bidirectional"], 1, paths[0])
        run_ablation(self.base, AblationAxis.MASK_MODE, ["causal", "bidirectional"], 1, paths[1])
        run_ablation(self.base, AblationAxis.MASK_MODE, ["causal", "bidirectional"], 2, paths[2])
        contents = [p.read_bytes() for p in paths]
        self.assertEqual(contents[0], contents[1])
        self.assertEqual(contents[0], contents[2])
        print("✓ 消融 CSV 可复现且与线程数无关")

    def test_failed_cell_reports_config(self):
        """测试单元失败时抛出 AblationRunError 并附带完整配置"""
        with self.assertRaises(AblationRunError) as ctx:
            run_ablation(self.base, "pooling", ["mean", "first_k:30"], n_threads=1)
        self.assertIn('"k": 30', ctx.exception.resolved_config)
        print("✓ 失败单元附带配置")

    def test_invalid_grids(self):
        """测试未知轴、重复取值、空取值与非注意力基线上的容量轴"""
        with self.assertRaises(ConfigError):
            run_ablation(self.base, "depth", [1, 2])
        with self.assertRaises(ConfigError):
            run_ablation(self.base, "mask_mode", ["causal", "CAUSAL"])
        with self.assertRaises(ConfigError):
            run_ablation(self.base, "mask_mode", [])
        with self.assertRaises(ConfigError):
            run_ablation(self.base, "pooler_capacity", ["1x1"])
        print("✓ 非法网格被拒绝")


class TestAxisAndConfig(unittest.TestCase):
    """轴取值与配置测试"""

    def setUp(self):
        self.base = small_config()

    def test_axis_labels(self):
        """测试各轴的取值标签，且只修改一个轴"""
        cfg, label = apply_axis(self.base, AblationAxis.DROPOUT, 0.05)
        self.assertEqual(label, "0.05")
        self.assertEqual((cfg.encoder.attn_dropout, cfg.encoder.ffn_dropout), (0.05, 0.05))
        self.assertEqual(apply_axis(self.base, AblationAxis.DROPOUT, 0)[1], "0")
        cfg, label = apply_axis(self.base, AblationAxis.MASK_MODE, "prefix:4")
        self.assertEqual((label, cfg.encoder.prefix_len), ("prefix:4", 4))
        self.assertEqual(cfg.pooling, self.base.pooling)
        self.assertEqual(apply_axis(self.base, AblationAxis.PADDING_SIDE, "LEFT")[1], "left")

        attention = small_config(pooling="attention_q:1:1")
        cfg, label = apply_axis(attention, AblationAxis.POOLER_CAPACITY, "2x4")
        self.assertEqual(label, "2x4")
        self.assertEqual((cfg.pooling.kind, cfg.pooling.n_heads, cfg.pooling.n_latents), (PoolingKind.ATTENTION, 2, 4))
        self.assertEqual(attention.pooling.n_latents, 1)
        print("✓ 轴取值标签正确")

    def test_seeds_and_hash(self):
        """测试派生种子确定且互不相同，配置哈希随种子变化"""
        self.assertEqual(derive_seed(0, 1), derive_seed(0, 1))
        self.assertNotEqual(derive_seed(0, 0), derive_seed(0, 1))
        self.assertEqual(config_hash(self.base), config_hash(small_config()))
        self.assertNotEqual(config_hash(self.base), config_hash(self.base.with_seed(7)))
        self.assertEqual(len(config_hash(self.base)), 12)
        print("✓ 种子与配置哈希正确")

    def test_config_files(self):
        """测试 JSON 配置、顶层写法与错误文件"""
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "exp.json"
            path.write_text(json.dumps(dict(SMALL_EXPERIMENT, run_id="json-run")), encoding="utf-8")
            config = load_experiment_config(path)
            self.assertEqual(config.run_id, "json-run")
            self.assertEqual(config.encoder.d_model, 16)

            broken = Path(tmp) / "broken.yaml"
            broken.write_text("experiment: [1, 2\n", encoding="utf-8")
            with self.assertRaises(ConfigError):
                load_config_file(broken)
            listed = Path(tmp) / "list.yaml"
            listed.write_text("- 1\n- 2\n", encoding="utf-8")
            with self.assertRaises(ConfigError):
                load_config_file(listed)
            with self.assertRaises(ConfigError):
                load_config_file(Path(tmp) / "missing.yaml")
        with self.assertRaises(ConfigError):
            ExperimentConfig.from_dict(dict(SMALL_EXPERIMENT, depth=3))
        with self.assertRaises(ConfigError):
            ExperimentConfig.from_dict(dict(SMALL_EXPERIMENT, head={"kind": "regression"}))
        print("✓ 配置文件读取正确")


if __name__ == "__main__":
    unittest.main(verbosity=2)
