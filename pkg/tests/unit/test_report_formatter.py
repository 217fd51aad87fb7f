"""
报告格式化单元测试
测试 report_formatter.py 中消融表的排序、均值行与 CSV 输出
"""

import unittest
import sys
import tempfile
from pathlib import Path

# 添加项目根目录到路径
project_root = Path(__file__).parent.parent.parent
sys.path.insert(0, str(project_root))

from dec2enc.utils.report_formatter import (
    REPORT_COLUMNS,
    build_ablation_frame,
    loss_curve_frame,
    summarize_means,
    write_csv,
)


def make_rows():
    rows = []
    # 故意打乱顺序，验证排序
    for value, base in [("bidirectional", 0.8), ("causal", 0.4)]:
        for repeat in (1, 0):
            for metric, offset in [("f1", 0.05), ("accuracy", 0.0)]:
                rows.append({
                    "run_id": "unit",
                    "axis": "mask_mode",
                    "axis_value": value,
                    "repeat": repeat,
                    "metric": metric,
                    "value": base + offset + 0.1 * repeat,
                    "support": 10 + repeat,
                    "config_hash": f"{value[:3]}{repeat}",
                    "value_hash": f"{value[:3]}-base",
                })
    return rows


class TestAblationFrame(unittest.TestCase):
    """消融表测试"""

    def setUp(self):
        self.frame = build_ablation_frame(make_rows(), ["causal", "bidirectional"])

    def test_order_and_columns(self):
        """测试列顺序、取值顺序与重复顺序"""
        self.assertEqual(list(self.frame.columns), REPORT_COLUMNS)
        self.assertEqual(len(self.frame), 8 + 4)
        self.assertEqual(list(self.frame["axis_value"][:6]), ["causal"] * 6)
        self.assertEqual(list(self.frame["repeat"][:6]), ["0", "0", "1", "1", "mean", "mean"])
        self.assertEqual(list(self.frame["metric"][:2]), ["accuracy", "f1"])
        print("✓ 消融表排序正确")

    def test_mean_rows(self):
        """测试均值行的数值、支持数与配置哈希"""
        means = self.frame[self.frame["repeat"] == "mean"]
        row = means[(means["axis_value"] == "causal") & (means["metric"] == "accuracy")].iloc[0]
        self.assertAlmostEqual(row["value"], 0.45)
        self.assertEqual(row["config_hash"], "cau-base")
        self.assertIn(int(row["support"]), (10, 11))
        self.assertEqual(set(means["axis"]), {"mask_mode"})
        self.assertEqual(set(means["run_id"]), {"unit"})
        table = summarize_means(self.frame)
        self.assertEqual(list(table.index), ["causal", "bidirectional"])
        self.assertAlmostEqual(table.loc["bidirectional", "f1"], 0.9)
        print("✓ 均值行正确")

    def test_csv_is_stable(self):
        """测试同一结果写出的 CSV 逐字节相同，且使用 \\n 换行"""
        with tempfile.TemporaryDirectory() as tmp:
            a = write_csv(self.frame, Path(tmp) / "a.csv").read_bytes()
            b = write_csv(build_ablation_frame(make_rows(), ["causal", "bidirectional"]),
                          Path(tmp) / "sub" / "b.csv").read_bytes()
        self.assertEqual(a, b)
        self.assertNotIn(b"\r\n", a)
        self.assertTrue(a.startswith(b"run_id,axis,axis_value,repeat,metric,value,support,config_hash\n"))
        print("✓ CSV 输出稳定")

    def test_empty_and_loss_curve(self):
        """测试空结果与损失曲线表"""
        self.assertEqual(list(build_ablation_frame([], []).columns), REPORT_COLUMNS)
        curve = loss_curve_frame([0.9, 0.5])
        self.assertEqual(list(curve["step"]), [0, 1])
        print("✓ 空表与损失曲线正确")


if __name__ == "__main__":
    unittest.main(verbosity=2)
