import argparse
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

from dotenv import load_dotenv

from .api.synthetic_provider import DatasetSplits, SyntheticTaskSpec, generate, read_jsonl, write_jsonl
from .core.ablation import (
    AblationAxis,
    ExperimentConfig,
    config_hash,
    experiment_section,
    load_config_file,
    run_ablation,
    run_cell,
)
from .core.errors import ConfigError, Dec2EncError
from .core.metrics import MetricReport
from .core.selftest import run_selftest
from .core.tasks import TrainConfig, evaluate, resolve_threads
from .utils.checkpoint import load_model, save_model
from .utils.log_config import setup_logging
from .utils.report_formatter import loss_curve_frame, metric_frame, summarize_means, write_csv

# 获取项目根目录
PROJECT_ROOT = Path(__file__).parent.parent

logger = logging.getLogger("dec2enc")

# 各子命令的默认输出位置
CONFIG: Dict[str, Any] = {
    "data_dir": str(PROJECT_ROOT / "data" / "synthetic"),  # gen 输出目录
    "run_dir": str(PROJECT_ROOT / "runs" / "latest"),  # train 输出目录
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dec2enc", description="decoder 转 encoder 适配实验工具")
    parser.add_argument("--config", help="实验配置文件 (YAML/JSON)，默认 config/experiment.yaml")
    parser.add_argument("--seed", type=int, help="覆盖配置中的随机种子")
    parser.add_argument("--out", help="输出路径（目录或 CSV 文件，视子命令而定）")
    parser.add_argument("--verbose", action="store_true", help="输出 DEBUG 日志")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen", help="生成合成数据集 (train.jsonl / eval.jsonl)")
    gen.add_argument("--task", choices=["cue-recall", "count-regression", "overlap-ranking"], help="覆盖任务类型")

    train = sub.add_parser("train", help="单次训练并保存检查点")
    train.add_argument("--steps", type=int, help="覆盖训练步数")
    train.add_argument("--lr", type=float, help="覆盖学习率")
    train.add_argument("--eval-every", type=int, help="每隔多少步记录一次评估指标")
    train.add_argument("--data", help="从 gen 输出目录读取数据集，而不是重新生成")

    ablate = sub.add_parser("ablate", help="沿单个轴运行消融网格")
    ablate.add_argument("--axis", choices=[a.value for a in AblationAxis], help="消融轴，默认取配置文件")
    ablate.add_argument("--values", nargs="+", help="轴取值，例如 causal bidirectional")
    ablate.add_argument("--repeats", type=int, help="覆盖重复次数")
    ablate.add_argument("--steps", type=int, help="覆盖训练步数")
    ablate.add_argument("--threads", type=int, help="并行线程数，默认读取 DEC2ENC_THREADS")

    ev = sub.add_parser("eval", help="在检查点上计算评估指标")
    ev.add_argument("--checkpoint", required=True, help="train 保存的检查点文件")
    ev.add_argument("--data", help="gen 输出目录；缺省时按检查点中的任务配置重新生成评估集")

    selftest = sub.add_parser("selftest", help="运行梯度校验与不变量自检")
    selftest.add_argument("--quick", action="store_true", help="缩减端到端梯度校验与扰动次数")
    return parser


def resolve_experiment(args: argparse.Namespace) -> ExperimentConfig:
    raw = load_config_file(args.config)
    data = experiment_section(raw)
    if args.seed is not None:
        data["seed"] = args.seed
        data["task"] = dict(data.get("task") or {}, seed=args.seed)
    config = ExperimentConfig.from_dict(data)
    # 实验种子同时决定编码器初始化与训练顺序
    return config.with_seed(config.seed)


def print_reports(title: str, reports: Sequence[MetricReport]) -> None:
    print(f"\n========== {title} ==========")
    for report in reports:
        print(f"{report.name:<10} {report.value:.4f}  (support={report.support})")
    print("=" * (len(title) + 22) + "\n")


def cmd_gen(args: argparse.Namespace) -> int:
    config = resolve_experiment(args)
    spec = config.task
    if args.task and args.task != spec.name.value:
        # 换任务时词表与长度约束不同，改用该任务的默认参数
        spec = SyntheticTaskSpec(name=args.task, seed=spec.seed)
    splits = generate(spec)
    out_dir = Path(args.out or CONFIG["data_dir"])
    write_jsonl(splits.train, out_dir / "train.jsonl")
    write_jsonl(splits.eval, out_dir / "eval.jsonl")
    print(f"已生成 {spec.name.value}: 训练 {len(splits.train)} 条，评估 {len(splits.eval)} 条 -> {out_dir}")
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    config = resolve_experiment(args)
    overrides = {"steps": args.steps, "lr": args.lr, "eval_every": args.eval_every}
    config.train = TrainConfig.from_dict(
        dict(config.train.to_dict(), **{k: v for k, v in overrides.items() if v is not None}))

    if args.data:
        data_dir = Path(args.data)
        kind, n_classes = config.head.kind.value, config.head.n_classes
        splits = DatasetSplits(read_jsonl(data_dir / "train.jsonl", kind, n_classes),
                               read_jsonl(data_dir / "eval.jsonl", kind, n_classes), config.task)
    else:
        splits = generate(config.task)

    model, result, reports = run_cell(config, splits, resolve_threads())
    out_dir = Path(args.out or CONFIG["run_dir"])
    save_model(out_dir / "model.ckpt", model, {"experiment": config.to_dict(), "config_hash": config_hash(config)})
    write_csv(loss_curve_frame(result.losses), out_dir / "loss_curve.csv")
    if result.eval_trace:
        write_csv(metric_frame(result.eval_trace), out_dir / "eval_trace.csv")
    write_csv(metric_frame([r.to_dict() for r in reports]), out_dir / "metrics.csv")
    print_reports(f"训练完成 ({config.task.name.value}, config_hash={config_hash(config)})", reports)
    return 0


def cmd_ablate(args: argparse.Namespace) -> int:
    raw = load_config_file(args.config)
    config = resolve_experiment(args)
    if args.repeats is not None:
        config.repeats = args.repeats
    if args.steps is not None:
        config.train.steps = args.steps
    config.validate()

    grid = raw.get("ablation") or {}
    axis = args.axis or grid.get("axis", AblationAxis.MASK_MODE.value)
    values: Optional[List[Any]] = args.values
    if values is None and not args.axis:
        values = grid.get("values")
    output = args.out or config.output_csv
    frame = run_ablation(config, axis, values, n_threads=args.threads, output_csv=output)

    print(f"\n========== 消融: {axis} (重复 {config.repeats} 次，均值) ==========")
    print(summarize_means(frame).to_string(float_format=lambda v: f"{v:.4f}"))
    print(f"详细结果已保存到: {output}\n")
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    model, metadata = load_model(args.checkpoint)
    if args.data:
        dataset = read_jsonl(Path(args.data) / "eval.jsonl", model.head.kind.value, model.head.n_classes)
    else:
        experiment = metadata.get("experiment")
        if not experiment:
            raise ConfigError("检查点中没有任务配置，请通过 --data 指定评估集")
        dataset = generate(SyntheticTaskSpec.from_dict(experiment["task"])).eval
    reports = evaluate(model, dataset, n_threads=resolve_threads())
    if args.out:
        write_csv(metric_frame([r.to_dict() for r in reports]), args.out)
    print_reports(f"评估 {Path(args.checkpoint).name}", reports)
    return 0


def cmd_selftest(args: argparse.Namespace) -> int:
    outcomes = run_selftest(seed=args.seed or 0, quick=args.quick)
    failed = [o.name for o in outcomes if not o.passed]
    print(f"\n自检 {len(outcomes) - len(failed)}/{len(outcomes)} 项通过")
    if failed:
        print(f"失败项: {', '.join(failed)}")
        return 1
    return 0


COMMANDS = {
    "gen": cmd_gen,
    "train": cmd_train,
    "ablate": cmd_ablate,
    "eval": cmd_eval,
    "selftest": cmd_selftest,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    """
    命令行入口

    退出码：0 成功；1 运行失败（Dec2EncError）；2 参数错误
    """
    load_dotenv()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    setup_logging(args.verbose)
    try:
        return COMMANDS[args.command](args)
    except Dec2EncError as e:
        logger.error("%s", e)
        return 1


if __name__ == "__main__":
    sys.exit(main())
