#!/usr/bin/env python3
"""检查运行环境：依赖版本与环境变量加载情况"""

import importlib
import os

from dotenv import load_dotenv

REQUIRED_PACKAGES = [("numpy", "numpy"), ("pandas", "pandas"), ("pyyaml", "yaml"), ("python-dotenv", "dotenv")]


def check_environment() -> int:
    print("=== 依赖检查 ===")
    missing = 0
    for dist_name, module_name in REQUIRED_PACKAGES:
        try:
            module = importlib.import_module(module_name)
            version = getattr(module, "__version__", "未知版本")
            print(f"[SUCCESS] {dist_name} {version}")
        except ImportError:
            print(f"[ERROR] 未安装 {dist_name}，请执行 pip install -r requirements.txt")
            missing += 1

    print("\n=== 环境变量检查 ===")
    try:
        load_dotenv()
        print("[INFO] .env文件已加载")
    except Exception as e:
        print(f"[WARN] 无法加载.env文件: {e}")

    threads = os.getenv("DEC2ENC_THREADS")
    if threads is None:
        print("[INFO] DEC2ENC_THREADS 未配置，按单线程运行")
    elif threads.isdigit() and int(threads) >= 1:
        print(f"[SUCCESS] DEC2ENC_THREADS={threads}")
    else:
        print(f"[WARN] DEC2ENC_THREADS={threads} 不是正整数，将按 1 处理")

    slow = os.getenv("DEC2ENC_SLOW", "0")
    state = "开启" if slow == "1" else "关闭"
    print(f"[INFO] 方向性复现测试 (DEC2ENC_SLOW): {state}")
    return 1 if missing else 0


if __name__ == "__main__":
    raise SystemExit(check_environment())
