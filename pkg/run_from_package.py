#!/usr/bin/env python3
"""
dec2enc - 主启动脚本
用于在未安装包的情况下启动 dec2enc 包中的命令行入口
"""

import sys

if __name__ == "__main__":
    from dec2enc.main_pipeline import main
    sys.exit(main())
