"""
日志配置：统一输出 [INFO] / [WARN] / [ERROR] 风格的状态行
"""

import logging
import sys

_LEVEL_TAGS = {"WARNING": "WARN", "CRITICAL": "ERROR"}


class _TagFormatter(logging.Formatter):
    def format(self, record: logging.LogRecord) -> str:
        tag = _LEVEL_TAGS.get(record.levelname, record.levelname)
        return f"[{tag}] {record.getMessage()}"


def setup_logging(verbose: bool = False) -> None:
    """给包根 logger 安装单个 stderr 处理器；重复调用不会叠加处理器"""
    root = logging.getLogger("dec2enc")
    root.setLevel(logging.DEBUG if verbose else logging.INFO)
    for handler in list(root.handlers):
        root.removeHandler(handler)
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(_TagFormatter())
    root.addHandler(handler)
    root.propagate = False
