"""
decoder 转 encoder 适配实验工具包
"""

__version__ = "0.1.0"
