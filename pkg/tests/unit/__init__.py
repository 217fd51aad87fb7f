"""
单元测试模块
每个核心模块一个测试文件
"""
