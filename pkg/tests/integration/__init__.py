"""
集成测试模块
测试命令行、消融网格与端到端流程
"""
