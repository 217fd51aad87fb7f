"""
核心模块：张量与自动微分、编码器、池化、任务与训练、指标、消融
"""
