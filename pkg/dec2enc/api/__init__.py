"""
数据提供器：合成任务生成与 JSONL 读写
"""
