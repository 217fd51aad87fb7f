"""
dec2enc 测试包：unit 为单模块测试，integration 为命令行与消融流程测试
"""
