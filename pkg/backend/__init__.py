"""
Backend modules for the Caption-Flow Lab
"""
