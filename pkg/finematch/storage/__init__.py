"""
On-disk formats: record files, checkpoints, and CSV tables.
"""
