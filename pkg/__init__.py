"""
KAM-SORT 多物体追跡ツールキット パッケージ
"""
