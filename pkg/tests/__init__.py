"""
KAM-SORT 追跡ツールキット テストパッケージ
"""
