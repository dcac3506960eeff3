"""Тесты для viprom-lab."""
