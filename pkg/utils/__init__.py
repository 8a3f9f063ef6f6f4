# utils/__init__.py
"""Configuration and cost accounting helpers."""
