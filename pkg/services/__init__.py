# services/__init__.py
"""Model, adaptation and benchmark services for the label-shift adapter toolkit."""
