# scripts/__init__.py
"""Pipeline stages: pretraining, adapter training, benchmark and ablations."""
