"""Automated spatio-temporal multi-task learning.

Differentiable search over a five-operation spatio-temporal operation set
with task-specific and shared modules, learned fusion, and a three-phase
pretrain / search / retrain pipeline.
"""

__version__ = "0.1.0"
