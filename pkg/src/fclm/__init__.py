"""Numerical core for foreground-consistent matting and segmentation training.

Depth-aware distillation, foreground alignment (GRL adversarial + Sinkhorn OT),
prediction-head losses, a paired-foreground compositor, and the matting / DIS
evaluation metrics.
"""

__version__ = "0.1.0"
