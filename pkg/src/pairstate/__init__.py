"""Learning a continuous disease-state scale from noisy ordinal progression
labels on image pairs, at desk scale.

Subpackages: synthgen (synthetic cohort), pipeline (loading, splits,
augmentation, sampling), model (Siamese pair head), objective (losses),
optim/train (optimization), metrics/evaluate (scoring and analyses),
cli (command-line entry point).
"""

__version__ = "0.1.0"
