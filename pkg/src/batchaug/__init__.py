"""Batch-augmentation training laboratory.

Trains small models with several augmented copies of each sample folded into
one batch, measures how augmentation decorrelates per-sample gradients, checks
the stability theory for SGD on quadratic models exactly, and simulates the
equivalent multi-worker setup in process.
"""

__version__ = "0.1.0"
