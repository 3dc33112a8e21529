"""Degradation-robust document-image retrieval with a dual-path encoder.

A desk-scale stack: a taped autodiff tensor core, a small vision
transformer whose extra token reads the patch stream through one-way
attention, disentanglement and contrastive training objectives, a
synthetic degraded-document corpus pipeline, and a brute-force dense
retrieval harness with evaluation metrics.
"""

__version__ = "0.1.0"
