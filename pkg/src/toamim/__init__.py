"""Top-of-atmosphere masked-image-modelling pipeline at desk scale.

Stages: synthetic swaths, calibration, EWA compositing, chip sampling,
SwinV2-style masked pre-training, reconstruction scoring and curtain
fine-tuning against a from-scratch FCN.
"""

__version__ = "0.1.0"
