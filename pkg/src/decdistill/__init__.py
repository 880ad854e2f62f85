"""Decoder distillation for set-prediction (DETR-style) detectors, at desk scale."""

__version__ = "0.1.0"
