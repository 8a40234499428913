"""Covert text-trigger and feature-alignment image attacks, desk scale.

A self-contained pipeline: an autodiff engine over numpy, bitmap text
rendering, a learnable covert trigger, tiny contrastively pretrained dual
encoders, the dual-target attack loop, and a transfer-evaluation harness.
"""

__version__ = "0.1.0"
