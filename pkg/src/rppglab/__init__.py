"""Skin-tone translation of pulse-bearing facial video, at desk scale.

Subpackages and modules:

- ``autodiff``: float64 tensor engine with reverse-mode differentiation
- ``optics``: dichromatic-reflection simulator and pseudo targets
- ``classical``: POS, CHROM and ICA pulse extractors
- ``metrics``: filtering, windowed heart rate and error metrics
- ``neural``: generator, PRN estimator, losses and joint training
- ``harness``: file formats, experiment config, CLI and reports
"""

__version__ = "0.1.0"
