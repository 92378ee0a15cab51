"""Calibration of finite-strain elastoplastic parameters from full-field data.

Forward plane-stress FE model, FEMU and VFM objectives with
numerically-exact gradients (forward and adjoint local sensitivity
analyses over dual-number AD), synthetic-data studies, and a CLI.
"""

__version__ = "0.1.0"
