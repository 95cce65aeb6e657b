"""Numerical laboratory for quasiconformal-type maps, calibration forms and
discrete path modulus."""

__version__ = "0.1.0"
