"""Blind deconvolution and demixing by regularized Wirtinger gradient descent."""

__version__ = "0.1.0"
