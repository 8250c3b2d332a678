"""Volterra series of Gaussian processes for time series (NVKM / IO-NVKM)."""

import jax

jax.config.update("jax_enable_x64", True)

__version__ = "0.1.0"

import warnings as _warnings

import numpy as _np

# gradients of real losses through complex intermediates drop the imaginary
# cotangent by design
_warnings.filterwarnings(
    "ignore",
    message="Casting complex values to real discards the imaginary part",
    category=_np.exceptions.ComplexWarning,
)
