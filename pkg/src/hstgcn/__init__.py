"""Hybrid spatio-temporal graph convolution for travel-time forecasting.

The package is organised bottom-up: ``tensor`` (autodiff engine and Adam),
``spectral`` (adjacency and Chebyshev filtering), ``features`` (volume cube
and input windows), ``model``, ``train``, ``evaluate``, ``sim`` (synthetic
scenarios) and ``cli``.
"""

__version__ = "0.1.0"
