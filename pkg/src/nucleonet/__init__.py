"""Numpy CNNs for nuclear attribute and shape classification.

Hand-written layers with explicit backward passes, a center-weighted
convolutional autoencoder for pretraining, four classifier variants trained
in two feedback cycles, and AuROC evaluation.
"""

from .errors import ConfigError, DataError, NucleonetError, NumericalError

__version__ = "0.1.0"

__all__ = ["ConfigError", "DataError", "NucleonetError", "NumericalError", "__version__"]
