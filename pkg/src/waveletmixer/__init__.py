"""Multi-scale wavelet-mixer forecasting toolkit.

Subpackages: tensor (autodiff substrate), model (architecture), training,
metrics, uncertainty, attribution, data (container + sampler + synthetic
generator), config and cli (run orchestration).
"""

__version__ = "0.1.0"
