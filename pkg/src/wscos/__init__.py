"""Weakly-supervised concealed-object segmentation at desk scale.

Pseudo-labels come from a promptable mask provider queried on augmented
views, fused and weighted by their entropy; a small encoder-decoder with
multi-scale feature grouping is trained on them with a numpy autodiff engine.
"""
__version__ = "0.1.0"

from .errors import (ConfigError, ContractError, FormatError, GenerationError,
                     MaskNotFoundError, PipelineError, ProviderError, TrainingError, WscosError)

__all__ = ["ConfigError", "ContractError", "FormatError", "GenerationError", "MaskNotFoundError",
           "PipelineError", "ProviderError", "TrainingError", "WscosError", "__version__"]
