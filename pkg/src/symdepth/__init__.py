"""Depth-semantics symbiosis toolkit: autodiff substrate, LG-CAT attention,
NearFarMix augmentation, model assembly, losses and a training CLI."""

__version__ = "0.1.0"
