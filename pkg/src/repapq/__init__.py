"""Post-training quantization for reparameterized VGG-style networks.

Submodules: ``autodiff`` (numpy tensors with reverse-mode gradients),
``graph`` (model representation, file formats), ``fusion`` (branch fusion and
deploy folding), ``quantizers``, ``calibration``, ``analysis``, ``data``,
``training`` and ``cli``.
"""
from .calibration import CalibConfig, calibrate_model, evaluate, quantize_pipeline
from .fusion import deploy_model, fuse_block, fuse_graph
from .graph import ModelGraph, build_reference_graph, load_model, save_model

__version__ = "0.1.0"

__all__ = [
    "CalibConfig", "calibrate_model", "evaluate", "quantize_pipeline",
    "deploy_model", "fuse_block", "fuse_graph",
    "ModelGraph", "build_reference_graph", "load_model", "save_model",
]
