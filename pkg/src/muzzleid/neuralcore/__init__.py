"""Minimal reverse-mode network engine on numpy."""

from .checkpoint import load_checkpoint, save_checkpoint
from .layers import (Conv2d, Dense, Flatten, GlobalAvgPool, L2Normalize,
                     MaxPool, ReLU)
from .network import (DETECTOR_INPUT, EMBEDDER_INPUT, Network, NetworkSpec,
                      build_network, detector_spec, embedder_spec,
                      forward_backward)
from .optim import OptimizerState, adam_step, maybe_decay

__all__ = [
    "Conv2d", "Dense", "Flatten", "GlobalAvgPool", "L2Normalize", "MaxPool",
    "ReLU",
    "Network", "NetworkSpec", "build_network", "detector_spec",
    "embedder_spec", "forward_backward", "EMBEDDER_INPUT", "DETECTOR_INPUT",
    "OptimizerState", "adam_step", "maybe_decay",
    "load_checkpoint", "save_checkpoint",
]
