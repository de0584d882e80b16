"""Decoder-only translation with register tokens, built on a small numpy autodiff core."""

from .config import ExperimentConfig
from .corpus import LanguageSet, build_corpus, encode, pivot_graph, bridge_graph
from .layout import Variant, build_layout, build_mask, mask_oracle
from .model import ModelConfig, ModelParams, attach_lora, forward, init_params
from .training import TrainConfig, train

__all__ = [
    "ExperimentConfig",
    "LanguageSet",
    "ModelConfig",
    "ModelParams",
    "TrainConfig",
    "Variant",
    "attach_lora",
    "bridge_graph",
    "build_corpus",
    "build_layout",
    "build_mask",
    "encode",
    "forward",
    "init_params",
    "mask_oracle",
    "pivot_graph",
    "train",
]
