"""Causal-enhanced spatio-temporal forecaster."""

from .checkpoint import CheckpointError, ModelState, load_checkpoint, save_checkpoint
from .config import FEATURE_SCALE, ModelConfig
from .model import (
    CAUSAL_PARAMS,
    G_RAW_INIT,
    Batch,
    ForwardOutput,
    attention_block,
    autoregressive_mask,
    base_counterfactual,
    causal_embedding,
    encode_neighbors,
    forward,
    graph_prior_attention,
    gru_encode,
    init_params,
    positional_encoding,
    spatiotemporal_fuse,
)

__all__ = [
    "CAUSAL_PARAMS", "FEATURE_SCALE", "G_RAW_INIT", "Batch", "CheckpointError", "ForwardOutput",
    "ModelConfig", "ModelState", "attention_block", "autoregressive_mask", "base_counterfactual",
    "causal_embedding", "encode_neighbors", "forward", "graph_prior_attention", "gru_encode",
    "init_params", "load_checkpoint", "positional_encoding", "save_checkpoint",
    "spatiotemporal_fuse",
]
