"""Bi-level global graph transformer with collaborative GCN co-training, on numpy."""

from .analysis import (
    AttnView,
    attention_cost,
    attn_k_profile,
    attn_snr,
    cu_reachable,
    denoise_attention,
    empirical_cuk,
    smoothness_frobenius,
    theoretical_cuk,
    theoretical_cuk_closed,
    label_mass_identity,
)
from .graph import Graph, NodeData, load_cora_raw, load_edge_list
from .model import CoBFormer, ModelConfig, collaborative_loss, soft_labels
from .partition import Partition, edge_cut, partition_multilevel
from .synth import SynthSpec, generate_homophilic_graph
from .training import TrainConfig, micro_macro_f1, train_loop

__version__ = "0.1.0"

__all__ = [
    "AttnView", "CoBFormer", "Graph", "ModelConfig", "NodeData", "Partition", "SynthSpec", "TrainConfig",
    "attention_cost", "attn_k_profile", "attn_snr", "collaborative_loss", "cu_reachable", "denoise_attention",
    "edge_cut", "empirical_cuk", "generate_homophilic_graph", "load_cora_raw", "load_edge_list",
    "micro_macro_f1", "partition_multilevel", "smoothness_frobenius", "soft_labels", "theoretical_cuk",
    "theoretical_cuk_closed", "label_mass_identity", "train_loop",
]
