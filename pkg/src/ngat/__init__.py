"""Neighbor-aware graph attention for implicit-feedback recommendation."""

from .checkpoint import Checkpoint
from .evaluator import RankingReport, evaluate, ndcg_at_k, rank_all, recall_at_k
from .graph import (
    Adjacency,
    EdgeList,
    GraphVanishedError,
    InteractionFormatError,
    InteractionGraph,
    SplitSpec,
    apply_k_core,
    load_interactions,
    split,
)
from .model import (
    VARIANTS,
    AblationParams,
    EmbeddingTable,
    LayerActivations,
    ModelConfig,
    aggregate_layer,
    attention_coefficients,
    backward,
    combine_layers,
    forward,
    init_embeddings,
    pairwise_attention,
    predict,
)
from .sampler import SampledSubgraph, SamplerConfig, sample_subgraph
from .synthetic import PlantedBlocksSpec, dense_reference_forward, generate_planted
from .trainer import MiniBatch, TrainConfig, adam_step, bpr_loss, train

__version__ = "0.1.0"
