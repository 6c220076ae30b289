"""Compartmentalized adapter training and exact unlearning over shard graphs."""

__version__ = "0.1.0"

from shardsafe.embedding_store import (
    EmbeddingDataset,
    SyntheticSpec,
    generate_synthetic,
    load_dataset,
    remove_samples,
    save_dataset,
)
from shardsafe.shard_graph import (
    RefinedShardGraph,
    ShardGraph,
    build_bilevel,
    build_disjoint_cliques,
    build_random_degree,
    build_uniform,
    refine,
)
from shardsafe.inca_adapter import CrossAttentionParams, QueryUnit, TrainConfig, init_shared, train_queries
from shardsafe.prototype import PrototypeBank
from shardsafe.ensemble import LambdaPolicy, SafeModel, fit_safe, safe_predict

__all__ = [
    "CrossAttentionParams",
    "EmbeddingDataset",
    "LambdaPolicy",
    "PrototypeBank",
    "QueryUnit",
    "RefinedShardGraph",
    "SafeModel",
    "ShardGraph",
    "SyntheticSpec",
    "TrainConfig",
    "build_bilevel",
    "build_disjoint_cliques",
    "build_random_degree",
    "build_uniform",
    "fit_safe",
    "generate_synthetic",
    "init_shared",
    "load_dataset",
    "refine",
    "remove_samples",
    "safe_predict",
    "save_dataset",
    "train_queries",
]
