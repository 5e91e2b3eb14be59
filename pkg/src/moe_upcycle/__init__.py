"""Dense-to-MoE upcycling toolkit with a deterministic reference MoE engine."""
from .checkpoint import Checkpoint, init_dense_random, load_checkpoint, save_checkpoint
from .config import ModelConfig, MoeConfig
from .diagnostics import expert_cosine_similarity, flops_per_token, load_stats, verify_equivalence
from .numerics import Rng, backend_name
from .upcycle import (
    UpcyclePlan,
    apply_weight_scaling,
    compute_scale_factor,
    shard_dense_mlp,
    upcycle,
    upcycle_coarse,
    virtual_group_init,
)

__version__ = "0.1.0"

__all__ = [
    "Checkpoint",
    "ModelConfig",
    "MoeConfig",
    "Rng",
    "UpcyclePlan",
    "apply_weight_scaling",
    "backend_name",
    "compute_scale_factor",
    "expert_cosine_similarity",
    "flops_per_token",
    "init_dense_random",
    "load_checkpoint",
    "load_stats",
    "save_checkpoint",
    "shard_dense_mlp",
    "upcycle",
    "upcycle_coarse",
    "verify_equivalence",
    "virtual_group_init",
]
