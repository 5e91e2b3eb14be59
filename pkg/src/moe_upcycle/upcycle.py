"""Dense -> MoE conversion: coarse duplication, granular sharding with virtual
groups, weight scaling, FFN permutation and partial reinitialisation.

Experts are laid out replica-major: expert ``r*G + g`` is a copy of dense
shard ``g`` in replica ``r``. With one shared router vector per replica and
lowest-index tie-breaking in top-k, selecting ``T = k*G`` experts always picks
``k`` complete replicas.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass, replace

import numpy as np

from .checkpoint import (
    INIT_STD,
    Checkpoint,
    expert_prefix,
    mlp_keys,
    mlp_prefix,
    router_name,
    shared_prefix,
    tensor_shapes,
)
from .config import MoeConfig
from .errors import ArgumentError, ConfigError
from .numerics import Rng

ROUTER_INITS = ("random", "virtual_group", "zero")


@dataclass(frozen=True)
class UpcyclePlan:
    expansion: int
    granularity: int = 1
    topk: int = 1
    shared_experts: int = 0
    router_order: str = "softmax_then_topk"
    router_init: str = "random"
    compensation: str = "none"
    output_scale: float | None = None
    permute_ffn: bool = False
    reinit_fraction: float = 0.0
    seed: int = 0
    aux_coeff: float = 1e-2
    z_coeff: float = 0.0

    def moe_config(self) -> MoeConfig:
        return MoeConfig(
            expansion=self.expansion,
            granularity=self.granularity,
            topk=self.topk,
            shared_experts=self.shared_experts,
            router_order=self.router_order,
            compensation=self.compensation,
            output_scale=self.output_scale,
            aux_coeff=self.aux_coeff,
            z_coeff=self.z_coeff,
        )

    @property
    def scale_factor(self) -> float:
        if self.compensation != "weight_scaling":
            return 1.0
        return compute_scale_factor(self.expansion, self.granularity, self.topk)

    def validate(self, ffn_hidden: int | None = None) -> None:
        self.moe_config().validate(ffn_hidden)
        if self.router_init not in ROUTER_INITS:
            raise ConfigError(f"router_init must be one of {ROUTER_INITS}")
        if not 0.0 <= self.reinit_fraction <= 1.0:
            raise ConfigError("reinit_fraction must lie in [0, 1]")
        if self.topk % self.granularity:
            warnings.warn(
                f"topk {self.topk} is not a multiple of granularity {self.granularity}: "
                "top-k cannot select whole replicas",
                stacklevel=3,
            )

    def to_dict(self) -> dict:
        return asdict(self)


def compute_scale_factor(E: int, G: int, T: int) -> float:
    """Weight multiplier ``(E*G**2/T)**(1/3)`` applied to w1 and w2 of every routed expert."""
    if min(E, G, T) < 1:
        raise ArgumentError("E, G and T must be >= 1")
    return float(np.cbrt(E * G * G / T))


def shard_dense_mlp(mlp: dict, G: int) -> list[dict]:
    """Split an MLP into G contiguous slices of the FFN axis; the slices sum to the MLP."""
    d = mlp["w1"].shape[1]
    if G < 1 or d % G:
        raise ArgumentError(f"granularity {G} does not divide ffn_hidden {d}")
    de = d // G
    shards = []
    for g in range(G):
        cols = slice(g * de, (g + 1) * de)
        shards.append(
            {k: np.ascontiguousarray(w[cols, :] if k == "w2" else w[:, cols]) for k, w in mlp.items()}
        )
    return shards


def permute_ffn(mlp: dict, rng: Rng | int) -> dict:
    """Apply one random permutation to the FFN axis (w1/w3 columns, w2 rows); the function is unchanged."""
    rng = Rng(rng) if isinstance(rng, int) else rng
    perm = rng.permutation(mlp["w1"].shape[1])
    return {k: np.ascontiguousarray(w[perm, :] if k == "w2" else w[:, perm]) for k, w in mlp.items()}


def _require_moe(ckpt: Checkpoint):
    if ckpt.config.moe is None:
        raise ArgumentError("expected an MoE checkpoint")
    return ckpt.config.moe


def apply_weight_scaling(ckpt: Checkpoint, s: float) -> Checkpoint:
    """Multiply every routed expert's w1, w3 and w2 by ``s``; shared experts are left alone."""
    moe = _require_moe(ckpt)
    if moe.compensation != "weight_scaling":
        raise ConfigError("apply_weight_scaling requires compensation == 'weight_scaling'")
    out = ckpt.copy()
    if s == 1.0:
        return out
    factor = np.float32(s)
    for i in range(ckpt.config.num_layers):
        for e in range(moe.num_experts):
            for k in mlp_keys(ckpt.config.activation):
                name = f"{expert_prefix(i, e)}.{k}"
                out.tensors[name] = out.tensors[name] * factor
    return out


def partial_reinit(ckpt: Checkpoint, fraction: float, seed: int) -> Checkpoint:
    """Redraw ``ceil(fraction * params)`` randomly chosen weights of each routed expert from N(0, 0.02²)."""
    moe = _require_moe(ckpt)
    if not 0.0 <= fraction <= 1.0:
        raise ArgumentError("fraction must lie in [0, 1]")
    out = ckpt.copy()
    if fraction == 0.0:
        return out
    rng = Rng(seed).child("reinit")
    keys = mlp_keys(ckpt.config.activation)
    for i in range(ckpt.config.num_layers):
        for e in range(moe.num_experts):
            prefix = expert_prefix(i, e)
            parts = [out.tensors[f"{prefix}.{k}"] for k in keys]
            flat = np.concatenate([p.ravel() for p in parts])
            count = math.ceil(round(fraction * flat.size, 9))
            stream = rng.child(prefix)
            pos = stream.choice(flat.size, count, replace=False)
            flat[pos] = stream.normal(count, INIT_STD)
            start = 0
            for k, p in zip(keys, parts):
                out.tensors[f"{prefix}.{k}"] = flat[start : start + p.size].reshape(p.shape).copy()
                start += p.size
    return out


def _router(rng: Rng, h: int, plan: UpcyclePlan) -> np.ndarray:
    E, G = plan.expansion, plan.granularity
    if plan.router_init == "zero":
        return np.zeros((h, E * G), np.float32)
    if plan.router_init == "virtual_group":
        per_replica = rng.normal((h, E), INIT_STD)
        return np.ascontiguousarray(np.repeat(per_replica, G, axis=1))
    return rng.normal((h, E * G), INIT_STD)


def upcycle(dense: Checkpoint, plan: UpcyclePlan) -> Checkpoint:
    """Convert a dense checkpoint into an MoE checkpoint following ``plan``.

    Embedding, head and block layer norms are copied untouched. The plan, the
    scale factor and the SHA-256 of the source checkpoint are written to
    ``metadata["upcycle"]``.
    """
    cfg = dense.config
    if cfg.moe is not None:
        raise ConfigError("source checkpoint is already an MoE model")
    plan.validate(cfg.ffn_hidden)
    moe_cfg = plan.moe_config()
    target = cfg.with_moe(moe_cfg)
    rng = Rng(plan.seed)
    keys = mlp_keys(cfg.activation)
    shapes = tensor_shapes(target)

    tensors: dict[str, np.ndarray] = {}
    for name in shapes:
        if name in dense.tensors:
            tensors[name] = dense[name].copy()
    for i in range(cfg.num_layers):
        shards = shard_dense_mlp(dense.mlp(mlp_prefix(i)), plan.granularity)
        tensors[router_name(i)] = _router(rng.child(router_name(i)), cfg.hidden_size, plan)
        for r in range(plan.expansion):
            for g, shard in enumerate(shards):
                e = r * plan.granularity + g
                prefix = expert_prefix(i, e)
                expert = {k: v.copy() for k, v in shard.items()}
                if plan.permute_ffn:
                    expert = permute_ffn(expert, rng.child(f"{prefix}/permute"))
                for k in keys:
                    tensors[f"{prefix}.{k}"] = expert[k]
        for s in range(plan.shared_experts):
            # zero w2 keeps the upcycled function equal to the source at step 0
            prefix = shared_prefix(i, s)
            for k in keys:
                name = f"{prefix}.{k}"
                if k == "w2":
                    tensors[name] = np.zeros(shapes[name], np.float32)
                else:
                    tensors[name] = rng.child(name).normal(shapes[name], INIT_STD)
        if moe_cfg.compensation == "post_expert_layernorm":
            tensors[f"layers.{i}.moe.post_ln.gain"] = np.ones(cfg.hidden_size, np.float32)
            tensors[f"layers.{i}.moe.post_ln.bias"] = np.zeros(cfg.hidden_size, np.float32)

    ordered = {name: tensors[name] for name in shapes}
    out = Checkpoint(target, ordered, {})
    if plan.reinit_fraction > 0:
        out = partial_reinit(out, plan.reinit_fraction, plan.seed)
    if plan.compensation == "weight_scaling":
        out = apply_weight_scaling(out, plan.scale_factor)
    out.metadata = {
        "source": dense.metadata,
        "upcycle": {
            "plan": plan.to_dict(),
            "scale_factor": plan.scale_factor,
            "source_digest": dense.digest(),
        },
    }
    return out


def upcycle_coarse(
    dense: Checkpoint,
    E: int,
    T: int,
    router_order: str = "topk_then_softmax",
    seed: int = 0,
    **options,
) -> Checkpoint:
    """Coarse upcycling: E full copies of the MLP and a random router."""
    if options.get("granularity", 1) != 1:
        raise ConfigError("upcycle_coarse is the G == 1 path; use virtual_group_init for G > 1")
    options.pop("granularity", None)
    plan = UpcyclePlan(expansion=E, granularity=1, topk=T, router_order=router_order, seed=seed, **options)
    return upcycle(dense, plan)


def virtual_group_init(
    dense: Checkpoint,
    E: int,
    G: int,
    T: int,
    seed: int = 0,
    router_order: str = "softmax_then_topk",
    zero_router: bool = False,
    **options,
) -> Checkpoint:
    """Granular upcycling where every replica of the G shards shares one router vector."""
    plan = UpcyclePlan(
        expansion=E,
        granularity=G,
        topk=T,
        router_order=router_order,
        router_init="zero" if zero_router else "virtual_group",
        seed=seed,
        **options,
    )
    return upcycle(dense, plan)


def plan_from_dict(d: dict) -> UpcyclePlan:
    try:
        return UpcyclePlan(**d)
    except TypeError as exc:
        raise ConfigError(f"bad upcycle plan: {exc}") from None


def with_plan(plan: UpcyclePlan, **changes) -> UpcyclePlan:
    return replace(plan, **changes)
