"""Equivalence checks, weight cosine similarity, expert load statistics and FLOP accounting."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .checkpoint import Checkpoint, expert_prefix, mlp_prefix
from .config import ModelConfig
from .errors import DimensionError
from .model import MoeLayer, RoutingOutcome, dense_mlp, moe_forward, toynet_forward
from .numerics import Rng, layer_norm, row_sum
from .upcycle import shard_dense_mlp

DEAD_SHARE = 0.01


def _row_norms(x: np.ndarray) -> np.ndarray:
    x = np.ascontiguousarray(x, dtype=np.float64)
    return np.sqrt(row_sum(x * x))


def _rel(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    out = np.zeros_like(num)
    nz = den > 0
    out[nz] = num[nz] / den[nz]
    out[~nz & (num > 0)] = np.inf
    return out


@dataclass
class EquivalenceReport:
    max_abs_diff: float
    max_rel_diff: float
    mean_output_ratio: float
    logits_max_rel_diff: float
    tolerance: float
    passed: bool
    per_layer: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def _check_compatible(dense: Checkpoint, other: Checkpoint) -> None:
    a, b = dense.config, other.config
    for attr in ("num_layers", "hidden_size", "ffn_hidden", "vocab_size", "activation"):
        if getattr(a, attr) != getattr(b, attr):
            raise DimensionError(f"architecture mismatch in {attr}: {getattr(a, attr)} vs {getattr(b, attr)}")
    if a.moe is not None:
        raise DimensionError("the reference checkpoint must be dense")


def verify_equivalence(
    dense: Checkpoint, moe: Checkpoint, tokens: int = 32, seed: int = 0, tolerance: float = 1e-6
) -> EquivalenceReport:
    """Compare each MoE layer against the dense MLP it replaced on identical inputs.

    Every layer sees the dense network's own normalised hidden states for
    ``tokens`` random token ids, so errors do not compound across layers.
    Relative differences are per-token L2 ratios ``|moe - dense| / |dense|``;
    the final logits of both networks are compared the same way. Passes iff
    the largest relative difference is at most ``tolerance``.
    """
    _check_compatible(dense, moe)
    cfg = dense.config
    ids = Rng(seed).child("verify/tokens").integers(0, cfg.vocab_size, tokens)
    logits_d, cache = toynet_forward(dense, ids)
    logits_m, _ = toynet_forward(moe, ids)

    per_layer, max_abs, max_rel, ratios = [], 0.0, 0.0, []
    for i in range(cfg.num_layers):
        n, _ = layer_norm(cache.hiddens[i], dense[f"layers.{i}.norm.gain"], dense[f"layers.{i}.norm.bias"])
        y_d = dense_mlp(dense.mlp(mlp_prefix(i)), n, cfg.activation)
        if moe.config.moe is None:
            y_m = dense_mlp(moe.mlp(mlp_prefix(i)), n, cfg.activation)
        else:
            y_m, _ = moe_forward(MoeLayer.from_checkpoint(moe, i), n)
        diff = y_m.astype(np.float64) - y_d.astype(np.float64)
        norm_d = _row_norms(y_d)
        rel = _rel(_row_norms(diff), norm_d)
        ratio = _rel(_row_norms(y_m), norm_d)
        layer = {
            "layer": i,
            "max_abs_diff": float(np.abs(diff).max()),
            "max_rel_diff": float(rel.max()),
            "mean_output_ratio": float(ratio.mean()),
        }
        per_layer.append(layer)
        max_abs = max(max_abs, layer["max_abs_diff"])
        max_rel = max(max_rel, layer["max_rel_diff"])
        ratios.append(layer["mean_output_ratio"])

    ldiff = logits_m.astype(np.float64) - logits_d.astype(np.float64)
    logits_rel = float(_rel(_row_norms(ldiff), _row_norms(logits_d)).max())
    worst = max(max_rel, logits_rel)
    return EquivalenceReport(
        max_abs_diff=max_abs,
        max_rel_diff=worst,
        mean_output_ratio=float(np.mean(ratios)),
        logits_max_rel_diff=logits_rel,
        tolerance=tolerance,
        passed=bool(worst <= tolerance),
        per_layer=per_layer,
    )


# --- weight similarity ----------------------------------------------------------


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    """Cosine of two flattened weight sets, accumulated sequentially in float64."""
    a = np.ascontiguousarray(a, dtype=np.float64).reshape(1, -1)
    b = np.ascontiguousarray(b, dtype=np.float64).reshape(1, -1)
    if a.shape != b.shape:
        raise DimensionError(f"cannot compare {a.size} weights with {b.size}")
    ab = row_sum(a * b)[0]
    aa = row_sum(a * a)[0]
    bb = row_sum(b * b)[0]
    if aa == 0 or bb == 0:
        return 0.0
    return float(np.clip(ab / np.sqrt(aa * bb), -1.0, 1.0))


def _flat(mlp: dict) -> np.ndarray:
    return np.concatenate([mlp[k].ravel() for k in sorted(mlp)])


def expert_cosine_similarity(moe: Checkpoint, dense: Checkpoint) -> dict:
    """Mean cosine between each expert and its source weights, averaged experts -> layer -> model.

    Granular experts are compared with the dense shard they were cut from. A
    dense ``moe`` argument (continued training) compares MLP with MLP.
    """
    _check_compatible(dense, moe)
    cfg = moe.config
    per_layer, per_expert = [], []
    for i in range(cfg.num_layers):
        source = dense.mlp(mlp_prefix(i))
        if cfg.moe is None:
            sims = [cosine(_flat(moe.mlp(mlp_prefix(i))), _flat(source))]
        else:
            G = cfg.moe.granularity
            shards = [_flat(s) for s in shard_dense_mlp(source, G)]
            sims = [
                cosine(_flat(moe.mlp(expert_prefix(i, e))), shards[e % G]) for e in range(cfg.moe.num_experts)
            ]
        per_expert.append(sims)
        per_layer.append(sum(sims) / len(sims))
    return {"per_layer": per_layer, "overall": sum(per_layer) / len(per_layer), "per_expert": per_expert}


# --- load statistics --------------------------------------------------------------


@dataclass
class LoadStats:
    counts: np.ndarray
    fractions: np.ndarray
    entropy: float
    dead: np.ndarray

    @property
    def min_share(self) -> float:
        """Smallest expert fraction relative to the uniform share ``1/N``."""
        return float(self.fractions.min() * self.fractions.size)

    def to_dict(self) -> dict:
        return {
            "counts": self.counts.tolist(),
            "fractions": self.fractions.tolist(),
            "entropy": self.entropy,
            "dead": self.dead.tolist(),
            "min_share": self.min_share,
        }


def load_stats(outcomes: RoutingOutcome | list[RoutingOutcome]) -> LoadStats:
    """Per-expert share of routed assignments; experts under 1% of the uniform share are flagged dead."""
    if isinstance(outcomes, RoutingOutcome):
        outcomes = [outcomes]
    counts = np.sum([o.load for o in outcomes], axis=0)
    total = counts.sum()
    if total == 0:
        raise DimensionError("load_stats needs at least one routed token")
    fractions = counts / total
    nz = fractions[fractions > 0]
    entropy = float(-(nz * np.log(nz)).sum())
    dead = fractions < DEAD_SHARE / counts.size
    return LoadStats(counts, fractions, entropy, dead)


# --- FLOP accounting -----------------------------------------------------------------


@dataclass
class FlopsBreakdown:
    """Per-token, per-layer FLOPs of the MLP block (2 FLOPs per multiply-accumulate,
    weight matmuls only). ``ratio`` is (routed + shared) / dense MLP;
    ``ratio_with_router`` adds the router matmul."""

    dense_mlp: int
    moe_routed: int
    shared: int
    router: int
    ratio: float
    ratio_with_router: float
    num_layers: int

    @property
    def total_per_token(self) -> int:
        return self.num_layers * (self.moe_routed + self.shared + self.router)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["total_per_token"] = self.total_per_token
        return d


def flops_per_token(config: ModelConfig) -> FlopsBreakdown:
    h, d = config.hidden_size, config.ffn_hidden
    per_col = (6 if config.activation == "swiglu" else 4) * h
    dense = per_col * d
    moe = config.moe
    if moe is None:
        return FlopsBreakdown(dense, dense, 0, 0, 1.0, 1.0, config.num_layers)
    de = d // moe.granularity
    routed = moe.topk * per_col * de
    shared = moe.shared_experts * per_col * de
    router = 2 * h * moe.num_experts
    return FlopsBreakdown(
        dense_mlp=dense,
        moe_routed=routed,
        shared=shared,
        router=router,
        ratio=(routed + shared) / dense,
        ratio_with_router=(routed + shared + router) / dense,
        num_layers=config.num_layers,
    )
