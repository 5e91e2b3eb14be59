"""Dense MLP, MoE layer and the attention-free toy network, forward and backward.

Every forward returns ``(output, cache)``; the matching backward consumes the
cache and an upstream gradient and returns the input gradient plus a dict of
parameter gradients. Routed experts are processed in ascending expert order so
the per-token combine and all gradient accumulations are bit-reproducible.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .checkpoint import Checkpoint, expert_prefix, mlp_keys, mlp_prefix, router_name, shared_prefix
from .config import MoeConfig
from .errors import ArgumentError, ConfigError, DimensionError
from .numerics import (
    activation,
    activation_grad,
    check_finite,
    layer_norm,
    layer_norm_grad,
    matmul,
    matmul_grad,
    row_softmax,
    row_sum,
    row_topk,
    softmax_grad,
)

# --- dense MLP ------------------------------------------------------------------


def dense_mlp_forward(mlp: dict, x: np.ndarray, kind: str):
    if x.ndim != 2 or x.shape[1] != mlp["w1"].shape[0]:
        raise DimensionError(f"input {x.shape} does not match w1 {mlp['w1'].shape}")
    z = matmul(x, mlp["w1"])
    gate = matmul(x, mlp["w3"]) if kind == "swiglu" else None
    a = activation(z, kind, gate)
    return matmul(a, mlp["w2"]), (x, z, gate, a)


def dense_mlp_backward(mlp: dict, cache, dy: np.ndarray, kind: str):
    x, z, gate, a = cache
    da, dw2 = matmul_grad(a, mlp["w2"], dy)
    dz, dgate = activation_grad(z, kind, da, gate)
    dx, dw1 = matmul_grad(x, mlp["w1"], dz)
    grads = {"w1": dw1, "w2": dw2}
    if kind == "swiglu":
        dx_g, dw3 = matmul_grad(x, mlp["w3"], dgate)
        dx = dx + dx_g
        grads["w3"] = dw3
    return dx, grads


def dense_mlp(mlp: dict, x: np.ndarray, kind: str) -> np.ndarray:
    return dense_mlp_forward(mlp, x, kind)[0]


# --- routing ----------------------------------------------------------------------


@dataclass
class RoutingOutcome:
    """Per-token routing decision.

    ``indices``/``weights`` are ``tokens x T`` (indices ascending per row).
    ``full_probs`` is the softmax over all experts; under topk_then_softmax it
    is only consumed by the load-balancing loss.
    """

    router_order: str
    logits: np.ndarray
    indices: np.ndarray
    weights: np.ndarray
    full_probs: np.ndarray
    load: np.ndarray

    @property
    def num_experts(self) -> int:
        return self.logits.shape[1]

    @property
    def topk(self) -> int:
        return self.indices.shape[1]


def _outcome(order, logits, probs, indices, weights) -> RoutingOutcome:
    load = np.bincount(indices.ravel(), minlength=logits.shape[1])
    return RoutingOutcome(order, logits, indices, weights, probs, load)


def route_logits(logits: np.ndarray, topk: int, order: str) -> RoutingOutcome:
    check_finite(logits, "router logits")
    probs = row_softmax(logits)
    if order == "softmax_then_topk":
        indices, _ = row_topk(probs, topk)
        weights = np.take_along_axis(probs, indices, axis=1)
    elif order == "topk_then_softmax":
        if topk < 2:
            raise ConfigError("topk_then_softmax requires topk > 1")
        indices, _ = row_topk(logits, topk)
        weights = row_softmax(np.take_along_axis(logits, indices, axis=1))
    else:
        raise ConfigError(f"unknown router order {order!r}")
    return _outcome(order, logits, probs, indices, weights)


def route_softmax_then_topk(router: np.ndarray, x: np.ndarray, topk: int) -> RoutingOutcome:
    """Softmax over all experts, keep the top-k probabilities without renormalising."""
    return route_logits(matmul(x, router), topk, "softmax_then_topk")


def route_topk_then_softmax(router: np.ndarray, x: np.ndarray, topk: int) -> RoutingOutcome:
    """Top-k on raw logits, softmax over the selected logits only."""
    return route_logits(matmul(x, router), topk, "topk_then_softmax")


def routing_backward(outcome: RoutingOutcome, dweights: np.ndarray) -> np.ndarray:
    """Gradient of the combine weights w.r.t. the router logits (selection held fixed)."""
    dlogits = np.zeros_like(outcome.logits)
    if outcome.router_order == "softmax_then_topk":
        dprobs = np.zeros_like(outcome.full_probs)
        np.put_along_axis(dprobs, outcome.indices, dweights, axis=1)
        return softmax_grad(outcome.full_probs, dprobs)
    dsel = softmax_grad(outcome.weights, dweights)
    np.put_along_axis(dlogits, outcome.indices, dsel, axis=1)
    return dlogits


# --- MoE layer --------------------------------------------------------------------


@dataclass
class MoeLayer:
    config: MoeConfig
    activation: str
    router: np.ndarray
    experts: list[dict]
    shared: list[dict]
    post_ln: tuple[np.ndarray, np.ndarray] | None = None

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint, layer: int) -> "MoeLayer":
        moe = ckpt.config.moe
        if moe is None:
            raise ArgumentError("checkpoint has no MoE layers")
        post_ln = None
        if moe.compensation == "post_expert_layernorm":
            post_ln = (ckpt[f"layers.{layer}.moe.post_ln.gain"], ckpt[f"layers.{layer}.moe.post_ln.bias"])
        return cls(
            moe,
            ckpt.config.activation,
            ckpt[router_name(layer)],
            [ckpt.mlp(expert_prefix(layer, e)) for e in range(moe.num_experts)],
            [ckpt.mlp(shared_prefix(layer, s)) for s in range(moe.shared_experts)],
            post_ln,
        )


def moe_forward(layer: MoeLayer, x: np.ndarray, return_cache: bool = False):
    """``y = compensate(sum_i P_i E_i(x)) + sum_s Shared_s(x)``, dropless.

    Returns ``(y, outcome)``, or ``(y, outcome, cache)`` with ``return_cache``.
    """
    cfg = layer.config
    if x.ndim != 2 or x.shape[1] != layer.router.shape[0]:
        raise DimensionError(f"input {x.shape} does not match router {layer.router.shape}")
    outcome = route_logits(matmul(x, layer.router), cfg.topk, cfg.router_order)

    routed = np.zeros_like(x)
    expert_caches = []
    for e, expert in enumerate(layer.experts):
        rows, slots = np.nonzero(outcome.indices == e)
        if rows.size == 0:
            expert_caches.append(None)
            continue
        out, c = dense_mlp_forward(expert, x[rows], layer.activation)
        w = outcome.weights[rows, slots]
        routed[rows] += w[:, None] * out
        expert_caches.append((rows, slots, out, c))

    ln_cache = None
    if cfg.compensation == "output_scale":
        routed = routed * x.dtype.type(cfg.output_scale_value)
    elif cfg.compensation == "post_expert_layernorm":
        routed, ln_cache = layer_norm(routed, *layer.post_ln)

    y = routed
    shared_caches = []
    for mlp in layer.shared:
        out, c = dense_mlp_forward(mlp, x, layer.activation)
        y = y + out
        shared_caches.append(c)
    check_finite(y, "MoE output")
    if return_cache:
        return y, outcome, (x, outcome, expert_caches, ln_cache, shared_caches)
    return y, outcome


def moe_backward(layer: MoeLayer, cache, upstream: np.ndarray, extra_dlogits: np.ndarray | None = None):
    """Backward through one MoE layer.

    ``extra_dlogits`` carries router-loss gradients (aux, z) to add at the
    logits. Returns ``(dx, grads)`` with grads keyed relative to the layer's
    ``moe.`` prefix, e.g. ``"experts.3.w1"``.
    """
    x, outcome, expert_caches, ln_cache, shared_caches = cache
    cfg = layer.config
    grads: dict[str, np.ndarray] = {}
    dx = np.zeros_like(x)

    for s, (mlp, c) in enumerate(zip(layer.shared, shared_caches)):
        dxs, g = dense_mlp_backward(mlp, c, upstream, layer.activation)
        dx += dxs
        for k, v in g.items():
            grads[f"shared.{s}.{k}"] = v

    d_routed = upstream
    if cfg.compensation == "output_scale":
        d_routed = upstream * x.dtype.type(cfg.output_scale_value)
    elif cfg.compensation == "post_expert_layernorm":
        d_routed, dgain, dbias = layer_norm_grad(ln_cache, upstream)
        grads["post_ln.gain"], grads["post_ln.bias"] = dgain, dbias

    dweights = np.zeros_like(outcome.weights)
    for e, (expert, ec) in enumerate(zip(layer.experts, expert_caches)):
        if ec is None:
            for k, v in expert.items():
                grads[f"experts.{e}.{k}"] = np.zeros_like(v)
            continue
        rows, slots, out, c = ec
        dsub = d_routed[rows]
        dweights[rows, slots] = row_sum(dsub * out)
        w = outcome.weights[rows, slots]
        dxe, g = dense_mlp_backward(expert, c, dsub * w[:, None], layer.activation)
        dx[rows] += dxe
        for k, v in g.items():
            grads[f"experts.{e}.{k}"] = v

    dlogits = routing_backward(outcome, dweights)
    if extra_dlogits is not None:
        dlogits = dlogits + extra_dlogits
    dxr, grads["router.weight"] = matmul_grad(x, layer.router, dlogits)
    return dx + dxr, grads


# --- toy network --------------------------------------------------------------------


@dataclass
class NetCache:
    tokens: np.ndarray
    hiddens: list[np.ndarray]
    ln_caches: list
    block_caches: list
    outcomes: list[RoutingOutcome]


def _check_tokens(tokens, vocab: int) -> np.ndarray:
    tokens = np.asarray(tokens, dtype=np.int64).ravel()
    if tokens.size and (tokens.min() < 0 or tokens.max() >= vocab):
        raise ArgumentError(f"token ids must lie in [0, {vocab})")
    return tokens


def toynet_forward(ckpt: Checkpoint, tokens) -> tuple[np.ndarray, NetCache]:
    """embedding -> [layernorm -> MLP or MoE -> residual add] x L -> head logits."""
    cfg = ckpt.config
    tokens = _check_tokens(tokens, cfg.vocab_size)
    h = ckpt["emb.weight"][tokens]
    cache = NetCache(tokens, [], [], [], [])
    for i in range(cfg.num_layers):
        cache.hiddens.append(h)
        n, lnc = layer_norm(h, ckpt[f"layers.{i}.norm.gain"], ckpt[f"layers.{i}.norm.bias"])
        cache.ln_caches.append(lnc)
        if cfg.moe is None:
            m, bc = dense_mlp_forward(ckpt.mlp(mlp_prefix(i)), n, cfg.activation)
        else:
            m, outcome, bc = moe_forward(MoeLayer.from_checkpoint(ckpt, i), n, return_cache=True)
            cache.outcomes.append(outcome)
        cache.block_caches.append(bc)
        h = h + m
    cache.hiddens.append(h)
    return matmul(h, ckpt["head.weight"]), cache


def toynet_backward(
    ckpt: Checkpoint, cache: NetCache, dlogits: np.ndarray, router_dlogits: list | None = None
) -> dict[str, np.ndarray]:
    """Gradients of every model tensor given ``dL/dlogits``.

    ``router_dlogits[i]`` optionally adds a router-loss gradient to layer i's
    router logits.
    """
    cfg = ckpt.config
    grads: dict[str, np.ndarray] = {}
    dh, grads["head.weight"] = matmul_grad(cache.hiddens[-1], ckpt["head.weight"], dlogits)
    for i in reversed(range(cfg.num_layers)):
        if cfg.moe is None:
            prefix = mlp_prefix(i)
            dn, g = dense_mlp_backward(ckpt.mlp(prefix), cache.block_caches[i], dh, cfg.activation)
        else:
            prefix = f"layers.{i}.moe"
            extra = router_dlogits[i] if router_dlogits is not None else None
            dn, g = moe_backward(MoeLayer.from_checkpoint(ckpt, i), cache.block_caches[i], dh, extra)
        for k, v in g.items():
            grads[f"{prefix}.{k}"] = v
        dxn, grads[f"layers.{i}.norm.gain"], grads[f"layers.{i}.norm.bias"] = layer_norm_grad(cache.ln_caches[i], dn)
        dh = dh + dxn
    demb = np.zeros_like(ckpt["emb.weight"])
    np.add.at(demb, cache.tokens, dh)
    grads["emb.weight"] = demb
    return grads


def toynet_logits(ckpt: Checkpoint, tokens) -> np.ndarray:
    return toynet_forward(ckpt, tokens)[0]


__all__ = [
    "MoeLayer",
    "NetCache",
    "RoutingOutcome",
    "dense_mlp",
    "dense_mlp_backward",
    "dense_mlp_forward",
    "mlp_keys",
    "moe_backward",
    "moe_forward",
    "route_logits",
    "route_softmax_then_topk",
    "route_topk_then_softmax",
    "routing_backward",
    "toynet_backward",
    "toynet_forward",
    "toynet_logits",
]
