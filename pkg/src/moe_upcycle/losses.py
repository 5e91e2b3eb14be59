"""Language-model loss, load-balancing aux loss, router z-loss and the combined objective."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .checkpoint import Checkpoint
from .errors import ArgumentError
from .model import RoutingOutcome, toynet_backward, toynet_forward
from .numerics import col_sum, row_logsumexp, row_softmax, row_sum, softmax_grad


def _mean(v: np.ndarray) -> float:
    return float(row_sum(v.reshape(1, -1))[0]) / v.size


def cross_entropy(logits: np.ndarray, targets) -> tuple[float, np.ndarray]:
    """Mean token cross-entropy in nats and its gradient w.r.t. the logits."""
    targets = np.asarray(targets, dtype=np.int64).ravel()
    t, V = logits.shape
    if targets.shape != (t,):
        raise ArgumentError(f"expected {t} targets, got {targets.shape}")
    if targets.size and (targets.min() < 0 or targets.max() >= V):
        raise ArgumentError(f"targets must lie in [0, {V})")
    lse = row_logsumexp(logits)
    picked = logits[np.arange(t), targets]
    loss = _mean(lse - picked)
    grad = row_softmax(logits)
    grad[np.arange(t), targets] -= 1
    return loss, grad / logits.dtype.type(t)


def expert_fractions(outcome: RoutingOutcome) -> np.ndarray:
    """Fraction of routed (token, slot) assignments that went to each expert."""
    return outcome.load / max(outcome.load.sum(), 1)


def balance_loss(f, mean_prob) -> float:
    """``N * sum_i f_i * mean_prob_i`` for routed fractions ``f`` and mean router probabilities."""
    f = np.asarray(f, dtype=np.float64).ravel()
    mean_prob = np.asarray(mean_prob, dtype=np.float64).ravel()
    if f.shape != mean_prob.shape:
        raise ArgumentError(f"f has {f.size} entries but mean_prob has {mean_prob.size}")
    return f.size * float(np.dot(f, mean_prob))


def aux_load_balance(outcome: RoutingOutcome) -> tuple[float, np.ndarray, np.ndarray, np.ndarray]:
    """Switch-style balance loss ``N * sum_i f_i * mean_prob_i``.

    ``f`` is treated as a constant; the gradient flows through the mean of the
    full softmax. Returns ``(aux_raw, dlogits, f, mean_prob)``.
    """
    probs = outcome.full_probs
    t, n = probs.shape
    f = expert_fractions(outcome)
    mean_prob = col_sum(probs) / t
    aux = balance_loss(f, mean_prob)
    dprobs = np.broadcast_to((n * f / t).astype(probs.dtype), probs.shape)
    return aux, softmax_grad(probs, np.ascontiguousarray(dprobs)), f, mean_prob


def z_loss(logits: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean squared log-partition of the router logits and its gradient."""
    t = logits.shape[0]
    lse = row_logsumexp(logits)
    z = _mean(lse * lse)
    return z, (2 / t) * lse[:, None] * row_softmax(logits)


@dataclass
class LossReport:
    lm_loss: float
    aux_loss: float = 0.0
    z_loss: float = 0.0
    total: float = 0.0
    aux_coeff: float = 0.0
    z_coeff: float = 0.0
    per_expert_fraction: list[np.ndarray] = field(default_factory=list)
    mean_router_prob: list[np.ndarray] = field(default_factory=list)

    def load_range(self) -> tuple[float, float] | tuple[None, None]:
        if not self.per_expert_fraction:
            return None, None
        return (
            float(min(f.min() for f in self.per_expert_fraction)),
            float(max(f.max() for f in self.per_expert_fraction)),
        )


def compute_loss(
    ckpt: Checkpoint,
    tokens,
    targets,
    with_grad: bool = True,
    aux_coeff: float | None = None,
    z_coeff: float | None = None,
):
    """Forward the toy net and combine ``lm + aux_coeff*aux + z_coeff*z``.

    ``aux_loss``/``z_loss`` in the report are raw values summed over layers.
    Coefficients default to the checkpoint's MoE config. Returns
    ``(report, grads)``; ``grads`` is None without ``with_grad``.
    """
    moe = ckpt.config.moe
    aux_coeff = (moe.aux_coeff if moe else 0.0) if aux_coeff is None else aux_coeff
    z_coeff = (moe.z_coeff if moe else 0.0) if z_coeff is None else z_coeff

    logits, cache = toynet_forward(ckpt, tokens)
    lm, dlogits = cross_entropy(logits, targets)
    report = LossReport(lm, aux_coeff=aux_coeff if moe else 0.0, z_coeff=z_coeff if moe else 0.0)
    router_dlogits = []
    for outcome in cache.outcomes:
        aux, daux, f, pbar = aux_load_balance(outcome)
        z, dz = z_loss(outcome.logits)
        report.aux_loss += aux
        report.z_loss += z
        report.per_expert_fraction.append(f)
        report.mean_router_prob.append(pbar)
        dt = outcome.logits.dtype.type
        router_dlogits.append(dt(aux_coeff) * daux + dt(z_coeff) * dz)
    report.total = lm + report.aux_coeff * report.aux_loss + report.z_coeff * report.z_loss
    if not with_grad:
        return report, None
    grads = toynet_backward(ckpt, cache, dlogits, router_dlogits if moe else None)
    return report, grads
