"""Toy training on a synthetic clustered-token task, evaluation and gradient checking."""
from __future__ import annotations

import functools
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, TextIO

import numpy as np

from .checkpoint import Checkpoint, init_dense_random, load_checkpoint, save_checkpoint
from .config import ModelConfig
from .diagnostics import DEAD_SHARE
from .errors import ArgumentError, ConfigError, NumericError, TrainingDivergedError
from .losses import compute_loss, cross_entropy
from .model import toynet_forward
from .numerics import Rng
from .schedule import LrSchedule, OptState, lr_at_step, optimizer_step, schedule_preset
from .upcycle import UpcyclePlan, upcycle

log = logging.getLogger(__name__)

OPT_M = "optim.exp_avg."
OPT_V = "optim.exp_avg_sq."


@dataclass(frozen=True)
class SyntheticTask:
    """Token -> token mapping with cluster structure.

    The vocabulary splits into ``clusters`` equal ranges; token ``t`` maps to
    ``perm_c(t)`` inside its own range, with one fixed random permutation per
    cluster. ``cluster_weights`` skews how often each cluster is sampled
    (uniform over the vocabulary when None).
    """

    vocab_size: int
    clusters: int = 1
    seed: int = 0
    seq_len: int = 16
    permute: bool = True
    cluster_weights: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.clusters < 1 or self.vocab_size % self.clusters:
            raise ConfigError(f"{self.clusters} clusters do not evenly split a vocabulary of {self.vocab_size}")
        if self.cluster_weights is not None:
            if len(self.cluster_weights) != self.clusters or min(self.cluster_weights) < 0:
                raise ConfigError("cluster_weights needs one non-negative weight per cluster")
            object.__setattr__(self, "cluster_weights", tuple(float(w) for w in self.cluster_weights))

    @property
    def cluster_size(self) -> int:
        return self.vocab_size // self.clusters

    def target_table(self) -> np.ndarray:
        return _target_table(self).copy()

    def _build_table(self) -> np.ndarray:
        size = self.cluster_size
        table = np.arange(self.vocab_size)
        if self.permute:
            rng = Rng(self.seed).child("task/perm")
            for c in range(self.clusters):
                table[c * size : (c + 1) * size] = c * size + rng.child(str(c)).permutation(size)
        return table

    def to_dict(self) -> dict:
        d = asdict(self)
        d["cluster_weights"] = list(self.cluster_weights) if self.cluster_weights else None
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticTask":
        d = dict(d)
        if d.get("cluster_weights") is not None:
            d["cluster_weights"] = tuple(d["cluster_weights"])
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(f"bad task config: {exc}") from None


@functools.lru_cache(maxsize=32)
def _target_table(task: SyntheticTask) -> np.ndarray:
    return task._build_table()


def gen_batch(task: SyntheticTask, step: int, batch_tokens: int, stream: str = "train", seed: int | None = None):
    """Deterministic ``(inputs, targets)`` for ``(seed, stream, step)``."""
    if batch_tokens < 1:
        raise ArgumentError("batch_tokens must be >= 1")
    rng = Rng(task.seed if seed is None else seed).child(f"batch/{stream}/{step}")
    if task.cluster_weights is None:
        tokens = rng.integers(0, task.vocab_size, batch_tokens)
    else:
        w = np.asarray(task.cluster_weights, dtype=np.float64)
        clusters = rng.choice(task.clusters, batch_tokens, replace=True, p=w / w.sum())
        tokens = clusters * task.cluster_size + rng.integers(0, task.cluster_size, batch_tokens)
    return tokens.astype(np.int64), _target_table(task)[tokens]


def evaluate(ckpt: Checkpoint, task: SyntheticTask, eval_tokens: int = 4096, seed: int | None = None, chunk: int = 1024) -> float:
    """Mean cross-entropy over a held-out stream (the ``eval`` stream never feeds training)."""
    total, seen, step = 0.0, 0, 0
    while seen < eval_tokens:
        n = min(chunk, eval_tokens - seen)
        tokens, targets = gen_batch(task, step, n, stream="eval", seed=seed)
        logits, _ = toynet_forward(ckpt, tokens)
        total += cross_entropy(logits, targets)[0] * n
        seen += n
        step += 1
    return total / eval_tokens


@dataclass
class TrainState:
    ckpt: Checkpoint
    schedule: LrSchedule
    task: SyntheticTask
    batch_tokens: int = 256
    opt: OptState = field(default_factory=OptState)
    step: int = 0
    aux_coeff: float | None = None
    z_coeff: float | None = None
    # tensor-name prefixes excluded from optimizer updates
    frozen: tuple[str, ...] = ()

    def trainable(self, name: str) -> bool:
        return not any(name == f or name.startswith(f + ".") for f in self.frozen)

    def save(self, path: str | Path) -> str:
        out = self.ckpt.copy()
        params = self.ckpt.model_tensors()
        for name in params:
            if name in self.opt.exp_avg:
                out.tensors[OPT_M + name] = self.opt.exp_avg[name].copy()
                out.tensors[OPT_V + name] = self.opt.exp_avg_sq[name].copy()
        out.metadata["train_state"] = {
            "step": self.step,
            "opt_step": self.opt.step,
            "schedule": self.schedule.to_dict(),
            "task": self.task.to_dict(),
            "batch_tokens": self.batch_tokens,
            "aux_coeff": self.aux_coeff,
            "z_coeff": self.z_coeff,
            "frozen": list(self.frozen),
        }
        return save_checkpoint(out, path)

    @classmethod
    def load(cls, path: str | Path) -> "TrainState":
        ckpt = load_checkpoint(path)
        meta = ckpt.metadata.get("train_state")
        if meta is None:
            raise ConfigError(f"{path} holds no training state")
        opt = OptState(step=meta["opt_step"])
        params = {}
        for name, arr in ckpt.tensors.items():
            if name.startswith(OPT_M):
                opt.exp_avg[name[len(OPT_M) :]] = arr
            elif name.startswith(OPT_V):
                opt.exp_avg_sq[name[len(OPT_V) :]] = arr
            else:
                params[name] = arr
        metadata = {k: v for k, v in ckpt.metadata.items() if k != "train_state"}
        return cls(
            Checkpoint(ckpt.config, params, metadata),
            LrSchedule(**meta["schedule"]),
            SyntheticTask.from_dict(meta["task"]),
            meta["batch_tokens"],
            opt,
            meta["step"],
            meta.get("aux_coeff"),
            meta.get("z_coeff"),
            tuple(meta.get("frozen", ())),
        )


def _record(step, lr, report) -> dict:
    lo, hi = report.load_range()
    return {
        "step": step,
        "lr": lr,
        "lm_loss": report.lm_loss,
        "aux_raw": report.aux_loss,
        "z_raw": report.z_loss,
        "total": report.total,
        "min_load": lo,
        "max_load": hi,
    }


def train(state: TrainState, steps: int, metrics: TextIO | list | None = None) -> TrainState:
    """Run ``steps`` optimizer steps in place and return ``state``.

    One record per step goes to ``metrics`` (a text stream receives JSON lines,
    a list receives dicts). A non-finite loss writes an error record and raises
    :class:`TrainingDivergedError`.
    """

    def emit(rec: dict) -> None:
        if metrics is None:
            return
        if isinstance(metrics, list):
            metrics.append(rec)
        else:
            metrics.write(json.dumps(rec) + "\n")

    params = state.ckpt.tensors
    for _ in range(steps):
        lr = lr_at_step(state.schedule, state.step)
        tokens, targets = gen_batch(state.task, state.step, state.batch_tokens)
        try:
            report, grads = compute_loss(state.ckpt, tokens, targets, aux_coeff=state.aux_coeff, z_coeff=state.z_coeff)
        except NumericError as exc:
            emit({"step": state.step, "lr": lr, "error": str(exc)})
            raise TrainingDivergedError(f"non-finite values at step {state.step}: {exc}") from exc
        rec = _record(state.step, lr, report)
        if not np.isfinite(report.total):
            emit({**rec, "error": "non-finite loss"})
            raise TrainingDivergedError(f"loss became non-finite at step {state.step}")
        emit(rec)
        if state.frozen:
            grads = {k: g for k, g in grads.items() if state.trainable(k)}
        optimizer_step(params, grads, state.opt, lr)
        state.step += 1
    return state


# --- gradient check -------------------------------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_err: float
    max_abs_err: float
    per_tensor: dict[str, float]
    tolerance: float
    offending: list[str]
    skipped: int = 0

    @property
    def passed(self) -> bool:
        return not self.offending


GradFn = Callable[[Checkpoint, np.ndarray, np.ndarray], dict]


def grad_check(
    ckpt: Checkpoint,
    task: SyntheticTask | None = None,
    tolerance: float = 1e-3,
    tokens: int = 12,
    eps: float = 1e-4,
    floor: float = 1e-6,
    seed: int = 0,
    aux_coeff: float | None = None,
    z_coeff: float | None = None,
    grad_fn: GradFn | None = None,
) -> GradCheckReport:
    """Compare analytic gradients of the total loss with central differences in float64.

    Error per entry is ``|a - n| / max(|a|, |n|, floor)``; ``floor`` keeps
    entries whose true gradient is ~0 from amplifying rounding noise. Entries
    whose perturbation changes the top-k selection sit on a kink of the loss
    and are skipped (counted in ``skipped``). ``grad_fn`` replaces the analytic
    gradient (used to test the checker itself).
    """
    shadow = ckpt.astype(np.float64)
    if task is None:
        task = SyntheticTask(ckpt.config.vocab_size, seed=seed)
    ids, targets = gen_batch(task, 0, tokens, stream="gradcheck", seed=seed)
    kw = dict(aux_coeff=aux_coeff, z_coeff=z_coeff)

    def routing(report_cache) -> tuple:
        return tuple(o.indices.tobytes() for o in report_cache)

    def loss() -> tuple[float, tuple]:
        logits, cache = toynet_forward(shadow, ids)
        report, _ = compute_loss(shadow, ids, targets, with_grad=False, **kw)
        return report.total, routing(cache.outcomes)

    base_route = loss()[1]
    if grad_fn is None:
        analytic = compute_loss(shadow, ids, targets, **kw)[1]
    else:
        analytic = grad_fn(shadow, ids, targets)

    per_tensor, max_abs, skipped = {}, 0.0, 0
    for name in shadow.model_tensors():
        flat = shadow.tensors[name].reshape(-1)
        a = analytic[name].reshape(-1).astype(np.float64)
        worst = 0.0
        for j in range(flat.size):
            old = flat[j]
            flat[j] = old + eps
            up, r_up = loss()
            flat[j] = old - eps
            down, r_down = loss()
            flat[j] = old
            if r_up != base_route or r_down != base_route:
                skipped += 1
                continue
            numeric = (up - down) / (2 * eps)
            err = abs(a[j] - numeric)
            max_abs = max(max_abs, err)
            worst = max(worst, err / max(abs(a[j]), abs(numeric), floor))
        per_tensor[name] = worst
    offending = [n for n, e in per_tensor.items() if not e <= tolerance]
    return GradCheckReport(max(per_tensor.values()), max_abs, per_tensor, tolerance, offending, skipped)


# --- experiments ----------------------------------------------------------------------
#
# Desk-scale set-ups shared by the acceptance suite and the README. Embedding and
# head are drawn with std 1 and frozen, so the token -> target map has to be
# carried by the MLP (an embedding lookup cannot solve it for free). That
# makes MLP capacity the bottleneck, which is the regime the comparisons target.

EXPERIMENT_FROZEN = ("emb", "head")


def skew_router(ckpt: Checkpoint, tokens, spread: float) -> Checkpoint:
    """Bias every router so expert ``j`` starts with mean logit ``spread*(1 - 2j/(N-1))``.

    Adds ``m * offset_j / |m|²`` to router column ``j``, where ``m`` is the
    layer's mean normalised input over ``tokens``. High-index experts start
    starved of tokens.
    """
    from .checkpoint import router_name
    from .numerics import layer_norm

    if ckpt.config.moe is None:
        raise ArgumentError("skew_router needs an MoE checkpoint")
    out = ckpt.copy()
    _, cache = toynet_forward(out, tokens)
    for i in range(out.config.num_layers):
        n, _ = layer_norm(cache.hiddens[i], out[f"layers.{i}.norm.gain"], out[f"layers.{i}.norm.bias"])
        m = n.astype(np.float64).mean(axis=0)
        name = router_name(i)
        offsets = spread * np.linspace(1.0, -1.0, out[name].shape[1])
        out.tensors[name] = out[name] + (np.outer(m, offsets) / float(m @ m)).astype(np.float32)
    return out


def _min_share(ckpt: Checkpoint, tokens) -> float:
    from .diagnostics import load_stats

    _, cache = toynet_forward(ckpt, tokens)
    return min(load_stats(o).min_share for o in cache.outcomes)


def dead_expert_run(
    seed: int,
    aux_coeff: float,
    steps: int = 2000,
    vocab_size: int = 128,
    hidden: int = 16,
    ffn: int = 32,
    cluster_weights: tuple[float, ...] = (0.7, 0.1, 0.1, 0.1),
    spread: float = 3.0,
    lr: float = 1e-2,
    every: int = 100,
) -> dict:
    """E8G1T2 top-k-then-softmax on a skewed-cluster task from a skewed router.

    Under top-k-then-softmax an unselected expert receives no language-model
    gradient, so only the balance loss can pull a starved expert back. Load
    shares are measured every ``every`` steps on a fixed 4096-token batch of the
    skewed distribution and reported relative to the uniform share.
    """
    task = SyntheticTask(vocab_size, len(cluster_weights), seed=seed, cluster_weights=cluster_weights)
    dense = init_dense_random(ModelConfig(1, hidden, ffn, vocab_size), seed, std=1.0)
    probe, _ = gen_batch(task, 0, 4096, stream="eval")
    plan = UpcyclePlan(8, 1, 2, router_order="topk_then_softmax", seed=seed, aux_coeff=aux_coeff)
    moe = skew_router(upcycle(dense, plan), probe, spread)
    state = TrainState(
        moe, LrSchedule("constant", lr, lr, 0, steps), task, 256, aux_coeff=aux_coeff, z_coeff=0.0,
        frozen=EXPERIMENT_FROZEN,
    )
    shares = [_min_share(state.ckpt, probe)]
    while state.step < steps:
        train(state, min(every, steps - state.step))
        shares.append(_min_share(state.ckpt, probe))
    half = shares[len(shares) // 2 :]
    return {
        "seed": seed,
        "aux_coeff": aux_coeff,
        "min_share_trace": shares,
        "final_min_share": shares[-1],
        "second_half_min_share": min(half),
        "ever_dead": min(shares) < DEAD_SHARE,
    }


def trend_run(
    seed: int,
    pretrain_steps: int = 1000,
    extra_steps: int = 1000,
    vocab_size: int = 256,
    clusters: int = 4,
    hidden: int = 16,
    ffn: int = 32,
    batch_tokens: int = 256,
    eval_tokens: int = 4096,
) -> dict:
    """Pretrain a dense model, then spend ``extra_steps`` on each of three arms.

    Arms: continued dense training, coarse E4G1T2 (top-k-then-softmax, exact
    copy) and granular E4G4T4 (virtual-group router, weight scaling; iso-FLOP
    with dense). Every arm restarts the same warmup-cosine schedule. Returns
    final validation losses.
    """
    task = SyntheticTask(vocab_size, clusters, seed=seed)
    dense = init_dense_random(ModelConfig(1, hidden, ffn, vocab_size), seed, std=1.0)

    def run(ckpt: Checkpoint, steps: int) -> Checkpoint:
        state = TrainState(ckpt, schedule_preset("toy_reset", steps), task, batch_tokens, frozen=EXPERIMENT_FROZEN)
        return train(state, steps).ckpt

    base = run(dense, pretrain_steps)
    arms = {
        "dense": base.copy(),
        "E4G1T2": upcycle(base, UpcyclePlan(4, 1, 2, router_order="topk_then_softmax", seed=seed)),
        "E4G4T4": upcycle(
            base,
            UpcyclePlan(4, 4, 4, router_init="virtual_group", compensation="weight_scaling", seed=seed),
        ),
    }
    result = {"seed": seed, "pretrained": evaluate(base, task, eval_tokens)}
    for name, ckpt in arms.items():
        result[name] = evaluate(run(ckpt, extra_steps), task, eval_tokens)
    return result
