"""Acceptance suite: one test per criterion, each recording a PASS/FAIL line.

Run with pytest (lines are printed in the terminal summary) or directly:

    python tests/test_acceptance.py
"""
import math
import sys
import time
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from moe_upcycle.checkpoint import Checkpoint, init_dense_random, tensor_shapes
from moe_upcycle.config import ModelConfig, MoeConfig
from moe_upcycle.diagnostics import expert_cosine_similarity, flops_per_token, verify_equivalence
from moe_upcycle.losses import aux_load_balance, balance_loss
from moe_upcycle.model import route_logits, toynet_forward
from moe_upcycle.numerics import Rng
from moe_upcycle.schedule import lr_at_step, schedule_preset
from moe_upcycle.trainer import dead_expert_run, grad_check, trend_run
from moe_upcycle.upcycle import UpcyclePlan, compute_scale_factor, upcycle, upcycle_coarse, virtual_group_init

from conftest import well_scaled

RESULTS: list[str] = []
SEEDS = (0, 1, 2)


def record(num: int, title: str, ok: bool, detail: str) -> None:
    RESULTS.append(f"[{'PASS' if ok else 'FAIL'}] {num:2d} {title}: {detail}")
    print(RESULTS[-1])
    assert ok, detail


def toy_dense(seed, L=2, h=8, d=16, V=32, act="squared_relu"):
    return init_dense_random(ModelConfig(L, h, d, V, act), seed)


def test_01_coarse_equivalence():
    worst, slowest, cases = 0.0, 0.0, []
    for E in (2, 8):
        for T in (2, 4):
            if T > E:
                continue  # top-4 of 2 experts is not a valid configuration
            for seed in SEEDS:
                t = time.perf_counter()
                dense = toy_dense(seed)
                rep = verify_equivalence(dense, upcycle_coarse(dense, E, T, seed=seed), tokens=32, seed=seed)
                slowest = max(slowest, time.perf_counter() - t)
                worst = max(worst, rep.max_rel_diff)
            cases.append(f"E{E}T{T}")
    record(1, "coarse equivalence", worst <= 1e-6 and slowest < 1.0,
           f"{','.join(cases)} x3 seeds max rel diff {worst:.2e} (<= 1e-6), slowest {slowest:.3f}s")


def test_02_granular_weight_scaling_identity():
    worst, slowest = 0.0, 0.0
    for seed in SEEDS:
        t = time.perf_counter()
        dense = toy_dense(seed, h=8, d=16)
        moe = virtual_group_init(dense, 8, 8, 8, seed=seed, zero_router=True, compensation="weight_scaling")
        worst = max(worst, verify_equivalence(dense, moe, seed=seed).max_rel_diff)
        slowest = max(slowest, time.perf_counter() - t)
    record(2, "granular exact compensation", worst <= 1e-5 and slowest < 1.0,
           f"E8G8T8 zero router weight_scaling max rel diff {worst:.2e} (<= 1e-5), slowest {slowest:.3f}s")


def test_03_pathology_ratio():
    ratios, slowest = [], 0.0
    for seed in SEEDS:
        t = time.perf_counter()
        dense = toy_dense(seed, h=8, d=16)
        moe = upcycle(dense, UpcyclePlan(8, 8, 8, seed=seed))
        ratios.append(verify_equivalence(dense, moe, seed=seed).mean_output_ratio)
        slowest = max(slowest, time.perf_counter() - t)
    ok = all(1 / 128 <= r <= 1 / 32 for r in ratios) and slowest < 1.0
    shown = ", ".join(f"1/{1 / r:.0f}" for r in ratios)
    record(3, "naive granular output shrink", ok, f"mean output ratio {shown} within [1/128, 1/32]")


def test_04_scale_factor_table():
    exact = compute_scale_factor(8, 8, 8) == 4.0
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(100):
        E, G = int(rng.integers(1, 65)), int(rng.integers(1, 17))
        T = int(rng.integers(1, E * G + 1))
        ref = (E * G * G / T) ** (1 / 3)
        worst = max(worst, abs(compute_scale_factor(E, G, T) - ref) / ref)
    record(4, "scale factor", exact and worst <= 1e-12, f"(8,8,8) -> 4.0 exact={exact}; 100-point grid max rel err {worst:.1e}")


def test_05_replica_completeness():
    failures, checked = [], 0
    for E in (2, 8):
        for G in (2, 8):
            for k in (1, 2):
                T = k * G
                if T > E * G:
                    continue
                dense = toy_dense(0, L=1, h=8, d=16, V=1024)
                moe = virtual_group_init(dense, E, G, T, seed=E * 100 + G * 10 + k)
                _, cache = toynet_forward(moe, np.arange(1024))
                shards = cache.outcomes[0].indices % G
                counts = np.stack([(shards == g).sum(axis=1) for g in range(G)], axis=1)
                checked += 1
                if not np.all(counts == k):
                    failures.append(f"E{E}G{G}T{T}")
    record(5, "replica completeness", not failures,
           f"{checked} configs x 1024 tokens, every shard selected exactly k times" + (f"; failed {failures}" if failures else ""))


def test_06_gradient_check():
    t = time.perf_counter()
    worst, skipped, bad = 0.0, 0, []
    for act in ("squared_relu", "swiglu"):
        for order in ("softmax_then_topk", "topk_then_softmax"):
            dense = init_dense_random(ModelConfig(2, 4, 8, 8, act), 0, std=0.3)
            moe = well_scaled(upcycle(dense, UpcyclePlan(2, 2, 2, shared_experts=1, router_order=order, seed=1)))
            rep = grad_check(moe, tokens=8, aux_coeff=1e-2, z_coeff=1e-3)
            worst, skipped = max(worst, rep.max_rel_err), skipped + rep.skipped
            if not rep.passed:
                bad.append(f"{act}/{order}: {rep.offending}")
    elapsed = time.perf_counter() - t
    record(6, "gradient check", not bad and worst <= 1e-3 and elapsed < 30,
           f"2 activations x 2 orders, aux+z on, max rel err {worst:.2e} (<= 1e-3), "
           f"{skipped} top-k flips skipped, {elapsed:.1f}s" + (f"; {bad}" if bad else ""))


def test_07_aux_balance_properties():
    n = 16
    u = np.full(n, 1 / n)
    uniform = balance_loss(u, u)
    routed = aux_load_balance(route_logits(np.tile(np.eye(n) * 50, (4, 1)), 1, "softmax_then_topk"))[0]
    onehot = balance_loss(np.eye(n)[0], np.eye(n)[0])
    rng = np.random.default_rng(0)
    draws = [balance_loss(f, f) for f in rng.dirichlet(np.full(n, 0.5), size=1000)]
    ok = abs(uniform - 1) <= 1e-6 and abs(routed - 1) <= 1e-6 and onehot == n and min(draws) >= 1.0
    record(7, "aux loss balance", ok,
           f"uniform {uniform:.7f}, routed-uniform {routed:.7f}, one-hot {onehot:g} (N={n}), min over 1000 draws {min(draws):.4f}")


def test_08_dead_expert_ablation():
    lines, ok = [], True
    for seed in SEEDS:
        t = time.perf_counter()
        off = dead_expert_run(seed, 0.0)
        on = dead_expert_run(seed, 1e-2)
        elapsed = (time.perf_counter() - t) / 2
        dead = off["final_min_share"] < 0.01
        kept = on["final_min_share"] >= 0.05
        ok &= dead and kept and elapsed < 300
        lines.append(f"s{seed}: aux0 {off['final_min_share']:.3f} / aux1e-2 {on['final_min_share']:.3f}")
    record(8, "dead-expert ablation", ok,
           "final min share of uniform (<0.01 without aux, >=0.05 with) " + "; ".join(lines))


def test_09_upcycling_trend():
    runs, slowest = [], 0.0
    for seed in SEEDS:
        t = time.perf_counter()
        runs.append(trend_run(seed))
        slowest = max(slowest, time.perf_counter() - t)
    mean = {k: float(np.mean([r[k] for r in runs])) for k in ("dense", "E4G1T2", "E4G4T4")}
    ordering = mean["E4G1T2"] <= mean["E4G4T4"] <= mean["dense"]
    record(9, "upcycling vs continued training", mean["E4G1T2"] < mean["dense"] and slowest < 600,
           f"mean val loss dense {mean['dense']:.4f}, E4G1T2 {mean['E4G1T2']:.4f}, E4G4T4 {mean['E4G4T4']:.4f}; "
           f"ordering E4G1T2<=E4G4T4<=dense {'holds' if ordering else 'does not hold'} (reported only); "
           f"slowest seed {slowest:.0f}s")


def test_10_schedule_values():
    total = 1000
    const = schedule_preset("constant_2e-5", total)
    ok = all(lr_at_step(const, t) == 2e-5 for t in range(0, total + 1, 50))
    gaps = []
    for name, peak in (("reset_2e-4", 2e-4), ("reset_1e-4", 1e-4)):
        s = schedule_preset(name, total)
        w = s.warmup_steps
        ok &= lr_at_step(s, w) == peak and abs(lr_at_step(s, total) - 2e-5) <= 1e-12
        # warmup line and cosine branch meet at the warmup boundary
        gaps.append(abs(s.start + (s.peak - s.start) * w / w - lr_at_step(s, w)))
        gaps.append(abs(lr_at_step(s, total) - s.min))
    ok &= max(gaps) <= 1e-12
    record(10, "schedule presets", ok, f"constant 2e-5, peaks 2e-4/1e-4, min 2e-5; boundary gap {max(gaps):.1e}")


def test_11_checkpoint_round_trip():
    rng = np.random.default_rng(11)
    bad = 0
    for i in range(50):
        G = int(rng.choice([1, 2, 4]))
        moe = None
        if rng.random() < 0.6:
            E = int(rng.integers(1, 4))
            comp = str(rng.choice(["none", "weight_scaling", "output_scale", "post_expert_layernorm"]))
            moe = MoeConfig(E, G, int(rng.integers(1, E * G + 1)), int(rng.integers(0, 2)), compensation=comp)
        cfg = ModelConfig(int(rng.integers(1, 3)), int(rng.integers(1, 9)), G * int(rng.integers(1, 5)),
                          int(rng.integers(2, 20)), str(rng.choice(["squared_relu", "swiglu"])), moe)
        tensors = {n: rng.standard_normal(s).astype(np.float32) for n, s in tensor_shapes(cfg).items()}
        data = Checkpoint(cfg, tensors, {"i": i}).to_bytes()
        bad += Checkpoint.from_bytes(data).to_bytes() != data
    dense = toy_dense(3)
    moe = upcycle(dense, UpcyclePlan(4, 2, 2, shared_experts=1, compensation="post_expert_layernorm", seed=3))
    changed = [n for n in dense.tensors if ".mlp." not in n and moe[n].tobytes() != dense[n].tobytes()]
    record(11, "checkpoint round trip", bad == 0 and not changed,
           f"50 random configs, {bad} byte mismatches; non-MLP tensors changed by upcycle: {len(changed)}")


def test_12_flop_accounting():
    def ratio(moe):
        return flops_per_token(ModelConfig(1, 16, 64, 32, moe=moe))

    a = ratio(MoeConfig(8, 8, 8)).ratio
    b = ratio(MoeConfig(8, 1, 2)).ratio
    shared = ratio(MoeConfig(64, 1, 8, shared_experts=8))
    wide = ratio(MoeConfig(64, 1, 16))
    iso = shared.moe_routed + shared.shared == wide.moe_routed + wide.shared
    record(12, "FLOP accounting", a == 1.0 and b == 2.0 and iso,
           f"E8G8T8 {a}, E8G1T2 {b}, 8 shared + 64 top-8 == 64 top-16: {iso}")


def test_13_fresh_upcycle_cosine():
    worst, count = 1.0, 0
    for E in (1, 2, 4, 8):
        for G in (1, 2, 4, 8):
            for comp in ("none", "output_scale", "post_expert_layernorm"):
                dense = toy_dense(E * G, h=8, d=16)
                moe = upcycle(dense, UpcyclePlan(E, G, G, compensation=comp, seed=count))
                sims = expert_cosine_similarity(moe, dense)
                worst = min(worst, min(min(p) for p in sims["per_expert"]))
                count += 1
    record(13, "fresh upcycle cosine", worst == 1.0, f"{count} (E,G,compensation) combos, min expert cosine {worst!r}")


if __name__ == "__main__":
    failed = 0
    for name, fn in sorted((n, f) for n, f in globals().items() if n.startswith("test_")):
        try:
            fn()
        except AssertionError:
            failed += 1
    sys.exit(1 if failed else 0)
