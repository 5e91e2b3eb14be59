import numpy as np
import pytest

from moe_upcycle.checkpoint import init_dense_random
from moe_upcycle.config import ModelConfig, MoeConfig
from moe_upcycle.diagnostics import cosine, expert_cosine_similarity, flops_per_token, load_stats, verify_equivalence
from moe_upcycle.errors import DimensionError
from moe_upcycle.model import route_logits
from moe_upcycle.upcycle import UpcyclePlan, upcycle


def test_cosine_values():
    assert cosine(np.array([1.0, 0.0]), np.array([1.0, 0.0])) == 1.0
    assert cosine(np.array([1.0, 0.0]), np.array([0.0, 2.0])) == 0.0
    assert cosine(np.array([1.0, 1.0]), np.array([-1.0, -1.0])) == -1.0
    assert cosine(np.zeros(3), np.ones(3)) == 0.0


def test_cosine_self_exactly_one():
    x = np.random.default_rng(0).standard_normal(1000).astype(np.float32)
    assert cosine(x, x) == 1.0


def test_expert_cosine_fresh_upcycle(toy_dense):
    moe = upcycle(toy_dense, UpcyclePlan(4, 2, 2))
    assert expert_cosine_similarity(moe, toy_dense)["overall"] == pytest.approx(1.0, abs=1e-12)


def test_expert_cosine_dense_vs_dense(toy_dense):
    assert expert_cosine_similarity(toy_dense, toy_dense)["overall"] == 1.0


def test_load_stats_uniform():
    out = route_logits(np.zeros((4, 4)), 1, "softmax_then_topk")
    # all-zero logits tie, so every token picks expert 0
    stats = load_stats(out)
    assert stats.fractions.tolist() == [1.0, 0.0, 0.0, 0.0]
    assert stats.dead.tolist() == [False, True, True, True]
    eye = route_logits(np.eye(4) * 5, 1, "softmax_then_topk")
    s2 = load_stats(eye)
    assert s2.fractions.tolist() == [0.25] * 4 and not s2.dead.any()
    assert s2.entropy == pytest.approx(np.log(4))


def test_virtual_group_zero_router_load_on_first_replicas(toy_dense):
    moe = upcycle(toy_dense, UpcyclePlan(4, 4, 8, router_init="zero"))
    from moe_upcycle.model import toynet_forward

    _, cache = toynet_forward(moe, np.arange(32))
    f = load_stats(cache.outcomes[0]).fractions
    np.testing.assert_allclose(f[:8], 1 / 8)
    assert np.all(f[8:] == 0)


def test_verify_rejects_mismatched(toy_dense):
    other = init_dense_random(ModelConfig(2, 8, 16, 16), 0)
    with pytest.raises(DimensionError):
        verify_equivalence(toy_dense, other)


@pytest.mark.parametrize(
    "moe,ratio",
    [
        (MoeConfig(8, 8, 8), 1.0),
        (MoeConfig(8, 1, 2), 2.0),
        (MoeConfig(64, 1, 16), 16.0),
        (MoeConfig(8, 8, 8, shared_experts=8), 2.0),
    ],
)
def test_flops_ratio(moe, ratio):
    fl = flops_per_token(ModelConfig(1, 16, 64, 32, moe=moe))
    assert fl.ratio == ratio


def test_flops_shared_iso():
    # 8 shared + 64 routed top-8 costs the same as 64 routed top-16 at equal expert width
    a = flops_per_token(ModelConfig(1, 16, 64, 32, moe=MoeConfig(64, 1, 8, shared_experts=8)))
    b = flops_per_token(ModelConfig(1, 16, 64, 32, moe=MoeConfig(64, 1, 16)))
    assert a.moe_routed + a.shared == b.moe_routed + b.shared


def test_flops_swiglu_and_router():
    fl = flops_per_token(ModelConfig(2, 4, 8, 16, "swiglu", MoeConfig(2, 2, 2)))
    assert fl.dense_mlp == 6 * 4 * 8
    assert fl.router == 2 * 4 * 4
    assert fl.total_per_token == 2 * (fl.moe_routed + fl.router)
