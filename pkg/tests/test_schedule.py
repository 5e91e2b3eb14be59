import numpy as np
import pytest

from moe_upcycle.errors import ArgumentError, ConfigError, NumericError
from moe_upcycle.schedule import (
    LrSchedule,
    OptState,
    load_presets,
    lr_at_step,
    optimizer_step,
    schedule_preset,
)


def test_constant_preset():
    s = schedule_preset("constant_2e-5", 1000)
    assert all(lr_at_step(s, t) == 2e-5 for t in (0, 500, 1000))


@pytest.mark.parametrize("name,peak", [("reset_2e-4", 2e-4), ("reset_1e-4", 1e-4)])
def test_reset_presets(name, peak):
    s = schedule_preset(name, 1000)
    assert s.warmup_steps == 10
    assert lr_at_step(s, 0) == 0.0
    assert lr_at_step(s, 10) == pytest.approx(peak, abs=1e-18)
    assert lr_at_step(s, 1000) == pytest.approx(2e-5, abs=1e-18)


def test_boundary_continuity():
    s = LrSchedule("warmup_cosine", 2e-4, 2e-5, 10, 1000)
    # the warmup line reaches the peak exactly where the cosine starts
    before = s.start + (s.peak - s.start) * 10 / 10
    assert abs(before - lr_at_step(s, 10)) <= 1e-12
    assert abs(lr_at_step(s, 999) - 2e-5) < 1e-9


def test_midpoint_is_mean_of_peak_and_min():
    s = LrSchedule("warmup_cosine", 1.0, 0.0, 0, 100)
    assert lr_at_step(s, 50) == pytest.approx(0.5, abs=1e-15)


def test_start_value_warmup():
    s = schedule_preset("reset_15b_1t", 1000)
    assert lr_at_step(s, 0) == 4.5e-4
    assert lr_at_step(s, 10) == pytest.approx(3e-4)
    assert lr_at_step(s, 1000) == pytest.approx(4.5e-6)


def test_step_out_of_range():
    with pytest.raises(ArgumentError):
        lr_at_step(LrSchedule("constant", 1, 1, 0, 5), 6)


def test_bad_schedule():
    with pytest.raises(ConfigError):
        LrSchedule("linear", 1, 1)
    with pytest.raises(ConfigError):
        LrSchedule("warmup_cosine", 1e-4, 1e-3, 0, 10)
    with pytest.raises(ConfigError):
        schedule_preset("nope", 10)


def test_presets_listing():
    p = load_presets()
    assert p["losses"]["default"] == {"aux_coeff": 1e-2, "z_coeff": 0.0}
    assert p["batch_sizes"]["large"]["reference_tokens"] == 32 * 2**20


def test_adam_first_step_moves_by_lr():
    # with bias correction the first update is lr * g/|g| (up to eps)
    p = {"w": np.array([1.0, -2.0, 3.0])}
    g = {"w": np.array([0.5, -4.0, 1e-3])}
    optimizer_step(p, g, OptState(), 0.1)
    np.testing.assert_allclose(p["w"], [0.9, -1.9, 2.9], rtol=0, atol=1e-5)


def test_adam_matches_reference_two_steps():
    p = {"w": np.array([0.3])}
    state = OptState()
    m = v = 0.0
    x = 0.3
    for t, g in enumerate([0.2, -0.1], start=1):
        optimizer_step(p, {"w": np.array([g])}, state, 0.01)
        m = 0.9 * m + 0.1 * g
        v = 0.95 * v + 0.05 * g * g
        x -= 0.01 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.95**t)) + 1e-8)
    assert p["w"][0] == pytest.approx(x, rel=1e-12)


def test_adam_nan_gradient():
    with pytest.raises(NumericError):
        optimizer_step({"w": np.zeros(2)}, {"w": np.array([np.nan, 0])}, OptState(), 0.1)
