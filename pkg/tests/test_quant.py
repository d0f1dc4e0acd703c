"""Quantizer laws: grid exactness, width parametrization, gradients, banks."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from g3dpack.scene import ATTRIBUTE_ORDER, AttributeClass
from g3dpack import quant
from g3dpack.quant import (
    BITS_MAX,
    BITS_MIN,
    EMA_MOMENTUM,
    PRESETS,
    RANGE_FLOOR,
    QuantizerState,
    bits_int,
    bitwidth,
    bitwidth_raw,
    fake_quantize,
    fake_quantize_continuous,
    make_bank,
    observe_scene,
    pinned_bank,
    project_bits,
    quantize_codes,
    quantizer_grads,
    round_half_away,
    ste_backward,
    t_for_bits,
    update_range,
)


def pinned_state(bits: float, r: float = 1.0) -> QuantizerState:
    state = QuantizerState(b_lo=BITS_MIN, b_hi=BITS_MAX, r=r, initialized=True)
    state.t = t_for_bits(state, bits)
    return state


def test_round_half_away_ties():
    v = np.array([0.5, -0.5, 1.5, -1.5, 2.49, -2.49, 0.0])
    np.testing.assert_array_equal(
        round_half_away(v), [1.0, -1.0, 2.0, -2.0, 2.0, -2.0, 0.0]
    )


@pytest.mark.parametrize("bits", range(2, 17))
def test_error_within_half_step(bits):
    rng = np.random.default_rng(bits)
    r = 1.7
    state = pinned_state(bits, r=r)
    x = rng.uniform(-r, r, size=4096)
    xq = fake_quantize(x, state)
    step = r / (2.0 ** (bits - 1) - 1.0)
    assert np.abs(xq - x).max() <= step / 2.0 + 1e-15
    assert np.abs(xq).max() <= r + 1e-15


def test_idempotent_bitwise():
    rng = np.random.default_rng(0)
    state = pinned_state(5, r=2.3)
    x = rng.normal(size=1000) * 3.0
    once = fake_quantize(x, state)
    twice = fake_quantize(once, state)
    assert np.array_equal(once, twice)


def test_codes_match_dequantized_values():
    rng = np.random.default_rng(1)
    state = pinned_state(7, r=0.9)
    x = rng.normal(size=256)
    codes, b, s = quantize_codes(x, state)
    assert b == 7
    assert np.abs(codes).max() <= 2 ** (b - 1) - 1
    np.testing.assert_array_equal(codes / s, fake_quantize(x, state))


@given(
    bits=st.integers(min_value=2, max_value=16),
    r=st.floats(min_value=1e-6, max_value=1e6),
    seed=st.integers(min_value=0, max_value=2**31),
)
@settings(max_examples=40, deadline=None)
def test_exactness_property(bits, r, seed):
    state = pinned_state(bits, r=r)
    x = np.random.default_rng(seed).uniform(-2 * r, 2 * r, size=64)
    xq = fake_quantize(x, state)
    step = r / (2.0 ** (bits - 1) - 1.0)
    inside = np.abs(x) <= r
    assert np.abs(xq[inside] - x[inside]).max(initial=0.0) <= step / 2 * (1 + 1e-12)
    assert np.array_equal(xq, fake_quantize(xq, state))


def test_uninitialized_state_rejected():
    state = QuantizerState()
    with pytest.raises(ValueError):
        fake_quantize(np.ones(3), state)


@pytest.mark.parametrize("q_m", [1.1, 1.5, 2.0, 4.0])
def test_raw_width_monotone_in_t(q_m):
    ts = np.arange(0.0, 20.0 + 1e-9, 0.1)
    widths = [
        bitwidth_raw(QuantizerState(q_m=q_m, t=float(t), initialized=True))
        for t in ts
    ]
    diffs = np.diff(widths)
    assert np.all(diffs > 0.0)


def test_t_for_bits_inverts_raw_width():
    for target in (2.0, 3.5, 8.0, 12.25, 16.0):
        state = QuantizerState(q_m=1.7, d=2.5)
        state.t = t_for_bits(state, target)
        assert abs(bitwidth_raw(state) - target) < 1e-9


def test_project_bits_restores_feasibility():
    rng = np.random.default_rng(2)
    for _ in range(100):
        lo = rng.uniform(BITS_MIN, 10.0)
        hi = rng.uniform(lo, BITS_MAX)
        state = QuantizerState(
            q_m=rng.uniform(1.05, 4.0),
            t=rng.uniform(-5.0, 40.0),
            d=rng.uniform(0.2, 5.0),
            b_lo=lo,
            b_hi=hi,
        )
        project_bits(state)
        raw = bitwidth_raw(state)
        assert lo - 1e-9 <= raw <= hi + 1e-9


def test_clamped_width_and_integer_grid():
    state = QuantizerState(b_lo=4.0, b_hi=6.0)
    state.t = t_for_bits(state, 9.0)
    assert bitwidth_raw(state) > 6.0
    assert bitwidth(state) == 6.0
    assert bits_int(state) == 6


def test_update_range_ema_oracle():
    rng = np.random.default_rng(3)
    state = QuantizerState()
    batches = [rng.normal(size=50) * s for s in (1.0, 4.0, 0.5, 2.0)]
    r = None
    for batch in batches:
        update_range(state, batch)
        peak = np.abs(batch).max()
        r = peak if r is None else EMA_MOMENTUM * r + (1 - EMA_MOMENTUM) * peak
        assert state.r == pytest.approx(r, rel=0, abs=0)
    assert state.initialized


def test_update_range_floor():
    state = QuantizerState()
    update_range(state, np.zeros(4))
    assert state.r == RANGE_FLOOR


def test_ste_masks_clipped_entries():
    state = pinned_state(4, r=1.0)
    x = np.array([-2.0, -1.0, 0.3, 1.0, 2.0])
    grad = np.ones_like(x)
    np.testing.assert_array_equal(
        ste_backward(grad, x, state), [0.0, 1.0, 1.0, 1.0, 0.0]
    )


@pytest.mark.parametrize("target", [1.2, 2.0, 16.0, 18.0])
def test_grads_zero_at_and_beyond_bounds(target):
    rng = np.random.default_rng(4)
    x = rng.normal(size=32)
    up = rng.normal(size=32)
    state = QuantizerState(b_lo=2.0, b_hi=16.0, r=1.0, initialized=True)
    state.t = t_for_bits(state, target)
    assert quantizer_grads(x, up, state) == (0.0, 0.0, 0.0)


def test_grads_nonzero_in_interior():
    rng = np.random.default_rng(5)
    state = QuantizerState(b_lo=2.0, b_hi=16.0, r=1.0, initialized=True)
    state.t = t_for_bits(state, 6.0)
    x = rng.uniform(-1.0, 1.0, size=64)
    up = rng.normal(size=64)
    g_qm, g_t, g_d = quantizer_grads(x, up, state)
    assert g_qm != 0.0 and g_t != 0.0 and g_d != 0.0


def away_from_code_boundaries(x, state):
    """Keep entries whose scaled value is far from a rounding tie, so a small
    parameter nudge cannot flip the integer code."""
    s = (2.0 ** (bitwidth(state) - 1.0) - 1.0) / state.r
    frac = np.abs((np.abs(s * np.clip(x, -state.r, state.r)) + 0.5) % 1.0 - 0.5)
    return x[(frac > 1e-3) & (np.abs(np.abs(x) - state.r) > 1e-3)]


@pytest.mark.parametrize("param", ["q_m", "t", "d"])
def test_grads_match_finite_differences(param):
    rng = np.random.default_rng(6)
    state = QuantizerState(
        q_m=1.8, d=1.3, b_lo=2.0, b_hi=16.0, r=1.4, initialized=True
    )
    state.t = t_for_bits(state, 6.5)
    x = away_from_code_boundaries(rng.uniform(-1.6, 1.6, size=512), state)
    up = np.random.default_rng(7).normal(size=x.size)
    grads = dict(zip(("q_m", "t", "d"), quantizer_grads(x, up, state)))

    def loss(value):
        probe = state.copy()
        setattr(probe, param, value)
        return float(np.sum(up * fake_quantize_continuous(x, probe)))

    base = getattr(state, param)
    h = 1e-7 * max(1.0, abs(base))
    fd = (loss(base + h) - loss(base - h)) / (2 * h)
    assert grads[param] == pytest.approx(fd, rel=1e-5)


def test_preset_average_bits():
    comp = PRESETS["compressive"]
    assert comp.average_bits(3, use="lo") == pytest.approx(437 / 59, abs=1e-12)
    assert comp.average_bits(3, use="hi") == pytest.approx(
        (16 * 3 + 8 * 3 + 8 * 4 + 6 * 1 + 8 * 3 + 8 * 45) / 59, abs=1e-12
    )
    compet = PRESETS["competitive"]
    assert compet.average_bits(3, use="lo") == pytest.approx(510 / 59, abs=1e-12)


def test_make_bank_starts_at_upper_bound():
    bank = make_bank("compressive")
    assert set(bank) == set(ATTRIBUTE_ORDER)
    for cls, state in bank.items():
        lo, hi = PRESETS["compressive"].bounds[cls]
        assert (state.b_lo, state.b_hi) == (lo, hi)
        assert abs(bitwidth_raw(state) - hi) < 1e-9


def test_make_bank_shared_is_one_state_with_union_bounds():
    bank = make_bank("compressive", shared=True)
    states = {id(s) for s in bank.values()}
    assert len(states) == 1
    state = bank[AttributeClass.MEANS]
    assert (state.b_lo, state.b_hi) == (6, 16)


def test_make_bank_uniform_pins_width():
    bank = make_bank("compressive", uniform_bits=6)
    for state in bank.values():
        assert (state.b_lo, state.b_hi) == (6, 6)
        assert bits_int(state) == 6


def test_observe_scene_seeds_ranges(blob_fixture):
    scene, _, _ = blob_fixture
    bank = make_bank("compressive")
    observe_scene(bank, scene)
    for cls, state in bank.items():
        assert state.initialized
        assert state.r == np.abs(scene.get_block(cls)).max()


def test_observe_shared_takes_global_peak(blob_fixture):
    scene, _, _ = blob_fixture
    bank = make_bank("compressive", shared=True)
    observe_scene(bank, scene)
    peak = max(np.abs(scene.get_block(cls)).max() for cls in ATTRIBUTE_ORDER)
    assert bank[AttributeClass.MEANS].r == peak


def test_quantize_scene_touches_every_block(blob_fixture):
    scene, _, _ = blob_fixture
    bank = make_bank("compressive", uniform_bits=4)
    observe_scene(bank, scene)
    out = quant.quantize_scene(scene, bank)
    assert out is not scene
    for cls in ATTRIBUTE_ORDER:
        np.testing.assert_array_equal(
            out.get_block(cls), fake_quantize(scene.get_block(cls), bank[cls])
        )


def test_pinned_bank_reconstructs_grid():
    bits = {cls: 8 for cls in ATTRIBUTE_ORDER}
    bits[AttributeClass.MEANS] = 12
    ranges = {cls: 1.0 + i for i, cls in enumerate(ATTRIBUTE_ORDER)}
    bank = pinned_bank(bits, ranges)
    for cls in ATTRIBUTE_ORDER:
        assert bits_int(bank[cls]) == bits[cls]
        assert bank[cls].r == ranges[cls]
        assert bank[cls].initialized
    with pytest.raises(ValueError):
        pinned_bank({cls: 1 for cls in ATTRIBUTE_ORDER}, ranges)
