"""Learnable fake-quantization: parametric bit-widths, EMA clip ranges,
straight-through masks, and bound projection."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .scene import ATTRIBUTE_ORDER, AttributeClass, GaussianScene

EMA_MOMENTUM = 0.99
RANGE_FLOOR = 1e-12
BITS_MIN = 2
BITS_MAX = 16


@dataclass
class QuantizerState:
    """One symmetric uniform quantizer.

    The bit-width is derived from (q_m, t, d); the clip range r tracks an
    EMA of the observed absolute maximum. The integer grid uses the rounded
    bit-width while gradients treat the width as continuous.
    """

    q_m: float = 2.0
    t: float = 0.0
    d: float = 1.0
    b_lo: float = 2.0
    b_hi: float = 16.0
    r: float = 1.0
    initialized: bool = False

    def __post_init__(self):
        if not self.q_m > 1.0:
            raise ValueError("q_m must exceed 1")
        if not self.d > 0.0:
            raise ValueError("d must be positive")
        if not BITS_MIN <= self.b_lo <= self.b_hi <= BITS_MAX:
            raise ValueError(
                f"bit bounds [{self.b_lo}, {self.b_hi}] outside [{BITS_MIN}, {BITS_MAX}]"
            )

    def copy(self) -> "QuantizerState":
        return QuantizerState(
            q_m=self.q_m, t=self.t, d=self.d, b_lo=self.b_lo, b_hi=self.b_hi,
            r=self.r, initialized=self.initialized,
        )


def bitwidth_raw(state: QuantizerState) -> float:
    """Unclamped width log2(q_m^t / d + 1) + 1, overflow-safe."""
    exponent = state.t * np.log2(state.q_m) - np.log2(state.d)
    return float(np.logaddexp2(exponent, 0.0) + 1.0)


def bitwidth(state: QuantizerState) -> float:
    """Continuous width clamped into [b_lo, b_hi]."""
    return float(np.clip(bitwidth_raw(state), state.b_lo, state.b_hi))


def bits_int(state: QuantizerState) -> int:
    """Integer grid width: nearest integer, halves away from zero."""
    return int(np.floor(bitwidth(state) + 0.5))


def t_for_bits(state: QuantizerState, target_bits: float) -> float:
    """The t that makes the raw width hit target_bits exactly."""
    levels = 2.0 ** (target_bits - 1.0) - 1.0
    if levels <= 0.0:
        raise ValueError("target width below representable minimum")
    return float(np.log(state.d * levels) / np.log(state.q_m))


def round_half_away(v: np.ndarray) -> np.ndarray:
    return np.sign(v) * np.floor(np.abs(v) + 0.5)


def _scale(state: QuantizerState, bits: float) -> float:
    return (2.0 ** (bits - 1.0) - 1.0) / state.r


def quantize_codes(x: np.ndarray, state: QuantizerState, bits: int | None = None):
    """Integer codes on the current grid. Returns (codes, bits, scale)."""
    if not state.initialized:
        raise ValueError("clip range not initialized; observe data first")
    b = bits_int(state) if bits is None else int(bits)
    s = _scale(state, b)
    clipped = np.clip(np.asarray(x, dtype=np.float64), -state.r, state.r)
    return round_half_away(s * clipped).astype(np.int64), b, s


def fake_quantize(x: np.ndarray, state: QuantizerState) -> np.ndarray:
    """Clip, snap to the symmetric integer grid, and dequantize."""
    codes, _, s = quantize_codes(x, state)
    return codes / s


def fake_quantize_continuous(x: np.ndarray, state: QuantizerState) -> np.ndarray:
    """The surrogate the parameter gradients differentiate: same grid law but
    with the *continuous* clamped width."""
    if not state.initialized:
        raise ValueError("clip range not initialized; observe data first")
    s = _scale(state, bitwidth(state))
    clipped = np.clip(np.asarray(x, dtype=np.float64), -state.r, state.r)
    return round_half_away(s * clipped) / s


def update_range(state: QuantizerState, batch: np.ndarray):
    """EMA of the absolute maximum; the first batch seeds the range."""
    batch = np.asarray(batch)
    peak = float(np.max(np.abs(batch))) if batch.size else state.r
    if not state.initialized:
        state.r = max(peak, RANGE_FLOOR)
        state.initialized = True
    else:
        state.r = max(
            EMA_MOMENTUM * state.r + (1.0 - EMA_MOMENTUM) * peak, RANGE_FLOOR
        )


def ste_backward(
    grad: np.ndarray, x: np.ndarray, state: QuantizerState
) -> np.ndarray:
    """Clipped straight-through: pass gradients only inside the clip range."""
    return np.where(np.abs(x) <= state.r, grad, 0.0)


def project_bits(state: QuantizerState):
    """Move t so the raw width lands on the violated bound, if any."""
    raw = bitwidth_raw(state)
    if raw < state.b_lo:
        state.t = t_for_bits(state, state.b_lo)
    elif raw > state.b_hi:
        state.t = t_for_bits(state, state.b_hi)


def quantizer_grads(x: np.ndarray, upstream: np.ndarray, state: QuantizerState):
    """Loss gradient w.r.t. (q_m, t, d) through the continuous-width surrogate.

    The integer code is held fixed (the a.e. derivative of the surrogate), so
    d x_hat / d s = -x_hat / s; widths pinned at a bound get zero gradient.
    """
    if not state.initialized:
        raise ValueError("clip range not initialized; observe data first")
    raw = bitwidth_raw(state)
    if raw <= state.b_lo or raw >= state.b_hi:
        return 0.0, 0.0, 0.0
    b = raw
    s = _scale(state, b)
    xhat = fake_quantize_continuous(x, state)
    g_s = float(np.sum(np.asarray(upstream) * (-xhat / s)))
    ds_db = np.log(2.0) * 2.0 ** (b - 1.0) / state.r
    u = state.q_m**state.t / state.d
    db_du = 1.0 / ((u + 1.0) * np.log(2.0))
    g_b = g_s * ds_db
    g_u = g_b * db_du
    g_qm = g_u * state.t * state.q_m ** (state.t - 1.0) / state.d
    g_t = g_u * u * np.log(state.q_m)
    g_d = g_u * (-u / state.d)
    return float(g_qm), float(g_t), float(g_d)


# ---------------------------------------------------------------------------
# Presets and banks


@dataclass
class BitRangePreset:
    name: str
    bounds: dict[AttributeClass, tuple[float, float]]

    def average_bits(self, sh_degree: int, use: str = "lo") -> float:
        """Width-weighted mean of the lo (or hi) bounds per scalar."""
        total = 0.0
        dims = 0
        for cls in ATTRIBUTE_ORDER:
            lo, hi = self.bounds[cls]
            w = cls.width(sh_degree)
            total += (lo if use == "lo" else hi) * w
            dims += w
        return total / dims


PRESETS = {
    "compressive": BitRangePreset(
        "compressive",
        {
            AttributeClass.MEANS: (12, 16),
            AttributeClass.SCALES: (8, 8),
            AttributeClass.QUATS: (8, 8),
            AttributeClass.OPACITIES: (6, 6),
            AttributeClass.SH_DC: (8, 8),
            AttributeClass.SH_AC: (7, 8),
        },
    ),
    "competitive": BitRangePreset(
        "competitive",
        {
            AttributeClass.MEANS: (14, 16),
            AttributeClass.SCALES: (10, 10),
            AttributeClass.QUATS: (10, 10),
            AttributeClass.OPACITIES: (8, 10),
            AttributeClass.SH_DC: (10, 10),
            AttributeClass.SH_AC: (8, 10),
        },
    ),
}


def make_bank(
    preset: BitRangePreset | str,
    shared: bool = False,
    uniform_bits: float | None = None,
) -> dict[AttributeClass, QuantizerState]:
    """Fresh quantizer states per attribute class.

    t starts where the raw width equals the preset's upper bound. ``shared``
    maps every class to one state (bounds become the union); ``uniform_bits``
    pins every class to a fixed width.
    """
    if isinstance(preset, str):
        preset = PRESETS[preset]
    if uniform_bits is not None:
        bounds = {cls: (uniform_bits, uniform_bits) for cls in ATTRIBUTE_ORDER}
    else:
        bounds = preset.bounds
    if shared:
        lo = min(b[0] for b in bounds.values())
        hi = max(b[1] for b in bounds.values())
        bounds = {cls: (lo, hi) for cls in ATTRIBUTE_ORDER}
        state = QuantizerState(b_lo=lo, b_hi=hi)
        state.t = t_for_bits(state, hi)
        return {cls: state for cls in ATTRIBUTE_ORDER}
    bank = {}
    for cls in ATTRIBUTE_ORDER:
        lo, hi = bounds[cls]
        state = QuantizerState(b_lo=lo, b_hi=hi)
        state.t = t_for_bits(state, hi)
        bank[cls] = state
    return bank


def observe_scene(bank: dict[AttributeClass, QuantizerState], scene: GaussianScene):
    """One EMA range update per distinct state from the scene's blocks."""
    peaks: dict[int, float] = {}
    states: dict[int, QuantizerState] = {}
    for cls, state in bank.items():
        block = scene.get_block(cls)
        peak = float(np.max(np.abs(block))) if block.size else 0.0
        key = id(state)
        peaks[key] = max(peaks.get(key, 0.0), peak)
        states[key] = state
    for key, state in states.items():
        update_range(state, np.array([peaks[key]]))


def quantize_scene(
    scene: GaussianScene, bank: dict[AttributeClass, QuantizerState]
) -> GaussianScene:
    """Fake-quantize every attribute block into a new scene."""
    out = scene.copy()
    for cls, state in bank.items():
        out.set_block(cls, fake_quantize(scene.get_block(cls), state))
    return out


def pinned_bank(
    bits: dict[AttributeClass, int], ranges: dict[AttributeClass, float]
) -> dict[AttributeClass, QuantizerState]:
    """Frozen states reconstructing a stored checkpoint's quantizers."""
    bank = {}
    for cls in ATTRIBUTE_ORDER:
        b = int(bits[cls])
        if not BITS_MIN <= b <= BITS_MAX:
            raise ValueError(f"bit-width {b} outside [{BITS_MIN}, {BITS_MAX}]")
        state = QuantizerState(b_lo=float(b), b_hi=float(b))
        state.t = t_for_bits(state, float(b))
        state.r = float(ranges[cls])
        state.initialized = True
        bank[cls] = state
    return bank
