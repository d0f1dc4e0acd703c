"""Learnable-width quantizers and the preset bit ranges.

Shows how a quantizer's bit-width is parameterized, how fake quantization
behaves across widths, how the clip range calibrates itself from data,
and what the per-attribute presets cost in image quality.

Run from the repo root:  python3 demos/02_quantization.py
"""

import numpy as np

from g3dpack import render, synth
from g3dpack.quant import (
    PRESETS,
    QuantizerState,
    bitwidth,
    bitwidth_raw,
    bits_int,
    fake_quantize,
    make_bank,
    observe_scene,
    quantize_scene,
    t_for_bits,
    update_range,
)
from g3dpack.scene import ATTRIBUTE_ORDER

# ---------------------------------------------------------------------------
# A quantizer does not store its bit-width directly. The width is a smooth
# function of three learnable scalars (q_m, t, d), clamped into [b_lo, b_hi],
# so the optimizer can trade precision against distortion by gradient.

state = QuantizerState(q_m=2.0, t=8.0, d=1.0, b_lo=2.0, b_hi=16.0, r=1.0)
print(f"(q_m=2, t=8, d=1): raw width {bitwidth_raw(state):.4f}, "
      f"clamped {bitwidth(state):.4f}, integer grid {bits_int(state)}")

state.t = t_for_bits(state, 6.0)
print(f"t_for_bits inverts the formula: t={state.t:.4f} gives "
      f"raw width {bitwidth_raw(state):.6f}")

# ---------------------------------------------------------------------------
# Fake quantization rounds onto the integer grid inside the clip range and
# stays in float arithmetic, so training sees exactly what deployment will.
# The error is bounded by half a grid step; halving the width doubles it.

rng = np.random.default_rng(0)
x = rng.uniform(-1.0, 1.0, size=20_000)
state.initialized = True
print("\nwidth   grid step   max |x - q(x)|")
for bits in (4, 6, 8, 10):
    state.t = t_for_bits(state, float(bits))
    q = fake_quantize(x, state)
    step = state.r / (2.0 ** (bits - 1.0) - 1.0)
    print(f"{bits:5d}   {step:.6f}   {np.abs(x - q).max():.6f}")

# ---------------------------------------------------------------------------
# The clip range r is not learned; it tracks an exponential moving average
# of the observed absolute maximum, so it follows slow drift in the data.

cal = QuantizerState(r=1.0)
for scale in (0.5, 0.8, 1.2, 2.0, 2.0, 2.0):
    update_range(cal, rng.normal(scale=scale, size=256))
    print(f"observed batch scale {scale:.1f} -> clip range {cal.r:.3f}")

# ---------------------------------------------------------------------------
# Attribute classes get separate quantizers with preset width ranges:
# positions need more precision than opacities, and the view-dependent SH
# residual tolerates the least. Each preset brackets where widths may land.

for name, preset in PRESETS.items():
    avg_lo = preset.average_bits(3, "lo")
    avg_hi = preset.average_bits(3, "hi")
    print(f"\npreset {name!r}: average width {avg_lo:.3f} (floor) to "
          f"{avg_hi:.3f} (start)")
    for cls in ATTRIBUTE_ORDER:
        lo, hi = preset.bounds[cls]
        print(f"  {cls.value:10s} [{lo:g}, {hi:g}] bits")

# Quantizing a real scene at each preset's floor widths shows the cost in
# reconstruction quality; a blunt uniform 4-bit bank is far worse.
scene, cameras, targets = synth.synthesize_scene(3, 32, "random-blob",
                                                 resolution=32)
for label, bank in (
    ("compressive floor", make_bank("compressive")),
    ("uniform 4-bit", make_bank("compressive", uniform_bits=4)),
):
    for st in {id(s): s for s in bank.values()}.values():
        st.t = t_for_bits(st, st.b_lo)
    observe_scene(bank, scene)
    quantized = quantize_scene(scene, bank)
    print(f"{label:18s}: PSNR {render.mean_psnr(quantized, cameras, targets):.2f} dB")
