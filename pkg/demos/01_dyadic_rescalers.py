"""Dyadic rescalers from first principles.

An integer-only inference engine cannot multiply by an arbitrary real
M in (0, 1].  It multiplies by an integer m and shifts right by s, which
applies the dyadic rational m * 2**-s.  This walkthrough shows how a real
multiplier is quantized to k significant bits, what the approximation
guarantees are, and why narrow widths eventually hurt.

Run:  python3 demos/01_dyadic_rescalers.py
"""

import numpy as np

from rescale_lab.errors import RescalerUnderflow
from rescale_lab.qcore import (
    MIN_BITWIDTH,
    MAX_BITWIDTH,
    multiply_by_quantized_multiplier,
    quantize_rescaler,
    shift_budget,
)

# ---------------------------------------------------------------------------
# 1. One multiplier, every width
# ---------------------------------------------------------------------------
# The multiplicand m keeps its leading bit set, so m has exactly k
# significant bits and the quantized value never exceeds the real one.

M = 0.37228
print(f"real multiplier M = {M}")
print(f"{'k':>3} {'m':>12} {'s':>3} {'m * 2^-s':>20} {'rel err':>12}")
for k in (2, 3, 4, 6, 8, 12, 16, 24, 32):
    r = quantize_rescaler(M, k)
    rel = (M - r.quantized_value) / M
    print(f"{k:>3} {r.m:>12} {r.s:>3} {r.quantized_value:>20.15f} {rel:>12.2e}")
print()
print("Each extra bit of width halves the worst-case relative error:")
print("the guarantee is M_q <= M and (M - M_q)/M < 2**-(k-1).")
print()

# ---------------------------------------------------------------------------
# 2. The guarantee, checked empirically
# ---------------------------------------------------------------------------

rng = np.random.default_rng(0)
worst = {k: 0.0 for k in range(MIN_BITWIDTH, MAX_BITWIDTH + 1)}
for value in rng.uniform(1e-6, 1.0, size=2000):
    for k in worst:
        r = quantize_rescaler(float(value), k)
        worst[k] = max(worst[k], (value - r.quantized_value) / value)
print("worst observed relative error over 2000 random multipliers:")
for k in (2, 4, 8, 16, 32):
    print(f"  k={k:<2}  worst {worst[k]:.3e}   bound {2.0 ** -(k - 1):.3e}")
assert all(worst[k] < 2.0 ** -(k - 1) for k in worst)
print("every width stays inside its bound\n")

# ---------------------------------------------------------------------------
# 3. Applying a rescaler: integer multiply + round-half-up shift
# ---------------------------------------------------------------------------
# multiply_by_quantized_multiplier computes floor((x*m + 2**(s-1)) / 2**s):
# a 64-bit product followed by a rounding right shift.  Exact halves round
# toward +infinity for both signs.

r = quantize_rescaler(0.25, 8)
print(f"rescaler for 0.25 at k=8: m={r.m}, s={r.s}")
for x in (10, 6, -6, 2, -2, 1000001):
    got = multiply_by_quantized_multiplier(x, r)
    print(f"  {x:>8} * 0.25 -> {got:>7}   (real product {x * 0.25:>10.2f})")
print("note 6 * 0.25 = 1.5 rounds up to 2, and -6 * 0.25 = -1.5 rounds up to -1\n")

# ---------------------------------------------------------------------------
# 4. Where it breaks: the shift budget
# ---------------------------------------------------------------------------
# The shift cannot exceed 32 + k - 8 without every 32-bit input rescaling
# to zero.  A k-bit rescaler therefore cannot represent multipliers below
# about 2**-25, independent of k: smaller M needs a larger s, but the
# budget grows with k exactly as fast as the required shift does.

print(f"shift budget at k=8:  {shift_budget(8)}")
print(f"shift budget at k=32: {shift_budget(32)}")
tiny = 2.0 ** -26
try:
    quantize_rescaler(tiny, 32)
except RescalerUnderflow as exc:
    print(f"quantize_rescaler({tiny!r}, 32) -> RescalerUnderflow: {exc}")

# The clamp policy degrades instead of raising: the multiplicand loses its
# leading bit (possibly all bits), and the rescaler is flagged.
import warnings

with warnings.catch_warnings():
    warnings.simplefilter("ignore")
    clamped = quantize_rescaler(tiny, 32, on_underflow="clamp")
print(f"clamp policy: m={clamped.m}, s={clamped.s}, underflowed={clamped.underflowed}")
print("a clamped rescaler waives the accuracy guarantee - prefer the error")
