# %% [markdown]
# # Fixed dynamic range quantization
#
# Values snap to `k * f / 2**(bits-1)` and clamp to `[-f, f]`. With a fixed
# `f` the real and imaginary parts of every complex parameter share one
# signal range, which is what an analog array with a fixed supply needs.

# %%
import numpy as np

from ssmxbar import QuantSpec, init_kernel, quantize, quantize_complex

spec = QuantSpec(bits=2, f_scale=1.0)
for x in (0.3, -0.9, 0.25, 7.0):
    print(f"quantize({x}) = {quantize(x, spec)}")

# %% [markdown]
# At two bits with `f = 1` the sign-constrained A matrix becomes ternary:
# real parts land in {-1, -0.5, 0}, imaginary parts in {0, 0.5, 1}.

# %%
a = init_kernel(N=14, seed=3).a
re, im = quantize_complex(a.real, a.imag, spec)
print("real levels:", sorted(set(re.tolist())))
print("imag levels:", sorted(set(im.tolist())))

# %% [markdown]
# Larger fixed ranges spend the same two bits on a wider grid; the S4D-Lin
# initialization then rounds its damping to zero.

# %%
for f in (1, 3, 10):
    re, im = quantize_complex(a.real, a.imag, QuantSpec(2, f))
    print(f"f={f:>2}: real {sorted(set(re.tolist()))}, imag {sorted(set(im.tolist()))}")

# %% [markdown]
# Dynamic range picks `f = max |x|` per tensor. Real and imaginary parts of A
# then get separate ranges, the conventional choice.

# %%
re, im = quantize_complex(a.real, a.imag, QuantSpec(4, mode="dynamic"), shared=False)
print("dynamic, 4 bits, distinct real values:", len(set(re)), "imag values:", len(set(im)))
