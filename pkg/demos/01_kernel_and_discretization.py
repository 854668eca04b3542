# %% [markdown]
# # Diagonal state-space kernels
#
# A kernel holds N complex modes `a_n`, an input vector `b` and an output
# vector `c`. Zero-order hold turns the continuous modes into a recurrence
# `x_t = a_bar * x_{t-1} + b_bar * u_t`, `y_t = Re(c . x_t)`.

# %%
import numpy as np

from ssmxbar import init_kernel, kernel_conv_unroll, kernel_run, zoh_discretize

k = init_kernel(N=4, seed=0)
print("continuous modes a_n:", np.round(k.a, 3))
print("step size dt:", round(k.dt, 5))

# %%
dk = zoh_discretize(k)
print("|a_bar| < 1 for every mode:", np.all(np.abs(dk.a_bar) < 1))
# closed form of the zero-order hold input gain
print("b_bar matches (exp(dt a) - 1) / a:",
      np.allclose(dk.b_bar, (np.exp(k.dt * k.a) - 1) / k.a * k.b_re))

# %% [markdown]
# The recurrence and the unrolled convolution `y = K * u` with
# `K_j = Re(sum_n c_n a_bar_n^j b_bar_n)` are the same linear map.

# %%
u = np.sin(np.arange(64) / 5.0)
y_rec = kernel_run(dk, u)
y_conv = kernel_conv_unroll(dk, u)
print("max |recurrence - convolution|:", np.max(np.abs(y_rec - y_conv)))

# %%
impulse = np.zeros(32)
impulse[0] = 1.0
print("impulse response (first 8 steps):", np.round(kernel_run(dk, impulse).real[:8], 4))
