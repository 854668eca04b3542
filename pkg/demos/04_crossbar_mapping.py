# %% [markdown]
# # Mapping a kernel onto a crossbar
#
# Every complex weight becomes a symmetric 4x4 block of conductances between
# 7 and 200 uS. Inputs and states enter as sign-split voltages on the rows;
# the array returns the next state and the output on its columns, so the
# output lags the digital kernel by one step.

# %%
import numpy as np

from ssmxbar import CrossbarLayout, map_kernel, zoh_discretize, init_kernel
from ssmxbar.crossbar import (IDEAL_PERIPHERY, DeviceModel, block_is_symmetric, expand_to_block,
                              overlay, program, xbar_run)
from ssmxbar.ssm import kernel_scan

print(np.round(expand_to_block(0.5 - 0.25j, w_max=1.0), 1))

# %%
dk = zoh_discretize(init_kernel(N=14, seed=0))
cp = map_kernel(dk, CrossbarLayout(N=14))
rows, cols = np.nonzero(cp.target)
print("programmed region:", rows.max() + 1, "x", cols.max() + 1, "of", cp.target.shape)
print("cells per matrix:", overlay(cp)["cell_counts"])
print("all blocks symmetric:", all(block_is_symmetric(cp.block(m, n)) for m in "ABC" for n in range(14)))

# %% [markdown]
# With ideal devices and periphery the array reproduces the digital kernel,
# shifted by one step.

# %%
u = np.random.default_rng(0).uniform(-1, 1, 200)
state = program(cp, DeviceModel(), seed=0)
state.scale = 0.2 / 5.0  # volts per signal unit
y_xbar = xbar_run(state, IDEAL_PERIPHERY, u[None])[0]
X = kernel_scan(dk.a_bar[None], dk.b_bar[None], u[None, :, None])[0, :, 0]
y_digital = X @ dk.c_bar
print("max deviation after the shift:", np.max(np.abs(y_xbar[1:] - y_digital)))
print("first crossbar output (before any state):", y_xbar[0])
