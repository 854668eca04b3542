# %% [markdown]
# # Quantization-aware training on the two-tone task
#
# The forward pass runs at quantized parameters, gradients are computed by
# hand-written backpropagation through time and passed straight through the
# quantizer to the full precision copy.

# %%
import numpy as np

from ssmxbar import ModelConfig, TrainConfig, default_quant, synth_dataset
from ssmxbar.train import train
from ssmxbar.train import accuracy

ds = synth_dataset(n_per_class=40, seed=1)
print("train/test sizes:", ds.class_counts())

# %%
cfg = TrainConfig(epochs=15, learning_rate=0.03, seed=0, quant=default_quant(2, a_fscale=1.0),
                  model=ModelConfig(H=3, N=14))
params, report = train(ds, cfg)
print("test accuracy per epoch:", np.round(report.test_accuracy, 2))
print("best epoch:", report.best_epoch, "accuracy:", report.final_test_accuracy)

# %% [markdown]
# The trained raw parameters are continuous; the deployed ones are the
# quantized views.

# %%
from ssmxbar.train import effective_tensors

_, a_q, c_q = effective_tensors(params, cfg.quant)
print("distinct quantized A values in kernel 0:", sorted(set(np.round(a_q[0], 3).tolist()), key=abs))
print("accuracy at quantized parameters:", accuracy(params, cfg.quant, ds.x_test, ds.y_test))
