# %% [markdown]
# # Write noise and stuck devices
#
# Programming lands each conductance near its target with Gaussian error of
# standard deviation sigma; a few devices stick at 300 uS. We deploy one small
# trained model many times and look at the accuracy spread.

# %%
import numpy as np

from ssmxbar import ModelConfig, TrainConfig, default_quant, deploy_model, synth_dataset
from ssmxbar.train import train
from ssmxbar.crossbar import IDEAL_PERIPHERY, DeviceModel, PeripheryModel, calibrate, default_p_stuck, map_model

ds = synth_dataset(n_per_class=30, seed=2)
quant = default_quant(2)
params, report = train(ds, TrainConfig(epochs=10, learning_rate=0.03, quant=quant, model=ModelConfig()))
print("software accuracy:", report.final_test_accuracy)

programs = map_model(params, quant)
ranges = calibrate(params, quant, ds.x_train)
periphery = PeripheryModel(adc_bits=None)  # isolate device effects from converter resolution

# %%
for sigma in (0, 5, 15, 30):
    accs = [deploy_model(params, DeviceModel(sigma), periphery, s, quant, programs=programs, ranges=ranges)
            .accuracy(ds.x_test, ds.y_test) for s in range(8)]
    print(f"sigma={sigma:>2} uS  median {np.median(accs):.3f}  range [{min(accs):.3f}, {max(accs):.3f}]")

# %% [markdown]
# The discretized recurrent weights sit within about 0.01 of the unit circle,
# and 5 uS of write noise moves a weight by about 0.04 at this conductance
# span. Many modes therefore become unstable and the states saturate at the
# clipping rails, which leaves the classifier at chance.

# %% [markdown]
# Stuck-high devices: about two per kernel on average. Reprogramming the stuck
# cells to their targets brings back the ideal outputs exactly.

# %%
p_stuck = default_p_stuck(programs[0].layout, expected=2.0)
ideal = deploy_model(params, DeviceModel(), IDEAL_PERIPHERY, 0, quant, programs=programs, ranges=ranges)
faulty = deploy_model(params, DeviceModel(p_stuck=p_stuck), IDEAL_PERIPHERY, 4, quant, programs=programs,
                      ranges=ranges)
print("stuck devices per array:", [int(a.stuck.sum()) for a in faulty.arrays])
print("accuracy ideal / faulty:", ideal.accuracy(ds.x_test, ds.y_test), faulty.accuracy(ds.x_test, ds.y_test))
for a in faulty.arrays:
    a.restore_stuck()
print("scores identical after restoring:", np.array_equal(faulty(ds.x_test), ideal(ds.x_test)))
print("expected stuck count at the default probability:", round(p_stuck * programs[0].layout.n_programmed, 2))
