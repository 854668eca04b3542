# %% [markdown]
# # Reproducible experiments
#
# An experiment is a versioned config; every run writes into a fresh
# directory, never overwrites, and leaves a manifest with the config hash,
# seeds and artifact checksums. The same steps are available from the shell
# as `ssmxbar pipeline --config cfg.yaml --out-dir runs/x`.

# %%
import json
import tempfile
from pathlib import Path

from ssmxbar import harness as hx

cfg = hx.ExperimentConfig.from_dict({
    "version": 1,
    "experiment_id": "demo",
    "model": {"H": 2, "N": 6},
    "train": {"epochs": 5, "learning_rate": 0.03},
    "quant": {"kernel_bits": 2},
    "device": {"sigma": 10.0},
    "periphery": {"adc_bits": None},
    "data": {"n_per_class": 20},
    "sweep": {"ci_instantiations": 5},
})
print("config hash:", cfg.hash()[:16])

# %%
root = Path(tempfile.mkdtemp())
summary = hx.run_full_pipeline(cfg, hx.RunDir(root / "run1"), ci_profile=True)
print(json.dumps({k: summary[k] for k in ("software_accuracy", "ideal_accuracy", "noisy_accuracy")}, indent=1))
print(sorted(p.name for p in (root / "run1").iterdir()))

# %% [markdown]
# Same config, same seeds, new directory: the result tables match byte for byte.

# %%
hx.run_full_pipeline(cfg, hx.RunDir(root / "run2"), ci_profile=True)
same = (root / "run1" / "results.csv").read_bytes() == (root / "run2" / "results.csv").read_bytes()
print("results.csv identical:", same)
print((root / "run1" / "results.csv").read_text()[:300])
