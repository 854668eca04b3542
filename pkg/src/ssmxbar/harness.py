"""Experiment plumbing: versioned configs, seeded sweeps and write-once artifacts.

A run directory only ever gains files. Result CSVs carry no timestamps so that
two runs with the same config and seeds produce byte-identical tables; wall
clock times live in the per-command run manifest instead.
"""

from __future__ import annotations

import copy
import csv
import hashlib
import io
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .audio import DatasetManifest, build_dataset, dataset_to_bytes, load_dataset, synth_dataset
from .crossbar import (
    IDEAL_PERIPHERY,
    ConductanceProgram,
    DeviceModel,
    PeripheryModel,
    calibrate,
    default_p_stuck,
    deploy_model,
    heatmap_csv,
    map_model,
    overlay,
    PROGRAM_FORMAT,
    PROGRAM_VERSION,
)
from .errors import ConfigError, DataError, StageError
from .ssm import ModelConfig, params_from_dict, params_to_dict
from .train import (
    TrainConfig,
    default_quant,
    predict_quantized,
    sweep_quantization,
    train,
)

log = logging.getLogger(__name__)

CONFIG_VERSION = 1
RESULT_VERSION = 1
MANIFEST_FORMAT = "ssmxbar-run-manifest"

RESULT_COLUMNS = ("version", "experiment_id", "bits", "f_scale", "sigma", "seed", "metric", "value")
SUMMARY_COLUMNS = ("version", "experiment_id", "bits", "sigma", "metric", "n",
                   "median", "q1", "q3", "min", "max")

DEFAULTS = {
    "model": {"H": 3, "N": 14, "n_classes": 2},
    "train": {"learning_rate": 1e-3, "epochs": 100, "batch_size": 32, "cosine_decay": False},
    "quant": {"kernel_bits": None, "a_fscale": 1.0, "c_fscale": 1.0, "dense_bits": 8},
    "device": {"sigma": 0.0, "p_stuck": 0.0, "g_stuck": 300.0},
    "periphery": {"v_max": 0.2, "adc_bits": 8, "dac_bits": None, "clip": True,
                  "calibrate": True, "margin": 1.25},
    "data": {"source": "synthetic", "manifest": None, "cache": None, "n_per_class": 100,
             "test_fraction": 0.2, "synth": {}},
    "sweep": {"bits": [2, 3, 4, 5, 6, 8], "f_scales": [1, 3, 10, "dynamic"], "train_seeds": [0],
              "sigmas": [0, 5, 10, 15, 20], "noise_bits": [2, 5], "instantiations": 100,
              "ci_instantiations": 10, "checkpoints": {}},
    "seeds": {"data": 0, "train": 0, "deploy": 0},
}
SCALARS = {"experiment_id": "default", "output_dir": "runs/default"}
SYNTH_KEYS = {"low_cycles", "high_cycles", "freq_jitter", "noise"}
DATA_SOURCES = ("synthetic", "manifest", "cache")


class ArtifactExistsError(ConfigError):
    """Raised instead of overwriting a file from an earlier run."""


class MissingCheckpointError(DataError):
    pass


# ---------------------------------------------------------------------------
# configuration

@dataclass
class ExperimentConfig:
    model: dict = field(default_factory=lambda: copy.deepcopy(DEFAULTS["model"]))
    train: dict = field(default_factory=lambda: copy.deepcopy(DEFAULTS["train"]))
    quant: dict = field(default_factory=lambda: copy.deepcopy(DEFAULTS["quant"]))
    device: dict = field(default_factory=lambda: copy.deepcopy(DEFAULTS["device"]))
    periphery: dict = field(default_factory=lambda: copy.deepcopy(DEFAULTS["periphery"]))
    data: dict = field(default_factory=lambda: copy.deepcopy(DEFAULTS["data"]))
    sweep: dict = field(default_factory=lambda: copy.deepcopy(DEFAULTS["sweep"]))
    seeds: dict = field(default_factory=lambda: copy.deepcopy(DEFAULTS["seeds"]))
    experiment_id: str = SCALARS["experiment_id"]
    output_dir: str = SCALARS["output_dir"]
    version: int = CONFIG_VERSION

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        if not isinstance(d, dict):
            raise ConfigError("config must be a mapping")
        if "version" not in d:
            raise ConfigError("config is missing the 'version' tag")
        if d["version"] != CONFIG_VERSION:
            raise ConfigError(f"unsupported config version {d['version']!r} (expected {CONFIG_VERSION})")
        unknown = set(d) - set(DEFAULTS) - set(SCALARS) - {"version"}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kwargs = {k: d[k] for k in SCALARS if k in d}
        for section, defaults in DEFAULTS.items():
            given = d.get(section) or {}
            if not isinstance(given, dict):
                raise ConfigError(f"section {section!r} must be a mapping")
            bad = set(given) - set(defaults)
            if bad:
                raise ConfigError(f"unknown keys in {section!r}: {sorted(bad)}")
            kwargs[section] = {**copy.deepcopy(defaults), **copy.deepcopy(given)}
        cfg = cls(**kwargs)
        cfg.validate()
        return cfg

    def validate(self):
        bad = set(self.data["synth"]) - SYNTH_KEYS
        if bad:
            raise ConfigError(f"unknown keys in 'data.synth': {sorted(bad)}")
        if self.data["source"] not in DATA_SOURCES:
            raise ConfigError(f"data.source must be one of {DATA_SOURCES}")
        if self.data["source"] in ("manifest", "cache") and not self.data[self.data["source"]]:
            raise ConfigError(f"data.source={self.data['source']!r} needs data.{self.data['source']}")
        for key in ("instantiations", "ci_instantiations"):
            if int(self.sweep[key]) < 1:
                raise ConfigError(f"sweep.{key} must be >= 1")
        for key in ("data", "train", "deploy"):
            if not isinstance(self.seeds[key], int) or self.seeds[key] < 0:
                raise ConfigError(f"seeds.{key} must be a non-negative integer")
        if self.device["p_stuck"] != "default" and not 0 <= float(self.device["p_stuck"]) <= 1:
            raise ConfigError("device.p_stuck must be in [0, 1] or 'default'")
        self.model_config(10)
        self.quant_map()
        self.periphery_model()

    def to_dict(self) -> dict:
        return asdict(self)

    def hash(self) -> str:
        text = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()

    def with_overrides(self, seed=None, output_dir=None) -> "ExperimentConfig":
        d = self.to_dict()
        if seed is not None:
            d["seeds"] = {k: int(seed) for k in d["seeds"]}
        if output_dir is not None:
            d["output_dir"] = str(output_dir)
        return ExperimentConfig.from_dict(d)

    # --- builders for the library objects ----------------------------------

    def model_config(self, sequence_length: int) -> ModelConfig:
        return ModelConfig(n_layers=1, sequence_length=int(sequence_length), **self.model)

    def quant_map(self, kernel_bits="config", a_fscale=None) -> dict:
        q = self.quant
        bits = q["kernel_bits"] if kernel_bits == "config" else kernel_bits
        return default_quant(bits, a_fscale if a_fscale is not None else q["a_fscale"],
                             q["c_fscale"], q["dense_bits"])

    def train_config(self, sequence_length: int, quant: dict, seed=None) -> TrainConfig:
        return TrainConfig(model=self.model_config(sequence_length), quant=quant,
                           seed=self.seeds["train"] if seed is None else seed, **self.train)

    def device_model(self, sigma=None, n_state=None) -> DeviceModel:
        p = self.device["p_stuck"]
        if p == "default":
            from .crossbar import CrossbarLayout

            p = default_p_stuck(CrossbarLayout(N=n_state or self.model["N"]))
        return DeviceModel(float(self.device["sigma"] if sigma is None else sigma), float(p),
                           float(self.device["g_stuck"]))

    def periphery_model(self) -> PeripheryModel:
        p = self.periphery
        return PeripheryModel(float(p["v_max"]), p["dac_bits"], p["adc_bits"], bool(p["clip"]))

    def instantiations(self, ci_profile=False) -> int:
        return int(self.sweep["ci_instantiations" if ci_profile else "instantiations"])


def load_config(path) -> ExperimentConfig:
    """Read a YAML or JSON experiment config."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML/JSON ({exc})") from exc
    return ExperimentConfig.from_dict(doc)


def default_config(**sections) -> ExperimentConfig:
    return ExperimentConfig.from_dict({"version": CONFIG_VERSION, **sections})


def load_data(cfg: ExperimentConfig):
    d = cfg.data
    if d["source"] == "synthetic":
        return synth_dataset(int(d["n_per_class"]), cfg.seeds["data"], float(d["test_fraction"]), **d["synth"])
    if d["source"] == "manifest":
        return build_dataset(DatasetManifest.read_csv(d["manifest"]))
    return load_dataset(d["cache"])


# ---------------------------------------------------------------------------
# results

@dataclass
class ResultRow:
    experiment_id: str
    metric: str
    value: float
    bits: object = None
    f_scale: object = None
    sigma: object = None
    seed: object = None
    timestamp: str = field(default_factory=lambda: _now())

    def __post_init__(self):
        self.value = float(self.value)
        if math.isinf(self.value):
            raise ConfigError(f"metric {self.metric} must be finite or NaN")

    def csv_fields(self) -> dict:
        def fmt(x):
            return "" if x is None else x

        return {"version": RESULT_VERSION, "experiment_id": self.experiment_id, "bits": fmt(self.bits),
                "f_scale": fmt(self.f_scale), "sigma": fmt(self.sigma), "seed": fmt(self.seed),
                "metric": self.metric, "value": _fmt_value(self.value)}


class ResultTable:
    """Append-only collection of rows; rendered in sort-key order."""

    def __init__(self, experiment_id: str):
        self.experiment_id = experiment_id
        self._rows: list[ResultRow] = []

    def append(self, metric, value, **params) -> ResultRow:
        row = ResultRow(self.experiment_id, metric, value, **params)
        self._rows.append(row)
        return row

    @property
    def rows(self) -> tuple:
        return tuple(self._rows)

    def to_csv(self) -> str:
        def key(r):
            return (r.metric, _sort_key(r.bits), _sort_key(r.f_scale), _sort_key(r.sigma), _sort_key(r.seed))

        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=RESULT_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in sorted(self._rows, key=key):
            w.writerow(r.csv_fields())
        return buf.getvalue()

    def values(self, metric, **params) -> np.ndarray:
        out = [r.value for r in self._rows if r.metric == metric
               and all(getattr(r, k) == v for k, v in params.items())]
        return np.array(out)


def _sort_key(x):
    if x is None:
        return (0, 0.0, "")
    if isinstance(x, (int, float, np.integer, np.floating)):
        return (1, float(x), "")
    return (2, 0.0, str(x))


def _fmt_value(v: float) -> str:
    return "nan" if math.isnan(v) else repr(round(float(v), 10))


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def summarize(table: ResultTable, metric="accuracy", by=("bits", "sigma")) -> list:
    """Median and quartiles per group, in sort-key order."""
    groups = {}
    for r in table.rows:
        if r.metric == metric:
            groups.setdefault(tuple(getattr(r, k) for k in by), []).append(r.value)
    out = []
    for key in sorted(groups, key=lambda k: tuple(_sort_key(x) for x in k)):
        v = np.array(groups[key])
        v = v[~np.isnan(v)]
        q = [float(x) for x in np.percentile(v, [0, 25, 50, 75, 100])] if len(v) else [float("nan")] * 5
        out.append({"version": RESULT_VERSION, "experiment_id": table.experiment_id,
                    **dict(zip(by, key)), "metric": metric, "n": len(v),
                    "median": q[2], "q1": q[1], "q3": q[3], "min": q[0], "max": q[4]})
    return out


def summary_csv(summary: list) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=SUMMARY_COLUMNS, lineterminator="\n", extrasaction="ignore")
    w.writeheader()
    for row in summary:
        w.writerow({k: _fmt_value(v) if isinstance(v, (float, np.floating)) else ("" if v is None else v)
                    for k, v in row.items()})
    return buf.getvalue()


# ---------------------------------------------------------------------------
# write-once run directory

class RunDir:
    """Output directory that refuses to overwrite and tracks what it wrote."""

    def __init__(self, path):
        self.path = Path(path)
        self.path.mkdir(parents=True, exist_ok=True)
        self.artifacts: dict = {}

    def _target(self, name) -> Path:
        target = self.path / name
        if target.exists():
            raise ArtifactExistsError(f"{target} already exists; choose a fresh --out-dir")
        return target

    def check_free(self, *names):
        for name in names:
            self._target(name)

    def write_bytes(self, name: str, data: bytes) -> Path:
        target = self._target(name)
        with open(target, "xb") as fh:
            fh.write(data)
        self.artifacts[name] = {"path": str(target), "sha256": hashlib.sha256(data).hexdigest()}
        return target

    def write_text(self, name: str, text: str) -> Path:
        return self.write_bytes(name, text.encode())

    def write_json(self, name: str, obj) -> Path:
        return self.write_text(name, json.dumps(obj, indent=1, sort_keys=True, default=_json_default) + "\n")

    def write_manifest(self, command: str, cfg: ExperimentConfig, started: str, extra=None) -> Path:
        doc = {"format": MANIFEST_FORMAT, "version": 1, "command": command, "package_version": __version__,
               "experiment_id": cfg.experiment_id, "config_hash": cfg.hash(), "config": cfg.to_dict(),
               "seeds": cfg.seeds, "artifacts": dict(self.artifacts), "started": started, "finished": _now(),
               **(extra or {})}
        return self.write_json(f"manifest-{command}.json", doc)


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"cannot serialize {type(o).__name__}")


def checkpoint_json(p, quant) -> str:
    return json.dumps(params_to_dict(p, quant), indent=1) + "\n"


def programs_json(programs, meta=None) -> str:
    return json.dumps({"format": PROGRAM_FORMAT + "-set", "version": PROGRAM_VERSION,
                       "arrays": [cp.to_dict() for cp in programs], "meta": meta or {}}) + "\n"


def load_checkpoint_file(path):
    path = Path(path)
    if not path.exists():
        raise MissingCheckpointError(f"checkpoint {path} does not exist")
    try:
        return params_from_dict(json.loads(path.read_text()))
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: not valid JSON ({exc})") from exc


# ---------------------------------------------------------------------------
# operations

def instance_seed(base: int, bits, sigma, index: int) -> int:
    sig = int(round(float(sigma) * 1000))
    b = 0 if bits is None else int(bits)
    return int(np.random.SeedSequence([int(base), b, sig, int(index)]).generate_state(1)[0])


def _deployment_inputs(cfg, p, quant, dataset):
    programs = map_model(p, quant)
    calib = dataset.x_train if cfg.periphery["calibrate"] else None
    ranges = calibrate(p, quant, calib, float(cfg.periphery["margin"]))
    return programs, ranges


def evaluate_instances(cfg, p, quant, dataset, sigma, n, bits=None, threads=1, periphery=None, programs=None,
                       ranges=None):
    """Test accuracy of ``n`` independently programmed crossbar deployments."""
    if programs is None or ranges is None:
        programs, ranges = _deployment_inputs(cfg, p, quant, dataset)
    dev = cfg.device_model(sigma, p.config.N)
    periphery = periphery or cfg.periphery_model()

    def one(i):
        seed = instance_seed(cfg.seeds["deploy"], bits, sigma, i)
        m = deploy_model(p, dev, periphery, seed, quant, programs=programs, ranges=ranges)
        return m.accuracy(dataset.x_test, dataset.y_test)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(one, range(n)))
    return [one(i) for i in range(n)]


def run_noise_sweep(cfg: ExperimentConfig, checkpoints=None, dataset=None, ci_profile=False, threads=1):
    """Accuracy distribution over seeded write-noise instantiations.

    ``checkpoints`` maps bit width to a checkpoint path or a ``(params, quant)``
    pair; defaults to ``cfg.sweep['checkpoints']``. Every path is checked
    before any simulation starts. Returns ``(table, summary)``.
    """
    checkpoints = dict(cfg.sweep["checkpoints"] if checkpoints is None else checkpoints)
    checkpoints = {int(k): v for k, v in checkpoints.items()}
    bit_list = [int(b) for b in cfg.sweep["noise_bits"]]
    missing = [b for b in bit_list if b not in checkpoints]
    missing += [b for b in bit_list if b in checkpoints and isinstance(checkpoints[b], (str, Path))
                and not Path(checkpoints[b]).exists()]
    if missing:
        raise MissingCheckpointError(
            "missing trained checkpoints for bit widths " + ", ".join(
                f"{b} ({checkpoints.get(b, 'not configured')})" for b in sorted(set(missing))))
    models = {b: load_checkpoint_file(c) if isinstance(c, (str, Path)) else c for b, c in checkpoints.items()
              if b in bit_list}
    dataset = dataset if dataset is not None else load_data(cfg)
    n = cfg.instantiations(ci_profile)
    table = ResultTable(cfg.experiment_id)
    for bits in bit_list:
        p, quant = models[bits]
        quant = quant or cfg.quant_map(kernel_bits=bits)
        programs, ranges = _deployment_inputs(cfg, p, quant, dataset)
        sw = float(np.mean(predict_quantized(p, quant, dataset.x_test) == dataset.y_test))
        table.append("software_accuracy", sw, bits=bits)
        for sigma in cfg.sweep["sigmas"]:
            accs = evaluate_instances(cfg, p, quant, dataset, float(sigma), n, bits, threads,
                                      programs=programs, ranges=ranges)
            for i, acc in enumerate(accs):
                table.append("accuracy", acc, bits=bits, sigma=sigma, seed=i)
            log.info("noise sweep bits=%d sigma=%s median=%.3f", bits, sigma, np.median(accs))
    return table, summarize(table)


def run_quant_sweep(cfg: ExperimentConfig, dataset=None):
    """Bit width x dynamic range sweep of the A matrix (one trained model per point)."""
    dataset = dataset if dataset is not None else load_data(cfg)
    tcfg = cfg.train_config(dataset.x_train.shape[1], cfg.quant_map(kernel_bits=None))
    rows = sweep_quantization(dataset, cfg.sweep["bits"], cfg.sweep["f_scales"], tcfg,
                              seeds=cfg.sweep["train_seeds"])
    table = ResultTable(cfg.experiment_id)
    for r in rows:
        table.append("accuracy", r["accuracy"], bits=r["bits"], f_scale=r["f_scale"], seed=r["seed"])
    return table


def export_heatmap(cp: ConductanceProgram, out: RunDir, stem="heatmap"):
    """Write the conductance grid (uS) as CSV plus the block overlay as JSON."""
    grid = out.write_text(f"{stem}.csv", heatmap_csv(cp.target))
    ov = out.write_json(f"{stem}_overlay.json", overlay(cp))
    return grid, ov


def run_full_pipeline(cfg: ExperimentConfig, out: RunDir | None = None, dataset=None, ci_profile=False,
                      threads=1) -> dict:
    """data -> QAT training -> mapping -> ideal deployment -> noisy deployment.

    Artifacts are written as each stage finishes; a failing stage leaves them in
    place, writes ``summary.json`` naming the stage and raises ``StageError``.
    """
    out = out or RunDir(cfg.output_dir)
    started = _now()
    out.check_free("summary.json", "results.csv", "manifest-pipeline.json")
    summary = {"experiment_id": cfg.experiment_id, "config_hash": cfg.hash(), "stages": {}}
    table = ResultTable(cfg.experiment_id)
    state = {}

    def stage(name, fn):
        try:
            fn()
        except Exception as exc:
            summary["stages"][name] = "failed"
            summary["failed_stage"] = name
            summary["error"] = str(exc)
            out.write_json("summary.json", summary)
            out.write_text("results.csv", table.to_csv())
            out.write_manifest("pipeline", cfg, started, {"failed_stage": name})
            raise StageError(name, exc) from exc
        summary["stages"][name] = "ok"

    def data():
        ds = dataset if dataset is not None else load_data(cfg)
        out.write_bytes("dataset.npz", dataset_to_bytes(ds))
        state["ds"] = ds
        summary["dataset"] = {"n_train": int(len(ds.y_train)), "n_test": int(len(ds.y_test)),
                              "class_counts": ds.class_counts()}

    def train_stage():
        ds = state["ds"]
        quant = cfg.quant_map()
        p, report = train(ds, cfg.train_config(ds.x_train.shape[1], quant))
        out.write_text("checkpoint.json", checkpoint_json(p, quant))
        rep = report.to_dict()
        rep.pop("wall_seconds")
        out.write_json("train_report.json", rep)
        sw = float(np.mean(predict_quantized(p, quant, ds.x_test) == ds.y_test))
        table.append("software_accuracy", sw)
        summary["software_accuracy"] = sw
        state.update(p=p, quant=quant, sw_pred=predict_quantized(p, quant, ds.x_test))

    def map_stage():
        programs, ranges = _deployment_inputs(cfg, state["p"], state["quant"], state["ds"])
        out.write_text("program.json", programs_json(programs, {"ranges": ranges.tolist()}))
        export_heatmap(programs[0], out, "heatmap_kernel0")
        state.update(programs=programs, ranges=ranges)

    def ideal_stage():
        ds, p, quant = state["ds"], state["p"], state["quant"]
        m = deploy_model(p, DeviceModel(), IDEAL_PERIPHERY, 0, quant, programs=state["programs"],
                         ranges=state["ranges"])
        pred = m.predict(ds.x_test)
        acc = float(np.mean(pred == ds.y_test))
        table.append("ideal_accuracy", acc)
        summary["ideal_accuracy"] = acc
        summary["ideal_matches_software"] = bool(np.array_equal(pred, state["sw_pred"]))

    def noisy_stage():
        ds, p, quant = state["ds"], state["p"], state["quant"]
        sigma = float(cfg.device["sigma"])
        n = cfg.instantiations(ci_profile)
        accs = evaluate_instances(cfg, p, quant, ds, sigma, n, cfg.quant["kernel_bits"], threads,
                                  programs=state["programs"], ranges=state["ranges"])
        for i, a in enumerate(accs):
            table.append("accuracy", a, bits=cfg.quant["kernel_bits"], sigma=sigma, seed=i)
        q = [float(x) for x in np.percentile(accs, [0, 25, 50, 75, 100])]
        summary["noisy_accuracy"] = {"sigma": sigma, "p_stuck": cfg.device_model(sigma, p.config.N).p_stuck,
                                     "n": n, "min": q[0], "q1": q[1], "median": q[2], "q3": q[3], "max": q[4]}

    stage("data", data)
    stage("train", train_stage)
    stage("map", map_stage)
    stage("ideal_deploy", ideal_stage)
    stage("noisy_deploy", noisy_stage)
    out.write_text("results.csv", table.to_csv())
    out.write_text("noise_summary.csv", summary_csv(summarize(table)))
    out.write_json("summary.json", summary)
    out.write_manifest("pipeline", cfg, started)
    return summary
