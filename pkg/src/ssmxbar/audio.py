"""Raw-audio ingestion for the two-word task, plus a synthetic stand-in dataset.

Every sequence is 871 samples long: the waveform is peak-normalized, padded
or truncated to 871 * 64 raw samples and reduced by averaging blocks of 64.
FLAC sources must be converted to 16-bit mono WAV beforehand, e.g.
``ffmpeg -i in.flac -ac 1 -sample_fmt s16 out.wav``.
"""

from __future__ import annotations

import csv
import io
import json
import wave
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, IngestError

SEQ_LEN = 871
DOWNSAMPLE = 64
RAW_LEN = SEQ_LEN * DOWNSAMPLE
LABEL_MAP = {"zero": 0, "one": 1}
SPLITS = ("train", "test")
DATASET_FORMAT = "ssmxbar-dataset"
DATASET_VERSION = 1


@dataclass
class Sequence:
    samples: np.ndarray
    label: int
    source_id: str

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.shape != (SEQ_LEN,):
            raise DataError(f"{self.source_id}: sequence must have {SEQ_LEN} samples")
        if np.max(np.abs(self.samples)) > 1.0 + 1e-12:
            raise DataError(f"{self.source_id}: samples exceed [-1, 1]")


@dataclass
class ManifestEntry:
    path: str
    label: int
    split: str


@dataclass
class DatasetManifest:
    entries: list = field(default_factory=list)
    label_map: dict = field(default_factory=lambda: dict(LABEL_MAP))

    def __post_init__(self):
        labels = set(self.label_map.values())
        for e in self.entries:
            if e.label not in labels:
                raise ConfigError(f"{e.path}: label {e.label} not in label map")
            if e.split not in SPLITS:
                raise ConfigError(f"{e.path}: unknown split {e.split!r}")
        seen = {}
        for e in self.entries:
            if seen.setdefault(e.path, e.split) != e.split:
                raise ConfigError(f"{e.path} appears in more than one split")

    @classmethod
    def read_csv(cls, path, label_map=None):
        """Read a ``path,label,split`` CSV. Labels may be names (``zero``) or ids.
        Relative paths resolve against the manifest's directory."""
        label_map = dict(LABEL_MAP if label_map is None else label_map)
        base = Path(path).parent
        entries = []
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames is None or set(reader.fieldnames) != {"path", "label", "split"}:
                raise ConfigError(f"{path}: manifest header must be 'path,label,split'")
            for row in reader:
                raw = row["label"].strip()
                label = label_map[raw] if raw in label_map else int(raw)
                p = Path(row["path"].strip())
                entries.append(ManifestEntry(str(p if p.is_absolute() else base / p), label, row["split"].strip()))
        return cls(entries, label_map)


@dataclass
class Dataset:
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    ids_train: list = field(default_factory=list)
    ids_test: list = field(default_factory=list)

    def class_counts(self) -> dict:
        out = {}
        for split, y in (("train", self.y_train), ("test", self.y_test)):
            labels, counts = np.unique(y, return_counts=True)
            out[split] = {int(k): int(c) for k, c in zip(labels, counts)}
        return out

    def __len__(self):
        return len(self.y_train) + len(self.y_test)


# ---------------------------------------------------------------------------
# WAV decoding and preprocessing

def read_wav(path) -> np.ndarray:
    try:
        with wave.open(str(path), "rb") as w:
            if w.getnchannels() != 1:
                raise IngestError(f"{path}: expected mono audio, got {w.getnchannels()} channels")
            if w.getsampwidth() != 2:
                raise IngestError(f"{path}: expected 16-bit PCM, got {8 * w.getsampwidth()}-bit")
            frames = w.readframes(w.getnframes())
    except (wave.Error, EOFError, OSError) as exc:
        raise IngestError(f"{path}: cannot read WAV file ({exc})") from exc
    return np.frombuffer(frames, dtype="<i2").astype(np.float64) / 32768.0


def preprocess(raw) -> np.ndarray:
    """Peak-normalize, pad/truncate to ``RAW_LEN`` and block-average by ``DOWNSAMPLE``."""
    raw = np.asarray(raw, dtype=np.float64)
    peak = np.max(np.abs(raw)) if raw.size else 0.0
    x = raw / peak if peak > 0 else np.zeros_like(raw)
    buf = np.zeros(RAW_LEN)
    n = min(len(x), RAW_LEN)
    buf[:n] = x[:n]
    return buf.reshape(SEQ_LEN, DOWNSAMPLE).mean(axis=1)


def ingest_wav(path, label: int) -> Sequence:
    return Sequence(preprocess(read_wav(path)), int(label), str(path))


def write_wav(path, samples, rate=16000):
    """Write float samples in [-1, 1] as 16-bit mono PCM (used by tests and demos)."""
    pcm = np.clip(np.round(np.asarray(samples) * 32767), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(rate)
        w.writeframes(pcm.tobytes())


def build_dataset(manifest: DatasetManifest) -> Dataset:
    if not manifest.entries:
        raise DataError("manifest is empty")
    seqs = {s: [] for s in SPLITS}
    failed = []
    for e in manifest.entries:
        try:
            seqs[e.split].append(ingest_wav(e.path, e.label))
        except (IngestError, DataError) as exc:
            failed.append(f"{e.path}: {exc}")
    if failed:
        raise IngestError("failed to ingest:\n  " + "\n  ".join(failed))

    def stack(items):
        items = sorted(items, key=lambda s: s.source_id)
        x = np.array([s.samples for s in items]).reshape(len(items), SEQ_LEN)
        return x, np.array([s.label for s in items], dtype=np.int64), [s.source_id for s in items]

    xtr, ytr, itr = stack(seqs["train"])
    xte, yte, ite = stack(seqs["test"])
    return Dataset(xtr, ytr, xte, yte, itr, ite)


# ---------------------------------------------------------------------------
# synthetic stand-in

def synth_sequence(label: int, rng, low_cycles=4.0, high_cycles=16.0, freq_jitter=0.15,
                   noise=0.3, n=SEQ_LEN) -> np.ndarray:
    """One decaying tone burst; the class sets the frequency (cycles per sequence)."""
    t = np.arange(n)
    cycles = (low_cycles if label == 0 else high_cycles) * (1 + freq_jitter * rng.uniform(-1, 1))
    phase = rng.uniform(0, 2 * np.pi)
    amp = rng.uniform(0.5, 1.0)
    onset = int(rng.integers(0, n // 4))
    decay = rng.uniform(2.0, 6.0) / n
    env = np.where(t >= onset, np.exp(-decay * (t - onset)), 0.0)
    x = amp * env * np.sin(2 * np.pi * cycles * (t - onset) / n + phase)
    x = x + noise * amp * rng.standard_normal(n)
    return x / np.max(np.abs(x))


def synth_dataset(n_per_class: int, seed: int, test_fraction=0.2, **kwargs) -> Dataset:
    """Two classes of decaying tones (low vs high frequency) with jittered
    amplitude, phase, onset, decay and additive noise; stratified split."""
    if n_per_class < 1:
        raise ConfigError("n_per_class must be >= 1")
    rng = np.random.default_rng(seed)
    train, test = [], []
    for label in (0, 1):
        items = [(synth_sequence(label, rng, **kwargs), label, f"synth-{label}-{i:05d}")
                 for i in range(n_per_class)]
        n_test = int(round(test_fraction * n_per_class)) if n_per_class > 1 else 0
        test += items[:n_test]
        train += items[n_test:]

    def stack(items):
        if not items:
            return np.zeros((0, SEQ_LEN)), np.zeros(0, dtype=np.int64), []
        items = sorted(items, key=lambda s: s[2])
        return (np.array([s[0] for s in items]), np.array([s[1] for s in items], dtype=np.int64),
                [s[2] for s in items])

    xtr, ytr, itr = stack(train)
    xte, yte, ite = stack(test)
    return Dataset(xtr, ytr, xte, yte, itr, ite)


# ---------------------------------------------------------------------------
# dataset cache (.npz payload with a version tag)

def dataset_to_bytes(ds: Dataset) -> bytes:
    buf = io.BytesIO()
    np.savez(
        buf, x_train=ds.x_train, y_train=ds.y_train, x_test=ds.x_test, y_test=ds.y_test,
        meta=np.array(json.dumps({"format": DATASET_FORMAT, "version": DATASET_VERSION,
                                  "ids_train": ds.ids_train, "ids_test": ds.ids_test})),
    )
    return buf.getvalue()


def save_dataset(path, ds: Dataset):
    Path(path).write_bytes(dataset_to_bytes(ds))


def load_dataset(path) -> Dataset:
    try:
        with np.load(path, allow_pickle=False) as z:
            meta = json.loads(str(z["meta"]))
            if meta.get("format") != DATASET_FORMAT or meta.get("version") != DATASET_VERSION:
                raise DataError(f"{path}: unsupported dataset cache")
            return Dataset(z["x_train"], z["y_train"], z["x_test"], z["y_test"],
                           meta["ids_train"], meta["ids_test"])
    except (OSError, ValueError, KeyError) as exc:
        raise DataError(f"{path}: cannot read dataset cache ({exc})") from exc
