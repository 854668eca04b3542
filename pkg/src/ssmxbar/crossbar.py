"""Mapping diagonal complex kernels onto a 64x64 memristive crossbar, and
simulating their analog execution.

Conventions
-----------
* Rows are driven by voltages, columns collect currents:
  ``i_j = sum_i G[i, j] * v_i`` (uS * V = uA).
* A signed weight ``w`` is a differential pair ``(g+, g-)`` on the
  ``[G_OFF, G_ON]`` window; ``g+ - g- = w * SPAN / w_max``.
* A complex weight becomes the 4x4 block below acting on the signal
  ``(v_r+, v_r-, v_i+, v_i-)`` and producing ``(i_r+, i_r-, i_i+, i_i-)``::

      [[g_r+, g_r-, g_i-, g_i+],
       [g_r-, g_r+, g_i+, g_i-],
       [g_i+, g_i-, g_r+, g_r-],
       [g_i-, g_i+, g_r-, g_r+]]

  It is stored transposed in the array because rows are inputs.
* Signals are sign-split: ``s -> (max(s, 0), max(-s, 0))``.

Layout for one kernel with state size N: input rows ``[0, 4)``, state rows
``[4, 4 + 4N)``, state columns ``[0, 4N)``, output columns ``[4N, 4N + 4)``.
All three products (A x, B u, C x) are read in one VMM, so the output column
reports ``C x_{t-1}`` while the state columns produce ``x_t``.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import CapacityError, ConfigError, LayoutError, RangeError
from .quant import OFF
from .ssm import DiscreteKernel, ModelParams, discretize_model, encode, head

G_OFF = 7.0  # uS
G_ON = 200.0  # uS
SPAN = G_ON - G_OFF
PROGRAM_FORMAT = "ssmxbar-conductance-program"
PROGRAM_VERSION = 1


@dataclass(frozen=True)
class CrossbarLayout:
    rows: int = 64
    cols: int = 64
    N: int = 14

    def __post_init__(self):
        if self.N < 1:
            raise LayoutError("N must be >= 1")
        if 4 + 4 * self.N > self.rows or 4 * self.N + 4 > self.cols:
            raise LayoutError(f"N={self.N} needs {4 + 4 * self.N} rows and {4 * self.N + 4} columns, "
                              f"array is {self.rows}x{self.cols}")

    @property
    def input_rows(self):
        return slice(0, 4)

    @property
    def state_rows(self):
        return slice(4, 4 + 4 * self.N)

    @property
    def state_cols(self):
        return slice(0, 4 * self.N)

    @property
    def output_cols(self):
        return slice(4 * self.N, 4 * self.N + 4)

    def blocks(self):
        """Yield ``(matrix, n, row_slice, col_slice)`` for every programmed 4x4 block."""
        N = self.N
        for n in range(N):
            r = slice(4 + 4 * n, 8 + 4 * n)
            c = slice(4 * n, 4 * n + 4)
            yield "A", n, r, c
            yield "B", n, slice(0, 4), c
            yield "C", n, r, slice(4 * N, 4 * N + 4)

    @property
    def n_programmed(self) -> int:
        return 3 * 16 * self.N


# ---------------------------------------------------------------------------
# weight -> conductance

def expand_complex(m: complex) -> np.ndarray:
    m = complex(m)
    return np.array([[m.real, -m.imag], [m.imag, m.real]])


def weight_to_pair(w: float, w_max: float):
    if w_max <= 0:
        raise RangeError("w_max must be positive")
    if abs(w) > w_max * (1 + 1e-12):
        raise RangeError(f"|w|={abs(w):.6g} exceeds w_max={w_max:.6g}")
    w = float(np.clip(w, -w_max, w_max))
    return G_OFF + max(w, 0.0) / w_max * SPAN, G_OFF + max(-w, 0.0) / w_max * SPAN


def expand_to_block(m: complex, w_max: float) -> np.ndarray:
    """Differential 4x4 conductance block in (output, input) orientation."""
    m = complex(m)
    rp, rm = weight_to_pair(m.real, w_max)
    ip, im = weight_to_pair(m.imag, w_max)
    return np.array([
        [rp, rm, im, ip],
        [rm, rp, ip, im],
        [ip, im, rp, rm],
        [im, ip, rm, rp],
    ])


def block_is_symmetric(block, atol=1e-9) -> bool:
    """True if a 4x4 block (output, input orientation) has the differential complex structure."""
    b = np.asarray(block)
    rp, rm, im, ip = b[0]
    pattern = np.array([
        [rp, rm, im, ip],
        [rm, rp, ip, im],
        [ip, im, rp, rm],
        [im, ip, rm, rp],
    ])
    return bool(np.allclose(b, pattern, atol=atol, rtol=0))


def block_weight(block, w_max: float) -> complex:
    """Invert :func:`expand_to_block` from the first row."""
    rp, rm, im, ip = np.asarray(block)[0]
    return complex((rp - rm) * w_max / SPAN, (ip - im) * w_max / SPAN)


def split_signal(s):
    """Complex signal (..., N) -> sign-split real voltages (..., 4N)."""
    s = np.asarray(s)
    re, im = np.real(s), np.imag(s)
    out = np.stack([np.maximum(re, 0), np.maximum(-re, 0), np.maximum(im, 0), np.maximum(-im, 0)], axis=-1)
    return out.reshape(*s.shape[:-1], 4 * s.shape[-1])


def merge_currents(i):
    """Differential read of column groups (..., 4N) -> complex (..., N)."""
    i = np.asarray(i).reshape(*np.shape(i)[:-1], -1, 4)
    return (i[..., 0] - i[..., 1]) + 1j * (i[..., 2] - i[..., 3])


# ---------------------------------------------------------------------------
# conductance program

@dataclass
class ConductanceProgram:
    target: np.ndarray
    w_max: float
    layout: CrossbarLayout = field(default_factory=CrossbarLayout)

    @property
    def mask(self) -> np.ndarray:
        m = np.zeros((self.layout.rows, self.layout.cols), dtype=bool)
        for _, _, r, c in self.layout.blocks():
            m[r, c] = True
        return m

    @property
    def beta(self) -> float:
        """Transimpedance gain in V/uA that turns differential current back into weight-domain volts."""
        return self.w_max / SPAN

    def block(self, matrix: str, n: int) -> np.ndarray:
        """Programmed block in (output, input) orientation."""
        for name, k, r, c in self.layout.blocks():
            if name == matrix and k == n:
                return self.target[r, c].T
        raise KeyError((matrix, n))

    def kernel(self) -> DiscreteKernel:
        N = self.layout.N
        get = lambda m: np.array([block_weight(self.block(m, n), self.w_max) for n in range(N)])
        return DiscreteKernel(get("A"), get("B"), get("C"))

    def to_dict(self) -> dict:
        return {
            "format": PROGRAM_FORMAT, "version": PROGRAM_VERSION,
            "layout": asdict(self.layout), "w_max": self.w_max, "unit": "uS",
            "target": np.round(self.target, 9).tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ConductanceProgram":
        if d.get("format") != PROGRAM_FORMAT or d.get("version") != PROGRAM_VERSION:
            raise ConfigError("not a supported conductance program")
        layout = CrossbarLayout(**d["layout"])
        target = np.asarray(d["target"], dtype=np.float64)
        if target.shape != (layout.rows, layout.cols):
            raise ConfigError(f"program matrix has shape {target.shape}")
        return cls(target, float(d["w_max"]), layout)


def kernel_w_max(dk: DiscreteKernel) -> float:
    vals = np.concatenate([np.abs(v.real) for v in (dk.a_bar, dk.b_bar, dk.c_bar)]
                          + [np.abs(v.imag) for v in (dk.a_bar, dk.b_bar, dk.c_bar)])
    m = float(vals.max())
    return m if m > 0 else 1.0


def map_kernel(dk: DiscreteKernel, layout: CrossbarLayout | None = None, w_max: float | None = None) -> ConductanceProgram:
    """Place the A-bar, B-bar and C-bar blocks of one kernel on the array."""
    if layout is None:
        layout = CrossbarLayout(N=dk.N)
    if layout.N != dk.N:
        raise LayoutError(f"kernel has N={dk.N}, layout expects N={layout.N}")
    w_max = kernel_w_max(dk) if w_max is None else float(w_max)
    G = np.zeros((layout.rows, layout.cols))
    values = {"A": dk.a_bar, "B": dk.b_bar, "C": dk.c_bar}
    for name, n, r, c in layout.blocks():
        G[r, c] = expand_to_block(values[name][n], w_max).T
    return ConductanceProgram(G, w_max, layout)


def overlay(cp: ConductanceProgram) -> dict:
    """Which cells belong to which matrix; for colour-coded heatmaps."""
    regions = []
    counts = {"A": 0, "B": 0, "C": 0}
    for name, n, r, c in cp.layout.blocks():
        regions.append({"matrix": name, "index": n, "rows": [r.start, r.stop], "cols": [c.start, c.stop]})
        counts[name] += (r.stop - r.start) * (c.stop - c.start)
    return {"layout": asdict(cp.layout), "w_max": cp.w_max, "cell_counts": counts, "regions": regions}


def heatmap_csv(G) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    for row in np.asarray(G):
        w.writerow([f"{v:.6f}" for v in row])
    return buf.getvalue()


def save_program(path, cp: ConductanceProgram):
    Path(path).write_text(json.dumps(cp.to_dict()))


def load_program(path) -> ConductanceProgram:
    return ConductanceProgram.from_dict(json.loads(Path(path).read_text()))


def save_programs(path, programs, meta=None):
    """Several kernels (one per array) in one file."""
    doc = {"format": PROGRAM_FORMAT + "-set", "version": PROGRAM_VERSION,
           "arrays": [cp.to_dict() for cp in programs], "meta": meta or {}}
    Path(path).write_text(json.dumps(doc))


def load_programs(path):
    doc = json.loads(Path(path).read_text())
    if doc.get("format") == PROGRAM_FORMAT:
        return [ConductanceProgram.from_dict(doc)], {}
    if doc.get("format") != PROGRAM_FORMAT + "-set":
        raise ConfigError(f"{path}: not a conductance program file")
    return [ConductanceProgram.from_dict(d) for d in doc["arrays"]], doc.get("meta", {})


# ---------------------------------------------------------------------------
# devices and periphery

@dataclass(frozen=True)
class DeviceModel:
    sigma_write: float = 0.0  # uS
    p_stuck: float = 0.0
    g_stuck: float = 300.0  # uS
    g_phys_range: tuple = (0.0, 300.0)

    def __post_init__(self):
        if self.sigma_write < 0:
            raise ConfigError("sigma_write must be >= 0")
        if not 0 <= self.p_stuck <= 1:
            raise ConfigError("p_stuck must lie in [0, 1]")


def default_p_stuck(layout: CrossbarLayout | None = None, expected: float = 2.0) -> float:
    """Per-device stuck probability giving ``expected`` stuck devices per kernel."""
    layout = layout or CrossbarLayout()
    return expected / layout.n_programmed


@dataclass(frozen=True)
class PeripheryModel:
    v_max: float = 0.2  # V
    dac_bits: int | None = None
    adc_bits: int | None = 8
    clip: bool = True

    def __post_init__(self):
        if not self.v_max > 0:
            raise ConfigError("v_max must be positive")


IDEAL_PERIPHERY = PeripheryModel(adc_bits=None, dac_bits=None, clip=False)


def converter(v, bits, v_max):
    """Uniform symmetric ADC/DAC with ``2**bits - 1`` codes over ``[-v_max, v_max]``."""
    if bits is None:
        return v
    half = 2 ** (int(bits) - 1) - 1
    step = v_max / half
    return np.clip(np.round(v / step), -half, half) * step


@dataclass
class XbarState:
    program: ConductanceProgram
    actual: np.ndarray
    stuck: np.ndarray
    scale: float = 1.0  # volts per signal unit
    voltages: np.ndarray | None = None  # (B, 4N) sign-split state voltages
    clip_events: int = 0

    def reset(self, batch: int = 1):
        self.voltages = np.zeros((batch, 4 * self.program.layout.N))
        return self

    def restore_stuck(self):
        """Reprogram stuck devices to their target conductance."""
        self.actual = np.where(self.stuck, self.program.target, self.actual)
        self.stuck = np.zeros_like(self.stuck)
        return self


def program(cp: ConductanceProgram, dev: DeviceModel, seed) -> XbarState:
    """Write the target conductances with Gaussian write noise and stuck-high faults."""
    rng = np.random.default_rng(seed)
    mask = cp.mask
    noise = rng.normal(0.0, 1.0, cp.target.shape) * dev.sigma_write
    lo, hi = dev.g_phys_range
    actual = np.where(mask, np.clip(cp.target + noise, lo, hi), 0.0)
    stuck = (rng.random(cp.target.shape) < dev.p_stuck) & mask
    actual = np.where(stuck, dev.g_stuck, actual)
    return XbarState(cp, actual, stuck)


def xbar_vmm(state: XbarState, v, v_max: float | None = None) -> np.ndarray:
    """Column currents (uA) for row voltages (V). Out-of-range voltages are clipped and counted."""
    v = np.asarray(v, dtype=np.float64)
    if v_max is not None:
        over = np.abs(v) > v_max
        if over.any():
            state.clip_events += int(over.sum())
            v = np.clip(v, -v_max, v_max)
    return v @ state.actual


def _clip_count(state, x, v_max, enabled):
    if not enabled:
        return x
    over = np.abs(x) > v_max
    if over.any():
        state.clip_events += int(over.sum())
        return np.clip(x, -v_max, v_max)
    return x


def xbar_kernel_step(state: XbarState, periphery: PeripheryModel, u_t):
    """One array read: returns ``(state, y_prev)`` with ``y_prev = C x_{t-1}`` in weight units.

    ``u_t`` may be a scalar or a batch vector; ``state.voltages`` must match.
    """
    lay = state.program.layout
    u_t = np.atleast_1d(np.asarray(u_t, dtype=np.float64))
    if state.voltages is None or state.voltages.shape[0] != u_t.shape[0]:
        state.reset(u_t.shape[0])
    k, vm = state.scale, periphery.v_max
    s_in = converter(_clip_count(state, k * u_t, vm, periphery.clip), periphery.dac_bits, vm)
    v = np.zeros((u_t.shape[0], lay.rows))
    v[:, 0] = np.maximum(s_in, 0)
    v[:, 1] = np.maximum(-s_in, 0)
    v[:, lay.state_rows] = state.voltages
    i = v @ state.actual
    beta = state.program.beta
    x_next = beta * merge_currents(i[:, lay.state_cols])
    y_prev = beta * merge_currents(i[:, lay.output_cols])[:, 0]
    x_next = _read(state, periphery, x_next)
    y_prev = _read(state, periphery, y_prev)
    state.voltages = split_signal(x_next)
    y = y_prev / k
    return state, (complex(y[0]) if y.shape[0] == 1 else y)


def _read(state, periphery, z):
    re = converter(_clip_count(state, z.real, periphery.v_max, periphery.clip), periphery.adc_bits, periphery.v_max)
    im = converter(_clip_count(state, z.imag, periphery.v_max, periphery.clip), periphery.adc_bits, periphery.v_max)
    return re + 1j * im


def xbar_run(state: XbarState, periphery: PeripheryModel, u) -> np.ndarray:
    """Drive a (B, L) input through the array; returns the raw (B, L + 1) outputs
    ``y_{-1}, y_0, ..., y_{L-1}`` (last step flushes with zero input)."""
    u = np.atleast_2d(np.asarray(u, dtype=np.float64))
    B, L = u.shape
    state.reset(B)
    out = np.empty((B, L + 1), dtype=np.complex128)
    zero = np.zeros(B)
    for t in range(L + 1):
        _, y = xbar_kernel_step(state, periphery, u[:, t] if t < L else zero)
        out[:, t] = y
    return out


# ---------------------------------------------------------------------------
# hybrid digital / analog model

def signal_ranges(p: ModelParams, quant, x, batch_size=128) -> np.ndarray:
    """Per-channel max magnitude of kernel drive, state components and output over ``x``."""
    from .train import effective_tensors

    t, a, c = effective_tensors(p, quant or {})
    a_bar, b_bar, c = discretize_model(t, a=a, c=c)
    from .ssm import kernel_scan

    x = np.atleast_2d(x)
    out = np.zeros(p.config.H)
    for i in range(0, len(x), batch_size):
        v = encode(t, x[i: i + batch_size])
        X = kernel_scan(a_bar, b_bar, v)
        Y = (X * c).sum(axis=-1)
        m = np.max(np.abs(v), axis=(0, 1))
        m = np.maximum(m, np.max(np.maximum(np.abs(X.real), np.abs(X.imag)), axis=(0, 1, 3)))
        m = np.maximum(m, np.max(np.maximum(np.abs(Y.real), np.abs(Y.imag)), axis=(0, 1)))
        out = np.maximum(out, m)
    return out


def analytic_ranges(p: ModelParams, quant) -> np.ndarray:
    """Worst-case per-channel signal bound for inputs in [-1, 1] (no data needed)."""
    from .train import effective_tensors

    t, a, c = effective_tensors(p, quant or {})
    a_bar, b_bar, c = discretize_model(t, a=a, c=c)
    drive = np.abs(t["encoder_w"][:, 0]) + np.abs(t["encoder_b"])
    L = p.config.sequence_length
    mag = np.abs(a_bar)
    # sum_k |a|^k over the sequence length
    gain = np.where(mag < 1, (1 - mag ** (L + 1)) / np.where(mag < 1, 1 - mag, 1), L + 1)
    x_bound = (np.abs(b_bar) * gain).max(axis=1) * drive
    y_bound = (np.abs(c) * np.abs(b_bar) * gain).sum(axis=1) * drive
    return np.maximum.reduce([drive, x_bound, y_bound])


class DeployedModel:
    """Digital encoder/mixer/decoder around kernels executed on crossbar arrays."""

    def __init__(self, params: ModelParams, quant, arrays, periphery: PeripheryModel):
        from .train import effective_tensors

        self.params = params
        self.quant = quant or {}
        self.tensors, _, _ = effective_tensors(params, self.quant)
        self.arrays = arrays
        self.periphery = periphery

    @property
    def clip_events(self) -> int:
        return sum(s.clip_events for s in self.arrays)

    def kernel_outputs(self, u) -> np.ndarray:
        """Complex kernel outputs aligned with the digital ``y_0..y_{L-1}``: (B, L, H)."""
        u = np.atleast_2d(np.asarray(u, dtype=np.float64))
        v = encode(self.tensors, u)
        Y = np.empty(v.shape, dtype=np.complex128)
        for h, state in enumerate(self.arrays):
            Y[:, :, h] = xbar_run(state, self.periphery, v[:, :, h])[:, 1:]
        return Y

    def forward(self, u, batch_size=128) -> np.ndarray:
        u = np.asarray(u, dtype=np.float64)
        single = u.ndim == 1
        u = np.atleast_2d(u)
        out = []
        for i in range(0, len(u), batch_size):
            y = self.kernel_outputs(u[i: i + batch_size]).real
            out.append(head(self.tensors, y)[0])
        scores = np.concatenate(out)
        return scores[0] if single else scores

    __call__ = forward

    def predict(self, u) -> np.ndarray:
        return np.argmax(np.atleast_2d(self.forward(u)), axis=-1)

    def accuracy(self, x, labels) -> float:
        return float(np.mean(self.predict(x) == np.asarray(labels)))


def map_model(p: ModelParams, quant=None, N_layout: int | None = None):
    """One conductance program per kernel, built from the quantized parameters."""
    from .train import effective_tensors

    t, a, c = effective_tensors(p, quant or {})
    a_bar, b_bar, c = discretize_model(t, a=a, c=c)
    layout = CrossbarLayout(N=N_layout or p.config.N)
    return [map_kernel(DiscreteKernel(a_bar[h], b_bar[h], c[h]), layout) for h in range(p.config.H)]


def calibrate(p: ModelParams, quant=None, calibration=None, margin: float = 1.25) -> np.ndarray:
    """Per-kernel signal range used to set the volts-per-unit scale."""
    if calibration is not None:
        return signal_ranges(p, quant, calibration) * margin
    return analytic_ranges(p, quant)


def deploy_model(p: ModelParams, dev: DeviceModel, periphery: PeripheryModel, seed, quant=None,
                 calibration=None, n_arrays: int = 3, margin: float = 1.25, programs=None,
                 ranges=None) -> DeployedModel:
    """Program one array per kernel and wrap them with the digital layers.

    ``calibration`` (sequences) sets each array's volts-per-unit scale from the
    largest observed signal times ``margin``; without it a worst-case analytic
    bound is used. Precomputed per-kernel ``ranges`` skip both.
    """
    if p.config.H > n_arrays:
        raise CapacityError(f"model has {p.config.H} kernels but only {n_arrays} arrays are available")
    quant = quant or {}
    programs = programs or map_model(p, quant)
    if ranges is None:
        ranges = calibrate(p, quant, calibration, margin)
    ranges = np.where(ranges > 0, ranges, 1.0)
    seeds = np.random.SeedSequence(seed).spawn(len(programs))
    arrays = []
    for h, cp in enumerate(programs):
        st = program(cp, dev, seeds[h])
        st.scale = periphery.v_max / ranges[h]
        arrays.append(st)
    return DeployedModel(p, quant, arrays, periphery)
