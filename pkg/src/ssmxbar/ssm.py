"""Diagonal complex state-space kernels and the single-layer classifier built on them.

Continuous kernel per channel: ``dx/dt = A x + B u``, ``y = C x`` with diagonal
complex ``A``. Zero-order hold with step ``dt`` gives
``x_t = a_bar * x_{t-1} + b_bar * u_t`` and ``y_t = c_bar . x_t``.

The classifier is encoder (1 -> H) -> H parallel kernels -> mixer (H -> H) ->
GELU -> mean over time -> decoder (H -> n_classes). Only ``Re(y)`` leaves a
kernel. There is no skip (D) term.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import erf

from .errors import ConfigError, NumericDomainError

CHECKPOINT_FORMAT = "ssmxbar-checkpoint"
CHECKPOINT_VERSION = 1

# Trainable tensors, in checkpoint order. ``b_re`` is fixed to ones and not stored.
PARAM_NAMES = (
    "log_dt", "rho_re", "a_im", "c_re", "c_im",
    "encoder_w", "encoder_b", "mixer_w", "mixer_b", "decoder_w", "decoder_b",
)


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 1
    H: int = 3
    N: int = 14
    n_classes: int = 2
    sequence_length: int = 871

    def __post_init__(self):
        if self.n_layers != 1:
            raise ConfigError("only single-layer models are supported (n_layers=1)")
        if self.H < 1 or self.N < 1:
            raise ConfigError(f"H and N must be >= 1, got H={self.H}, N={self.N}")
        if self.n_classes < 2:
            raise ConfigError(f"n_classes must be >= 2, got {self.n_classes}")
        if self.sequence_length < 1:
            raise ConfigError("sequence_length must be >= 1")

    def shapes(self) -> dict:
        H, N, K = self.H, self.N, self.n_classes
        return {
            "log_dt": (H,), "rho_re": (H, N), "a_im": (H, N),
            "c_re": (H, N), "c_im": (H, N),
            "encoder_w": (H, 1), "encoder_b": (H,),
            "mixer_w": (H, H), "mixer_b": (H,),
            "decoder_w": (K, H), "decoder_b": (K,),
        }


@dataclass
class KernelParams:
    log_dt: float
    rho_re: np.ndarray
    a_im: np.ndarray
    c_re: np.ndarray
    c_im: np.ndarray
    b_re: np.ndarray

    @property
    def N(self) -> int:
        return len(self.rho_re)

    @property
    def dt(self) -> float:
        return float(np.exp(self.log_dt))

    @property
    def a(self) -> np.ndarray:
        return -np.exp(self.rho_re) + 1j * self.a_im

    @property
    def c(self) -> np.ndarray:
        return self.c_re + 1j * self.c_im


@dataclass
class DiscreteKernel:
    a_bar: np.ndarray
    b_bar: np.ndarray
    c_bar: np.ndarray

    @property
    def N(self) -> int:
        return len(self.a_bar)


@dataclass
class ModelParams:
    """All trainable tensors of the classifier, stacked over the H channels."""

    config: ModelConfig
    tensors: dict = field(default_factory=dict)

    def __getitem__(self, name):
        return self.tensors[name]

    def __setitem__(self, name, value):
        self.tensors[name] = value

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: np.array(v, dtype=np.float64) for k, v in self.tensors.items()})

    @property
    def b_re(self) -> np.ndarray:
        return np.ones((self.config.H, self.config.N))

    def kernel(self, h: int) -> KernelParams:
        t = self.tensors
        return KernelParams(
            log_dt=float(t["log_dt"][h]), rho_re=t["rho_re"][h].copy(), a_im=t["a_im"][h].copy(),
            c_re=t["c_re"][h].copy(), c_im=t["c_im"][h].copy(), b_re=np.ones(self.config.N),
        )

    @property
    def kernels(self) -> list:
        return [self.kernel(h) for h in range(self.config.H)]

    def validate(self):
        for name, shape in self.config.shapes().items():
            arr = self.tensors.get(name)
            if arr is None:
                raise ConfigError(f"missing tensor {name!r}")
            if np.shape(arr) != shape:
                raise ConfigError(f"tensor {name!r} has shape {np.shape(arr)}, expected {shape}")
        return self


def init_kernel(N: int, seed: int) -> KernelParams:
    """S4D-Lin initialization: ``a_n = -1/2 + i*pi*n``, ``C ~ N(0, 1)``, ``B = 1``."""
    if N < 1:
        raise ConfigError(f"state dimension must be >= 1, got {N}")
    rng = np.random.default_rng(seed)
    log_dt = rng.uniform(np.log(1e-3), np.log(1e-1))
    c = rng.standard_normal((2, N))
    return KernelParams(
        log_dt=float(log_dt),
        rho_re=np.full(N, np.log(0.5)),
        a_im=np.pi * np.arange(N, dtype=np.float64),
        c_re=c[0], c_im=c[1],
        b_re=np.ones(N),
    )


def init_model(config: ModelConfig, seed: int) -> ModelParams:
    """Kernels from :func:`init_kernel`; dense layers use uniform fan-in scaling."""
    rng = np.random.default_rng(seed)
    kernel_seeds = rng.integers(0, 2**31 - 1, size=config.H)
    kernels = [init_kernel(config.N, int(s)) for s in kernel_seeds]
    H, K = config.H, config.n_classes

    def dense(n_out, n_in):
        bound = 1.0 / np.sqrt(n_in)
        return rng.uniform(-bound, bound, (n_out, n_in)), rng.uniform(-bound, bound, n_out)

    enc_w, enc_b = dense(H, 1)
    mix_w, mix_b = dense(H, H)
    dec_w, dec_b = dense(K, H)
    t = {
        "log_dt": np.array([k.log_dt for k in kernels]),
        "rho_re": np.stack([k.rho_re for k in kernels]),
        "a_im": np.stack([k.a_im for k in kernels]),
        "c_re": np.stack([k.c_re for k in kernels]),
        "c_im": np.stack([k.c_im for k in kernels]),
        "encoder_w": enc_w, "encoder_b": enc_b,
        "mixer_w": mix_w, "mixer_b": mix_b,
        "decoder_w": dec_w, "decoder_b": dec_b,
    }
    return ModelParams(config, t)


# ---------------------------------------------------------------------------
# discretization

_SERIES_CUTOFF = 1e-3


def phi1(z):
    """``(exp(z) - 1) / z`` with the removable singularity at 0 filled in."""
    z = np.asarray(z, dtype=np.complex128)
    small = np.abs(z) < _SERIES_CUTOFF
    safe = np.where(small, 1.0, z)
    out = np.expm1(safe) / safe
    series = 1 + z / 2 + z**2 / 6 + z**3 / 24
    return np.where(small, series, out)


def dphi1(z):
    """Derivative of :func:`phi1`: ``(z e^z - e^z + 1) / z**2``."""
    z = np.asarray(z, dtype=np.complex128)
    small = np.abs(z) < _SERIES_CUTOFF
    safe = np.where(small, 1.0, z)
    out = (safe * np.exp(safe) - np.expm1(safe)) / safe**2
    series = 0.5 + z / 3 + z**2 / 8 + z**3 / 30
    return np.where(small, series, out)


def discretize_arrays(a, dt, b=1.0):
    """Vectorized ZOH: ``a`` complex (..., N), ``dt`` broadcastable to ``a[..., :1]``."""
    a = np.asarray(a, dtype=np.complex128)
    dt = np.asarray(dt, dtype=np.float64)
    z = dt * a
    a_bar = np.exp(z)
    # (a_bar - 1) / a == dt * phi1(dt * a); the a -> 0 limit is dt
    b_bar = dt * phi1(z) * b
    return a_bar, b_bar


def zoh_discretize(k: KernelParams) -> DiscreteKernel:
    values = np.concatenate([[k.log_dt], k.rho_re, k.a_im, k.c_re, k.c_im])
    if not np.all(np.isfinite(values)):
        raise NumericDomainError("kernel parameters contain non-finite values")
    dt = np.exp(k.log_dt)
    a_bar, b_bar = discretize_arrays(k.a, dt, np.asarray(k.b_re, dtype=np.float64))
    return DiscreteKernel(a_bar=a_bar, b_bar=b_bar, c_bar=k.c.astype(np.complex128))


def discretize_continuous(a, b, dt) -> DiscreteKernel:
    """ZOH for explicit complex ``a`` (may contain exact zeros) and real ``b``; ``C = 1``."""
    a = np.atleast_1d(np.asarray(a, dtype=np.complex128))
    a_bar, b_bar = discretize_arrays(a, dt, np.asarray(b, dtype=np.float64))
    return DiscreteKernel(a_bar, b_bar, np.ones_like(a_bar))


# ---------------------------------------------------------------------------
# kernel execution

def kernel_step(dk: DiscreteKernel, x_prev, u: float):
    x_prev = np.asarray(x_prev, dtype=np.complex128)
    if x_prev.shape != dk.a_bar.shape:
        raise ConfigError(f"state shape {x_prev.shape} does not match kernel N={dk.N}")
    x = dk.a_bar * x_prev + dk.b_bar * u
    return x, complex(np.sum(dk.c_bar * x))


def kernel_scan(a_bar, b_bar, v):
    """Run the recurrence for all channels at once.

    ``a_bar``, ``b_bar``: (H, N) complex; ``v``: (B, L, H) real drive.
    Returns the state trajectory of shape (B, L, H, N).
    """
    B, L, H = v.shape
    X = np.empty((B, L, H, a_bar.shape[-1]), dtype=np.complex128)
    x = np.zeros((B, H, a_bar.shape[-1]), dtype=np.complex128)
    for t in range(L):
        x = a_bar * x + b_bar * v[:, t, :, None]
        X[:, t] = x
    return X


def kernel_run(dk: DiscreteKernel, u) -> np.ndarray:
    """Complex kernel outputs ``y_0..y_{L-1}`` for one real input sequence (zero initial state)."""
    u = np.asarray(u, dtype=np.float64)
    X = kernel_scan(dk.a_bar[None], dk.b_bar[None], u[None, :, None])
    return X[0, :, 0, :] @ dk.c_bar


def kernel_conv_unroll(dk: DiscreteKernel, u) -> np.ndarray:
    """Outputs via the materialized convolution kernel ``K_k = sum_n c_n a_n^k b_n``."""
    u = np.asarray(u, dtype=np.float64)
    L = len(u)
    if L < 1:
        raise ConfigError("sequence must have at least one sample")
    powers = dk.a_bar[None, :] ** np.arange(L)[:, None]
    K = powers @ (dk.c_bar * dk.b_bar)
    return np.array([np.sum(K[: t + 1][::-1] * u[: t + 1]) for t in range(L)])


# ---------------------------------------------------------------------------
# classifier

def gelu(x):
    return 0.5 * x * (1.0 + erf(x / np.sqrt(2.0)))


def gelu_grad(x):
    return 0.5 * (1.0 + erf(x / np.sqrt(2.0))) + x * np.exp(-0.5 * x * x) / np.sqrt(2.0 * np.pi)


def continuous_a(tensors) -> np.ndarray:
    return -np.exp(tensors["rho_re"]) + 1j * tensors["a_im"]


def discretize_model(tensors, a=None, c=None):
    """Discrete kernels (H, N) for stacked tensors; ``a``/``c`` override the raw ones."""
    if a is None:
        a = continuous_a(tensors)
    if c is None:
        c = tensors["c_re"] + 1j * tensors["c_im"]
    dt = np.exp(tensors["log_dt"])[:, None]
    a_bar, b_bar = discretize_arrays(a, dt)
    return a_bar, b_bar, c


def _as_batch(u, L_expected=None):
    u = np.asarray(u, dtype=np.float64)
    single = u.ndim == 1
    if single:
        u = u[None]
    if u.ndim != 2 or u.shape[1] < 1:
        raise ConfigError(f"input must be (L,) or (B, L), got shape {np.shape(u)}")
    return u, single


def encode(tensors, u):
    """(B, L) -> (B, L, H) kernel drive."""
    return u[:, :, None] * tensors["encoder_w"][:, 0] + tensors["encoder_b"]


def head(tensors, y):
    """Mixer, GELU, mean over time, decoder. ``y``: (B, L, H) real kernel outputs."""
    s = y @ tensors["mixer_w"].T + tensors["mixer_b"]
    z = gelu(s)
    pooled = z.mean(axis=1)
    scores = pooled @ tensors["decoder_w"].T + tensors["decoder_b"]
    return scores, s, pooled


def forward_arrays(tensors, a_bar, b_bar, c, u):
    """Shared forward pass on already-prepared tensors. Returns scores and intermediates."""
    v = encode(tensors, u)
    X = kernel_scan(a_bar, b_bar, v)
    y = (X * c).sum(axis=-1).real
    scores, s, pooled = head(tensors, y)
    return scores, {"u": u, "v": v, "X": X, "y": y, "s": s, "pooled": pooled}


def model_forward(p: ModelParams, u) -> np.ndarray:
    """Class scores for one sequence (L,) or a batch (B, L)."""
    u, single = _as_batch(u)
    a_bar, b_bar, c = discretize_model(p.tensors)
    scores, _ = forward_arrays(p.tensors, a_bar, b_bar, c, u)
    return scores[0] if single else scores


def predict(p: ModelParams, u) -> np.ndarray:
    return np.argmax(model_forward(p, np.atleast_2d(u)), axis=-1)


# ---------------------------------------------------------------------------
# checkpoints

def params_to_dict(p: ModelParams, quant: dict | None = None) -> dict:
    out = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": asdict(p.config),
        "params": {name: np.asarray(p[name], dtype=np.float64).ravel().tolist() for name in PARAM_NAMES},
    }
    if quant is not None:
        out["quant"] = {name: spec.to_dict() for name, spec in quant.items()}
    return out


def params_from_dict(d: dict):
    """Inverse of :func:`params_to_dict`; returns ``(ModelParams, quant map or {})``."""
    from .quant import QuantSpec

    if d.get("format") != CHECKPOINT_FORMAT:
        raise ConfigError("not a model checkpoint")
    if d.get("version") != CHECKPOINT_VERSION:
        raise ConfigError(f"unsupported checkpoint version {d.get('version')!r}")
    config = ModelConfig(**d["config"])
    shapes = config.shapes()
    tensors = {}
    for name in PARAM_NAMES:
        flat = np.asarray(d["params"][name], dtype=np.float64)
        if flat.size != int(np.prod(shapes[name])):
            raise ConfigError(f"checkpoint tensor {name!r} has {flat.size} values, expected shape {shapes[name]}")
        tensors[name] = flat.reshape(shapes[name])
    quant = {k: QuantSpec.from_dict(v) for k, v in d.get("quant", {}).items()}
    return ModelParams(config, tensors), quant


def save_checkpoint(path, p: ModelParams, quant: dict | None = None):
    Path(path).write_text(json.dumps(params_to_dict(p, quant), indent=1))


def load_checkpoint(path):
    return params_from_dict(json.loads(Path(path).read_text()))
