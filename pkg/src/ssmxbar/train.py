"""Quantization-aware training with hand-derived backpropagation through time.

The forward pass runs on quantized copies of the parameters; gradients are
taken with respect to those quantized values and applied unchanged to the
full-precision parameters (straight-through estimator).

Complex gradients follow the convention ``G_z = dL/dRe(z) + i dL/dIm(z)``.
For a holomorphic map ``w = f(z)`` this gives ``G_z = conj(f'(z)) * G_w``.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigError, DataError, TrainingDivergence
from .quant import OFF, QuantSpec, quantize_complex, quantize_tensor
from .ssm import (
    PARAM_NAMES,
    ModelConfig,
    ModelParams,
    _as_batch,
    continuous_a,
    discretize_model,
    dphi1,
    forward_arrays,
    gelu_grad,
    init_model,
    phi1,
)

log = logging.getLogger(__name__)

QUANT_KEYS = ("A", "C", "encoder", "mixer", "decoder", "state")
_LAYER_TENSORS = {
    "encoder": ("encoder_w", "encoder_b"),
    "mixer": ("mixer_w", "mixer_b"),
    "decoder": ("decoder_w", "decoder_b"),
}


def default_quant(kernel_bits: int | None = None, a_fscale=1.0, c_fscale=1.0,
                  dense_bits: int | None = 8) -> dict:
    """Quant map used for hardware-aware training.

    ``kernel_bits=None`` leaves A and C unquantized. ``a_fscale`` may be
    ``"dynamic"``. Dense layers use ``dense_bits`` with dynamic range.
    """
    q = {k: OFF for k in QUANT_KEYS}
    if kernel_bits is not None:
        q["A"] = QuantSpec.parse(kernel_bits, a_fscale)
        q["C"] = QuantSpec.parse(kernel_bits, c_fscale)
    if dense_bits is not None:
        for k in ("encoder", "mixer", "decoder"):
            q[k] = QuantSpec(bits=dense_bits, mode="dynamic")
    return q


def no_quant() -> dict:
    return {k: OFF for k in QUANT_KEYS}


def _check_quant(quant):
    unknown = set(quant) - set(QUANT_KEYS)
    if unknown:
        raise ConfigError(f"unknown quantization targets {sorted(unknown)}")
    return {k: quant.get(k, OFF) for k in QUANT_KEYS}


def effective_tensors(p: ModelParams, quant: dict):
    """Quantized views used by the forward pass.

    Returns ``(tensors, a, c)`` where ``a`` and ``c`` are the complex A and C
    actually used. In dynamic mode the real and imaginary parts of A get
    separate ranges (conventional per-parameter scaling); in fixed mode they
    share the constant range by construction.
    """
    quant = _check_quant(quant)
    t = dict(p.tensors)
    for layer, names in _LAYER_TENSORS.items():
        spec = quant[layer]
        if spec.enabled:
            for name in names:
                t[name] = quantize_tensor(t[name], spec)
    a = continuous_a(p.tensors)
    if quant["A"].enabled:
        a_re, a_im = quantize_complex(a.real, a.imag, quant["A"], shared=False)
        a = a_re + 1j * a_im
    c = p["c_re"] + 1j * p["c_im"]
    if quant["C"].enabled:
        c_re, c_im = quantize_complex(c.real, c.imag, quant["C"], shared=True)
        c = c_re + 1j * c_im
    return t, a, c


def _scan_quantized_state(a_bar, b_bar, v, spec):
    B, L, H = v.shape
    X = np.empty((B, L, H, a_bar.shape[-1]), dtype=np.complex128)
    x = np.zeros((B, H, a_bar.shape[-1]), dtype=np.complex128)
    for t in range(L):
        x = a_bar * x + b_bar * v[:, t, :, None]
        x = quantize_tensor(x.real, spec) + 1j * quantize_tensor(x.imag, spec)
        X[:, t] = x
    return X


def forward_quantized(p: ModelParams, quant: dict, u):
    """Forward pass at quantized parameters. Returns ``(scores, cache)``."""
    u, single = _as_batch(u)
    t, a, c = effective_tensors(p, quant)
    a_bar, b_bar, c = discretize_model(t, a=a, c=c)
    state_spec = quant.get("state", OFF)
    if state_spec.enabled:
        from .ssm import encode, head

        v = encode(t, u)
        X = _scan_quantized_state(a_bar, b_bar, v, state_spec)
        y = (X * c).sum(axis=-1).real
        scores, s, pooled = head(t, y)
        inter = {"u": u, "v": v, "X": X, "y": y, "s": s, "pooled": pooled}
    else:
        scores, inter = forward_arrays(t, a_bar, b_bar, c, u)
    cache = dict(inter, tensors=t, raw=p.tensors, a=a, c=c, a_bar=a_bar, b_bar=b_bar)
    return (scores[0] if single else scores), cache


def softmax(scores):
    z = scores - scores.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(scores, labels) -> float:
    scores = np.atleast_2d(scores)
    labels = np.atleast_1d(labels)
    z = scores - scores.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    return float(-logp[np.arange(len(labels)), labels].mean())


def backward(cache, labels) -> dict:
    """Gradients of the mean cross-entropy w.r.t. every trainable tensor."""
    labels = np.atleast_1d(np.asarray(labels))
    scores = cache["pooled"] @ cache["tensors"]["decoder_w"].T + cache["tensors"]["decoder_b"]
    d_scores = softmax(scores)
    d_scores[np.arange(len(labels)), labels] -= 1.0
    return backward_scores(cache, d_scores / len(labels))


def backward_scores(cache, d_scores) -> dict:
    """Backpropagate an upstream gradient on the class scores."""
    t = cache["tensors"]
    raw = cache["raw"]
    u, v, X, y, s, pooled = (cache[k] for k in ("u", "v", "X", "y", "s", "pooled"))
    a, c, a_bar, b_bar = cache["a"], cache["c"], cache["a_bar"], cache["b_bar"]
    d_scores = np.atleast_2d(d_scores)
    B, L, H = y.shape
    g = {}

    g["decoder_w"] = d_scores.T @ pooled
    g["decoder_b"] = d_scores.sum(axis=0)
    d_pooled = d_scores @ t["decoder_w"]
    ds = (d_pooled[:, None, :] / L) * gelu_grad(s)
    g["mixer_w"] = np.einsum("blh,blk->hk", ds, y)
    g["mixer_b"] = ds.sum(axis=(0, 1))
    dy = ds @ t["mixer_w"]

    # y = Re(sum_n c_n x_n)
    g_c = (dy[..., None] * np.conj(X)).sum(axis=(0, 1))
    g["c_re"], g["c_im"] = g_c.real.copy(), g_c.imag.copy()

    # adjoint recurrence: lam_t = dy_t * conj(c) + conj(a_bar) * lam_{t+1}
    conj_c = np.conj(c)
    conj_ab = np.conj(a_bar)
    lam_all = dy[..., None] * conj_c
    lam = np.zeros((B, H, a_bar.shape[-1]), dtype=np.complex128)
    for step in range(L - 1, -1, -1):
        lam = lam_all[:, step] + conj_ab * lam
        lam_all[:, step] = lam
    g_abar = (lam_all[:, 1:] * np.conj(X[:, :-1])).sum(axis=(0, 1))
    g_bbar = (lam_all * v[..., None]).sum(axis=(0, 1))
    dv = (lam_all * np.conj(b_bar)).sum(axis=-1).real

    g["encoder_w"] = np.einsum("blh,bl->h", dv, u)[:, None]
    g["encoder_b"] = dv.sum(axis=(0, 1))

    # a_bar = exp(dt a), b_bar = dt * phi1(dt a)
    dt = np.exp(raw["log_dt"])[:, None]
    z = dt * a
    dabar_da = dt * a_bar
    dbbar_da = dt * dt * dphi1(z)
    g_a = np.conj(dabar_da) * g_abar + np.conj(dbbar_da) * g_bbar
    # d/d dt: a_bar' = a a_bar, b_bar' = phi1(z) + z phi1'(z) = a_bar
    g_dt = (np.conj(a * a_bar) * g_abar + np.conj(a_bar) * g_bbar).real.sum(axis=1)
    g["log_dt"] = g_dt * dt[:, 0]
    # Re(a) = -exp(rho); straight-through past the A quantizer
    g["rho_re"] = g_a.real * (-np.exp(raw["rho_re"]))
    g["a_im"] = g_a.imag.copy()

    for name in PARAM_NAMES:
        if not np.all(np.isfinite(g[name])):
            raise TrainingDivergence(f"non-finite gradient for {name!r}")
    return g


def loss_and_grads(p: ModelParams, quant: dict, u, labels):
    scores, cache = forward_quantized(p, quant, u)
    return cross_entropy(scores, labels), backward(cache, labels)


# ---------------------------------------------------------------------------
# optimizer and training loop

class Adam:
    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m, self.v, self.t = {}, {}, 0

    def step(self, params: dict, grads: dict, lr=None):
        lr = self.lr if lr is None else lr
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for name, grad in grads.items():
            m = self.m.get(name, 0.0) * b1 + (1 - b1) * grad
            v = self.v.get(name, 0.0) * b2 + (1 - b2) * grad * grad
            self.m[name], self.v[name] = m, v
            m_hat = m / (1 - b1**self.t)
            v_hat = v / (1 - b2**self.t)
            params[name] = params[name] - lr * m_hat / (np.sqrt(v_hat) + self.eps)


def reflect_upper_half(p: ModelParams, opt: Adam | None = None):
    """Keep Im(a) >= 0 by conjugating modes that crossed zero.

    B and the input are real, so Re(y) is unchanged when a and c are both
    conjugated; quantizers are odd, so the quantized model is unchanged too.
    Adam first moments of the flipped entries change sign with them.
    """
    neg = p["a_im"] < 0
    if not neg.any():
        return 0
    sign = np.where(neg, -1.0, 1.0)
    for name in ("a_im", "c_im"):
        p[name] = p[name] * sign
        if opt is not None and name in opt.m:
            opt.m[name] = opt.m[name] * sign
    return int(neg.sum())


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    epochs: int = 100
    batch_size: int = 32
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    cosine_decay: bool = False
    quant: dict = field(default_factory=no_quant)
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be positive")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        self.quant = _check_quant(self.quant)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["quant"] = {k: v.to_dict() for k, v in self.quant.items()}
        return d


@dataclass
class TrainReport:
    seed: int
    train_loss: list = field(default_factory=list)
    train_accuracy: list = field(default_factory=list)
    test_accuracy: list = field(default_factory=list)
    final_test_accuracy: float = float("nan")
    best_epoch: int = -1
    wall_seconds: float = 0.0
    diverged: bool = False

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)


def accuracy(p: ModelParams, quant: dict, x, labels, batch_size=128) -> float:
    return float(np.mean(predict_quantized(p, quant, x, batch_size) == np.asarray(labels)))


def predict_quantized(p: ModelParams, quant: dict, x, batch_size=128) -> np.ndarray:
    x = np.atleast_2d(x)
    out = []
    for i in range(0, len(x), batch_size):
        scores, _ = forward_quantized(p, quant, x[i: i + batch_size])
        out.append(np.argmax(np.atleast_2d(scores), axis=-1))
    return np.concatenate(out)


def train(dataset, cfg: TrainConfig, init: ModelParams | None = None):
    """Minibatch Adam with STE quantization.

    Returns ``(params, report)`` where ``params`` are the full-precision
    parameters from the epoch with the best test accuracy.
    """
    x_tr, y_tr = np.asarray(dataset.x_train), np.asarray(dataset.y_train)
    x_te, y_te = np.asarray(dataset.x_test), np.asarray(dataset.y_test)
    if len(x_tr) == 0 or len(np.unique(y_tr)) < 2:
        raise DataError("training set must be non-empty and contain at least two classes")
    model_cfg = cfg.model
    if model_cfg.sequence_length != x_tr.shape[1]:
        model_cfg = ModelConfig(**{**asdict(model_cfg), "sequence_length": int(x_tr.shape[1])})
    rng = np.random.default_rng(cfg.seed)
    p = init.copy() if init is not None else init_model(model_cfg, int(rng.integers(2**31 - 1)))
    opt = Adam(cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps)
    report = TrainReport(seed=cfg.seed)
    best, best_acc = p.copy(), -1.0
    start = time.perf_counter()
    n = len(x_tr)
    total_steps = cfg.epochs * int(np.ceil(n / cfg.batch_size))
    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        losses, correct = [], 0
        for i in range(0, n, cfg.batch_size):
            idx = order[i: i + cfg.batch_size]
            scores, cache = forward_quantized(p, cfg.quant, x_tr[idx])
            scores = np.atleast_2d(scores)
            loss = cross_entropy(scores, y_tr[idx])
            if not np.isfinite(loss):
                report.diverged = True
                report.wall_seconds = time.perf_counter() - start
                raise TrainingDivergence(f"non-finite loss at epoch {epoch}, step {step}",
                                         epoch=epoch, step=step, report=report)
            try:
                grads = backward(cache, y_tr[idx])
            except TrainingDivergence as exc:
                report.diverged = True
                report.wall_seconds = time.perf_counter() - start
                raise TrainingDivergence(f"{exc} at epoch {epoch}, step {step}",
                                         epoch=epoch, step=step, report=report) from None
            lr = cfg.learning_rate
            if cfg.cosine_decay:
                lr = 0.5 * cfg.learning_rate * (1 + np.cos(np.pi * step / total_steps))
            opt.step(p.tensors, grads, lr)
            reflect_upper_half(p, opt)
            losses.append(loss * len(idx))
            correct += int(np.sum(np.argmax(scores, axis=-1) == y_tr[idx]))
            step += 1
        test_acc = accuracy(p, cfg.quant, x_te, y_te) if len(x_te) else float("nan")
        report.train_loss.append(float(np.sum(losses) / n))
        report.train_accuracy.append(correct / n)
        report.test_accuracy.append(test_acc)
        if test_acc > best_acc:
            best, best_acc, report.best_epoch = p.copy(), test_acc, epoch
        log.debug("epoch %d loss %.4f train %.3f test %.3f", epoch, report.train_loss[-1],
                  report.train_accuracy[-1], test_acc)
    report.final_test_accuracy = float(best_acc)
    report.wall_seconds = time.perf_counter() - start
    return best, report


# ---------------------------------------------------------------------------
# bit-width x dynamic-range sweep

SWEEP_COLUMNS = ("bits", "f_scale", "seed", "accuracy")


def _run_seed(seed, bits, f_scale):
    f_tag = 0 if str(f_scale) == "dynamic" else int(round(float(f_scale) * 1000))
    return int(np.random.SeedSequence([seed, int(bits), f_tag]).generate_state(1)[0])


def sweep_quantization(dataset, bit_list, fscale_list, cfg: TrainConfig, seeds=None,
                       include_baseline=True, base_quant=None):
    """Train one model per (bits, f_scale) of the A matrix and collect test accuracies.

    ``fscale_list`` entries are numbers or ``"dynamic"``. Other tensors keep the
    quantization given by ``base_quant`` (default: ``cfg.quant``). A baseline
    row with ``bits="none"`` trains with quantization fully off. Failed runs
    are recorded as NaN.
    """
    if not bit_list or not fscale_list:
        raise ConfigError("sweep lists must be non-empty")
    seeds = [cfg.seed] if seeds is None else list(seeds)
    base_quant = dict(cfg.quant if base_quant is None else base_quant)
    runs = []
    if include_baseline:
        runs += [("none", "none", s, no_quant()) for s in seeds]
    for bits in bit_list:
        for f in fscale_list:
            for s in seeds:
                q = dict(base_quant)
                q["A"] = QuantSpec.parse(int(bits), f)
                runs.append((int(bits), f, s, q))
    rows = []
    for bits, f, s, q in runs:
        run_cfg = TrainConfig(**{**{k: getattr(cfg, k) for k in cfg.__dataclass_fields__},
                                 "quant": q, "seed": _run_seed(s, 0 if bits == "none" else bits, 0 if f == "none" else f)})
        try:
            _, report = train(dataset, run_cfg)
            acc = report.final_test_accuracy
        except (TrainingDivergence, FloatingPointError) as exc:
            log.warning("sweep run bits=%s f_scale=%s seed=%s failed: %s", bits, f, s, exc)
            acc = float("nan")
        rows.append({"bits": bits, "f_scale": f, "seed": s, "accuracy": acc})
    return rows


def sweep_to_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=SWEEP_COLUMNS, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({**r, "accuracy": f"{r['accuracy']:.6f}"})
    return buf.getvalue()
