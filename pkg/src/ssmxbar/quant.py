"""Fixed-dynamic-range uniform quantization.

A value is snapped to the symmetric lattice ``k * f_scale / n_levels`` with
``n_levels = 2**(bits - 1)`` and ``k`` an integer in ``[-n_levels, n_levels]``.
With ``mode="fixed"`` the range ``f_scale`` is a constant shared by every
component of a tensor (real and imaginary parts alike); ``mode="dynamic"``
recomputes it as ``max |x|`` over the tensor, which is the conventional QAT
behaviour.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .errors import ConfigError, NumericDomainError

MODES = ("fixed", "dynamic", "off")


@dataclass(frozen=True)
class QuantSpec:
    bits: int = 8
    f_scale: float = 1.0
    mode: str = "fixed"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown quantization mode {self.mode!r}")
        if self.mode != "off":
            if int(self.bits) != self.bits or self.bits < 2:
                raise ConfigError(f"bits must be an integer >= 2, got {self.bits}")
            if self.mode == "fixed" and not (np.isfinite(self.f_scale) and self.f_scale > 0):
                raise ConfigError(f"f_scale must be positive, got {self.f_scale}")

    @property
    def n_levels(self) -> int:
        return 2 ** (int(self.bits) - 1)

    @property
    def enabled(self) -> bool:
        return self.mode != "off"

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "QuantSpec":
        return cls(bits=int(d.get("bits", 8)), f_scale=float(d.get("f_scale", 1.0)),
                   mode=str(d.get("mode", "fixed")))

    @classmethod
    def parse(cls, bits: int, f_scale) -> "QuantSpec":
        """Build a spec from a sweep axis value: a number or the string ``"dynamic"``."""
        if isinstance(f_scale, str) and f_scale.strip().lower() == "dynamic":
            return cls(bits=bits, f_scale=1.0, mode="dynamic")
        return cls(bits=bits, f_scale=float(f_scale), mode="fixed")


OFF = QuantSpec(mode="off")


def _round_half_away(x):
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def _snap(x, n_levels, f_scale):
    k = np.clip(_round_half_away(x * (n_levels / f_scale)), -n_levels, n_levels)
    return k * (f_scale / n_levels) + 0.0  # no negative zeros


def quantize(x: float, spec: QuantSpec) -> float:
    """Quantize a single scalar with the fixed range of a QuantSpec."""
    if not spec.enabled:
        raise ConfigError("quantize() called with mode='off'")
    if not np.isfinite(x):
        raise NumericDomainError(f"cannot quantize non-finite value {x!r}")
    return float(_snap(np.float64(x), spec.n_levels, spec.f_scale))


def dynamic_scale(xs) -> float:
    """``max |x|`` over the tensor; an all-zero tensor falls back to 1."""
    m = float(np.max(np.abs(xs))) if np.size(xs) else 0.0
    return m if m > 0 else 1.0


def quantize_tensor(xs, spec: QuantSpec, f_scale: float | None = None) -> np.ndarray:
    """Elementwise quantization of a real tensor.

    ``f_scale`` overrides the range (used when several tensors must share one
    dynamically computed range). ``mode="off"`` returns a float copy.
    """
    xs = np.asarray(xs, dtype=np.float64)
    if not spec.enabled:
        return xs.copy()
    if not np.all(np.isfinite(xs)):
        raise NumericDomainError("cannot quantize tensor with non-finite entries")
    if f_scale is None:
        f_scale = dynamic_scale(xs) if spec.mode == "dynamic" else spec.f_scale
    return _snap(xs, spec.n_levels, f_scale)


def quantize_complex(re, im, spec: QuantSpec, shared: bool = True):
    """Quantize the real and imaginary parts of one complex tensor.

    With ``shared=True`` both parts use one range (the fixed range, or the max
    over both parts in dynamic mode). ``shared=False`` only matters for dynamic
    mode, where each part then gets its own ``max |x|``.
    """
    re = np.asarray(re, dtype=np.float64)
    im = np.asarray(im, dtype=np.float64)
    if spec.mode == "dynamic" and shared:
        f = dynamic_scale(np.concatenate([re.ravel(), im.ravel()]))
        return quantize_tensor(re, spec, f), quantize_tensor(im, spec, f)
    return quantize_tensor(re, spec), quantize_tensor(im, spec)
