"""Per-tensor affine quantization, ``r = scale * (q - zero_point)``.

Codes live in the unsigned domain ``[0, 2**k - 1]``. The scale is the
tensor's minimum resolution ``(max - min) / (2**k - 1)``, with the range
widened to include 0.0 when every value shares one sign; the zero point is
then rounded to an integer so that 0.0 is exactly representable.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

K_MIN = 2
K_MAX = 32
# Scale used for all-zero tensors; keeps |g| / eps finite.
EPS_MIN = 1e-8


def round_half_away(x):
    """Round to nearest, ties away from zero (platform independent)."""
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def code_max(k: int) -> int:
    return (1 << k) - 1


def _check_bitwidth(k) -> int:
    if isinstance(k, bool) or int(k) != k or not K_MIN <= k <= K_MAX:
        raise ValueError(f"bitwidth must be an integer in [{K_MIN}, {K_MAX}], got {k!r}")
    return int(k)


@dataclass(frozen=True)
class QuantParams:
    scale: float
    zero_point: int
    bitwidth: int

    def __post_init__(self):
        _check_bitwidth(self.bitwidth)
        if not (np.isfinite(self.scale) and self.scale > 0):
            raise ValueError(f"scale must be positive and finite, got {self.scale!r}")
        if not 0 <= self.zero_point <= code_max(self.bitwidth):
            raise ValueError(
                f"zero_point {self.zero_point} outside [0, {code_max(self.bitwidth)}]")

    @property
    def qmax(self) -> int:
        return code_max(self.bitwidth)


@dataclass(frozen=True, eq=False)
class QuantizedTensor:
    """Integer codes (int64) plus the affine parameters shared by all of them."""

    codes: np.ndarray
    params: QuantParams

    @property
    def shape(self) -> tuple:
        return self.codes.shape

    @property
    def size(self) -> int:
        return self.codes.size

    @property
    def bitwidth(self) -> int:
        return self.params.bitwidth


def fit_params(x, k: int) -> QuantParams:
    """Fit scale and zero point to the value range of ``x`` at ``k`` bits."""
    k = _check_bitwidth(k)
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        raise ValueError("empty tensor")
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite input")
    lo, hi = min(float(x.min()), 0.0), max(float(x.max()), 0.0)
    qmax = code_max(k)
    scale = (hi - lo) / qmax
    if not scale > 0:
        scale = EPS_MIN
    zero_point = int(np.clip(round_half_away(-lo / scale), 0, qmax))
    return QuantParams(scale, zero_point, k)


def quantize(x, p: QuantParams) -> QuantizedTensor:
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite input")
    codes = round_half_away(x / p.scale) + p.zero_point
    codes = np.clip(codes, 0, p.qmax).astype(np.int64)
    return QuantizedTensor(codes, p)


def dequantize(q: QuantizedTensor) -> np.ndarray:
    return q.params.scale * (q.codes - q.params.zero_point).astype(np.float64)


def quantize_fit(x, k: int) -> QuantizedTensor:
    """Fit parameters to ``x`` and quantize it in one go."""
    return quantize(x, fit_params(x, k))


def epsilon(q: QuantizedTensor) -> float:
    """Minimum representable weight change of ``q`` (its scale)."""
    return q.params.scale


def requantize(q: QuantizedTensor, k_new: int) -> QuantizedTensor:
    """Re-code ``q`` at a new bitwidth, refitting on its current real values."""
    k_new = _check_bitwidth(k_new)
    if k_new == q.bitwidth:
        return QuantizedTensor(q.codes.copy(), q.params)
    return quantize_fit(dequantize(q), k_new)
