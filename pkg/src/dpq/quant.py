"""Uniform affine fake-quantization: range fitting, rounding, STE gradients.

Values are always carried as dequantized float64 reals on the grid; there
are no integer kernels. Weight matrices use one parameter set per output
channel (column), activations one per tensor.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ConfigError, ContractError
from .tensor import Tensor, _lift

SUPPORTED_BITS = (2, 4, 8, 16)
DEGENERATE_HALF_WIDTH = 1e-8


@dataclass
class QuantParams:
    """Clip range and derived grid for one tensor (or one weight column)."""

    bits: int
    scale: float
    zero_point: float
    clip_min: float
    clip_max: float

    @classmethod
    def from_range(cls, lo: float, hi: float, bits: int) -> "QuantParams":
        if bits not in SUPPORTED_BITS:
            raise ConfigError(f"unsupported bit-width {bits}; expected one of {SUPPORTED_BITS}")
        if not hi > lo:
            # Degenerate (constant) range: widen around the constant.
            lo, hi = lo - DEGENERATE_HALF_WIDTH, hi + DEGENERATE_HALF_WIDTH
        scale = (hi - lo) / (2 ** bits - 1)
        return cls(bits=bits, scale=scale, zero_point=-lo / scale, clip_min=lo, clip_max=hi)

    @property
    def levels(self) -> int:
        return 2 ** self.bits


def fit_quant_params(values, bits: int, method: str = "minmax", pct: float | None = None) -> QuantParams:
    """Fit a per-tensor clip range.

    ``minmax`` uses the observed extrema; ``percentile`` clips symmetrically
    at the ``pct``-th and ``(100 - pct)``-th percentiles to shed outliers.
    """
    arr = values.data if isinstance(values, Tensor) else np.asarray(values, dtype=np.float64)
    flat = arr.reshape(-1)
    if flat.size == 0:
        raise ContractError("fit_quant_params: empty values")
    if method == "minmax":
        lo, hi = float(flat.min()), float(flat.max())
    elif method == "percentile":
        if pct is None or not 0.0 < pct < 50.0:
            raise ConfigError(f"percentile method needs 0 < pct < 50, got {pct}")
        lo = float(np.percentile(flat, pct))
        hi = float(np.percentile(flat, 100.0 - pct))
    else:
        raise ConfigError(f"unknown range-fitting method {method!r}")
    return QuantParams.from_range(lo, hi, bits)


def fit_channel_quant_params(matrix, bits: int, method: str = "minmax",
                             pct: float | None = None) -> list[QuantParams]:
    """One QuantParams per output channel (column of an in x out matrix)."""
    arr = matrix.data if isinstance(matrix, Tensor) else np.asarray(matrix, dtype=np.float64)
    if arr.ndim != 2:
        raise ContractError(f"per-channel fitting expects a 2-D matrix, got shape {arr.shape}")
    return [fit_quant_params(arr[:, j], bits, method=method, pct=pct) for j in range(arr.shape[1])]


def _pack(params: QuantParams | Sequence[QuantParams]):
    """Collapse params to broadcastable (clip_min, clip_max, scale) arrays."""
    if isinstance(params, QuantParams):
        return params.clip_min, params.clip_max, params.scale
    lo = np.array([p.clip_min for p in params])
    hi = np.array([p.clip_max for p in params])
    sc = np.array([p.scale for p in params])
    return lo, hi, sc


def _apply(arr: np.ndarray, params) -> np.ndarray:
    lo, hi, sc = _pack(params)
    clipped = np.clip(arr, lo, hi)
    # np.rint rounds half to even, which keeps results platform-stable.
    return lo + np.rint((clipped - lo) / sc) * sc


def quantize(values, params):
    """Clip to the fitted range and round to the nearest grid level."""
    if isinstance(values, Tensor):
        return Tensor(_apply(values.data, params))
    return _apply(np.asarray(values, dtype=np.float64), params)


def ste_quantize(values: Tensor, params) -> Tensor:
    """Fake-quantize with a straight-through gradient.

    Forward equals ``quantize`` bit-exactly; backward passes the cotangent
    through unchanged inside the clip range and zeroes it outside.
    """
    lo, hi, _ = _pack(params)
    out = _apply(values.data, params)
    mask = (values.data >= lo) & (values.data <= hi)

    def vjp(g):
        return (g * mask,)

    return _lift("ste_quantize", (values,), out, vjp)
