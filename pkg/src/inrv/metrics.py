"""MSE and PSNR on the 8-bit (0-255) intensity scale."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .volume import Volume

PEAK = 255.0


def _as_array(v) -> np.ndarray:
    return v.data if isinstance(v, Volume) else np.asarray(v, dtype=np.float64)


def mse(a, b) -> float:
    """Mean squared difference after mapping [0, 1] intensities to 0-255."""
    x, y = _as_array(a), _as_array(b)
    if x.shape != y.shape:
        raise ValueError(f"dims mismatch: {x.shape} vs {y.shape}")
    d = (x - y) * PEAK
    return float(np.mean(d * d))


def psnr_from_mse(err: float) -> float:
    if err == 0:
        return math.inf
    return 10.0 * math.log10(PEAK * PEAK / err)


def psnr(a, b) -> float:
    """PSNR in dB; identical inputs give ``math.inf``."""
    return psnr_from_mse(mse(a, b))


@dataclass(frozen=True)
class QualityReport:
    mse: float
    psnr_db: float
    dims: tuple
    peak_value: float = PEAK

    def as_dict(self) -> dict:
        return {"mse": self.mse, "psnr_db": format_psnr(self.psnr_db), "dims": list(self.dims),
                "peak_value": self.peak_value}


def quality(a, b) -> QualityReport:
    err = mse(a, b)
    return QualityReport(err, psnr_from_mse(err), tuple(_as_array(a).shape))


def format_psnr(value: float):
    """JSON-safe PSNR: the +inf sentinel becomes the string ``"inf"``."""
    return "inf" if math.isinf(value) else value
