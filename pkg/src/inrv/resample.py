"""Separable Lanczos resampling.

Output sample ``i`` of an axis resized from ``n`` to ``m`` sits at source
position ``(i + 0.5) * n/m - 0.5`` (pixel-centre alignment).  When
shrinking, the kernel is stretched by the scale factor so it low-passes
before decimation.  Tap weights are renormalized per output sample and
out-of-range taps read the nearest border voxel.
"""
from __future__ import annotations

import math

import numpy as np

from .volume import Volume, resolve_axis

DEFAULT_A = 3


def lanczos(x, a: int = DEFAULT_A):
    """Lanczos window ``sinc(pi x) sinc(pi x / a)`` on ``|x| < a``, else 0.

    Accepts scalars or arrays.
    """
    if a < 1:
        raise ValueError(f"lanczos support a must be >= 1, got {a}")
    x = np.asarray(x, dtype=np.float64)
    # np.sinc is the normalized sinc: sin(pi t) / (pi t)
    out = np.where(np.abs(x) < a, np.sinc(x) * np.sinc(x / a), 0.0)
    # sin(pi k) is not exactly 0 in floating point; pin the integer zeros
    out = np.where((x != 0) & (x == np.rint(x)), 0.0, out)
    return float(out) if out.ndim == 0 else out


def weight_matrix(old_size: int, new_size: int, a: int = DEFAULT_A) -> np.ndarray:
    """Dense ``(new_size, old_size)`` matrix applying 1D Lanczos resampling."""
    if new_size < 1 or old_size < 1:
        raise ValueError("axis sizes must be positive")
    scale = old_size / new_size
    stretch = max(scale, 1.0)
    support = a * stretch
    mat = np.zeros((new_size, old_size))
    for i in range(new_size):
        centre = (i + 0.5) * scale - 0.5
        lo = math.floor(centre - support) + 1
        hi = math.ceil(centre + support) - 1
        taps = np.arange(lo, hi + 1)
        w = lanczos((centre - taps) / stretch, a)
        np.add.at(mat[i], np.clip(taps, 0, old_size - 1), w)
        mat[i] /= mat[i].sum()
    return mat


def _apply_axis(data: np.ndarray, axis: int, new_size: int, a: int) -> np.ndarray:
    old = data.shape[axis]
    if old == new_size:
        # centres land on integers, where the kernel interpolates exactly
        return data.copy()
    mat = weight_matrix(old, new_size, a)
    return np.moveaxis(np.tensordot(mat, np.moveaxis(data, axis, 0), axes=1), 0, axis)


def resample_axis(volume: Volume, axis, new_size: int, a: int = DEFAULT_A) -> Volume:
    ax = resolve_axis(axis)
    if new_size < 1:
        raise ValueError("new_size must be >= 1")
    out = np.clip(_apply_axis(volume.data, ax, new_size, a), 0.0, 1.0)
    return _rescaled(volume, out)


def _rescaled(volume: Volume, data: np.ndarray) -> Volume:
    spacing = tuple(s * o / n for s, o, n in zip(volume.spacing_mm, volume.dims, data.shape))
    return Volume(data, volume.bit_depth, spacing)


def resize(volume: Volume, target_dims, a: int = DEFAULT_A) -> Volume:
    """Separable resize to ``target_dims``; clips to [0, 1] once at the end."""
    target = _normalize_dims(volume, target_dims)
    data = volume.data
    for ax, n in enumerate(target):
        data = _apply_axis(data, ax, n, a)
    return _rescaled(volume, np.clip(data, 0.0, 1.0))


def downsample(volume: Volume, target_dims, a: int = DEFAULT_A) -> Volume:
    target = _normalize_dims(volume, target_dims)
    if any(t > s for t, s in zip(target, volume.dims)):
        raise ValueError(f"target {target} exceeds source {volume.dims}; use upsample")
    return resize(volume, target, a)


def upsample(volume: Volume, target_dims, a: int = DEFAULT_A) -> Volume:
    target = _normalize_dims(volume, target_dims)
    if any(t < s for t, s in zip(target, volume.dims)):
        raise ValueError(f"target {target} is smaller than source {volume.dims}; use downsample")
    return resize(volume, target, a)


def downsample_by(volume: Volume, factors, a: int = DEFAULT_A) -> Volume:
    """Shrink each axis by an integer-or-real factor (>= 1), rounding sizes down."""
    factors = tuple(factors)
    if len(factors) == 2:
        factors = (1,) + factors
    if any(f < 1 for f in factors):
        raise ValueError("downsampling factors must be >= 1")
    target = tuple(max(1, int(n // f)) for n, f in zip(volume.dims, factors))
    return downsample(volume, target, a)


def _normalize_dims(volume: Volume, dims) -> tuple[int, int, int]:
    dims = tuple(int(d) for d in dims)
    if len(dims) == 2:
        dims = (volume.dims[0],) + dims
    if len(dims) != 3 or min(dims) < 1:
        raise ValueError(f"invalid target dims {dims}")
    return dims
