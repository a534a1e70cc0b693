"""Fit a :class:`SirenModel` to a volume over its coordinate grid."""
from __future__ import annotations

import csv
import io
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import metrics
from . import numerics as nx
from .siren import SirenConfig, SirenModel, forward, init_siren
from .volume import CoordGrid, Volume, coord_grid

log = logging.getLogger(__name__)

_T0 = time.perf_counter()

_DTYPES = {"single": np.float32, "double": np.float64}


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.0015
    batch_size: int = 65536
    iterations: int = 50_000
    eval_interval: int = 250
    seed: int = 0
    precision: str = "single"

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        for name in ("batch_size", "iterations", "eval_interval"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.precision not in _DTYPES:
            raise ValueError(f"precision must be 'single' or 'double', got {self.precision!r}")

    @property
    def dtype(self):
        return _DTYPES[self.precision]


@dataclass
class TrainRecord:
    iteration: int
    loss: float
    psnr_db: float
    wall_clock_s: float
    peak_alloc_bytes: int


@dataclass
class TrainLog:
    records: list[TrainRecord] = field(default_factory=list)
    best_iteration: int = 0
    best_psnr_db: float = -math.inf
    best_checkpoint: list[np.ndarray] | None = None

    @property
    def train_seconds(self) -> float:
        return self.records[-1].wall_clock_s if self.records else 0.0

    @property
    def peak_alloc_bytes(self) -> int:
        return max((r.peak_alloc_bytes for r in self.records), default=0)

    @property
    def iterations(self) -> int:
        return self.records[-1].iteration if self.records else 0

    def seconds_per_iteration(self) -> float:
        return self.train_seconds / self.iterations if self.iterations else 0.0

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["iteration", "loss", "psnr_db", "seconds", "peak_bytes"])
        for r in self.records:
            w.writerow([r.iteration, repr(r.loss), metrics.format_psnr(r.psnr_db),
                        f"{r.wall_clock_s:.6f}", r.peak_alloc_bytes])
        return buf.getvalue()


def resource_probe() -> tuple[int, float]:
    """(peak engine allocation in bytes, seconds since the package was imported)."""
    return nx.peak_bytes(), time.perf_counter() - _T0


class BatchSampler:
    """Uniform sampling without replacement inside each epoch.

    Batches are drawn from the concatenation of successive epoch
    permutations, so a batch may straddle two epochs.
    """

    def __init__(self, n: int, batch_size: int, rng: np.random.Generator):
        if batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        self.n = n
        self.batch_size = batch_size
        self.rng = rng
        self._perm = rng.permutation(n)
        self._pos = 0

    def next_indices(self) -> np.ndarray:
        out = []
        need = self.batch_size
        while need:
            if self._pos == self.n:
                self._perm = self.rng.permutation(self.n)
                self._pos = 0
            take = min(need, self.n - self._pos)
            out.append(self._perm[self._pos:self._pos + take])
            self._pos += take
            need -= take
        return out[0] if len(out) == 1 else np.concatenate(out)


def sample_batch(grid: CoordGrid, volume: Volume, batch_size: int, rng: np.random.Generator,
                 in_dim: int | None = None, sampler: BatchSampler | None = None):
    """Draw ``(coords, targets)``; pass the same ``sampler`` to continue an epoch."""
    if sampler is None:
        sampler = BatchSampler(len(grid), batch_size, rng)
    idx = sampler.next_indices()
    coords = grid.coords if in_dim is None else grid.for_dim(in_dim)
    return coords[idx], volume.data.reshape(-1)[idx]


def predict_volume(model: SirenModel, dims) -> np.ndarray:
    grid = coord_grid(dims)
    return forward(model, grid.for_dim(model.config.in_dim)).astype(np.float64).reshape(grid.dims)


def _check_dims(model: SirenModel, volume: Volume):
    need = 2 if volume.is_2d else 3
    if model.config.in_dim != need:
        raise nx.DimensionError(f"model in_dim {model.config.in_dim} does not match a "
                         f"{'2D' if volume.is_2d else '3D'} volume (needs {need})")


def evaluate(model: SirenModel, volume: Volume) -> float:
    """PSNR (dB, 0-255 scale) of the clamped full-grid reconstruction."""
    _check_dims(model, volume)
    return metrics.psnr(np.clip(predict_volume(model, volume.dims), 0.0, 1.0), volume.data)


def _eval_full(model, coords, target):
    pred = forward(model, coords).astype(np.float64)
    raw = pred - target
    loss = float(np.mean(raw * raw))
    return loss, metrics.psnr(np.clip(pred, 0.0, 1.0), target)


def train_siren(volume: Volume, siren_config: SirenConfig, train_config: TrainConfig,
                progress=None) -> tuple[SirenModel, TrainLog]:
    """Adam on MSE over grid samples; returns the best-PSNR checkpoint.

    PSNR evaluation time is excluded from the logged wall clock.
    """
    if volume.voxel_count == 0:
        raise ValueError("empty volume")
    dtype = train_config.dtype
    model = init_siren(siren_config, dtype=dtype)
    _check_dims(model, volume)
    params = model.parameters()
    opt = nx.Adam(params, lr=train_config.learning_rate)

    grid = coord_grid(volume.dims)
    coords = np.ascontiguousarray(grid.for_dim(siren_config.in_dim), dtype=dtype)
    target = volume.data.reshape(-1)
    full_batch = train_config.batch_size >= len(grid)
    if full_batch:
        x_full = nx.Tensor(coords)
        t_full = nx.Tensor(target.astype(dtype).reshape(-1, 1))
    else:
        sampler = BatchSampler(len(grid), train_config.batch_size,
                               np.random.default_rng(train_config.seed))
        target_col = target.astype(dtype).reshape(-1, 1)

    nx.reset_peak()
    tlog = TrainLog()
    elapsed = 0.0

    def record(it):
        loss, value = _eval_full(model, coords, target)
        tlog.records.append(TrainRecord(it, loss, value, elapsed, nx.peak_bytes()))
        if value > tlog.best_psnr_db:
            tlog.best_psnr_db, tlog.best_iteration = value, it
            tlog.best_checkpoint = nx.snapshot(params)
        if progress is not None:
            progress(tlog.records[-1])

    record(0)
    for it in range(1, train_config.iterations + 1):
        t0 = time.perf_counter()
        if full_batch:
            x, t = x_full, t_full
        else:
            idx = sampler.next_indices()
            x, t = nx.Tensor(coords[idx]), nx.Tensor(target_col[idx])
        loss = nx.mse_loss(model(x), t)
        if not math.isfinite(loss.item()):
            raise nx.NonFiniteError(f"loss diverged at iteration {it}")
        opt.zero_grad()
        nx.backward(loss)
        opt.step()
        del loss, x, t
        elapsed += time.perf_counter() - t0
        if it % train_config.eval_interval == 0 or it == train_config.iterations:
            record(it)

    nx.set_parameters(params, tlog.best_checkpoint)
    log.debug("best PSNR %.3f dB at iteration %d", tlog.best_psnr_db, tlog.best_iteration)
    return model, tlog
