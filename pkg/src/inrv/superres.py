"""Dense-skip super-resolution CNN (SRDenseNet-All layout).

Data flow for one ``(1, h, w)`` image::

    3x3 conv -> ReLU                       low-level features
    dense block x B                        each layer: ReLU(3x3 conv(concat(block input, earlier layers)))
    concat(low-level, every block output)  dense skip across blocks
    1x1 bottleneck -> ReLU
    log2(scale) x [4x4 stride-2 deconv -> ReLU]
    3x3 conv -> 1 channel
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass

import numpy as np

from . import metrics
from . import numerics as nx
from .resample import DEFAULT_A, downsample, upsample
from .volume import Volume

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SrConfig:
    blocks: int = 8
    layers_per_block: int = 8
    growth: int = 16
    low_level_channels: int = 128
    bottleneck_channels: int = 256
    scale: int = 4
    seed: int = 0

    def __post_init__(self):
        for name in ("blocks", "layers_per_block", "growth", "low_level_channels", "bottleneck_channels"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.scale < 2 or self.scale & (self.scale - 1):
            raise ValueError(f"scale must be a power of two >= 2, got {self.scale}")

    @property
    def block_channels(self) -> int:
        return self.layers_per_block * self.growth

    @property
    def bottleneck_in(self) -> int:
        return self.low_level_channels + self.blocks * self.block_channels

    @property
    def upsample_layers(self) -> int:
        return int(math.log2(self.scale))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SrConfig":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__})


def channel_ledger(config: SrConfig) -> dict:
    """Input/output channels of every layer, in construction order."""
    layers = [("low", 1, config.low_level_channels)]
    block_in = config.low_level_channels
    for b in range(config.blocks):
        for l in range(config.layers_per_block):
            layers.append((f"block{b}.layer{l}", block_in + l * config.growth, config.growth))
        block_in = config.block_channels
    layers.append(("bottleneck", config.bottleneck_in, config.bottleneck_channels))
    for i in range(config.upsample_layers):
        layers.append((f"deconv{i}", config.bottleneck_channels, config.bottleneck_channels))
    layers.append(("reconstruction", config.bottleneck_channels, 1))
    return {name: (cin, cout) for name, cin, cout in layers}


# (name, kind, kernel size) in payload order
def _layer_specs(config: SrConfig):
    ledger = channel_ledger(config)
    for name, (cin, cout) in ledger.items():
        if name == "bottleneck":
            yield name, "conv", cin, cout, 1
        elif name.startswith("deconv"):
            yield name, "deconv", cin, cout, 4
        else:
            yield name, "conv", cin, cout, 3


class SrModel:
    def __init__(self, config: SrConfig, layers: dict[str, tuple[nx.Tensor, nx.Tensor]]):
        self.config = config
        self.layers = layers

    def parameters(self) -> list[nx.Tensor]:
        return [t for pair in self.layers.values() for t in pair]

    def param_count(self) -> int:
        return int(np.sum([p.size for p in self.parameters()]))

    @property
    def dtype(self):
        return self.layers["low"][0].dtype

    def _conv(self, name, x, relu=True):
        k, b = self.layers[name]
        pad = k.shape[-1] // 2
        y = nx.conv2d(x, k, 1, pad, bias=b)
        return nx.relu(y) if relu else y

    def __call__(self, x: nx.Tensor) -> nx.Tensor:
        """Differentiable forward on ``(N, 1, h, w)`` batches; output unclamped."""
        cfg = self.config
        low = self._conv("low", x)
        levels = [low]
        block_in = low
        for b in range(cfg.blocks):
            feats = [block_in]
            outs = []
            for l in range(cfg.layers_per_block):
                inp = feats[0] if len(feats) == 1 else nx.concat_channels(feats)
                y = self._conv(f"block{b}.layer{l}", inp)
                feats.append(y)
                outs.append(y)
            block_in = outs[0] if len(outs) == 1 else nx.concat_channels(outs)
            levels.append(block_in)
        h = self._conv("bottleneck", nx.concat_channels(levels))
        for i in range(cfg.upsample_layers):
            k, b = self.layers[f"deconv{i}"]
            h = nx.relu(nx.deconv2d(h, k, stride=2, padding=1, bias=b))
        return self._conv("reconstruction", h, relu=False)

    def flat_parameters(self) -> np.ndarray:
        return np.concatenate([p.data.ravel() for p in self.parameters()])

    @classmethod
    def from_flat(cls, config: SrConfig, flat: np.ndarray, dtype=np.float32) -> "SrModel":
        flat = np.asarray(flat)
        layers, pos = {}, 0
        for name, kind, cin, cout, k in _layer_specs(config):
            shape = (cout, cin, k, k) if kind == "conv" else (cin, cout, k, k)
            size = int(np.prod(shape))
            if pos + size + cout > flat.size:
                raise ValueError("parameter vector too short for SR architecture")
            kern = flat[pos:pos + size].reshape(shape)
            pos += size
            bias = flat[pos:pos + cout]
            pos += cout
            layers[name] = (nx.Tensor(kern.astype(dtype), requires_grad=True),
                            nx.Tensor(bias.astype(dtype), requires_grad=True))
        if pos != flat.size:
            raise ValueError(f"expected {pos} SR parameters, got {flat.size}")
        return cls(config, layers)


def sr_param_count(config: SrConfig) -> int:
    total = 0
    for _, _, cin, cout, k in _layer_specs(config):
        total += cin * cout * k * k + cout
    return total


def sr_init(config: SrConfig, dtype=np.float32) -> SrModel:
    """He-uniform kernels ``U(+-sqrt(6 / fan_in))``, zero biases."""
    rng = np.random.default_rng(config.seed)
    layers = {}
    for name, kind, cin, cout, k in _layer_specs(config):
        if kind == "conv":
            shape, fan_in = (cout, cin, k, k), cin * k * k
        else:
            # each output pixel of a stride-2 deconv sees (k/2)^2 taps per channel
            shape, fan_in = (cin, cout, k, k), cin * (k // 2) ** 2
        bound = math.sqrt(6.0 / fan_in)
        if name == "reconstruction":
            bound = math.sqrt(3.0 / fan_in)  # linear output layer
        kern = rng.uniform(-bound, bound, size=shape)
        layers[name] = (nx.Tensor(kern.astype(dtype), requires_grad=True),
                        nx.Tensor(np.zeros(cout, dtype=dtype), requires_grad=True))
    return SrModel(config, layers)


def sr_forward(model: SrModel, lr_image, clamp: bool = True) -> np.ndarray:
    """Super-resolve a ``(1, h, w)`` (or ``(h, w)``) image to ``(1, s*h, s*w)``."""
    img = np.asarray(lr_image.data if isinstance(lr_image, Volume) else lr_image)
    if img.ndim == 2:
        img = img[None]
    if img.ndim != 3 or img.shape[0] != 1:
        raise nx.DimensionError(f"expected a single-channel (1, h, w) image, got {img.shape}")
    if min(img.shape[1:]) < 8:
        raise nx.DimensionError(f"SR input must be at least 8x8, got {img.shape[1:]}")
    with nx.no_grad():
        out = model(nx.Tensor(img[None].astype(model.dtype))).data[0].astype(np.float64)
    return np.clip(out, 0.0, 1.0) if clamp else out


def super_resolve(model: SrModel, volume: Volume, target_dims, a: int = DEFAULT_A) -> Volume:
    """Per-slice SR in-plane, Lanczos along depth when the depth changes."""
    s = model.config.scale
    d, h, w = volume.dims
    td, th, tw = target_dims
    if (th, tw) != (h * s, w * s):
        raise nx.DimensionError(f"SR scale {s} maps {h}x{w} to {h * s}x{w * s}, not {th}x{tw}")
    planes = np.stack([sr_forward(model, volume.data[z][None])[0] for z in range(d)])
    out = Volume(planes, volume.bit_depth)
    if td != d:
        out = upsample(out, (td, th, tw), a) if td > d else downsample(out, (td, th, tw), a)
    return out


# ---------------------------------------------------------------------------
# training

@dataclass(frozen=True)
class SrTrainConfig:
    iterations: int = 2000
    batch_size: int = 8
    learning_rate: float = 1e-3
    eval_interval: int = 100
    val_fraction: float = 0.1
    seed: int = 0


def make_sr_pairs(volume: Volume, count: int, patch: int = 8, scale: int = 4, seed: int = 0,
                  a: int = DEFAULT_A) -> list[tuple[np.ndarray, np.ndarray]]:
    """Aligned (LR, HR) patches: LR is the Lanczos-downsampled slice, as the codec sees it.

    Slices are drawn uniformly from the volume's depth.
    """
    d, h, w = volume.dims
    if h % scale or w % scale:
        raise ValueError(f"slice {h}x{w} is not divisible by the scale {scale}")
    lh, lw = h // scale, w // scale
    if lh < patch or lw < patch:
        raise ValueError(f"patch {patch} does not fit in LR slice {lh}x{lw}")
    rng = np.random.default_rng(seed)
    lows = {}
    pairs = []
    for _ in range(count):
        z = int(rng.integers(d))
        if z not in lows:
            hr_slice = Volume(volume.data[z][None], volume.bit_depth)
            lows[z] = downsample(hr_slice, (1, lh, lw), a).data[0]
        r, c = int(rng.integers(lh - patch + 1)), int(rng.integers(lw - patch + 1))
        lr = lows[z][r:r + patch, c:c + patch]
        hr = volume.data[z, r * scale:(r + patch) * scale, c * scale:(c + patch) * scale]
        pairs.append((lr[None].copy(), hr[None].copy()))
    return pairs


@dataclass
class SrTrainLog:
    records: list[tuple[int, float, float]]  # (iteration, train loss, validation PSNR)
    best_iteration: int
    best_val_psnr_db: float


def _val_psnr(model: SrModel, lr: np.ndarray, hr: np.ndarray) -> float:
    pred = []
    with nx.no_grad():
        for i in range(0, lr.shape[0], 16):
            pred.append(model(nx.Tensor(lr[i:i + 16])).data)
    return metrics.psnr(np.clip(np.concatenate(pred).astype(np.float64), 0, 1), hr)


def sr_train(pairs, config: SrConfig, train_cfg: SrTrainConfig = SrTrainConfig(),
             progress=None) -> tuple[SrModel, SrTrainLog]:
    """Adam on MSE over patch minibatches; returns the best-validation model."""
    if not pairs:
        raise ValueError("sr_train needs at least one (LR, HR) pair")
    lr_shape, hr_shape = pairs[0][0].shape, pairs[0][1].shape
    for lr, hr in pairs:
        if lr.shape != lr_shape or hr.shape != hr_shape:
            raise nx.DimensionError("all SR training pairs must share one shape")
        if hr.shape[-2:] != (lr.shape[-2] * config.scale, lr.shape[-1] * config.scale):
            raise nx.DimensionError(f"pair shapes {lr.shape} -> {hr.shape} do not match scale {config.scale}")
    lr_all = np.stack([np.asarray(p[0]).reshape(1, *lr_shape[-2:]) for p in pairs]).astype(np.float32)
    hr_all = np.stack([np.asarray(p[1]).reshape(1, *hr_shape[-2:]) for p in pairs]).astype(np.float32)

    rng = np.random.default_rng(train_cfg.seed)
    n_val = int(round(len(pairs) * train_cfg.val_fraction)) if len(pairs) > 1 else 0
    order = rng.permutation(len(pairs))
    val_idx, train_idx = order[:n_val], order[n_val:]
    if n_val == 0:
        val_idx = train_idx

    model = sr_init(config)
    params = model.parameters()
    opt = nx.Adam(params, lr=train_cfg.learning_rate)
    records = []
    best = (-math.inf, 0, nx.snapshot(params))
    val_lr, val_hr = lr_all[val_idx], hr_all[val_idx]

    def check(it, loss):
        nonlocal best
        v = _val_psnr(model, val_lr, val_hr)
        records.append((it, loss, v))
        if v > best[0]:
            best = (v, it, nx.snapshot(params))
        if progress is not None:
            progress(records[-1])

    check(0, math.nan)
    perm, pos = rng.permutation(train_idx), 0
    for it in range(1, train_cfg.iterations + 1):
        if pos + train_cfg.batch_size > len(perm):
            perm, pos = rng.permutation(train_idx), 0
        idx = perm[pos:pos + train_cfg.batch_size]
        pos += len(idx)
        loss = nx.mse_loss(model(nx.Tensor(lr_all[idx])), nx.Tensor(hr_all[idx]))
        opt.zero_grad()
        nx.backward(loss)
        opt.step()
        if it % train_cfg.eval_interval == 0 or it == train_cfg.iterations:
            check(it, loss.item())
    nx.set_parameters(params, best[2])
    return model, SrTrainLog(records, best[1], best[0])


def lanczos_baseline_psnr(lr: np.ndarray, hr: np.ndarray, a: int = DEFAULT_A) -> float:
    up = upsample(Volume(np.clip(lr, 0, 1)), (1,) + tuple(hr.shape[-2:]), a)
    return metrics.psnr(up.data, np.asarray(hr).reshape(up.dims))
