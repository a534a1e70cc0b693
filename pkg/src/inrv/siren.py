"""Coordinate MLP with sine activations.

``hidden_layers`` counts the sine layers: a model with ``hidden_layers=L``
has ``L + 1`` linear maps, the last of which is linear (no sine) and
produces one intensity per coordinate.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import numerics as nx

MAX_HIDDEN_LAYERS = 8


@dataclass(frozen=True)
class SirenConfig:
    in_dim: int = 3
    hidden_width: int = 128
    hidden_layers: int = 2
    omega0: float = 30.0
    omega_hidden: float = 30.0
    seed: int = 0

    def __post_init__(self):
        if self.in_dim not in (1, 2, 3):
            raise ValueError(f"in_dim must be 1, 2 or 3, got {self.in_dim}")
        if self.hidden_width < 1:
            raise ValueError("hidden_width must be >= 1")
        if not 1 <= self.hidden_layers <= MAX_HIDDEN_LAYERS:
            raise ValueError(f"hidden_layers must be in 1..{MAX_HIDDEN_LAYERS}, got {self.hidden_layers}")
        if not (self.omega0 > 0 and self.omega_hidden > 0):
            raise ValueError("omega0 and omega_hidden must be positive")

    def layer_shapes(self) -> list[tuple[int, int]]:
        w = self.hidden_width
        return [(self.in_dim, w)] + [(w, w)] * (self.hidden_layers - 1) + [(w, 1)]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SirenConfig":
        return cls(**{k: d[k] for k in ("in_dim", "hidden_width", "hidden_layers", "omega0",
                                        "omega_hidden", "seed")})


def param_count(config: SirenConfig) -> int:
    return sum((fan_in + 1) * fan_out for fan_in, fan_out in config.layer_shapes())


class SirenModel:
    def __init__(self, layers: list[tuple[nx.Tensor, nx.Tensor]], config: SirenConfig):
        self.layers = layers
        self.config = config

    def parameters(self) -> list[nx.Tensor]:
        return [t for layer in self.layers for t in layer]

    @property
    def dtype(self):
        return self.layers[0][0].dtype

    def param_count(self) -> int:
        return int(np.sum([p.size for p in self.parameters()]))

    def __call__(self, x: nx.Tensor) -> nx.Tensor:
        """Differentiable forward on an ``(N, in_dim)`` batch; returns ``(N, 1)``."""
        if x.shape[-1] != self.config.in_dim:
            raise nx.DimensionError(f"coords have dimension {x.shape[-1]}, model expects {self.config.in_dim}")
        h = x
        last = len(self.layers) - 1
        for i, (w, b) in enumerate(self.layers):
            h = nx.add(nx.matmul(h, w), b)
            if i < last:
                h = nx.sine(h, self.config.omega0 if i == 0 else self.config.omega_hidden)
        return h

    def astype(self, dtype) -> "SirenModel":
        layers = [(nx.Tensor(w.data.astype(dtype), requires_grad=True),
                   nx.Tensor(b.data.astype(dtype), requires_grad=True)) for w, b in self.layers]
        return SirenModel(layers, self.config)

    def flat_parameters(self) -> np.ndarray:
        """All weights then bias per layer, row-major, in layer order."""
        return np.concatenate([p.data.ravel() for p in self.parameters()])

    @classmethod
    def from_flat(cls, config: SirenConfig, flat: np.ndarray, dtype=np.float32) -> "SirenModel":
        flat = np.asarray(flat)
        if flat.size != param_count(config):
            raise ValueError(f"expected {param_count(config)} parameters, got {flat.size}")
        layers, pos = [], 0
        for fan_in, fan_out in config.layer_shapes():
            w = flat[pos:pos + fan_in * fan_out].reshape(fan_in, fan_out)
            pos += fan_in * fan_out
            b = flat[pos:pos + fan_out]
            pos += fan_out
            layers.append((nx.Tensor(w.astype(dtype), requires_grad=True),
                           nx.Tensor(b.astype(dtype), requires_grad=True)))
        return cls(layers, config)


def init_siren(config: SirenConfig, dtype=np.float32) -> SirenModel:
    """First layer U(-1/in_dim, 1/in_dim); later U(+-sqrt(6/fan_in)/omega_hidden); zero biases."""
    rng = np.random.default_rng(config.seed)
    layers = []
    for i, (fan_in, fan_out) in enumerate(config.layer_shapes()):
        bound = 1.0 / fan_in if i == 0 else np.sqrt(6.0 / fan_in) / config.omega_hidden
        w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        layers.append((nx.Tensor(w.astype(dtype), requires_grad=True),
                       nx.Tensor(np.zeros(fan_out, dtype=dtype), requires_grad=True)))
    return SirenModel(layers, config)


def forward(model: SirenModel, coords, chunk: int = 65536) -> np.ndarray:
    """Raw (unclamped) intensities for an ``(N, in_dim)`` coordinate array."""
    coords = np.asarray(coords)
    if coords.ndim != 2 or coords.shape[1] != model.config.in_dim:
        raise nx.DimensionError(f"coords shape {coords.shape} incompatible with in_dim {model.config.in_dim}")
    out = np.empty(coords.shape[0], dtype=model.dtype)
    with nx.no_grad():
        for start in range(0, coords.shape[0], chunk):
            x = nx.Tensor(coords[start:start + chunk].astype(model.dtype))
            out[start:start + chunk] = model(x).data[:, 0]
    return out
