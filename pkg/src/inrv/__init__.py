"""Neural volume compression on a small numpy autodiff engine."""
from .codec import CodecFile, compress, decompress, compression_rate
from .metrics import mse, psnr
from .siren import SirenConfig, init_siren, param_count
from .superres import SrConfig
from .trainer import TrainConfig, train_siren
from .volume import Volume, load_raw, save_raw

__version__ = "0.1.0"

__all__ = [
    "CodecFile", "compress", "decompress", "compression_rate", "mse", "psnr", "SirenConfig",
    "init_siren", "param_count", "SrConfig", "TrainConfig", "train_siren", "Volume", "load_raw",
    "save_raw",
]
