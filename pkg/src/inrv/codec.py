"""Binary container for trained models and the encode/decode pipeline.

Layout (integers little-endian)::

    magic b"INRV" | version u32 | model_kind u8 | header_len u32 |
    header (canonical UTF-8 JSON) | payload_len u64 | payload | crc32 u32

The payload holds every parameter as IEEE-754 binary32 in layer order,
weights (row-major) before biases.  The CRC covers every byte before it,
so header corruption is caught as well as payload corruption.
"""
from __future__ import annotations

import hashlib
import json
import logging
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import metrics
from .resample import DEFAULT_A, downsample, upsample
from .siren import SirenConfig, SirenModel, param_count
from .superres import SrConfig, SrModel, super_resolve
from .trainer import TrainConfig, TrainLog, predict_volume, train_siren
from .volume import Volume

log = logging.getLogger(__name__)

MAGIC = b"INRV"
FORMAT_VERSION = 1
MODEL_KINDS = {"siren": 0, "srdense": 1}
_KIND_NAMES = {v: k for k, v in MODEL_KINDS.items()}
_PREFIX = struct.Struct("<4sIBI")
_PAYLOAD_LEN = struct.Struct("<Q")
_CRC = struct.Struct("<I")


class CodecError(ValueError):
    """Malformed or inconsistent container."""


class ChecksumError(CodecError):
    pass


def canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False).encode("utf-8")


@dataclass
class CodecFile:
    model_kind: str
    header: dict
    payload: bytes
    version: int = FORMAT_VERSION
    log: TrainLog | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if self.model_kind not in MODEL_KINDS:
            raise CodecError(f"unknown model kind {self.model_kind!r}")
        if len(self.payload) % 4:
            raise CodecError("payload length is not a multiple of 4")

    @property
    def param_count(self) -> int:
        return len(self.payload) // 4

    @property
    def payload_bytes(self) -> int:
        return len(self.payload)

    def parameters(self) -> np.ndarray:
        return np.frombuffer(self.payload, dtype="<f4")

    def content_hash(self) -> str:
        return hashlib.sha256(self.payload).hexdigest()

    def encode_bytes(self) -> bytes:
        header = canonical_json(self.header)
        body = b"".join([
            _PREFIX.pack(MAGIC, self.version, MODEL_KINDS[self.model_kind], len(header)),
            header,
            _PAYLOAD_LEN.pack(len(self.payload)),
            self.payload,
        ])
        return body + _CRC.pack(zlib.crc32(body))

    @classmethod
    def decode_bytes(cls, data: bytes) -> "CodecFile":
        data = bytes(data)
        if len(data) < _PREFIX.size:
            raise CodecError("file too short for header")
        magic, version, kind, header_len = _PREFIX.unpack_from(data, 0)
        if magic != MAGIC:
            raise CodecError(f"bad magic {magic!r}")
        if version != FORMAT_VERSION:
            raise CodecError(f"unsupported format version {version}")
        if kind not in _KIND_NAMES:
            raise CodecError(f"unknown model kind byte {kind}")
        pos = _PREFIX.size
        if pos + header_len + _PAYLOAD_LEN.size > len(data):
            raise CodecError("header length overruns file")
        raw_header = data[pos:pos + header_len]
        pos += header_len
        (payload_len,) = _PAYLOAD_LEN.unpack_from(data, pos)
        pos += _PAYLOAD_LEN.size
        if pos + payload_len + _CRC.size != len(data):
            raise CodecError(f"payload length {payload_len} inconsistent with file size {len(data)}")
        payload = data[pos:pos + payload_len]
        (crc,) = _CRC.unpack_from(data, pos + payload_len)
        if zlib.crc32(data[:pos + payload_len]) != crc:
            raise ChecksumError("CRC32 mismatch")
        try:
            header = json.loads(raw_header.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CodecError("header is not valid UTF-8 JSON") from exc
        if not isinstance(header, dict):
            raise CodecError("header must be a JSON object")
        if canonical_json(header) != raw_header:
            raise CodecError("header is not in canonical form")
        out = cls(_KIND_NAMES[kind], header, payload, version)
        declared = header.get("param_count")
        if declared is not None and declared != out.param_count:
            raise CodecError(f"header declares {declared} parameters, payload holds {out.param_count}")
        return out

    def write(self, path) -> None:
        Path(path).write_bytes(self.encode_bytes())

    @classmethod
    def read(cls, path) -> "CodecFile":
        return cls.decode_bytes(Path(path).read_bytes())


def roundtrip_check(data) -> bool:
    """True when ``data`` parses and re-serializes to the identical bytes."""
    if isinstance(data, CodecFile):
        data = data.encode_bytes()
    try:
        again = CodecFile.decode_bytes(data).encode_bytes()
    except CodecError as exc:
        log.warning("roundtrip check failed: %s", exc)
        return False
    if again != bytes(data):
        log.warning("roundtrip check failed: re-serialized bytes differ")
        return False
    return True


def _payload(flat: np.ndarray) -> bytes:
    return np.ascontiguousarray(flat, dtype="<f4").tobytes()


# ---------------------------------------------------------------------------
# model <-> container

def siren_to_file(model: SirenModel, **header) -> CodecFile:
    meta = {"arch": {"type": "siren", **model.config.to_dict()}, "param_count": param_count(model.config)}
    meta.update(header)
    return CodecFile("siren", meta, _payload(model.flat_parameters()))


def siren_from_file(file: CodecFile) -> SirenModel:
    if file.model_kind != "siren":
        raise CodecError(f"expected a siren file, got {file.model_kind}")
    try:
        config = SirenConfig.from_dict(file.header["arch"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CodecError(f"invalid SIREN architecture descriptor: {exc}") from exc
    if param_count(config) != file.param_count:
        raise CodecError(f"architecture needs {param_count(config)} parameters, payload has {file.param_count}")
    return SirenModel.from_flat(config, file.parameters())


def sr_to_file(model: SrModel, **header) -> CodecFile:
    meta = {"arch": {"type": "srdense", **model.config.to_dict()}, "param_count": model.param_count()}
    meta.update(header)
    return CodecFile("srdense", meta, _payload(model.flat_parameters()))


def sr_from_file(file: CodecFile) -> SrModel:
    if file.model_kind != "srdense":
        raise CodecError(f"expected an srdense file, got {file.model_kind}")
    try:
        config = SrConfig.from_dict(file.header["arch"])
        return SrModel.from_flat(config, file.parameters())
    except (KeyError, TypeError, ValueError) as exc:
        raise CodecError(f"invalid SR model file: {exc}") from exc


# ---------------------------------------------------------------------------
# pipeline

def compress(volume_hr: Volume, lr_target_dims, siren_config: SirenConfig, train_config: TrainConfig,
             lanczos_a: int = DEFAULT_A, sr_model_hash: str | None = None, progress=None) -> CodecFile:
    """Downsample, fit the coordinate network on the LR grid, and package the best checkpoint.

    The returned file carries the :class:`TrainLog` in ``.log`` (not serialized).
    """
    lr_dims = tuple(int(d) for d in lr_target_dims)
    if len(lr_dims) == 2:
        lr_dims = (volume_hr.dims[0],) + lr_dims
    if any(l > h for l, h in zip(lr_dims, volume_hr.dims)):
        raise ValueError(f"LR dims {lr_dims} exceed HR dims {volume_hr.dims}")
    lr = downsample(volume_hr, lr_dims, lanczos_a)
    model, tlog = train_siren(lr, siren_config, train_config, progress=progress)
    header = {
        "hr_dims": list(volume_hr.dims),
        "lr_dims": list(lr_dims),
        "bit_depth": volume_hr.bit_depth,
        "intensity_scale": (1 << volume_hr.bit_depth) - 1,
        "spacing_mm": list(volume_hr.spacing_mm),
        "lanczos_a": lanczos_a,
        "sr_model_hash": sr_model_hash,
        "adam": {"beta1": 0.9, "beta2": 0.999, "epsilon": 1e-8},
        "train": {"learning_rate": train_config.learning_rate, "batch_size": train_config.batch_size,
                  "iterations": train_config.iterations, "seed": train_config.seed},
        "best_iteration": tlog.best_iteration,
        "lr_psnr_db": metrics.format_psnr(tlog.best_psnr_db),
    }
    out = siren_to_file(model, **header)
    out.log = tlog
    return out


def decompress(file: CodecFile, sr_model: SrModel | CodecFile | None = None) -> Volume:
    """Evaluate the coordinate network on its LR grid and bring it back to HR dims.

    ``meta['upsampler']`` records what was used; ``meta['fallback']`` is
    set when HR != LR and no SR model was supplied (Lanczos is used instead).
    """
    model = siren_from_file(file)
    h = file.header
    try:
        lr_dims = tuple(h["lr_dims"])
        hr_dims = tuple(h["hr_dims"])
        bit_depth = int(h["bit_depth"])
        a = int(h.get("lanczos_a", DEFAULT_A))
    except (KeyError, TypeError, ValueError) as exc:
        raise CodecError(f"header lacks decode geometry: {exc}") from exc
    spacing = h.get("spacing_mm", [1.0, 1.0, 1.0])
    lr_spacing = [s * hd / ld for s, hd, ld in zip(spacing, hr_dims, lr_dims)]
    lr = Volume(np.clip(predict_volume(model, lr_dims), 0.0, 1.0), bit_depth, lr_spacing)
    meta = {"upsampler": "none", "fallback": False, "lr_dims": list(lr_dims)}
    if lr_dims == hr_dims:
        out = lr
    elif sr_model is not None:
        if isinstance(sr_model, CodecFile):
            expected = h.get("sr_model_hash")
            if expected and expected != sr_model.content_hash():
                log.warning("SR model hash %s differs from the one recorded at encode time",
                            sr_model.content_hash()[:12])
                meta["sr_hash_mismatch"] = True
            sr_model = sr_from_file(sr_model)
        out = super_resolve(sr_model, lr, hr_dims, a)
        meta["upsampler"] = "srdense"
    else:
        log.warning("no SR model supplied; upsampling %s -> %s with Lanczos", lr_dims, hr_dims)
        out = upsample(lr, hr_dims, a) if all(hd >= ld for hd, ld in zip(hr_dims, lr_dims)) else \
            downsample(lr, hr_dims, a)
        meta.update(upsampler="lanczos", fallback=True)
    return Volume(out.data, bit_depth, tuple(spacing), meta)


def compression_rate(original, file: CodecFile, count_sr: bool = False,
                     sr_file: CodecFile | None = None) -> float:
    """One byte per original voxel over the binary32 payload bytes."""
    voxels = original.voxel_count if isinstance(original, Volume) else int(np.prod(original))
    denom = file.payload_bytes
    if count_sr:
        if sr_file is None:
            raise ValueError("count_sr=True needs the SR model file")
        denom += sr_file.payload_bytes
    return voxels / denom


def closed_form_rate(voxels: int, params: int) -> float:
    return voxels / (4 * params)
