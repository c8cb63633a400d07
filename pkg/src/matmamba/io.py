"""Checkpoints, run configs, dataset files and metrics streams.

Checkpoint layout (all integers little-endian)::

    magic      8 bytes  b"MATMAMBA"
    version    u32
    header     u32 length + UTF-8 JSON {"model": ModelConfig, "meta": {...}}
    count      u32 number of tensor records
    record     u16 name length, name (UTF-8), u8 dtype tag (1 = f32), u8 ndim,
               ndim x u32 dims, raw f32 payload
    checksum   32-byte SHA-256 of every preceding byte

Image dataset layout::

    magic b"MMIMGSET", u32 version, u32 count, u16 H, u16 W, u16 C,
    then count records of (u16 label, H*W*C uint8 pixels)
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .autograd import DTYPE
from .errors import FormatError, IntegrityError, SchemaError
from .models import ModelConfig, ModelParams
from .training import TrainConfig

CKPT_MAGIC = b"MATMAMBA"
CKPT_VERSION = 1
DTYPE_TAGS = {1: np.dtype("<f4")}
IMG_MAGIC = b"MMIMGSET"
IMG_VERSION = 1


def atomic_write(path: str | Path, payload: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# ------------------------------------------------------------------ checkpoints

def encode_checkpoint(named: list[tuple[str, np.ndarray]], model_cfg: ModelConfig, meta: dict | None = None) -> bytes:
    names = [n for n, _ in named]
    if len(set(names)) != len(names):
        raise SchemaError("duplicate tensor names")
    header = json.dumps({"model": model_cfg.to_dict(), "meta": meta or {}}, sort_keys=True).encode()
    parts = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(header)), header, struct.pack("<I", len(named))]
    for name, arr in named:
        raw = name.encode()
        arr = np.ascontiguousarray(arr, dtype="<f4")
        parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<BB", 1, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    body = b"".join(parts)
    return body + hashlib.sha256(body).digest()


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise IntegrityError("checkpoint is truncated")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode_checkpoint(buf: bytes) -> tuple[ModelConfig, dict, dict[str, np.ndarray]]:
    if len(buf) < len(CKPT_MAGIC) + 32 or buf[:len(CKPT_MAGIC)] != CKPT_MAGIC:
        raise IntegrityError("not a checkpoint (bad magic or too short)")
    body, digest = buf[:-32], buf[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise IntegrityError("checkpoint checksum mismatch (corrupt or truncated file)")
    r = _Reader(body)
    r.take(len(CKPT_MAGIC))
    version, hlen = r.unpack("<II")
    if version != CKPT_VERSION:
        raise SchemaError(f"checkpoint format version {version}, this build reads {CKPT_VERSION}")
    header = json.loads(r.take(hlen).decode())
    (count,) = r.unpack("<I")
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode()
        tag, ndim = r.unpack("<BB")
        if tag not in DTYPE_TAGS:
            raise SchemaError(f"unknown dtype tag {tag} for {name}")
        shape = r.unpack(f"<{ndim}I")
        dt = DTYPE_TAGS[tag]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        if name in arrays:
            raise SchemaError(f"duplicate tensor {name}")
        arrays[name] = np.frombuffer(r.take(nbytes), dtype=dt).reshape(shape).astype(DTYPE)
    if r.pos != len(body):
        raise IntegrityError("trailing bytes after the last tensor record")
    return ModelConfig.from_dict(header["model"]), header.get("meta", {}), arrays


def save_checkpoint(params: ModelParams, path: str | Path, meta: dict | None = None) -> Path:
    named = [(n, t.data) for n, t in params.named_tensors()]
    atomic_write(path, encode_checkpoint(named, params.config, meta))
    return Path(path)


def load_checkpoint(path: str | Path) -> tuple[ModelParams, dict]:
    """Returns ``(params, meta)``; the model config lives on ``params.config``."""
    cfg, meta, arrays = decode_checkpoint(Path(path).read_bytes())
    return ModelParams.from_arrays(cfg, arrays), meta


# ------------------------------------------------------------------ run config

@dataclass
class DataConfig:
    text_path: str | None = None
    image_path: str | None = None
    val_fraction: float = 0.05
    pixel_mean: list[float] = field(default_factory=lambda: [0.5])
    pixel_std: list[float] = field(default_factory=lambda: [0.5])

    @classmethod
    def from_dict(cls, doc: dict) -> "DataConfig":
        extra = set(doc) - set(cls.__dataclass_fields__)
        if extra:
            raise SchemaError(f"unknown data config keys: {sorted(extra)}")
        return cls(**doc)


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def to_dict(self) -> dict:
        return {"model": self.model.to_dict(), "train": self.train.to_dict(),
                "data": dict(vars(self.data))}

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        extra = set(doc) - {"model", "train", "data"}
        if extra:
            raise SchemaError(f"unknown run config sections: {sorted(extra)}")
        return cls(ModelConfig.from_dict(doc.get("model", {})),
                   TrainConfig.from_dict(doc.get("train", {})),
                   DataConfig.from_dict(doc.get("data", {})))

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        try:
            doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise SchemaError(f"{path}: not valid JSON ({exc})") from None
        if not isinstance(doc, dict):
            raise SchemaError(f"{path}: top level must be an object")
        return cls.from_dict(doc)


# -------------------------------------------------------------------- datasets

def ingest_text(path: str | Path) -> np.ndarray:
    """Byte-level tokens: each byte of the file is one token in [0, 256)."""
    return np.frombuffer(Path(path).read_bytes(), dtype=np.uint8).astype(np.int64)


@dataclass
class ImageDataset:
    pixels: np.ndarray  # [N, H, W, C] uint8
    labels: np.ndarray  # [N] int

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.pixels.shape[1:])

    def normalized(self, mean=(0.5,), std=(0.5,)) -> np.ndarray:
        x = self.pixels.astype(DTYPE) / DTYPE(255.0)
        return ((x - np.asarray(mean, DTYPE)) / np.asarray(std, DTYPE)).astype(DTYPE)


def write_image_dataset(path: str | Path, pixels: np.ndarray, labels: np.ndarray) -> None:
    pixels = np.asarray(pixels)
    if pixels.dtype != np.uint8 or pixels.ndim != 4:
        raise FormatError("pixels must be a uint8 array [N, H, W, C]")
    labels = np.asarray(labels)
    if labels.shape != (len(pixels),) or labels.min(initial=0) < 0 or labels.max(initial=0) > 0xFFFF:
        raise FormatError("labels must be one unsigned 16-bit value per image")
    n, H, W, C = pixels.shape
    rec = np.zeros(n, dtype=[("label", "<u2"), ("px", "u1", (H * W * C,))])
    rec["label"] = labels
    rec["px"] = pixels.reshape(n, -1)
    header = IMG_MAGIC + struct.pack("<IIHHH", IMG_VERSION, n, H, W, C)
    atomic_write(path, header + rec.tobytes())


def read_image_dataset(path: str | Path) -> ImageDataset:
    buf = Path(path).read_bytes()
    hsize = len(IMG_MAGIC) + struct.calcsize("<IIHHH")
    if len(buf) < hsize or buf[:len(IMG_MAGIC)] != IMG_MAGIC:
        raise FormatError("malformed image dataset header")
    version, n, H, W, C = struct.unpack("<IIHHH", buf[len(IMG_MAGIC):hsize])
    if version != IMG_VERSION:
        raise FormatError(f"unsupported image dataset version {version}")
    rec_size = 2 + H * W * C
    payload = len(buf) - hsize
    if payload != n * rec_size:
        raise FormatError(f"header declares {n} records of {rec_size} bytes, payload has {payload} bytes")
    rec = np.frombuffer(buf, dtype=[("label", "<u2"), ("px", "u1", (H * W * C,))], offset=hsize, count=n)
    return ImageDataset(rec["px"].reshape(n, H, W, C).copy(), rec["label"].astype(np.int64))


def ingest_images(path: str | Path, mean=(0.5,), std=(0.5,)) -> tuple[np.ndarray, np.ndarray]:
    """Float images ``[N, H, W, C]`` scaled to [0, 1] then standardized, plus labels."""
    ds = read_image_dataset(path)
    return ds.normalized(mean, std), ds.labels


# --------------------------------------------------------------------- metrics

class MetricsWriter:
    """Newline-delimited JSON records, one per call."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = open(self.path, "w", encoding="utf-8")

    def __call__(self, record: dict[str, Any]) -> None:
        self._fh.write(json.dumps(record, sort_keys=True) + "\n")
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_metrics(path: str | Path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]
