"""OVDF checkpoint files.

Layout, little-endian:

    b"OVDF" | version u16 | config length u32 | config text (UTF-8)
    per parameter: name length u16 | name | rank u8 | extents u32 * rank | float32 data
    crc32 u32 of every preceding byte
"""

import logging
import os
import struct
import zlib
from pathlib import Path
from typing import List, NamedTuple, Optional, Tuple, Union

import numpy as np

from .config import RunConfig, parse_config_text, stored_step
from .model import ModelConfig, MultiModalDiT, init_parameters

logger = logging.getLogger(__name__)

MAGIC = b"OVDF"
VERSION = 1

# Keys that change parameter shapes; a checkpoint loads only into a model that agrees on them.
ARCHITECTURE_KEYS = (
    "model_dim",
    "depth",
    "heads",
    "mlp_ratio",
    "latent_channels",
    "grid",
    "caption_len",
    "vocab_size",
    "modalities",
    "use_msph",
)

PathLike = Union[str, "os.PathLike[str]"]


class CheckpointError(ValueError):
    pass


class BadCheckpointMagicError(CheckpointError):
    pass


class CrcMismatchError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


class ConfigMismatchError(CheckpointError):
    pass


class Record(NamedTuple):
    name: str
    value: np.ndarray


class Checkpoint(NamedTuple):
    config_text: str
    records: List[Record]


def encode_checkpoint(config_text: str, records: List[Record]) -> bytes:
    config = config_text.encode("utf-8")
    chunks = [MAGIC, struct.pack("<HI", VERSION, len(config)), config]
    for name, value in records:
        encoded = name.encode("utf-8")
        data = np.ascontiguousarray(value, dtype="<f4")
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<B", data.ndim))
        chunks.append(struct.pack(f"<{data.ndim}I", *data.shape))
        chunks.append(data.tobytes())
    body = b"".join(chunks)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def _take(body: bytes, offset: int, size: int, what: str) -> Tuple[bytes, int]:
    end = offset + size
    if end > len(body):
        raise TruncatedCheckpointError(f"truncated while reading {what}")
    return body[offset:end], end


def _parse_body(body: bytes) -> Checkpoint:
    chunk, offset = _take(body, len(MAGIC), 6, "header")
    version, config_len = struct.unpack("<HI", chunk)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    chunk, offset = _take(body, offset, config_len, "config block")
    try:
        config_text = chunk.decode("utf-8")
    except UnicodeDecodeError:
        raise CheckpointError("config block is not UTF-8") from None

    records = []
    while offset < len(body):
        chunk, offset = _take(body, offset, 2, "name length")
        (name_len,) = struct.unpack("<H", chunk)
        chunk, offset = _take(body, offset, name_len, "name")
        name = chunk.decode("utf-8", errors="replace")
        chunk, offset = _take(body, offset, 1, f"rank of {name}")
        (rank,) = struct.unpack("<B", chunk)
        chunk, offset = _take(body, offset, 4 * rank, f"extents of {name}")
        shape = struct.unpack(f"<{rank}I", chunk)
        count = int(np.prod(shape, dtype=np.int64))
        chunk, offset = _take(body, offset, 4 * count, f"data of {name}")
        records.append(Record(name, np.frombuffer(chunk, dtype="<f4").reshape(shape).copy()))
    return Checkpoint(config_text, records)


def decode_checkpoint(payload: bytes, source: str = "<bytes>") -> Checkpoint:
    if payload[: len(MAGIC)] != MAGIC:
        raise BadCheckpointMagicError(f"{source}: bad magic {payload[:len(MAGIC)]!r}")
    if len(payload) < len(MAGIC) + 6 + 4:
        raise TruncatedCheckpointError(f"{source}: file too short ({len(payload)} bytes)")
    body, (stored,) = payload[:-4], struct.unpack("<I", payload[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF == stored:
        return _parse_body(body)
    # A structure that runs out of bytes is reported as truncation, anything else as corruption.
    try:
        _parse_body(body)
    except TruncatedCheckpointError as e:
        raise TruncatedCheckpointError(f"{source}: {e}") from None
    except CheckpointError:
        pass
    raise CrcMismatchError(f"{source}: crc mismatch, the file is corrupted")


def write_checkpoint(path: PathLike, config_text: str, records: List[Record]):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode_checkpoint(config_text, records))
    os.replace(tmp, path)


def read_checkpoint(path: PathLike) -> Checkpoint:
    return decode_checkpoint(Path(path).read_bytes(), str(path))


def save(model: MultiModalDiT, path: PathLike, config: RunConfig, step: Optional[int] = None):
    records = [Record(name, p.data) for name, p in model.named_parameters()]
    write_checkpoint(path, config.to_text(step), records)
    logger.info(f"Saved checkpoint to {path}" + (f" at step {step}" if step is not None else ""))


class LoadedModel(NamedTuple):
    model: MultiModalDiT
    config: RunConfig
    step: int


def check_architecture(stored: ModelConfig, requested: ModelConfig):
    a, b = stored.to_dict(), requested.to_dict()
    differing = [key for key in ARCHITECTURE_KEYS if a[key] != b[key]]
    if differing:
        details = ", ".join(f"{k}: file {a[k]} vs requested {b[k]}" for k in differing)
        raise ConfigMismatchError(f"config mismatch ({details})")


def load(path: PathLike, requested: Optional[ModelConfig] = None) -> LoadedModel:
    checkpoint = read_checkpoint(path)
    config = parse_config_text(checkpoint.config_text, str(path))
    model_config = config.model_config()
    if requested is not None:
        check_architecture(model_config, requested)
    model = init_parameters(model_config, config.seed)
    try:
        model.load_state_dict({name: value for name, value in checkpoint.records})
    except ValueError as e:
        raise ConfigMismatchError(f"{path}: parameters do not fit the stored config: {e}") from e
    step = stored_step(checkpoint.config_text)
    logger.debug(f"Loaded {len(checkpoint.records)} parameters from {path} (step {step})")
    return LoadedModel(model, config, step)
