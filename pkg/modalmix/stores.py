"""OMMV sample files and the on-disk dataset directory that groups them.

Sample layout, little-endian throughout:

    b"OMMV" | version u16 | f u32 | h u32 | w u32
    rgb   f*h*w*3 u8
    depth f*h*w   u16, round(d * 65535)
    seg   f*h*w   u8
    edges f*h rows of ceil(w / 8) bytes (np.packbits along the row)
    caption length u8 | caption ids u8
"""

import logging
import os
import struct
from pathlib import Path
from typing import Iterator, List, MutableMapping, Optional, Sequence, Tuple, Union

import numpy as np

from .scenes import MultiModalVideo

logger = logging.getLogger(__name__)

MAGIC = b"OMMV"
VERSION = 1
MANIFEST = "manifest.txt"
SUFFIX = ".ommv"

_HEADER = struct.Struct("<4sHIII")

PathLike = Union[str, "os.PathLike[str]"]


class DatasetError(ValueError):
    pass


class BadMagicError(DatasetError):
    pass


class UnsupportedVersionError(DatasetError):
    pass


class TruncatedSampleError(DatasetError):
    pass


class DimensionMismatchError(DatasetError):
    pass


def _check_dims(video: MultiModalVideo) -> Tuple[int, int, int]:
    f, h, w = video.seg.shape
    expected = {
        "rgb": (f, h, w, 3),
        "depth": (f, h, w),
        "edges": (f, h, w),
    }
    for name, shape in expected.items():
        actual = getattr(video, name).shape
        if actual != shape:
            raise DimensionMismatchError(f"{name} has shape {actual}, expected {shape}")
    if len(video.caption_tokens) > 255:
        raise DimensionMismatchError(f"caption of {len(video.caption_tokens)} tokens is too long")
    return f, h, w


def encode_sample(video: MultiModalVideo) -> bytes:
    f, h, w = _check_dims(video)
    rgb = np.rint(np.clip(video.rgb.astype(np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)
    depth = np.rint(np.clip(video.depth.astype(np.float64), 0.0, 1.0) * 65535.0).astype("<u2")
    seg = video.seg.astype(np.uint8)
    edges = np.packbits(video.edges.astype(bool), axis=-1)
    caption = np.asarray(video.caption_tokens, dtype=np.uint8)
    return b"".join(
        (
            _HEADER.pack(MAGIC, VERSION, f, h, w),
            rgb.tobytes(),
            depth.tobytes(),
            seg.tobytes(),
            edges.tobytes(),
            struct.pack("<B", len(caption)),
            caption.tobytes(),
        )
    )


class _Reader:
    def __init__(self, payload: bytes, source: str):
        self._payload = payload
        self._offset = 0
        self._source = source

    def take(self, size: int, what: str) -> bytes:
        end = self._offset + size
        if end > len(self._payload):
            raise TruncatedSampleError(
                f"{self._source}: truncated while reading {what} "
                f"(need {end} bytes, have {len(self._payload)})"
            )
        chunk = self._payload[self._offset : end]
        self._offset = end
        return chunk

    @property
    def remaining(self) -> int:
        return len(self._payload) - self._offset


def decode_sample(payload: bytes, source: str = "<bytes>") -> MultiModalVideo:
    reader = _Reader(payload, source)
    magic, version, f, h, w = _HEADER.unpack(reader.take(_HEADER.size, "header"))
    if magic != MAGIC:
        raise BadMagicError(f"{source}: bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise UnsupportedVersionError(f"{source}: unsupported version {version}")
    if min(f, h, w) < 1:
        raise DimensionMismatchError(f"{source}: invalid dims f={f} h={h} w={w}")

    n = f * h * w
    row_bytes = (w + 7) // 8
    rgb = np.frombuffer(reader.take(n * 3, "rgb"), dtype=np.uint8).reshape(f, h, w, 3)
    depth = np.frombuffer(reader.take(n * 2, "depth"), dtype="<u2").reshape(f, h, w)
    seg = np.frombuffer(reader.take(n, "seg"), dtype=np.uint8).reshape(f, h, w)
    packed = np.frombuffer(reader.take(f * h * row_bytes, "edges"), dtype=np.uint8)
    edges = np.unpackbits(packed.reshape(f, h, row_bytes), axis=-1, count=w).astype(bool)
    (length,) = struct.unpack("<B", reader.take(1, "caption length"))
    caption = tuple(int(t) for t in reader.take(length, "caption"))
    if reader.remaining:
        raise DimensionMismatchError(
            f"{source}: {reader.remaining} bytes left over after a {f}x{h}x{w} sample"
        )

    return MultiModalVideo(
        rgb=rgb.astype(np.float32) / np.float32(255),
        depth=depth.astype(np.float32) / np.float32(65535),
        seg=seg.copy(),
        edges=edges,
        caption_tokens=caption,
    )


def write_sample(video: MultiModalVideo, path: PathLike):
    Path(path).write_bytes(encode_sample(video))


def read_sample(path: PathLike) -> MultiModalVideo:
    return decode_sample(Path(path).read_bytes(), str(path))


class DatasetStore:
    """A directory of OMMV samples listed, in order, by a `filename seed` manifest."""

    def __init__(self, root: PathLike):
        self.root = Path(root)

    @property
    def manifest_path(self) -> Path:
        return self.root / MANIFEST

    def exists(self) -> bool:
        return self.manifest_path.is_file()

    def entries(self) -> List[Tuple[str, Optional[int]]]:
        if not self.exists():
            raise DatasetError(f"no dataset at {self.root} (missing {MANIFEST})")
        entries = []
        for lineno, line in enumerate(self.manifest_path.read_text().splitlines(), start=1):
            if not line.strip():
                continue
            parts = line.split()
            if len(parts) != 2:
                raise DatasetError(f"{self.manifest_path}:{lineno}: expected 'filename seed'")
            name, seed = parts
            entries.append((name, None if seed == "-" else int(seed)))
        return entries

    def __len__(self) -> int:
        return len(self.entries())

    def seeds(self) -> List[Optional[int]]:
        return [seed for _, seed in self.entries()]

    def __getitem__(self, index: int) -> MultiModalVideo:
        name, _ = self.entries()[index]
        return read_sample(self.root / name)

    def __iter__(self) -> Iterator[MultiModalVideo]:
        for name, _ in self.entries():
            yield read_sample(self.root / name)

    def write(self, samples: Sequence[MultiModalVideo], seeds: Optional[Sequence[int]] = None):
        if seeds is not None and len(seeds) != len(samples):
            raise DatasetError(f"{len(samples)} samples but {len(seeds)} seeds")
        self.root.mkdir(parents=True, exist_ok=True)
        lines = []
        for i, video in enumerate(samples):
            name = f"sample_{i:05d}{SUFFIX}"
            write_sample(video, self.root / name)
            lines.append(f"{name} {'-' if seeds is None else seeds[i]}")
        self.manifest_path.write_text("".join(line + "\n" for line in lines))
        logger.info(f"Wrote {len(samples)} samples to {self.root}")

    def check(self) -> List[str]:
        """Compares the manifest against the sample files actually present."""
        listed = {name for name, _ in self.entries()}
        present = {p.name for p in self.root.glob(f"*{SUFFIX}")}
        problems = [f"missing sample file {name}" for name in sorted(listed - present)]
        problems += [f"sample file {name} not in manifest" for name in sorted(present - listed)]
        return problems

    def content(self) -> MutableMapping[str, Optional[int]]:
        return dict(self.entries())


def write_dataset(
    samples: Sequence[MultiModalVideo], path: PathLike, seeds: Optional[Sequence[int]] = None
) -> Path:
    store = DatasetStore(path)
    store.write(samples, seeds)
    return store.manifest_path


def read_dataset(path: PathLike) -> List[MultiModalVideo]:
    return list(DatasetStore(path))
