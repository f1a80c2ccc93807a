"""Lossless latent codec: color-space modality encodings plus space-time patchify.

A pixel (t, y, x, c) lands in latent cell (t // ft, y // fh, x // fw) at channel
c*(ft*fh*fw) + (t % ft)*(fh*fw) + (y % fh)*fw + (x % fw), with values mapped from
[0, 1] to [-1, 1]. Latents are float64, so the roundtrip is exact for float32
pixels that are 0 or at least 2**-29, which covers the u8 rgb and u16 depth
storage grids. Smaller nonzero values lose low bits in 2v - 1.
"""

import logging
from dataclasses import dataclass
from typing import Tuple

import numpy as np
from einops import rearrange
from typing_extensions import Literal

logger = logging.getLogger(__name__)

Modality = Literal["rgb", "depth", "seg", "edges"]

# Normative palette, ids 1-8. Id 0 is the black background.
PALETTE: Tuple[Tuple[float, float, float], ...] = (
    (1.0, 0.0, 0.0),
    (0.0, 1.0, 0.0),
    (0.0, 0.0, 1.0),
    (1.0, 1.0, 0.0),
    (1.0, 0.0, 1.0),
    (0.0, 1.0, 1.0),
    (1.0, 0.5, 0.0),
    (1.0, 1.0, 1.0),
)
COLOR_NAMES: Tuple[str, ...] = (
    "red",
    "green",
    "blue",
    "yellow",
    "magenta",
    "cyan",
    "orange",
    "white",
)

_SEG_COLORS = np.array([(0.0, 0.0, 0.0)] + list(PALETTE), dtype=np.float32)


class CodecError(ValueError):
    pass


@dataclass(frozen=True)
class CodecConfig:
    ft: int = 2
    fh: int = 4
    fw: int = 4

    def __post_init__(self):
        for name in ("ft", "fh", "fw"):
            if getattr(self, name) < 1:
                raise CodecError(f"codec factor {name} must be >= 1, got {getattr(self, name)}")

    @property
    def channels(self) -> int:
        return 3 * self.ft * self.fh * self.fw

    def latent_shape(self, frames: int, height: int, width: int) -> Tuple[int, int, int, int]:
        self.check_dims(frames, height, width)
        return frames // self.ft, height // self.fh, width // self.fw, self.channels

    def check_dims(self, frames: int, height: int, width: int):
        for axis, extent, factor in (
            ("frames", frames, self.ft),
            ("height", height, self.fh),
            ("width", width, self.fw),
        ):
            if extent % factor:
                raise CodecError(f"{axis} extent {extent} is not divisible by factor {factor}")


# The base model's compression geometry (height, width, frames = 8, 8, 4).
BASE_CODEC = CodecConfig(ft=4, fh=8, fw=8)
TOY_CODEC = CodecConfig(ft=2, fh=4, fw=4)


def to_color(plane: np.ndarray, modality: Modality) -> np.ndarray:
    """Returns a (f, h, w, 3) float32 video in [0, 1]."""
    if modality == "rgb":
        if plane.ndim != 4 or plane.shape[-1] != 3:
            raise CodecError(f"rgb plane must be (f, h, w, 3), got {plane.shape}")
        return plane.astype(np.float32, copy=False)
    if plane.ndim != 3:
        raise CodecError(f"{modality} plane must be (f, h, w), got {plane.shape}")
    if modality == "depth":
        return np.repeat(plane.astype(np.float32)[..., None], 3, axis=-1)
    if modality == "seg":
        ids = plane.astype(np.int64)
        if ids.min() < 0 or ids.max() >= len(_SEG_COLORS):
            raise CodecError(f"seg ids must lie in [0, {len(_SEG_COLORS) - 1}]")
        return _SEG_COLORS[ids]
    if modality == "edges":
        return np.repeat(plane.astype(bool).astype(np.float32)[..., None], 3, axis=-1)
    raise CodecError(f"unknown modality '{modality}'")


def from_color(video: np.ndarray, modality: Modality) -> np.ndarray:
    clamped = np.clip(video.astype(np.float64), 0.0, 1.0)
    if modality == "rgb":
        return clamped.astype(np.float32)
    # Means are taken in float64 so replicated float32 values come back exactly.
    mean = clamped.mean(axis=-1)
    if modality == "depth":
        return mean.astype(np.float32)
    if modality == "edges":
        return mean >= 0.5
    if modality == "seg":
        diff = clamped[..., None, :] - _SEG_COLORS.astype(np.float64)
        return np.argmin((diff * diff).sum(axis=-1), axis=-1).astype(np.uint8)
    raise CodecError(f"unknown modality '{modality}'")


def encode(video: np.ndarray, config: CodecConfig) -> np.ndarray:
    if video.ndim != 4 or video.shape[-1] != 3:
        raise CodecError(f"video must be (f, h, w, 3), got {video.shape}")
    config.check_dims(*video.shape[:3])
    latent = rearrange(
        video.astype(np.float64),
        "(F ft) (H fh) (W fw) c -> F H W (c ft fh fw)",
        ft=config.ft,
        fh=config.fh,
        fw=config.fw,
    )
    return 2.0 * latent - 1.0


def decode(latent: np.ndarray, config: CodecConfig) -> np.ndarray:
    if latent.ndim != 4 or latent.shape[-1] != config.channels:
        raise CodecError(
            f"latent must be (F, H, W, {config.channels}) for {config}, got {latent.shape}"
        )
    video = rearrange(
        (latent.astype(np.float64) + 1.0) / 2.0,
        "F H W (c ft fh fw) -> (F ft) (H fh) (W fw) c",
        ft=config.ft,
        fh=config.fh,
        fw=config.fw,
    )
    return video.astype(np.float32)
