"""Glue between pixel-space videos, latents and the sampler."""

import logging
from typing import Dict, Mapping, Optional, Sequence

import numpy as np
from PIL import Image

from .codec import CodecConfig, decode, encode, from_color, to_color
from .roles import MODALITIES, Task, assign_roles
from .sampling import ConditioningError, Denoiser, SamplerConfig, sample
from .scenes import NONE_ID, MultiModalVideo
from .training import Example

logger = logging.getLogger(__name__)


def lowres(rgb: np.ndarray, factor: int) -> np.ndarray:
    """Box-downsamples each frame by `factor`, then bicubic-upsamples back to full size."""
    f, h, w, _ = rgb.shape
    small = (max(1, w // factor), max(1, h // factor))
    frames = []
    for frame in rgb:
        pixels = np.rint(np.clip(frame.astype(np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)
        image = Image.fromarray(pixels, mode="RGB").resize(small, Image.BOX)
        frames.append(np.asarray(image.resize((w, h), Image.BICUBIC), dtype=np.float32))
    return np.stack(frames) / np.float32(255)


def modality_colors(
    video: MultiModalVideo, edges_slot: str = "edges", sr_factor: int = 4
) -> Dict[str, np.ndarray]:
    colors = {m: to_color(getattr(video, m), m) for m in MODALITIES}
    if edges_slot == "lowres_rgb":
        colors["edges"] = lowres(video.rgb, sr_factor)
    return colors


def encode_video(
    video: MultiModalVideo, codec: CodecConfig, edges_slot: str = "edges", sr_factor: int = 4
) -> Example:
    colors = modality_colors(video, edges_slot, sr_factor)
    return Example(
        latents=tuple(encode(colors[m], codec) for m in MODALITIES),
        caption=tuple(video.caption_tokens),
    )


def decode_latents(
    latents: Mapping[str, np.ndarray], codec: CodecConfig, caption: Sequence[int] = ()
) -> MultiModalVideo:
    planes = {m: from_color(decode(latents[m], codec), m) for m in MODALITIES}
    return MultiModalVideo(caption_tokens=tuple(caption), **planes)


class ModalityPipeline:
    """Runs one task end to end: encode the conditions, sample, decode."""

    def __init__(
        self,
        denoiser: Denoiser,
        codec: CodecConfig,
        sampler: SamplerConfig,
        edges_slot: str = "edges",
        sr_factor: int = 4,
    ):
        self._denoiser = denoiser
        self._codec = codec
        self._sampler = sampler
        self._edges_slot = edges_slot
        self._sr_factor = sr_factor

    def condition_latents(
        self, task: Task, source: Optional[MultiModalVideo]
    ) -> Dict[str, np.ndarray]:
        roles = assign_roles(task)
        if not roles.conditioning:
            if source is not None:
                logger.warning(f"Task {task.value} takes no condition; ignoring the source")
            return {}
        if source is None:
            raise ConditioningError(f"task {task.value} needs a condition source")
        example = encode_video(source, self._codec, self._edges_slot, self._sr_factor)
        return {m: example.latents[MODALITIES.index(m)] for m in roles.conditioning}

    def run(
        self,
        task: Task,
        caption: Optional[Sequence[int]],
        source: Optional[MultiModalVideo],
        rng: np.random.Generator,
        dims: Sequence[int],
    ) -> MultiModalVideo:
        if caption is None:
            caption = source.caption_tokens if source is not None else (NONE_ID,)
        shape = self._codec.latent_shape(*dims)
        latents = sample(
            self._denoiser,
            task,
            self.condition_latents(task, source),
            caption,
            self._sampler,
            rng,
            shape,
        )
        logger.debug(f"Decoded task {task.value} with caption {list(caption)}")
        return decode_latents(latents, self._codec, caption)

