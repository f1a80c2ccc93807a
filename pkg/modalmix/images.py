import logging
from pathlib import Path
from typing import Dict, Union

import numpy as np
from PIL import Image

from .codec import to_color
from .roles import MODALITIES
from .scenes import MultiModalVideo

logger = logging.getLogger(__name__)


def frame_strip(plane: np.ndarray, modality: str) -> np.ndarray:
    """(f, h, w[, 3]) plane -> (h, f * w, 3) uint8, frames left to right."""
    color = to_color(plane, modality)
    f, h, w, _ = color.shape
    strip = color.transpose(1, 0, 2, 3).reshape(h, f * w, 3)
    return np.rint(np.clip(strip.astype(np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)


def save_grid(plane: np.ndarray, modality: str, path: Union[str, Path], zoom: int = 4) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    image = Image.fromarray(frame_strip(plane, modality), mode="RGB")
    if zoom > 1:
        image = image.resize((image.width * zoom, image.height * zoom), Image.NEAREST)
    image.save(path, format="PNG")
    return path


def save_grids(
    video: MultiModalVideo, directory: Union[str, Path], stem: str, zoom: int = 4
) -> Dict[str, Path]:
    directory = Path(directory)
    paths = {
        m: save_grid(getattr(video, m), m, directory / f"{stem}_{m}.png", zoom) for m in MODALITIES
    }
    logger.debug(f"Wrote {len(paths)} PNG grids for {stem} to {directory}")
    return paths
