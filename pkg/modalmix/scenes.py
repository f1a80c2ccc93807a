"""Procedural multi-modal scenes with exact cross-modality ground truth.

All four modalities come out of one coverage function: shapes are painted far to
near, so at every pixel the nearest covering shape sets the rgb color, the depth
and the instance id, and edges are read off the instance map.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from typing_extensions import Literal

from .codec import COLOR_NAMES, PALETTE

logger = logging.getLogger(__name__)

ShapeKind = Literal["circle", "square", "triangle"]
SHAPE_KINDS: Tuple[ShapeKind, ...] = ("circle", "square", "triangle")
DIRECTIONS: Tuple[str, ...] = ("left", "right", "up", "down", "still")

VOCABULARY: Tuple[str, ...] = ("<pad>",) + COLOR_NAMES + SHAPE_KINDS + DIRECTIONS + ("<none>",)
TOKEN_IDS: Dict[str, int] = {word: i for i, word in enumerate(VOCABULARY)}
PAD_ID = TOKEN_IDS["<pad>"]
NONE_ID = TOKEN_IDS["<none>"]

BACKGROUND_DEPTH = 1.0
# Shape depths come from this grid so any two distinct draws are >= 0.05 apart.
DEPTH_LEVELS = np.round(0.1 + 0.05 * np.arange(17), 2)


class SceneError(ValueError):
    pass


class CaptionError(ValueError):
    pass


@dataclass(frozen=True)
class DatasetConfig:
    frames: int = 8
    height: int = 32
    width: int = 32
    factors: Tuple[int, int, int] = (2, 4, 4)  # (ft, fh, fw)
    max_shapes: int = 3
    min_size: int = 2
    max_size: Optional[int] = None
    max_speed: int = 2

    def __post_init__(self):
        ft, fh, fw = self.factors
        for axis, extent, factor in (
            ("frames", self.frames, ft),
            ("height", self.height, fh),
            ("width", self.width, fw),
        ):
            if extent < 1 or factor < 1:
                raise SceneError(f"{axis}: extent {extent} and factor {factor} must be >= 1")
            if extent % factor:
                raise SceneError(f"{axis} extent {extent} is not divisible by factor {factor}")
        if not 1 <= self.max_shapes <= 3:
            raise SceneError(f"max_shapes must be in [1, 3], got {self.max_shapes}")
        if self.size_range[0] > self.size_range[1]:
            raise SceneError(f"frame {self.height}x{self.width} too small for shapes")

    @property
    def size_range(self) -> Tuple[int, int]:
        # A shape of size s centred in [s + 1, extent - 2 - s] stays >= 1 px inside.
        limit = (min(self.height, self.width) - 3) // 2
        upper = self.max_size if self.max_size is not None else min(self.height, self.width) // 6
        return self.min_size, min(max(upper, self.min_size), limit)


@dataclass(frozen=True)
class ShapeSpec:
    kind: ShapeKind
    color_id: int  # 1-based palette id
    depth: float
    center0: Tuple[int, int]  # (x, y)
    velocity: Tuple[int, int]  # (dx, dy) per frame
    size: int

    @property
    def color(self) -> Tuple[float, float, float]:
        return PALETTE[self.color_id - 1]

    @property
    def color_name(self) -> str:
        return COLOR_NAMES[self.color_id - 1]

    @property
    def direction(self) -> str:
        dx, dy = self.velocity
        if dx == 0 and dy == 0:
            return "still"
        if abs(dx) >= abs(dy):
            return "right" if dx > 0 else "left"
        return "down" if dy > 0 else "up"

    def center_at(self, t: int, height: int, width: int) -> Tuple[int, int]:
        lo = self.size + 1
        x = min(max(self.center0[0] + t * self.velocity[0], lo), width - 2 - self.size)
        y = min(max(self.center0[1] + t * self.velocity[1], lo), height - 2 - self.size)
        return x, y

    def coverage(self, t: int, height: int, width: int) -> np.ndarray:
        cx, cy = self.center_at(t, height, width)
        yy, xx = np.mgrid[0:height, 0:width]
        s = self.size
        if self.kind == "circle":
            return (xx - cx) ** 2 + (yy - cy) ** 2 <= s * s
        if self.kind == "square":
            return (np.abs(xx - cx) <= s) & (np.abs(yy - cy) <= s)
        # Upward isosceles triangle: apex (cx, cy - s), base row cy + s of half-width s.
        rows = yy - (cy - s)
        return (rows >= 0) & (yy <= cy + s) & (2 * np.abs(xx - cx) <= rows)


@dataclass(frozen=True)
class SceneSpec:
    seed: int
    shapes: Tuple[ShapeSpec, ...]
    background: Tuple[float, float]  # gray at the top and bottom rows
    frames: int
    height: int
    width: int

    def __post_init__(self):
        if not 1 <= len(self.shapes) <= 3:
            raise SceneError(f"a scene holds 1-3 shapes, got {len(self.shapes)}")
        depths = sorted(s.depth for s in self.shapes)
        for a, b in zip(depths, depths[1:]):
            if b - a < 0.05 - 1e-9:
                raise SceneError(f"shape depths {depths} are closer than 0.05")

    def by_depth(self) -> Tuple[ShapeSpec, ...]:
        """Nearest first; position + 1 is the instance id."""
        return tuple(sorted(self.shapes, key=lambda s: s.depth))


@dataclass(frozen=True, eq=False)
class MultiModalVideo:
    rgb: np.ndarray  # (f, h, w, 3) float32 in [0, 1]
    depth: np.ndarray  # (f, h, w) float32 in [0, 1]
    seg: np.ndarray  # (f, h, w) uint8 instance ids
    edges: np.ndarray  # (f, h, w) bool
    caption_tokens: Tuple[int, ...] = field(default=())

    @property
    def dims(self) -> Tuple[int, int, int]:
        f, h, w = self.seg.shape
        return f, h, w

    def quantized(self) -> "MultiModalVideo":
        """Snaps rgb to 8-bit and depth to 16-bit steps, the dataset storage grid."""
        rgb = np.rint(self.rgb.astype(np.float64) * 255.0).astype(np.float32) / np.float32(255)
        depth = np.rint(self.depth.astype(np.float64) * 65535.0).astype(np.float32) / np.float32(
            65535
        )
        return MultiModalVideo(
            rgb=rgb,
            depth=depth,
            seg=self.seg.copy(),
            edges=self.edges.copy(),
            caption_tokens=tuple(self.caption_tokens),
        )

    def __eq__(self, other: object) -> bool:
        return (
            isinstance(other, MultiModalVideo)
            and self.caption_tokens == other.caption_tokens
            and all(
                a.dtype == b.dtype and np.array_equal(a, b)
                for a, b in (
                    (self.rgb, other.rgb),
                    (self.depth, other.depth),
                    (self.seg, other.seg),
                    (self.edges, other.edges),
                )
            )
        )

    __hash__ = None  # type: ignore


def sample_scene(seed: int, config: DatasetConfig) -> SceneSpec:
    rng = np.random.default_rng(seed)
    n_shapes = int(rng.integers(1, config.max_shapes + 1))
    depths = rng.choice(DEPTH_LEVELS, size=n_shapes, replace=False)
    lo_size, hi_size = config.size_range
    shapes: List[ShapeSpec] = []
    for depth in depths:
        size = int(rng.integers(lo_size, hi_size + 1))
        cx = int(rng.integers(size + 1, config.width - 2 - size + 1))
        cy = int(rng.integers(size + 1, config.height - 2 - size + 1))
        shapes.append(
            ShapeSpec(
                kind=SHAPE_KINDS[int(rng.integers(len(SHAPE_KINDS)))],
                color_id=int(rng.integers(1, len(PALETTE) + 1)),
                depth=float(depth),
                center0=(cx, cy),
                velocity=(
                    int(rng.integers(-config.max_speed, config.max_speed + 1)),
                    int(rng.integers(-config.max_speed, config.max_speed + 1)),
                ),
                size=size,
            )
        )
    top, bottom = (float(v) for v in rng.uniform(0.2, 0.8, size=2))
    return SceneSpec(
        seed=seed,
        shapes=tuple(shapes),
        background=(top, bottom),
        frames=config.frames,
        height=config.height,
        width=config.width,
    )


def edges_from_seg(seg: np.ndarray) -> np.ndarray:
    """A pixel is an edge iff a 4-neighbour inside the frame has another id."""
    edges = np.zeros(seg.shape, dtype=bool)
    vertical = seg[:, 1:, :] != seg[:, :-1, :]
    horizontal = seg[:, :, 1:] != seg[:, :, :-1]
    edges[:, 1:, :] |= vertical
    edges[:, :-1, :] |= vertical
    edges[:, :, 1:] |= horizontal
    edges[:, :, :-1] |= horizontal
    return edges


def _background(spec: SceneSpec) -> np.ndarray:
    top, bottom = spec.background
    ramp = np.linspace(top, bottom, spec.height, dtype=np.float64).astype(np.float32)
    return np.broadcast_to(ramp[None, :, None, None], (spec.frames, spec.height, spec.width, 3))


def render(spec: SceneSpec) -> MultiModalVideo:
    f, h, w = spec.frames, spec.height, spec.width
    rgb = _background(spec).copy()
    depth = np.full((f, h, w), BACKGROUND_DEPTH, dtype=np.float32)
    seg = np.zeros((f, h, w), dtype=np.uint8)

    nearest_first = spec.by_depth()
    # Painter's algorithm: farthest shape first, nearer shapes overwrite it.
    for instance_id in range(len(nearest_first), 0, -1):
        shape = nearest_first[instance_id - 1]
        color = np.asarray(shape.color, dtype=np.float32)
        for t in range(f):
            mask = shape.coverage(t, h, w)
            rgb[t][mask] = color
            depth[t][mask] = np.float32(shape.depth)
            seg[t][mask] = instance_id

    return MultiModalVideo(
        rgb=rgb,
        depth=depth,
        seg=seg,
        edges=edges_from_seg(seg),
        caption_tokens=caption(spec),
    )


def caption(spec: SceneSpec) -> Tuple[int, ...]:
    tokens: List[int] = []
    for shape in spec.by_depth():
        tokens += [TOKEN_IDS[shape.color_name], TOKEN_IDS[shape.kind], TOKEN_IDS[shape.direction]]
    return tuple(tokens)


def tokenize(text: str) -> Tuple[int, ...]:
    words = text.lower().split()
    unknown = [w for w in words if w not in TOKEN_IDS]
    if unknown:
        raise CaptionError(f"unknown caption words {unknown}; vocabulary: {' '.join(VOCABULARY)}")
    return tuple(TOKEN_IDS[w] for w in words) or (NONE_ID,)


def detokenize(tokens: Sequence[int]) -> str:
    return " ".join(VOCABULARY[t] for t in tokens if t != PAD_ID)


def verify_video(video: MultiModalVideo, spec: SceneSpec) -> List[str]:
    """Re-rasterizes `spec` by per-pixel nearest-depth search and lists disagreements."""
    problems: List[str] = []
    f, h, w = spec.frames, spec.height, spec.width
    if video.dims != (f, h, w):
        return [f"dims {video.dims} differ from the scene {(f, h, w)}"]

    nearest_first = spec.by_depth()
    background = _background(spec)
    for t in range(f):
        best_depth = np.full((h, w), np.inf)
        best_id = np.zeros((h, w), dtype=np.uint8)
        for instance_id, shape in enumerate(nearest_first, start=1):
            cover = shape.coverage(t, h, w) & (shape.depth < best_depth)
            best_depth[cover] = shape.depth
            best_id[cover] = instance_id
        if not np.array_equal(video.seg[t], best_id):
            problems.append(f"frame {t}: seg differs from nearest covering shape")
        expected_depth = np.where(best_id > 0, best_depth, BACKGROUND_DEPTH).astype(np.float32)
        if not np.array_equal(video.depth[t], expected_depth):
            problems.append(f"frame {t}: depth differs from nearest covering shape")
        colors = np.array(
            [(0.0, 0.0, 0.0)] + [s.color for s in nearest_first], dtype=np.float32
        )[best_id]
        expected_rgb = np.where((best_id > 0)[..., None], colors, background[t])
        if not np.array_equal(video.rgb[t], expected_rgb):
            problems.append(f"frame {t}: rgb differs from painter order")

    # Edges rechecked by scanning neighbours one pixel at a time.
    seg = video.seg
    for t in range(f):
        for y in range(h):
            for x in range(w):
                here = seg[t, y, x]
                is_edge = any(
                    0 <= y + dy < h and 0 <= x + dx < w and seg[t, y + dy, x + dx] != here
                    for dy, dx in ((-1, 0), (1, 0), (0, -1), (0, 1))
                )
                if bool(video.edges[t, y, x]) != is_edge:
                    problems.append(f"frame {t}: edge mismatch at ({x}, {y})")
                    break
    return problems
