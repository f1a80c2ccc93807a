"""Multi-modal diffusion transformer over channel-concatenated modality latents.

Caption tokens are prepended to the flattened latent-cell tokens and the whole
sequence runs through adaptive-layer-norm blocks conditioned on the timestep.
Each modality gets its own zero-initialized projection head unless the shared
head is requested.
"""

import logging
import math
from dataclasses import asdict, dataclass
from typing import Dict, List, Sequence, Tuple, Union

import numpy as np

from .roles import MODALITIES, RoleAssignment, RoleEmbeddings, apply_role_embedding
from .scenes import PAD_ID, VOCABULARY
from .tensors import (
    Module,
    Parameter,
    ShapeError,
    Tensor,
    add,
    concat,
    gather,
    gelu,
    layer_norm,
    matmul,
    mul,
    reshape,
    scale,
    sinusoidal_embed,
    slice_axis,
    softmax,
    split,
    transpose,
)

logger = logging.getLogger(__name__)


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    model_dim: int = 256
    depth: int = 4
    heads: int = 4
    mlp_ratio: int = 4
    latent_channels: int = 96  # C per modality
    grid: Tuple[int, int, int] = (4, 8, 8)  # (F, H, W) latent cells
    caption_len: int = 9
    vocab_size: int = len(VOCABULARY)
    modalities: int = len(MODALITIES)
    use_modality_embedding: bool = True
    use_msph: bool = True

    def __post_init__(self):
        if self.model_dim % self.heads:
            raise ModelError(f"model_dim {self.model_dim} not divisible by heads {self.heads}")
        if min(self.model_dim, self.depth, self.heads, self.mlp_ratio, self.latent_channels) < 1:
            raise ModelError(f"non-positive size in {self}")
        if min(self.grid) < 1:
            raise ModelError(f"grid {self.grid} has an empty axis")
        if self.modalities != len(MODALITIES):
            raise ModelError(f"the model handles exactly {len(MODALITIES)} modalities")
        if self.caption_len < 0 or self.vocab_size <= PAD_ID:
            raise ModelError("caption_len must be >= 0 and the vocabulary must hold the pad id")

    @property
    def fused_channels(self) -> int:
        return self.modalities * self.latent_channels

    @property
    def num_cells(self) -> int:
        f, h, w = self.grid
        return f * h * w

    def to_dict(self) -> Dict[str, Union[int, bool, Tuple[int, int, int]]]:
        return asdict(self)


class Linear(Module):
    def __init__(
        self,
        in_features: int,
        out_features: int,
        rng: np.random.Generator,
        zero: bool = False,
        dtype=np.float32,
    ):
        if zero:
            weight = np.zeros((in_features, out_features), dtype=dtype)
        else:
            weight = rng.normal(0.0, 0.02, size=(in_features, out_features)).astype(dtype)
        self.weight = Parameter("weight", weight)
        self.bias = Parameter("bias", np.zeros(out_features, dtype=dtype))

    def __call__(self, x: Tensor) -> Tensor:
        return add(matmul(x, self.weight), self.bias)


class LayerNorm(Module):
    def __init__(self, dim: int, dtype=np.float32):
        self.weight = Parameter("weight", np.ones(dim, dtype=dtype))
        self.bias = Parameter("bias", np.zeros(dim, dtype=dtype))

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.weight, self.bias)


def modulate(x: Tensor, shift: Tensor, scale_: Tensor) -> Tensor:
    return add(mul(x, add(scale_, 1.0)), shift)


class Attention(Module):
    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        self.heads = heads
        self.qkv = Linear(dim, 3 * dim, rng)
        self.proj = Linear(dim, dim, rng)

    def __call__(self, x: Tensor) -> Tensor:
        dim = x.shape[-1]
        head_dim = dim // self.heads
        q, k, v = split(self.qkv(x), [dim, dim, dim], axis=-1)
        outputs = []
        for h in range(self.heads):
            lo, hi = h * head_dim, (h + 1) * head_dim
            qh, kh, vh = (slice_axis(part, -1, lo, hi) for part in (q, k, v))
            scores = scale(matmul(qh, transpose(kh)), 1.0 / math.sqrt(head_dim))
            outputs.append(matmul(softmax(scores), vh))
        return self.proj(concat(outputs, axis=-1))


class Mlp(Module):
    def __init__(self, dim: int, hidden: int, rng: np.random.Generator):
        self.fc1 = Linear(dim, hidden, rng)
        self.fc2 = Linear(hidden, dim, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(gelu(self.fc1(x)))


class Block(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        dim = cfg.model_dim
        self.norm1 = LayerNorm(dim)
        self.attn = Attention(dim, cfg.heads, rng)
        self.norm2 = LayerNorm(dim)
        self.mlp = Mlp(dim, cfg.mlp_ratio * dim, rng)
        self.modulation = Linear(dim, 6 * dim, rng)

    def __call__(self, x: Tensor, c: Tensor) -> Tensor:
        dim = x.shape[-1]
        mod = reshape(self.modulation(gelu(c)), (6 * dim,))
        shift1, scale1, gate1, shift2, scale2, gate2 = split(mod, [dim] * 6, axis=0)
        x = add(x, mul(self.attn(modulate(self.norm1(x), shift1, scale1)), gate1))
        return add(x, mul(self.mlp(modulate(self.norm2(x), shift2, scale2)), gate2))


class TimestepEmbedder(Module):
    def __init__(self, dim: int, rng: np.random.Generator):
        self.fc1 = Linear(dim, dim, rng)
        self.fc2 = Linear(dim, dim, rng)

    def __call__(self, t: float) -> Tensor:
        dim = self.fc1.weight.shape[0]
        freqs = sinusoidal_embed([t * 1000.0], dim, dtype=self.fc1.weight.dtype)
        return self.fc2(gelu(self.fc1(freqs)))


class FinalLayer(Module):
    def __init__(self, dim: int, rng: np.random.Generator):
        self.norm = LayerNorm(dim)
        self.modulation = Linear(dim, 2 * dim, rng)

    def __call__(self, x: Tensor, c: Tensor) -> Tensor:
        dim = x.shape[-1]
        shift, scale_ = split(reshape(self.modulation(gelu(c)), (2 * dim,)), [dim, dim], axis=0)
        return modulate(self.norm(x), shift, scale_)


class MultiModalDiT(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.cfg = cfg
        dim = cfg.model_dim
        self.role_embeddings = RoleEmbeddings(cfg.latent_channels, rng)
        self.token_embed = Linear(cfg.fused_channels, dim, rng)
        self.caption_table = Parameter(
            "caption_table", rng.normal(0.0, 0.02, size=(cfg.vocab_size, dim)).astype(np.float32)
        )
        self.time_embed = TimestepEmbedder(dim, rng)
        self.blocks = [Block(cfg, rng) for _ in range(cfg.depth)]
        self.final = FinalLayer(dim, rng)
        if cfg.use_msph:
            self.heads: Union[Dict[str, Linear], Linear] = {
                m: Linear(dim, cfg.latent_channels, rng, zero=True) for m in MODALITIES
            }
        else:
            self.heads = Linear(dim, cfg.fused_channels, rng, zero=True)

    @property
    def dtype(self) -> np.dtype:
        return self.token_embed.weight.dtype

    def head_parameters(self, modality: str) -> List[Parameter]:
        """Parameters used only by the projection head of `modality`."""
        if not self.cfg.use_msph:
            return []
        return self.heads[modality].parameters()

    def embed_roles(
        self, latents: Sequence[np.ndarray], roles: RoleAssignment
    ) -> List[Tensor]:
        return [
            apply_role_embedding(
                Tensor(x, dtype=self.dtype),
                roles[m],
                self.role_embeddings,
                self.cfg.use_modality_embedding,
            )
            for m, x in zip(MODALITIES, latents)
        ]

    def _positions(self, start: int, count: int) -> Tensor:
        return sinusoidal_embed(
            np.arange(start, start + count), self.cfg.model_dim, dtype=self.dtype
        )

    def forward(self, fused: Tensor, t: float, caption: Sequence[int]) -> List[Tensor]:
        cfg = self.cfg
        expected = tuple(cfg.grid) + (cfg.fused_channels,)
        if fused.shape != expected:
            raise ShapeError(f"fused latent has shape {fused.shape}, expected {expected}")
        if not 0.0 <= t <= 1.0:
            raise ModelError(f"t={t} outside [0, 1]")
        if len(caption) > cfg.caption_len:
            raise ModelError(f"caption of {len(caption)} tokens exceeds {cfg.caption_len}")
        ids = list(caption) + [PAD_ID] * (cfg.caption_len - len(caption))
        if any(not 0 <= i < cfg.vocab_size for i in ids):
            raise ModelError(f"caption ids {list(caption)} outside the vocabulary")

        n = cfg.num_cells
        video = self.token_embed(reshape(fused, (n, cfg.fused_channels)))
        video = add(video, self._positions(0, n))
        parts = [video]
        if cfg.caption_len:
            text = add(gather(self.caption_table, ids), self._positions(n, cfg.caption_len))
            parts = [text, video]
        x = concat(parts, axis=0)

        c = self.time_embed(t)
        for block in self.blocks:
            x = block(x, c)
        x = slice_axis(self.final(x, c), 0, cfg.caption_len, cfg.caption_len + n)

        shape = tuple(cfg.grid) + (cfg.latent_channels,)
        if cfg.use_msph:
            return [reshape(self.heads[m](x), shape) for m in MODALITIES]
        out = self.heads(x)
        return [reshape(part, shape) for part in split(out, [cfg.latent_channels] * 4, axis=-1)]

    __call__ = forward


def build_input(latents: Sequence[Union[Tensor, np.ndarray]]) -> Tensor:
    """Concatenates per-modality latents along channels in (rgb, depth, seg, edges) order."""
    if len(latents) != len(MODALITIES):
        raise ShapeError(f"need {len(MODALITIES)} latents, got {len(latents)}")
    tensors = [x if isinstance(x, Tensor) else Tensor(x) for x in latents]
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1 or tensors[0].ndim != 4:
        raise ShapeError(f"modality latents must share one (F, H, W, C) shape, got {shapes}")
    return concat(tensors, axis=-1)


def init_parameters(cfg: ModelConfig, seed: int) -> MultiModalDiT:
    model = MultiModalDiT(cfg, np.random.default_rng(seed))
    model.assign_names()
    logger.debug(f"Initialized model with {model.num_parameters()} parameters (seed {seed})")
    return model


def parameter_budget(cfg: ModelConfig) -> Dict[str, int]:
    """Closed-form parameter counts, split the way debug-info reports them."""
    d, c, r = cfg.model_dim, cfg.latent_channels, cfg.mlp_ratio
    linear = lambda i, o: i * o + o  # noqa: E731
    block = (
        2 * d
        + linear(d, 3 * d)
        + linear(d, d)
        + 2 * d
        + linear(d, r * d)
        + linear(r * d, d)
        + linear(d, 6 * d)
    )
    if cfg.use_msph:
        heads = cfg.modalities * linear(d, c)
    else:
        heads = linear(d, cfg.fused_channels)
    budget = {
        "role_embeddings": 2 * c,
        "token_embed": linear(cfg.fused_channels, d),
        "caption_table": cfg.vocab_size * d,
        "time_embed": 2 * linear(d, d),
        "blocks": cfg.depth * block,
        "final": 2 * d + linear(d, 2 * d),
        "heads": heads,
    }
    budget["total"] = sum(budget.values())
    return budget
