"""Run configuration: `key = value` files plus `--set key=value` overrides.

Every key is a field of RunConfig; unknown keys and unparsable or out-of-range
values raise ConfigError. `RunConfig.to_text()` re-parses to an equal config.
"""

import logging
import re
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import xdg

from .codec import CodecConfig
from .model import ModelConfig
from .roles import STAGE_MIXTURES, TaskKind, check_mixture
from .sampling import SamplerConfig
from .scenes import DatasetConfig
from .training import TrainConfig

logger = logging.getLogger(__name__)

EDGES_SLOTS = ("edges", "lowres_rgb")

_STEP_RE = re.compile(r"^#\s*step\s*=\s*(\d+)\s*$", re.MULTILINE)


class ConfigError(ValueError):
    pass


def _default_workdir() -> str:
    return str(xdg.xdg_data_home() / "modalmix")


@dataclass(frozen=True)
class RunConfig:
    workdir: str = field(default_factory=_default_workdir)
    dataset: str = "data/train"
    eval_dataset: str = "data/eval"
    checkpoint: str = "model.ovdf"
    output: str = "out"
    seed: int = 0
    eval_seed: int = 100000
    n_train: int = 64
    n_eval: int = 16
    workers: int = 4

    frames: int = 8
    height: int = 32
    width: int = 32
    codec_ft: int = 2
    codec_fh: int = 4
    codec_fw: int = 4

    model_dim: int = 256
    depth: int = 4
    heads: int = 4
    mlp_ratio: int = 4
    caption_len: int = 9
    use_modality_embedding: bool = True
    use_msph: bool = True
    use_amcs: bool = True

    lr: float = 2e-4
    steps: int = 2000
    batch_size: int = 4
    t_floor: float = 0.02
    grad_clip: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.95
    weight_decay: float = 0.0
    checkpoint_every: int = 500
    task_mixture: Tuple[float, ...] = STAGE_MIXTURES[2]
    # 0 keeps task_mixture; 1 and 2 select the two-stage presets.
    stage: int = 0

    sample_steps: int = 50
    t_start: float = 0.0

    # Slot fed to the edges position: edge maps, or low-resolution rgb for super-resolution.
    edges_slot: str = "edges"
    sr_factor: int = 4
    adapt_steps: int = 500

    def __post_init__(self):
        if self.stage not in (0, 1, 2):
            raise ConfigError(f"stage must be 0, 1 or 2, got {self.stage}")
        if self.edges_slot not in EDGES_SLOTS:
            raise ConfigError(f"edges_slot must be one of {EDGES_SLOTS}, got {self.edges_slot}")
        for name in ("n_train", "n_eval", "workers", "sr_factor"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.adapt_steps < 0:
            raise ConfigError(f"adapt_steps must be >= 0, got {self.adapt_steps}")
        try:
            self.dataset_config()
            self.model_config()
            self.train_config()
            self.sampler_config()
        except ConfigError:
            raise
        except ValueError as e:
            raise ConfigError(str(e)) from e

    def path(self, key: str) -> Path:
        value = Path(getattr(self, key))
        return value if value.is_absolute() else Path(self.workdir) / value

    def mixture(self) -> Tuple[float, ...]:
        return STAGE_MIXTURES[self.stage] if self.stage else self.task_mixture

    def codec_config(self) -> CodecConfig:
        return CodecConfig(ft=self.codec_ft, fh=self.codec_fh, fw=self.codec_fw)

    def dataset_config(self) -> DatasetConfig:
        return DatasetConfig(
            frames=self.frames,
            height=self.height,
            width=self.width,
            factors=(self.codec_ft, self.codec_fh, self.codec_fw),
        )

    def model_config(self) -> ModelConfig:
        codec = self.codec_config()
        f, h, w, c = codec.latent_shape(self.frames, self.height, self.width)
        return ModelConfig(
            model_dim=self.model_dim,
            depth=self.depth,
            heads=self.heads,
            mlp_ratio=self.mlp_ratio,
            latent_channels=c,
            grid=(f, h, w),
            caption_len=self.caption_len,
            use_modality_embedding=self.use_modality_embedding,
            use_msph=self.use_msph,
        )

    def train_config(self, steps: Optional[int] = None) -> TrainConfig:
        return TrainConfig(
            lr=self.lr,
            steps=self.steps if steps is None else steps,
            batch_size=self.batch_size,
            seed=self.seed,
            task_mixture=check_mixture(self.mixture()),
            t_floor=self.t_floor,
            grad_clip=self.grad_clip,
            betas=(self.beta1, self.beta2),
            weight_decay=self.weight_decay,
            use_amcs=self.use_amcs,
            fixed_task=TaskKind.COND_EDGES if self.edges_slot == "lowres_rgb" else None,
            checkpoint_every=self.checkpoint_every,
        )

    def sampler_config(self) -> SamplerConfig:
        return SamplerConfig(steps=self.sample_steps, t_floor=self.t_floor, t_start=self.t_start)

    def with_overrides(self, **values: Any) -> "RunConfig":
        return replace(self, **values)

    def to_text(self, step: Optional[int] = None) -> str:
        lines = ["# modalmix run configuration"]
        if step is not None:
            lines.append(f"# step = {step}")
        lines += [f"{f.name} = {_format_value(getattr(self, f.name))}" for f in fields(self)]
        return "\n".join(lines) + "\n"


def _format_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(repr(float(v)) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


_FIELD_TYPES: Dict[str, Any] = {f.name: f.type for f in fields(RunConfig)}


def _parse_value(key: str, text: str) -> Any:
    kind = _FIELD_TYPES[key]
    text = text.strip()
    try:
        if kind in (bool, "bool"):
            lowered = text.lower()
            if lowered in ("true", "yes", "1", "on"):
                return True
            if lowered in ("false", "no", "0", "off"):
                return False
            raise ValueError(text)
        if kind in (int, "int"):
            return int(text)
        if kind in (float, "float"):
            return float(text)
        if kind in (str, "str"):
            return text
        return tuple(float(part) for part in text.split(","))
    except ValueError:
        raise ConfigError(f"cannot parse {key} = {text!r}") from None


def parse_pairs(lines: Iterable[str], source: str = "<config>") -> Dict[str, Any]:
    values: Dict[str, Any] = {}
    for lineno, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in _FIELD_TYPES:
            raise ConfigError(f"{source}:{lineno}: unknown key '{key}'")
        values[key] = _parse_value(key, value)
    return values


def parse_config_text(text: str, source: str = "<config>") -> RunConfig:
    return _build(parse_pairs(text.splitlines(), source))


def stored_step(text: str) -> int:
    match = _STEP_RE.search(text)
    return int(match.group(1)) if match else 0


def _build(values: Mapping[str, Any], base: Optional[RunConfig] = None) -> RunConfig:
    try:
        if base is None:
            return RunConfig(**values)
        return replace(base, **values)
    except TypeError as e:
        raise ConfigError(str(e)) from e


def load_run_config(
    path: Optional[Union[str, Path]] = None, overrides: Sequence[str] = ()
) -> RunConfig:
    values: Dict[str, Any] = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file {path} does not exist")
        values.update(parse_pairs(path.read_text().splitlines(), str(path)))
    values.update(parse_pairs(overrides, "--set"))
    config = _build(values)
    logger.debug(f"Loaded run config from {path or 'defaults'} with {len(overrides)} overrides")
    return config


def differing_keys(a: RunConfig, b: RunConfig) -> List[str]:
    return [f.name for f in fields(RunConfig) if getattr(a, f.name) != getattr(b, f.name)]
