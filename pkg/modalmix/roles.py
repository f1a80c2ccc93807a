"""Per-task modality roles: which latents are generated and which are given clean."""

import enum
import logging
from dataclasses import dataclass
from typing import Dict, FrozenSet, Sequence, Tuple, Union

import numpy as np

from .tensors import Module, Parameter, Tensor, add

logger = logging.getLogger(__name__)

MODALITIES: Tuple[str, ...] = ("rgb", "depth", "seg", "edges")


class RoleError(ValueError):
    pass


class Role(enum.Enum):
    GENERATION = "generation"
    CONDITIONING = "conditioning"


class TaskKind(enum.Enum):
    T2V = "t2v"
    COND_RGB = "rgb"
    COND_DEPTH = "depth"
    COND_SEG = "seg"
    COND_EDGES = "edges"


# Order of the entries of a task mixture vector.
TASK_ORDER: Tuple[TaskKind, ...] = tuple(TaskKind)

STAGE_MIXTURES: Dict[int, Tuple[float, ...]] = {
    1: (1.0, 0.0, 0.0, 0.0, 0.0),
    2: (0.2, 0.2, 0.2, 0.2, 0.2),
}


@dataclass(frozen=True)
class CustomTask:
    conditioning: FrozenSet[str]

    def __post_init__(self):
        unknown = set(self.conditioning) - set(MODALITIES)
        if unknown:
            raise RoleError(f"unknown modalities {sorted(unknown)}")

    @property
    def value(self) -> str:
        return "+".join(m for m in MODALITIES if m in self.conditioning)


Task = Union[TaskKind, CustomTask]


@dataclass(frozen=True)
class RoleAssignment:
    roles: Tuple[Role, ...]  # one per entry of MODALITIES

    def __post_init__(self):
        if len(self.roles) != len(MODALITIES):
            raise RoleError(f"need {len(MODALITIES)} roles, got {len(self.roles)}")
        if Role.GENERATION not in self.roles:
            raise RoleError("at least one modality must be generated")

    def __getitem__(self, modality: str) -> Role:
        return self.roles[MODALITIES.index(modality)]

    @property
    def generation(self) -> Tuple[str, ...]:
        return tuple(m for m, r in zip(MODALITIES, self.roles) if r is Role.GENERATION)

    @property
    def conditioning(self) -> Tuple[str, ...]:
        return tuple(m for m, r in zip(MODALITIES, self.roles) if r is Role.CONDITIONING)


def assign_roles(task: Task) -> RoleAssignment:
    if isinstance(task, CustomTask):
        conditioning = task.conditioning
    elif task is TaskKind.T2V:
        conditioning = frozenset()
    else:
        conditioning = frozenset({task.value})
    return RoleAssignment(
        tuple(Role.CONDITIONING if m in conditioning else Role.GENERATION for m in MODALITIES)
    )


def parse_task(text: str) -> Task:
    """Accepts a task name (`t2v`, `depth`, ...) or `+`-joined conditioning modalities."""
    names = [part.strip() for part in text.strip().lower().split("+")]
    if len(names) == 1:
        try:
            return TaskKind(names[0])
        except ValueError:
            raise RoleError(
                f"unknown task '{text}', expected one of {[t.value for t in TaskKind]}"
            ) from None
    task = CustomTask(frozenset(names))
    assign_roles(task)
    return task


def blend(x: np.ndarray, eps: np.ndarray, t: float, role: Role) -> np.ndarray:
    if eps.shape != x.shape:
        raise RoleError(f"noise shape {eps.shape} differs from latent shape {x.shape}")
    if not 0.0 <= t <= 1.0:
        raise RoleError(f"t={t} outside [0, 1]")
    if role is Role.CONDITIONING:
        return x
    return (1.0 - t) * eps + t * x


class RoleEmbeddings(Module):
    """One vector for generated latents, one for conditioning latents, shared by modalities."""

    def __init__(self, channels: int, rng: np.random.Generator, dtype=np.float32):
        self.gen = Parameter("gen", rng.normal(0.0, 0.02, size=channels).astype(dtype))
        self.cond = Parameter("cond", rng.normal(0.0, 0.02, size=channels).astype(dtype))

    @property
    def channels(self) -> int:
        return self.gen.shape[0]

    def for_role(self, role: Role) -> Parameter:
        return self.gen if role is Role.GENERATION else self.cond


def apply_role_embedding(
    x_t: Union[Tensor, np.ndarray], role: Role, emb: RoleEmbeddings, enabled: bool = True
) -> Tensor:
    x = x_t if isinstance(x_t, Tensor) else Tensor(x_t)
    if not enabled:
        return x
    if x.shape[-1] != emb.channels:
        raise RoleError(f"embedding length {emb.channels} vs latent channels {x.shape[-1]}")
    return add(x, emb.for_role(role))


def loss_mask(roles: RoleAssignment) -> Tuple[float, ...]:
    return tuple(1.0 if r is Role.GENERATION else 0.0 for r in roles.roles)


def check_mixture(mixture: Sequence[float]) -> Tuple[float, ...]:
    probs = tuple(float(p) for p in mixture)
    if len(probs) != len(TASK_ORDER):
        raise RoleError(f"task mixture needs {len(TASK_ORDER)} entries, got {len(probs)}")
    if any(not np.isfinite(p) or p < 0 for p in probs):
        raise RoleError(f"task mixture {probs} has negative or non-finite entries")
    if abs(sum(probs) - 1.0) > 1e-6:
        raise RoleError(f"task mixture {probs} sums to {sum(probs)}, not 1")
    return probs


def sample_task(rng: np.random.Generator, mixture: Sequence[float]) -> TaskKind:
    probs = np.asarray(check_mixture(mixture))
    return TASK_ORDER[int(rng.choice(len(TASK_ORDER), p=probs / probs.sum()))]
