"""Deterministic Euler sampling that keeps conditioning modalities clean.

The network predicts noise. Each step recovers the clean estimate from that
prediction and moves generated latents along (x0_hat - eps_hat) toward t = 1.
"""

import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .model import MultiModalDiT, build_input
from .roles import MODALITIES, Role, RoleAssignment, Task, assign_roles
from .tensors import no_grad

logger = logging.getLogger(__name__)


class ConditioningError(ValueError):
    pass


class SamplerConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SamplerConfig:
    steps: int = 50
    t_floor: float = 0.02
    t_start: float = 0.0

    def __post_init__(self):
        if self.steps < 1:
            raise SamplerConfigError(f"steps must be >= 1, got {self.steps}")
        if not 0.0 < self.t_floor < 1.0:
            raise SamplerConfigError(f"t_floor must lie in (0, 1), got {self.t_floor}")
        if not 0.0 <= self.t_start < 1.0:
            raise SamplerConfigError(f"t_start must lie in [0, 1), got {self.t_start}")

    def grid(self) -> np.ndarray:
        k = np.arange(self.steps + 1, dtype=np.float64)
        if self.t_start == 0.0:
            return k / self.steps
        grid = self.t_start + (1.0 - self.t_start) * k / self.steps
        grid[-1] = 1.0
        return grid


def recover_x0(x_t: np.ndarray, eps_hat: np.ndarray, t: float, t_floor: float) -> np.ndarray:
    if x_t.shape != eps_hat.shape:
        raise ConditioningError(f"shapes {x_t.shape} and {eps_hat.shape} differ")
    return (x_t - (1.0 - t) * eps_hat) / max(t, t_floor)


def velocity(x_t: np.ndarray, eps_hat: np.ndarray, t: float, t_floor: float) -> np.ndarray:
    return recover_x0(x_t, eps_hat, t, t_floor) - eps_hat


class Denoiser(ABC):
    @abstractmethod
    def predict(
        self,
        latents: Sequence[np.ndarray],
        roles: RoleAssignment,
        t: float,
        caption: Sequence[int],
    ) -> List[np.ndarray]:
        """Returns one noise prediction per modality, in MODALITIES order."""
        pass


class ModelDenoiser(Denoiser):
    def __init__(self, model: MultiModalDiT):
        self._model = model

    def predict(
        self,
        latents: Sequence[np.ndarray],
        roles: RoleAssignment,
        t: float,
        caption: Sequence[int],
    ) -> List[np.ndarray]:
        with no_grad():
            fused = build_input(self._model.embed_roles(latents, roles))
            outputs = self._model(fused, t, caption)
        return [out.data.astype(np.float64) for out in outputs]


def _check_conditions(
    roles: RoleAssignment, cond: Mapping[str, np.ndarray], shape: Tuple[int, ...]
):
    wanted = set(roles.conditioning)
    missing = sorted(wanted - set(cond))
    extra = sorted(set(cond) - wanted)
    if missing or extra:
        raise ConditioningError(
            f"conditioning latents: missing {missing}, unexpected {extra} "
            f"for roles {dict(zip(MODALITIES, (r.value for r in roles.roles)))}"
        )
    for m, x in cond.items():
        if x.shape != shape:
            raise ConditioningError(f"{m} condition has shape {x.shape}, expected {shape}")


def sample(
    denoiser: Denoiser,
    task: Task,
    cond: Mapping[str, np.ndarray],
    caption: Sequence[int],
    cfg: SamplerConfig,
    rng: np.random.Generator,
    shape: Tuple[int, ...],
    init: Optional[Mapping[str, np.ndarray]] = None,
) -> Dict[str, np.ndarray]:
    """Integrates generated modalities from `cfg.t_start` to 1.

    Generated modalities start from `init` when given, otherwise from standard
    normal noise. Conditioning modalities are reset to `cond` before every
    prediction and returned unchanged.
    """
    roles = assign_roles(task)
    _check_conditions(roles, cond, tuple(shape))

    state: Dict[str, np.ndarray] = {}
    for m in MODALITIES:
        if roles[m] is Role.CONDITIONING:
            state[m] = cond[m]
        elif init is not None and m in init:
            state[m] = np.array(init[m], dtype=np.float64)
        else:
            state[m] = rng.standard_normal(shape)

    grid = cfg.grid()
    for k in range(cfg.steps):
        t, t_next = float(grid[k]), float(grid[k + 1])
        for m in roles.conditioning:
            state[m] = cond[m]
        eps_hat = denoiser.predict([state[m] for m in MODALITIES], roles, t, caption)
        for i, m in enumerate(MODALITIES):
            if roles[m] is Role.GENERATION:
                state[m] = state[m] + (t_next - t) * velocity(state[m], eps_hat[i], t, cfg.t_floor)
    for m in roles.conditioning:
        state[m] = cond[m]
    logger.debug(f"Sampled task {task.value} in {cfg.steps} steps from t={cfg.t_start}")
    return state
