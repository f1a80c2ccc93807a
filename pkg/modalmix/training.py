import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from .model import MultiModalDiT, build_input
from .roles import (
    MODALITIES,
    STAGE_MIXTURES,
    TASK_ORDER,
    Task,
    TaskKind,
    assign_roles,
    blend,
    check_mixture,
    loss_mask,
    sample_task,
)
from .tensors import Parameter, Tensor, add, backward, mul, reduce_mean, scale, sub

logger = logging.getLogger(__name__)


class TrainConfigError(ValueError):
    pass


class NonFiniteLossError(RuntimeError):
    """Raised when a training step produces a NaN or infinite loss."""

    def __init__(self, step: int, loss: float):
        super().__init__(f"non-finite loss {loss} at step {step}")
        self.step = step
        self.loss = loss


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 2e-4
    steps: int = 2000
    batch_size: int = 4
    seed: int = 0
    task_mixture: Tuple[float, ...] = STAGE_MIXTURES[2]
    t_floor: float = 0.02
    grad_clip: float = 1.0
    betas: Tuple[float, float] = (0.9, 0.95)
    eps: float = 1e-8
    weight_decay: float = 0.0
    # False trains every element as text-to-video (the "w/o AMCS" variant).
    use_amcs: bool = True
    # Overrides the mixture with one task, e.g. the edges slot for super-resolution.
    fixed_task: Optional[Task] = None
    checkpoint_every: int = 500

    def __post_init__(self):
        if not 0.0 < self.t_floor < 1.0:
            raise TrainConfigError(f"t_floor must lie in (0, 1), got {self.t_floor}")
        if self.lr <= 0:
            raise TrainConfigError(f"lr must be positive, got {self.lr}")
        if self.steps < 0 or self.batch_size < 1:
            raise TrainConfigError("steps must be >= 0 and batch_size >= 1")
        if self.grad_clip <= 0:
            raise TrainConfigError(f"grad_clip must be positive, got {self.grad_clip}")
        check_mixture(self.task_mixture)


class Example(NamedTuple):
    """One training sample in latent space: clean latents in MODALITIES order."""

    latents: Tuple[np.ndarray, ...]
    caption: Tuple[int, ...]


class StepResult(NamedTuple):
    step: int
    loss: float
    task_counts: Dict[str, int]

    def log_line(self) -> str:
        counts = ";".join(
            f"{kind.value}={self.task_counts.get(kind.value, 0)}" for kind in TASK_ORDER
        )
        extra = sorted(set(self.task_counts) - {kind.value for kind in TASK_ORDER})
        counts += "".join(f";{name}={self.task_counts[name]}" for name in extra)
        return f"{self.step},{self.loss:.6f},{counts}"


class AdamW:
    """Adaptive moments with bias correction and decoupled weight decay."""

    def __init__(
        self,
        parameters: Sequence[Parameter],
        lr: float,
        betas: Tuple[float, float] = (0.9, 0.95),
        eps: float = 1e-8,
        weight_decay: float = 0.0,
    ):
        self.parameters = list(parameters)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self._m = [np.zeros_like(p.data) for p in self.parameters]
        self._v = [np.zeros_like(p.data) for p in self.parameters]

    def step(self):
        self.t += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for p, m, v in zip(self.parameters, self._m, self._v):
            if p.grad is None:
                continue
            g = p.grad.astype(p.dtype, copy=False)
            if self.weight_decay:
                p.data = p.data - self.lr * self.weight_decay * p.data
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data = (p.data - self.lr * update).astype(p.dtype, copy=False)


def clip_grad_norm(parameters: Sequence[Parameter], max_norm: float) -> float:
    """Rescales gradients so their global norm is at most `max_norm`; returns the norm before."""
    total = math.sqrt(
        sum(
            float((p.grad.astype(np.float64) ** 2).sum())
            for p in parameters
            if p.grad is not None
        )
    )
    if total > max_norm:
        coef = max_norm / (total + 1e-6)
        for p in parameters:
            if p.grad is not None:
                p.grad = p.grad * np.asarray(coef, dtype=p.grad.dtype)
    return total


def denoising_loss(
    predictions: Sequence[Tensor], noise: Sequence[np.ndarray], mask: Sequence[float]
) -> Tensor:
    """Mean over generated modalities of the per-element squared noise error."""
    terms = []
    for pred, eps, weight in zip(predictions, noise, mask):
        if not weight:
            continue
        diff = sub(pred, Tensor(eps, dtype=pred.dtype))
        terms.append(reduce_mean(mul(diff, diff)))
    if not terms:
        raise TrainConfigError("loss mask selects no modality")
    total = terms[0]
    for term in terms[1:]:
        total = add(total, term)
    return scale(total, 1.0 / len(terms))


@dataclass
class Trainer:
    model: MultiModalDiT
    config: TrainConfig
    start_step: int = 0
    rng: np.random.Generator = field(init=False)
    optimizer: AdamW = field(init=False)
    step: int = field(init=False)

    def __post_init__(self):
        self.step = self.start_step
        # Resumed runs draw a fresh but reproducible stream.
        self.rng = np.random.default_rng([self.config.seed, self.start_step])
        cfg = self.config
        self.optimizer = AdamW(
            self.model.parameters(), cfg.lr, cfg.betas, cfg.eps, cfg.weight_decay
        )

    def draw_task(self) -> Task:
        if self.config.fixed_task is not None:
            return self.config.fixed_task
        if not self.config.use_amcs:
            return TaskKind.T2V
        return sample_task(self.rng, self.config.task_mixture)

    def element_loss(self, example: Example, task: Task) -> Tensor:
        roles = assign_roles(task)
        t = 1.0 - float(self.rng.random()) * (1.0 - self.config.t_floor)
        noise = [self.rng.standard_normal(x.shape) for x in example.latents]
        noisy = [
            blend(x, eps, t, roles[m]) for m, x, eps in zip(MODALITIES, example.latents, noise)
        ]
        fused = build_input(self.model.embed_roles(noisy, roles))
        predictions = self.model(fused, t, example.caption)
        return denoising_loss(predictions, noise, loss_mask(roles))

    def training_step(self, batch: Sequence[Example]) -> StepResult:
        if not batch:
            raise TrainConfigError("empty batch")
        counts: Counter = Counter()
        losses = []
        for example in batch:
            task = self.draw_task()
            counts[task.value] += 1
            losses.append(self.element_loss(example, task))
        loss = losses[0]
        for term in losses[1:]:
            loss = add(loss, term)
        loss = scale(loss, 1.0 / len(losses))

        value = loss.item()
        if not math.isfinite(value):
            raise NonFiniteLossError(self.step + 1, value)

        parameters = self.model.parameters()
        backward(loss, parameters)
        norm = clip_grad_norm(parameters, self.config.grad_clip)
        self.optimizer.step()
        self.step += 1
        logger.debug(
            f"Step {self.step}: loss {value:.6f}, grad norm {norm:.4f}, tasks {dict(counts)}"
        )
        return StepResult(self.step, value, dict(counts))

    def draw_batch(self, examples: Sequence[Example]) -> List[Example]:
        size = min(self.config.batch_size, len(examples))
        return [examples[i] for i in self.rng.choice(len(examples), size=size, replace=False)]

    def fit(
        self,
        examples: Sequence[Example],
        steps: int,
        on_step: Optional[Callable[[StepResult], None]] = None,
        progress: bool = False,
    ) -> List[StepResult]:
        if not examples:
            raise TrainConfigError("no training examples")
        results = []
        for _ in tqdm(range(steps), desc="train", unit="step", disable=not progress):
            result = self.training_step(self.draw_batch(examples))
            results.append(result)
            if on_step is not None:
                on_step(result)
        if results:
            logger.info(f"Trained to step {self.step}: loss {results[-1].loss:.6f}")
        return results
