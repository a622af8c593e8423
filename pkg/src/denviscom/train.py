"""Toy training on synthetic data: optimizer, loop, evaluation helpers.

The optimizer is Adam with decoupled weight decay and a global gradient-norm
clip.  Data is generated on the fly from a seeded stream, so a fixed seed
reproduces the loss curve bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .checkpoint import Checkpoint
from .matching import task_loss
from .model import TASKS, DenVisCoM
from .synthetic import SyntheticSample, gen_flow_pair, gen_stereo_pair
from .tensor import Tensor

FLOW_MAX_SHIFT = 6
DISPARITY_MAX = 8


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; the message carries the step index."""


class Adam:
    """Adam with decoupled weight decay (applied to the data, not the moment)."""

    def __init__(
        self,
        params: dict[str, Tensor],
        lr: float,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 1e-4,
    ):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def clip_grad_norm(self, max_norm: float) -> float:
        total = 0.0
        for p in self.params.values():
            if p.grad is not None:
                total += float((p.grad * p.grad).sum())
        norm = float(np.sqrt(total))
        if norm > max_norm and norm > 0:
            scale = max_norm / norm
            for p in self.params.values():
                if p.grad is not None:
                    p.grad *= scale
        return norm

    def step(self) -> None:
        self.step_count += 1
        bc1 = 1.0 - self.beta1**self.step_count
        bc2 = 1.0 - self.beta2**self.step_count
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            if self.weight_decay:
                p.data *= 1.0 - self.lr * self.weight_decay
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


def make_sample(task: str, rng: np.random.Generator, size: int = 112) -> SyntheticSample:
    """Draw one synthetic sample from the task's toy distribution."""
    seed = int(rng.integers(0, 2**31 - 1))
    if task == "flow":
        dx = int(rng.integers(-FLOW_MAX_SHIFT, FLOW_MAX_SHIFT + 1))
        dy = int(rng.integers(-FLOW_MAX_SHIFT, FLOW_MAX_SHIFT + 1))
        return gen_flow_pair(seed, size, size, (dx, dy))
    if task == "disparity":
        d = int(rng.integers(0, DISPARITY_MAX + 1))
        return gen_stereo_pair(seed, size, size, d)
    raise ValueError(f"unknown task {task!r}; expected one of {TASKS}")


def heldout_samples(task: str, count: int, size: int = 112, seed: int = 987654321) -> list[SyntheticSample]:
    """A fixed evaluation set, disjoint from any training stream by seed choice."""
    rng = np.random.default_rng(seed)
    return [make_sample(task, rng, size) for _ in range(count)]


def evaluate_epe(model: DenVisCoM, samples: list[SyntheticSample]) -> float:
    """Mean end-point error over samples, respecting validity masks."""
    errors = []
    for s in samples:
        pred = model.predict(s.task, s.img1, s.img2)
        if s.task == "flow":
            err = np.sqrt(((pred - s.gt) ** 2).sum(axis=0))
        else:
            err = np.abs(pred - s.gt)
        errors.append(float(err[s.valid].mean()))
    return float(np.mean(errors))


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    losses: list[float] = field(default_factory=list)
    stopped_at: int | None = None  # step index where on_step requested a stop


def train_toy(
    task: str,
    model: DenVisCoM,
    steps: int,
    lr: float = 1e-4,
    batch: int = 4,
    seed: int = 0,
    size: int = 112,
    clip_norm: float = 1.0,
    weight_decay: float = 1e-4,
    on_step=None,
) -> TrainResult:
    """Train the model in place on the task's synthetic stream.

    ``on_step(step_index, loss)`` runs after every optimizer step; returning
    True stops training early.  With ``steps == 0`` the checkpoint equals the
    initialization.
    """
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}; expected one of {TASKS}")
    opt = Adam(model.parameters(), lr=lr, weight_decay=weight_decay)
    data_rng = np.random.default_rng(seed)
    losses: list[float] = []
    stopped_at = None

    for step in range(steps):
        opt.zero_grad()
        batch_loss = None
        for _ in range(batch):
            sample = make_sample(task, data_rng, size)
            pred, _ = model.forward_field(task, sample.img1, sample.img2)
            loss = task_loss(pred, T.Tensor(sample.gt), sample.valid)
            batch_loss = loss if batch_loss is None else T.add(batch_loss, loss)
        batch_loss = T.mul(batch_loss, 1.0 / batch)
        value = batch_loss.item()
        if not np.isfinite(value):
            raise TrainingDiverged(f"loss became non-finite at step {step}")
        batch_loss.backward()
        opt.clip_grad_norm(clip_norm)
        opt.step()
        losses.append(value)
        if on_step is not None and on_step(step, value):
            stopped_at = step
            break

    return TrainResult(checkpoint=Checkpoint.from_model(model, task), losses=losses, stopped_at=stopped_at)
