"""Robust dataset generation: rebuild each image so a frozen teacher's
penultimate representation matches the original image's."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .data import Dataset
from .errors import ConfigurationError, ContractError
from .models import Model
from .objectives import l2_distance_loss
from .tensor import Tensor

_CONVERGED = 1e-10


@dataclass(frozen=True)
class RobustifyConfig:
    steps: int = 1000
    step_size: float = 0.1
    normalize_gradient: bool = True
    clamp_box: tuple[float, float] | None = None

    def __post_init__(self):
        if self.steps < 1:
            raise ConfigurationError("robustify needs at least one step")
        if self.step_size <= 0:
            raise ConfigurationError("step size must be positive")


def robustify_image(
    teacher: Model,
    x: np.ndarray,
    init: np.ndarray,
    cfg: RobustifyConfig,
) -> tuple[np.ndarray, float, float]:
    """Gradient descent on || g(x_r) - g(x) ||_2 starting from ``init``.

    Per step the gradient's l2 norm is normalized to 1 before scaling by
    the step size. Returns (x_r, initial objective, final objective).
    """
    if not teacher.frozen:
        raise ContractError("robustification teacher must be frozen")
    x = np.asarray(x, dtype=np.float64)
    init = np.asarray(init, dtype=np.float64)
    if init.shape != x.shape:
        raise ConfigurationError(f"init shape {init.shape} does not match image shape {x.shape}")
    single = x.ndim == len(teacher.descriptor.input_shape)
    xb = x[None] if single else x
    rb = (init[None] if single else init).copy()
    with T.no_grad(), teacher.phase("eval"):
        target = teacher.features(xb).data
    initial = None
    objective = None
    for _ in range(cfg.steps):
        rt = Tensor(rb)
        with teacher.phase("attack"):
            loss = l2_distance_loss(teacher.features(rt), Tensor(target))
            teacher.backward(loss)
        T.zero_grads(teacher.params.values())
        objective = loss.item()
        if initial is None:
            initial = objective
        if objective < _CONVERGED:
            break
        grad = rt.grad if rt.grad is not None else np.zeros_like(rb)
        if cfg.normalize_gradient:
            norm = float(np.linalg.norm(grad))
            if norm == 0.0:
                break  # flat objective: treat as converged
            grad = grad / norm
        rb = rb - cfg.step_size * grad
        if cfg.clamp_box is not None:
            rb = np.clip(rb, *cfg.clamp_box)
    with T.no_grad(), teacher.phase("eval"):
        objective = l2_distance_loss(teacher.features(rb), Tensor(target)).item()
    out = rb[0] if single else rb
    return out, float(initial if initial is not None else objective), float(objective)


def robustify_dataset(
    teacher: Model,
    dataset: Dataset,
    cfg: RobustifyConfig,
    rng: np.random.Generator,
) -> Dataset:
    """Replace every image by its robustified version; labels are kept.

    Each optimization starts from a training image drawn independently of
    the target's label.
    """
    if len(dataset) == 0:
        raise ConfigurationError("cannot robustify an empty dataset")
    out = np.empty_like(dataset.inputs)
    init_idx = rng.integers(0, len(dataset), size=len(dataset))
    objectives = []
    for i in range(len(dataset)):
        x_r, start, final = robustify_image(teacher, dataset.inputs[i], dataset.inputs[init_idx[i]], cfg)
        out[i] = x_r
        objectives.append((start, final))
    meta = dict(dataset.metadata)
    meta["robustified"] = {
        "steps": cfg.steps,
        "step_size": cfg.step_size,
        "mean_initial_objective": float(np.mean([o[0] for o in objectives])),
        "mean_final_objective": float(np.mean([o[1] for o in objectives])),
    }
    return Dataset(inputs=out, labels=dataset.labels.copy(), metadata=meta)
