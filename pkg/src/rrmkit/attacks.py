"""First-order evasion attacks: FGSM, PGD and multi-restart evaluation.

All attacks are pure given (model, inputs, labels, budget, seed) and
count their model passes under the model's "attack" phase.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigurationError
from .tensor import Tensor


@dataclass(frozen=True)
class AdversaryBudget:
    """Norm ball, step schedule and restart count for an attack."""

    norm: str = "linf"  # "linf" | "l2"
    epsilon: float = 8 / 255
    step_size: float | None = None  # default: eps/4 (linf), 2*eps/steps (l2)
    steps: int = 7
    restarts: int = 1
    pixel_box: tuple[float, float] = (0.0, 1.0)

    def __post_init__(self):
        if self.norm not in ("linf", "l2"):
            raise ConfigurationError(f"unknown norm {self.norm!r}")
        if self.epsilon < 0:
            raise ConfigurationError("epsilon must be non-negative")
        if self.steps < 0:
            raise ConfigurationError("steps must be non-negative")
        if self.restarts < 1:
            raise ConfigurationError("restarts must be at least 1")
        if self.pixel_box[0] >= self.pixel_box[1]:
            raise ConfigurationError(f"pixel box {self.pixel_box} must have low < high")
        if self.step_size is not None and self.step_size <= 0:
            raise ConfigurationError("step size must be positive")

    def resolved_step_size(self) -> float:
        if self.step_size is not None:
            return self.step_size
        if self.norm == "linf":
            return self.epsilon / 4
        return 2 * self.epsilon / max(self.steps, 1)


def _flat(delta: np.ndarray) -> np.ndarray:
    return delta.reshape(delta.shape[0], -1)


def project(delta: Tensor | np.ndarray, budget: AdversaryBudget) -> np.ndarray:
    """Project per-sample perturbations back into the budget's norm ball."""
    d = np.array(delta.data if isinstance(delta, Tensor) else delta, dtype=np.float64)
    if budget.norm == "linf":
        return np.clip(d, -budget.epsilon, budget.epsilon)
    norms = np.linalg.norm(_flat(d), axis=1)
    over = norms > budget.epsilon
    if np.any(over):
        factors = np.ones_like(norms)
        factors[over] = budget.epsilon / norms[over]
        d = d * factors.reshape((-1,) + (1,) * (d.ndim - 1))
    return d


def _input_gradient(model, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """One forward + one backward; returns dL_CE/dx.

    Parameter gradients accumulated by the attack backward are cleared so
    they cannot leak into a subsequent training update.
    """
    xt = Tensor(x)
    with model.phase("attack"):
        loss = T.softmax_cross_entropy(model.logits(xt), y)
        model.backward(loss)
    T.zero_grads(getattr(model, "params", {}).values())
    return np.zeros_like(x) if xt.grad is None else xt.grad


def _ascend(delta: np.ndarray, grad: np.ndarray, step: float, norm: str) -> np.ndarray:
    if norm == "linf":
        return delta + step * np.sign(grad)
    norms = np.linalg.norm(_flat(grad), axis=1)
    unit = grad / np.maximum(norms, 1e-12).reshape((-1,) + (1,) * (grad.ndim - 1))
    # zero gradient rows take a zero step
    unit[norms == 0] = 0.0
    return delta + step * unit


def _clamp_to_box(x: np.ndarray, delta: np.ndarray, box: tuple[float, float]) -> np.ndarray:
    return np.clip(x + delta, box[0], box[1]) - x


def random_init(x: np.ndarray, budget: AdversaryBudget, rng: np.random.Generator) -> np.ndarray:
    """Uniform draw inside the epsilon ball (cube for linf, ball for l2)."""
    if budget.norm == "linf":
        return rng.uniform(-budget.epsilon, budget.epsilon, size=x.shape)
    d = _flat(np.empty_like(x)).shape[1]
    direction = rng.standard_normal(size=x.shape)
    norms = np.maximum(np.linalg.norm(_flat(direction), axis=1), 1e-12)
    direction = direction / norms.reshape((-1,) + (1,) * (x.ndim - 1))
    radius = budget.epsilon * rng.uniform(0, 1, size=x.shape[0]) ** (1.0 / d)
    return direction * radius.reshape((-1,) + (1,) * (x.ndim - 1))


def pgd(
    model,
    x: np.ndarray,
    y: np.ndarray,
    budget: AdversaryBudget,
    init: str = "zero",
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Iterated gradient ascent on L_CE with projection; returns the last iterate."""
    x = np.asarray(x, dtype=np.float64)
    if budget.steps < 1:
        raise ConfigurationError("pgd requires at least one step")
    step = budget.resolved_step_size()
    if init == "random":
        if rng is None:
            raise ConfigurationError("random init requires an rng")
        delta = project(random_init(x, budget, rng), budget)
        delta = _clamp_to_box(x, delta, budget.pixel_box)
    elif init == "zero":
        delta = np.zeros_like(x)
    else:
        raise ConfigurationError(f"unknown init {init!r}")
    for _ in range(budget.steps):
        grad = _input_gradient(model, x + delta, y)
        delta = _ascend(delta, grad, step, budget.norm)
        delta = project(delta, budget)
        delta = _clamp_to_box(x, delta, budget.pixel_box)
    return x + delta


def fgsm(model, x: np.ndarray, y: np.ndarray, budget: AdversaryBudget) -> np.ndarray:
    """Single gradient-sign (linf) or normalized-gradient (l2) step of size epsilon."""
    x = np.asarray(x, dtype=np.float64)
    grad = _input_gradient(model, x, y)
    delta = _ascend(np.zeros_like(x), grad, budget.epsilon, budget.norm)
    delta = project(delta, budget)
    delta = _clamp_to_box(x, delta, budget.pixel_box)
    return x + delta


def _per_sample_loss(model, x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Evaluation-phase forward: per-sample CE loss and predicted class."""
    with T.no_grad(), model.phase("eval"):
        logits = model.logits(Tensor(x)).data
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    losses = -logp[np.arange(len(y)), y]
    return losses, logits.argmax(axis=1)


def multi_restart_attack(
    model,
    x: np.ndarray,
    y: np.ndarray,
    budget: AdversaryBudget,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray]:
    """Worst case over random-restart PGD runs.

    Per sample, keeps any perturbation that flips the prediction,
    otherwise the highest-loss one. Returns (x_adv, success mask).
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    best = x.copy()
    best_loss = np.full(len(y), -np.inf)
    success = np.zeros(len(y), dtype=bool)
    for _ in range(budget.restarts):
        child = np.random.default_rng(rng.integers(np.iinfo(np.int64).max))
        cand = pgd(model, x, y, budget, init="random", rng=child)
        losses, preds = _per_sample_loss(model, cand, y)
        flipped = preds != y
        better = (flipped & ~success) | ((flipped == success) & (losses > best_loss))
        best[better] = cand[better]
        best_loss[better] = losses[better]
        success |= flipped
    return best, success
