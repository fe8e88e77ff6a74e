"""Training procedures: ERM, adversarial training (standard / fast / free),
representation-matching transfer (RRM) and knowledge distillation, plus
learning-rate schedules.

Every step function reports exact loss components and pass counts; the
counter framework is the basis of the speedup accounting in bench.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .attacks import AdversaryBudget, pgd, project, random_init, _ascend, _clamp_to_box
from .data import Dataset, batches
from .errors import ConfigurationError, ContractError, DimensionError
from .models import ArchDescriptor, Model, build_model
from .objectives import RepLossKind, kl_temperature_loss, rep_loss
from .tensor import Tensor

METHODS = ("erm", "sat", "fast_at", "free_at", "rrm", "kd")


@dataclass(frozen=True)
class ScheduleSpec:
    kind: str = "constant"  # constant | step_decay | cyclic | cosine
    milestones: tuple[int, ...] = ()
    factor: float = 0.1
    max_lr: float | None = None

    def __post_init__(self):
        if self.kind not in ("constant", "step_decay", "cyclic", "cosine"):
            raise ConfigurationError(f"unknown schedule kind {self.kind!r}")
        if list(self.milestones) != sorted(set(self.milestones)):
            raise ConfigurationError("milestones must be strictly increasing")
        if not (0 < self.factor < 1):
            raise ConfigurationError("decay factor must be in (0, 1)")
        if self.kind == "cyclic" and (self.max_lr is None or self.max_lr <= 0):
            raise ConfigurationError("cyclic schedule requires max_lr > 0")


def lr_at(schedule: ScheduleSpec, base_lr: float, epoch: int, total_epochs: int) -> float:
    if not 0 <= epoch < total_epochs:
        raise ConfigurationError(f"epoch {epoch} outside [0, {total_epochs})")
    if schedule.kind == "constant":
        return base_lr
    if schedule.kind == "step_decay":
        passed = sum(1 for m in schedule.milestones if m <= epoch)
        return base_lr * schedule.factor**passed
    if schedule.kind == "cyclic":
        half = total_epochs / 2.0
        return schedule.max_lr * (1.0 - abs(epoch - half) / half)
    # cosine
    return base_lr * (1.0 + math.cos(math.pi * epoch / total_epochs)) / 2.0


@dataclass(frozen=True)
class TrainConfig:
    method: str = "erm"
    arch: ArchDescriptor | None = None
    lam: float = 5e-3  # CE weight in the representation-matching loss
    alpha: float = 1.0  # KL weight in distillation
    temperature: float = 30.0
    replay_m: int = 8
    budget: AdversaryBudget = AdversaryBudget()
    schedule: ScheduleSpec = ScheduleSpec()
    epochs: int = 10
    batch_size: int = 128
    learning_rate: float = 0.1
    seed: int = 0
    rep_loss: RepLossKind = RepLossKind.COSINE
    fast_step_scale: float = 1.25  # FGSM step = scale * epsilon in fast AT
    momentum: float = 0.0
    weight_decay: float = 0.0
    kl_direction: str = "teacher_to_student"  # target distribution is the teacher's

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigurationError(f"unknown method {self.method!r}; valid: {', '.join(METHODS)}")
        if not isinstance(self.rep_loss, RepLossKind):
            object.__setattr__(self, "rep_loss", RepLossKind(self.rep_loss))
        if self.method == "rrm" and self.lam <= 0:
            raise ConfigurationError(
                "lambda must be non-zero for representation matching: the representation "
                "loss carries no gradient for the classifier head, so the head would never train"
            )
        if self.method == "kd" and self.temperature <= 0:
            raise ConfigurationError("distillation temperature must be positive")
        if self.method == "free_at" and self.replay_m < 1:
            raise ConfigurationError("replay count m must be at least 1")
        if not 0 <= self.alpha <= 1:
            raise ConfigurationError("alpha must lie in [0, 1]")
        if self.epochs < 0 or self.batch_size < 1 or self.learning_rate <= 0:
            raise ConfigurationError("need epochs >= 0, batch_size >= 1, learning_rate > 0")
        if self.weight_decay < 0:
            raise ConfigurationError("weight decay must be non-negative")
        if self.kl_direction not in ("teacher_to_student", "student_to_teacher"):
            raise ConfigurationError(f"unknown kl_direction {self.kl_direction!r}")


@dataclass
class StepResult:
    ce: float = 0.0
    rep: float = 0.0
    kl: float = 0.0
    total: float = 0.0
    forwards: int = 0
    backwards: int = 0
    updated: bool = False


class _SGD:
    """Plain SGD, with optional momentum and weight decay behind config flags."""

    def __init__(self, momentum: float = 0.0, weight_decay: float = 0.0):
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity: dict[int, dict[str, np.ndarray]] = {}

    def apply(self, model: Model, lr: float) -> None:
        if model.frozen:
            raise ContractError("cannot update a frozen model")
        vel = self.velocity.setdefault(id(model), {})
        for name, p in model.params.items():
            if p.grad is None:
                continue
            grad = p.grad
            if self.weight_decay > 0:
                grad = grad + self.weight_decay * p.data
            if self.momentum > 0:
                v = vel.get(name)
                v = self.momentum * v + grad if v is not None else grad.copy()
                vel[name] = v
                p.data -= lr * v
            else:
                p.data -= lr * grad
            p.grad = None


_PLAIN_SGD = _SGD()


def _snapshot(*model_list: Model) -> tuple[int, int]:
    f = b = 0
    for m in model_list:
        c = m.total_counts()
        f += c.forwards
        b += c.backwards
    return f, b


def erm_step(model: Model, batch, lr: float, opt: _SGD = _PLAIN_SGD) -> StepResult:
    if model.frozen:
        raise ContractError("cannot train a frozen model")
    x, y = batch
    f0, b0 = _snapshot(model)
    loss = T.softmax_cross_entropy(model.logits(x), y)
    model.backward(loss)
    opt.apply(model, lr)
    f1, b1 = _snapshot(model)
    ce = loss.item()
    return StepResult(ce=ce, total=ce, forwards=f1 - f0, backwards=b1 - b0, updated=True)


def sat_step(
    model: Model,
    batch,
    budget: AdversaryBudget,
    lr: float,
    rng: np.random.Generator,
    opt: _SGD = _PLAIN_SGD,
) -> StepResult:
    """Min-max training: replace the batch by a PGD perturbation, then one ERM step."""
    if budget.steps < 1:
        raise ConfigurationError("standard adversarial training needs at least one attack step")
    x, y = batch
    f0, b0 = _snapshot(model)
    x_adv = pgd(model, x, y, budget, init="random", rng=rng)
    result = erm_step(model, (x_adv, y), lr, opt)
    f1, b1 = _snapshot(model)
    result.forwards, result.backwards = f1 - f0, b1 - b0
    return result


def fast_at_step(
    model: Model,
    batch,
    budget: AdversaryBudget,
    lr: float,
    rng: np.random.Generator,
    step_scale: float = 1.25,
    opt: _SGD = _PLAIN_SGD,
) -> StepResult:
    """One FGSM step from a random start inside the ball, then one training update."""
    x, y = batch
    x = np.asarray(x, dtype=np.float64)
    f0, b0 = _snapshot(model)
    delta = project(random_init(x, budget, rng), budget)
    delta = _clamp_to_box(x, delta, budget.pixel_box)
    xt = Tensor(x + delta)
    with model.phase("attack"):
        loss = T.softmax_cross_entropy(model.logits(xt), y)
        model.backward(loss)
    T.zero_grads(model.params.values())  # attack gradients must not leak into the update
    grad = np.zeros_like(x) if xt.grad is None else xt.grad
    delta = _ascend(delta, grad, step_scale * budget.epsilon, budget.norm)
    delta = project(delta, budget)
    delta = _clamp_to_box(x, delta, budget.pixel_box)
    result = erm_step(model, (x + delta, y), lr, opt)
    f1, b1 = _snapshot(model)
    result.forwards, result.backwards = f1 - f0, b1 - b0
    return result


def free_at_epoch(
    model: Model,
    batch_list,
    budget: AdversaryBudget,
    lr: float,
    replay_m: int,
    persistent_delta: np.ndarray | None = None,
    rng: np.random.Generator | None = None,
    opt: _SGD = _PLAIN_SGD,
) -> list[StepResult]:
    """Replay each batch m times, reusing one combined pass per replay.

    A single forward/backward yields both the parameter gradient (applied
    immediately) and the input gradient (folded into the perturbation).
    The perturbation persists across replays of the same batch and resets
    to zero on a new batch; ``persistent_delta`` seeds the first batch so
    a carry-over from a previous epoch can be continued.
    """
    if replay_m < 1:
        raise ConfigurationError("replay count m must be at least 1")
    if model.frozen:
        raise ContractError("cannot train a frozen model")
    results: list[StepResult] = []
    for bi, (x, y) in enumerate(batch_list):
        x = np.asarray(x, dtype=np.float64)
        if bi == 0 and persistent_delta is not None and persistent_delta.shape == x.shape:
            delta = persistent_delta.copy()
        else:
            delta = np.zeros_like(x)
        for _ in range(replay_m):
            f0, b0 = _snapshot(model)
            xt = Tensor(np.clip(x + delta, *budget.pixel_box))
            loss = T.softmax_cross_entropy(model.logits(xt), y)
            model.backward(loss)
            grad = np.zeros_like(x) if xt.grad is None else xt.grad
            opt.apply(model, lr)
            delta = _ascend(delta, grad, budget.epsilon, budget.norm)
            delta = project(delta, budget)
            f1, b1 = _snapshot(model)
            ce = loss.item()
            results.append(StepResult(ce=ce, total=ce, forwards=f1 - f0, backwards=b1 - b0, updated=True))
    return results


def _check_teacher(student: Model, teacher: Model, need_features: bool) -> None:
    if not teacher.frozen:
        raise ContractError("teacher must be frozen before transfer training")
    if need_features and student.descriptor.feature_dim != teacher.descriptor.feature_dim:
        raise DimensionError(
            f"feature widths differ: student {student.descriptor.feature_dim} vs teacher "
            f"{teacher.descriptor.feature_dim}; attach_adapter the wider model first"
        )


def rrm_step(
    student: Model,
    teacher: Model,
    batch,
    lam: float,
    rep_kind: RepLossKind,
    lr: float,
    opt: _SGD = _PLAIN_SGD,
) -> StepResult:
    """Match the frozen teacher's penultimate representations on natural inputs.

    total = lam * CE(student logits, y) + rep_loss(student feats, teacher feats);
    one student forward, one teacher forward (no graph), one backward.
    """
    if lam <= 0:
        raise ConfigurationError(
            "lambda must be non-zero: the representation loss carries no gradient "
            "for the classifier head, so the head would never train"
        )
    _check_teacher(student, teacher, need_features=True)
    if student.frozen:
        raise ContractError("cannot train a frozen student")
    x, y = batch
    f0, b0 = _snapshot(student, teacher)
    with T.no_grad():
        teacher_feats = teacher.features(x).data
    feats, logits = student.forward(x)
    l_ce = T.softmax_cross_entropy(logits, y)
    l_r = rep_loss(rep_kind, feats, Tensor(teacher_feats))
    total = T.scale(l_ce, lam) + l_r
    student.backward(total)
    opt.apply(student, lr)
    f1, b1 = _snapshot(student, teacher)
    return StepResult(
        ce=l_ce.item(),
        rep=l_r.item(),
        total=total.item(),
        forwards=f1 - f0,
        backwards=b1 - b0,
        updated=True,
    )


def kd_step(
    student: Model,
    teacher: Model,
    batch,
    alpha: float,
    temperature: float,
    lr: float,
    opt: _SGD = _PLAIN_SGD,
    kl_direction: str = "teacher_to_student",
) -> StepResult:
    """Distillation: total = (1 - alpha) * CE + alpha * t^2 * KL on natural inputs.

    The default KL direction treats the teacher's scaled softmax as the
    target distribution; the alternative direction is kept selectable.
    """
    if temperature <= 0:
        raise ConfigurationError("distillation temperature must be positive")
    _check_teacher(student, teacher, need_features=False)
    if student.frozen:
        raise ContractError("cannot train a frozen student")
    x, y = batch
    f0, b0 = _snapshot(student, teacher)
    with T.no_grad():
        teacher_logits = teacher.logits(x).data
    logits = student.logits(x)
    l_ce = T.softmax_cross_entropy(logits, y)
    if kl_direction == "teacher_to_student":
        l_kl = kl_temperature_loss(logits, Tensor(teacher_logits), temperature)
    else:
        l_kl = kl_temperature_loss(Tensor(teacher_logits), logits, temperature)
    total = T.scale(l_ce, 1.0 - alpha) + T.scale(l_kl, alpha * temperature**2)
    student.backward(total)
    opt.apply(student, lr)
    f1, b1 = _snapshot(student, teacher)
    return StepResult(
        ce=l_ce.item(),
        kl=l_kl.item(),
        total=total.item(),
        forwards=f1 - f0,
        backwards=b1 - b0,
        updated=True,
    )


def train(config: TrainConfig, dataset: Dataset, teacher: Model | None = None):
    """Run the configured method over the dataset; returns (model, RunReport)."""
    from .bench import RunReport, make_report  # deferred to avoid an import cycle

    needs_teacher = config.method in ("rrm", "kd")
    if needs_teacher and teacher is None:
        raise ConfigurationError(f"method {config.method!r} requires a teacher model")
    if not needs_teacher and teacher is not None:
        raise ConfigurationError(f"method {config.method!r} does not take a teacher")
    if config.arch is None:
        raise ConfigurationError("training config carries no architecture descriptor")
    rng = np.random.default_rng(config.seed)
    model = build_model(config.arch, rng, seed=config.seed)
    if needs_teacher:
        _check_teacher(model, teacher, need_features=config.method == "rrm")
    opt = _SGD(config.momentum, config.weight_decay)
    epoch_times: list[float] = []
    step_results: list[StepResult] = []
    for epoch in range(config.epochs):
        lr = lr_at(config.schedule, config.learning_rate, epoch, config.epochs)
        epoch_batches = batches(dataset, config.batch_size, shuffle=True, rng=rng)
        t0 = time.perf_counter()
        if config.method == "free_at":
            step_results.extend(
                free_at_epoch(model, epoch_batches, config.budget, lr, config.replay_m, rng=rng, opt=opt)
            )
        else:
            for batch in epoch_batches:
                if config.method == "erm":
                    step_results.append(erm_step(model, batch, lr, opt))
                elif config.method == "sat":
                    step_results.append(sat_step(model, batch, config.budget, lr, rng, opt))
                elif config.method == "fast_at":
                    step_results.append(
                        fast_at_step(model, batch, config.budget, lr, rng, config.fast_step_scale, opt)
                    )
                elif config.method == "rrm":
                    step_results.append(
                        rrm_step(model, teacher, batch, config.lam, config.rep_loss, lr, opt)
                    )
                else:  # kd
                    step_results.append(
                        kd_step(
                            model, teacher, batch, config.alpha, config.temperature, lr, opt,
                            kl_direction=config.kl_direction,
                        )
                    )
        epoch_times.append(time.perf_counter() - t0)
    model.method_tag = config.method
    report = make_report(config, model, teacher, epoch_times, step_results)
    return model, report


def config_to_dict(config: TrainConfig) -> dict:
    return {
        "method": config.method,
        "arch": config.arch.to_dict() if config.arch is not None else None,
        "lambda": config.lam,
        "alpha": config.alpha,
        "temperature": config.temperature,
        "replay_m": config.replay_m,
        "budget": {
            "norm": config.budget.norm,
            "epsilon": config.budget.epsilon,
            "step_size": config.budget.step_size,
            "steps": config.budget.steps,
            "restarts": config.budget.restarts,
            "pixel_box": list(config.budget.pixel_box),
        },
        "schedule": {
            "kind": config.schedule.kind,
            "milestones": list(config.schedule.milestones),
            "factor": config.schedule.factor,
            "max_lr": config.schedule.max_lr,
        },
        "epochs": config.epochs,
        "batch_size": config.batch_size,
        "learning_rate": config.learning_rate,
        "seed": config.seed,
        "rep_loss": config.rep_loss.value,
        "fast_step_scale": config.fast_step_scale,
        "momentum": config.momentum,
        "weight_decay": config.weight_decay,
        "kl_direction": config.kl_direction,
    }


def config_from_dict(d: dict) -> TrainConfig:
    b = d.get("budget", {})
    s = d.get("schedule", {})
    return TrainConfig(
        method=d.get("method", "erm"),
        arch=ArchDescriptor.from_dict(d["arch"]) if d.get("arch") else None,
        lam=d.get("lambda", 5e-3),
        alpha=d.get("alpha", 1.0),
        temperature=d.get("temperature", 30.0),
        replay_m=d.get("replay_m", 8),
        budget=AdversaryBudget(
            norm=b.get("norm", "linf"),
            epsilon=b.get("epsilon", 8 / 255),
            step_size=b.get("step_size"),
            steps=b.get("steps", 7),
            restarts=b.get("restarts", 1),
            pixel_box=tuple(b.get("pixel_box", (0.0, 1.0))),
        ),
        schedule=ScheduleSpec(
            kind=s.get("kind", "constant"),
            milestones=tuple(s.get("milestones", ())),
            factor=s.get("factor", 0.1),
            max_lr=s.get("max_lr"),
        ),
        epochs=d.get("epochs", 10),
        batch_size=d.get("batch_size", 128),
        learning_rate=d.get("learning_rate", 0.1),
        seed=d.get("seed", 0),
        rep_loss=RepLossKind(d.get("rep_loss", "cosine")),
        fast_step_scale=d.get("fast_step_scale", 1.25),
        momentum=d.get("momentum", 0.0),
        weight_decay=d.get("weight_decay", 0.0),
        kl_direction=d.get("kl_direction", "teacher_to_student"),
    )
