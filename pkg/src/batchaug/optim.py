"""SGD training with replicated augmented batches.

One optimizer serves four regimes that differ only in how the per-step batch
is assembled:

  plain          one augmentation draw per sample (M = 1)
  ba             M independent draws per sample folded into one M*B batch
  ba_accumulate  the same M*B work split into M sequential B-sized passes
                 whose gradients are averaged, trading time for memory
  ra             the resource-matched baseline: M*B distinct samples per
                 step, M times the epochs, single draws

The learning-rate schedule is a function of (schedule, base_lr, epoch) alone;
replication never touches it.  The monolithic and accumulated forms consume
the same stream draws in the same order, so with a dropout-free stack and
ghost groups of size B they compute the same mean gradient up to summation
bracketing.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from .augment import Identity, TransformSpec, expand_batch
from .dataio import LabeledDataset, make_sampler, sample_batch
from .errors import ConfigError, ContractViolation, TrainingDiverged
from .model import (
    GhostBatchNorm, Model, backward, forward, loss_softmax_xent)
from .rng import RngStream
from .tensor import fold_mean

TRAIN_MODES = ("plain", "ba", "ba_accumulate", "ra")

CSV_HEADER = "epoch,step,lr,train_loss,train_err,val_err,grad_norm"


# ---------------------------------------------------------------------------
# schedules

@dataclass(frozen=True)
class StepDecay:
    """Divide the rate by `factor` at each milestone epoch."""

    milestones: tuple = ()
    factor: float = 10.0

    def __post_init__(self):
        object.__setattr__(self, "milestones", tuple(self.milestones))
        if list(self.milestones) != sorted(set(self.milestones)):
            raise ConfigError("milestones must be strictly increasing")
        if self.factor <= 0:
            raise ConfigError("decay factor must be positive")


@dataclass(frozen=True)
class WarmupThenStep:
    """Linear ramp from zero over `warmup_epochs`, then step decay."""

    warmup_epochs: float
    milestones: tuple = ()
    factor: float = 10.0

    def __post_init__(self):
        object.__setattr__(self, "milestones", tuple(self.milestones))
        if self.warmup_epochs < 0:
            raise ConfigError("warmup length cannot be negative")
        if list(self.milestones) != sorted(set(self.milestones)):
            raise ConfigError("milestones must be strictly increasing")
        if self.factor <= 0:
            raise ConfigError("decay factor must be positive")


def lr_at(schedule, base_lr: float, epoch_fraction: float) -> float:
    """Learning rate at a (possibly fractional) epoch position."""
    if epoch_fraction < 0:
        raise ContractViolation("epoch position cannot be negative")
    if isinstance(schedule, WarmupThenStep):
        if schedule.warmup_epochs > 0 and epoch_fraction < schedule.warmup_epochs:
            return base_lr * (epoch_fraction / schedule.warmup_epochs)
        passed = sum(1 for m in schedule.milestones if epoch_fraction >= m)
        return base_lr / schedule.factor ** passed
    if isinstance(schedule, StepDecay):
        passed = sum(1 for m in schedule.milestones if epoch_fraction >= m)
        return base_lr / schedule.factor ** passed
    raise ContractViolation(f"unknown schedule {schedule!r}")


def _scaled_schedule(schedule, factor: int):
    if isinstance(schedule, StepDecay):
        return StepDecay(tuple(m * factor for m in schedule.milestones),
                         schedule.factor)
    return WarmupThenStep(schedule.warmup_epochs * factor,
                          tuple(m * factor for m in schedule.milestones),
                          schedule.factor)


# ---------------------------------------------------------------------------
# configuration

@dataclass(frozen=True)
class TrainConfig:
    base_lr: float
    batch_size: int
    epochs: int
    replicas: int = 1
    momentum: float = 0.0
    weight_decay: float = 0.0
    schedule: object = field(default_factory=StepDecay)
    ghost_size: int = 32
    transform: TransformSpec = field(default_factory=Identity)
    sampler_seed: int = 0
    augment_seed: int = 1
    init_seed: int = 2
    with_replacement: bool = False
    divergence_factor: float = 1e4

    def __post_init__(self):
        if self.base_lr <= 0:
            raise ConfigError("base learning rate must be positive")
        if self.batch_size < 1 or self.replicas < 1:
            raise ConfigError("batch size and replica count must be >= 1")
        if self.epochs < 0:
            raise ConfigError("epoch count cannot be negative")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ConfigError("weight decay cannot be negative")
        if self.ghost_size < 1 or \
                (self.replicas * self.batch_size) % self.ghost_size != 0:
            raise ConfigError(
                f"ghost size {self.ghost_size} must divide the expanded "
                f"batch {self.replicas * self.batch_size}")


@dataclass
class OptState:
    velocity: np.ndarray
    step: int = 0
    epoch: int = 0


def init_opt_state(model: Model) -> OptState:
    return OptState(velocity=np.zeros(model.param_count))


# ---------------------------------------------------------------------------
# update rules

def sgd_step(model: Model, grad: np.ndarray, state: OptState, lr: float,
             cfg: TrainConfig):
    """v <- mu*v + (grad + wd*w on decayed tensors); w <- w - lr*v."""
    grad = np.asarray(grad)
    if grad.shape != state.velocity.shape:
        raise ContractViolation(
            f"gradient dimension {grad.shape} != {state.velocity.shape}")
    if not np.all(np.isfinite(grad)):
        raise TrainingDiverged("non-finite gradient")
    w = model.flat_view()
    effective = grad
    if cfg.weight_decay > 0.0:
        effective = grad + cfg.weight_decay * w * model.weight_decay_mask()
    state.velocity = cfg.momentum * state.velocity + effective
    model.set_flat(w - lr * state.velocity)
    state.step += 1


def _cache_floats(cache, logits) -> int:
    """Count of activation values held live by one forward pass."""
    total = logits.size
    for entry in cache["entries"]:
        for value in entry.values():
            if isinstance(value, np.ndarray):
                total += value.size
    return total


def _batch_metrics(logits, labels, loss, grad):
    err = float(np.mean(np.argmax(logits, axis=1) != labels))
    return {"loss": float(loss), "train_err": err,
            "grad_norm": float(np.linalg.norm(grad))}


def ba_step(model: Model, images, labels, replicas: int, stream: RngStream,
            state: OptState, lr: float, cfg: TrainConfig) -> dict:
    """Expand to replicas*B rows, take one step on the mean gradient."""
    aug_images, aug_labels = expand_batch(cfg.transform, images, labels,
                                          replicas, stream)
    logits, cache = forward(model, aug_images, mode="train", stream=stream)
    loss, dlogits = loss_softmax_xent(logits, aug_labels)
    grad = backward(model, cache, dlogits)
    metrics = _batch_metrics(logits, aug_labels, loss, grad)
    metrics["peak_activation_floats"] = _cache_floats(cache, logits)
    sgd_step(model, grad, state, lr, cfg)
    return metrics


def ba_step_accumulate(model: Model, images, labels, replicas: int,
                       stream: RngStream, state: OptState, lr: float,
                       cfg: TrainConfig) -> dict:
    """The same update as ba_step, assembled from M sequential B-row passes.

    Ghost groups must fit inside one pass (ghost size dividing B).  Peak
    activation memory stays that of a single pass whatever M is.
    """
    b = images.shape[0]
    if any_gbn(model) and b % cfg.ghost_size != 0:
        raise ConfigError(
            f"accumulation needs ghost size {cfg.ghost_size} to divide the "
            f"sub-batch {b}")
    grads = []
    losses = []
    errs = []
    peak = 0
    for _ in range(replicas):
        sub_images, sub_labels = expand_batch(cfg.transform, images, labels,
                                              1, stream)
        logits, cache = forward(model, sub_images, mode="train", stream=stream)
        loss, dlogits = loss_softmax_xent(logits, sub_labels)
        grads.append(backward(model, cache, dlogits))
        losses.append(loss)
        errs.append(float(np.mean(np.argmax(logits, axis=1) != sub_labels)))
        peak = max(peak, _cache_floats(cache, logits))
    grad = fold_mean(grads)
    loss = float(np.mean(losses))
    metrics = {"loss": loss, "train_err": float(np.mean(errs)),
               "grad_norm": float(np.linalg.norm(grad)),
               "peak_activation_floats": peak}
    sgd_step(model, grad, state, lr, cfg)
    return metrics


def any_gbn(model: Model) -> bool:
    return any(isinstance(l, GhostBatchNorm) for l in model.layers)


def regime_adaptation(cfg: TrainConfig, replicas: int) -> TrainConfig:
    """Fold the replica budget into distinct data: M*B batch, M*epochs, M'=1.

    Milestones (and warmup) stretch by the same factor so the learning rate
    follows the same trajectory per iteration as the unadapted config.
    """
    if replicas < 1:
        raise ContractViolation("replica count must be >= 1")
    if replicas == 1:
        return cfg
    return replace(cfg,
                   batch_size=cfg.batch_size * replicas,
                   epochs=cfg.epochs * replicas,
                   replicas=1,
                   schedule=_scaled_schedule(cfg.schedule, replicas))


# ---------------------------------------------------------------------------
# evaluation and the training loop

def evaluate(model: Model, ds: LabeledDataset, chunk: int = 512):
    """Mean loss and top-1 error over a dataset in eval mode."""
    total_loss = 0.0
    wrong = 0
    for start in range(0, len(ds), chunk):
        images = ds.images[start:start + chunk]
        labels = ds.labels[start:start + chunk]
        logits, _ = forward(model, images, mode="eval")
        loss, _ = loss_softmax_xent(logits, labels)
        total_loss += loss * len(labels)
        wrong += int(np.sum(np.argmax(logits, axis=1) != labels))
    return total_loss / len(ds), wrong / len(ds)


@dataclass
class TrainReport:
    rows: list
    mode: str
    wall_time: float = 0.0

    @property
    def final_val_err(self):
        return self.rows[-1]["val_err"]

    def to_csv(self) -> str:
        lines = [CSV_HEADER]
        for r in self.rows:
            lines.append(",".join([
                str(r["epoch"]), str(r["step"]),
                _fmt(r["lr"]), _fmt(r["train_loss"]), _fmt(r["train_err"]),
                _fmt(r["val_err"]), _fmt(r["grad_norm"])]))
        return "\n".join(lines) + "\n"

    def save_csv(self, path):
        with open(path, "w") as fh:
            fh.write(self.to_csv())


def _fmt(v) -> str:
    return f"{float(v):.12g}"


def train(model: Model, train_ds: LabeledDataset, val_ds: LabeledDataset,
          cfg: TrainConfig, mode: str = "ba", step_rows: bool = False,
          callback=None) -> TrainReport:
    """Full training loop; deterministic for fixed seeds and config.

    The report holds one row per epoch (train metrics averaged over the
    epoch's steps, validation evaluated after the epoch) plus a leading row
    for the initial state.  Raises TrainingDiverged when the loss explodes
    past the divergence guard or turns non-finite.
    """
    if mode not in TRAIN_MODES:
        raise ConfigError(f"mode must be one of {TRAIN_MODES}, got {mode!r}")
    effective = cfg
    replicas = cfg.replicas
    if mode == "ra":
        effective = regime_adaptation(cfg, cfg.replicas)
        replicas = 1
    elif mode == "plain":
        replicas = 1

    n = len(train_ds)
    if effective.batch_size > n:
        raise ConfigError(
            f"batch size {effective.batch_size} exceeds dataset size {n}")
    steps_per_epoch = -(-n // effective.batch_size)

    sampler = make_sampler(RngStream(effective.sampler_seed), n,
                           effective.with_replacement)
    aug_stream = RngStream(effective.augment_seed).split("augment")
    step_fn = ba_step_accumulate if mode == "ba_accumulate" else ba_step

    started = time.perf_counter()
    state = init_opt_state(model)
    rows = []

    init_loss, init_err = evaluate(model, train_ds)
    _, init_val = evaluate(model, val_ds)
    rows.append({"epoch": 0, "step": 0,
                 "lr": lr_at(effective.schedule, effective.base_lr, 0.0),
                 "train_loss": init_loss, "train_err": init_err,
                 "val_err": init_val, "grad_norm": 0.0})
    guard = None

    for epoch in range(effective.epochs):
        state.epoch = epoch
        epoch_loss, epoch_err, epoch_norm = [], [], []
        for step in range(steps_per_epoch):
            frac = epoch + step / steps_per_epoch
            lr = lr_at(effective.schedule, effective.base_lr, frac)
            _, images, labels = sample_batch(train_ds, sampler,
                                             effective.batch_size)
            metrics = step_fn(model, images, labels, replicas, aug_stream,
                              state, lr, effective)
            if guard is None:
                guard = max(metrics["loss"], 1e-12) * cfg.divergence_factor
            if not np.isfinite(metrics["loss"]) or metrics["loss"] > guard:
                raise TrainingDiverged(
                    f"loss {metrics['loss']:.3e} at step {state.step} "
                    f"tripped the divergence guard {guard:.3e}")
            epoch_loss.append(metrics["loss"])
            epoch_err.append(metrics["train_err"])
            epoch_norm.append(metrics["grad_norm"])
            if step_rows:
                rows.append({"epoch": epoch + 1, "step": state.step, "lr": lr,
                             "train_loss": metrics["loss"],
                             "train_err": metrics["train_err"],
                             "val_err": float("nan"),
                             "grad_norm": metrics["grad_norm"]})
        _, val_err = evaluate(model, val_ds)
        rows.append({"epoch": epoch + 1, "step": state.step,
                     "lr": lr_at(effective.schedule, effective.base_lr,
                                 float(epoch)),
                     "train_loss": float(np.mean(epoch_loss)),
                     "train_err": float(np.mean(epoch_err)),
                     "val_err": val_err,
                     "grad_norm": float(np.mean(epoch_norm))})
        if callback is not None:
            callback(epoch + 1, model, state)
    return TrainReport(rows=rows, mode=mode,
                       wall_time=time.perf_counter() - started)
