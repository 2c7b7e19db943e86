"""In-process simulation of synchronous data-parallel replica training.

W workers form W/M groups of M.  Workers inside a group share a dataset
sampler seed, so they draw identical sample indices every step, but each
worker applies its own augmentation draws.  A group's combined work is
therefore M augmented replicas of the same B_local distinct samples, and
the whole cluster covers (W/M) * B_local distinct samples per step.

Local gradients are mean-reduced in ascending worker order (a fixed-order
model of allreduce) and every worker applies the same update, which keeps
trainable parameters bit-identical across workers.  Batch-norm running
statistics stay local to each worker; they do not feed the training-mode
gradient, so parameter equality is unaffected.

The monolithic reference replays the identical arithmetic on one model:
same per-group samplers, same per-worker augmentation streams, chunk
gradients folded in the same worker order, one optimizer step.  Matching
it bit-for-bit is the correctness claim of the seed discipline.

Steps here use a constant learning rate; schedule handling belongs to the
epoch-based trainer.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .augment import expand_batch
from .dataio import LabeledDataset, make_sampler, sample_batch
from .errors import ConfigError, EquivalenceFailure
from .model import Model, batch_grad, make_model
from .optim import OptState, TrainConfig, init_opt_state, sgd_step
from .rng import RngStream
from .tensor import fold_mean

CSV_HEADER = "step,worker,local_grad_norm,agg_grad_norm,param_checksum"


@dataclass(frozen=True)
class WorkerConfig:
    worker_id: int
    group_id: int
    sampler_seed: int
    augmentation_seed: int
    local_batch: int


def assign_seeds(worker_count: int, replicas: int, base_seed: int,
                 local_batch: int) -> list:
    """One sampler seed per group of `replicas` workers, one augmentation
    seed per worker."""
    if worker_count < 1 or replicas < 1:
        raise ConfigError("worker count and replicas must be positive")
    if worker_count % replicas != 0:
        raise ConfigError(
            f"replica count {replicas} must divide worker count "
            f"{worker_count}")
    if local_batch < 1:
        raise ConfigError("local batch must be positive")
    base = RngStream(base_seed)
    group_seeds = [base.split("sampler", g).seed
                   for g in range(worker_count // replicas)]
    configs = []
    for w in range(worker_count):
        configs.append(WorkerConfig(
            worker_id=w, group_id=w // replicas,
            sampler_seed=group_seeds[w // replicas],
            augmentation_seed=base.split("aug", w).seed,
            local_batch=local_batch))
    if len({c.augmentation_seed for c in configs}) != worker_count:
        raise ConfigError("augmentation seed collision")
    return configs


def sampler_for(cfg: WorkerConfig, n: int, with_replacement: bool = False):
    return make_sampler(RngStream(cfg.sampler_seed), n, with_replacement)


def aug_stream_for(cfg: WorkerConfig) -> RngStream:
    return RngStream(cfg.augmentation_seed).split("augment")


def param_checksum(model: Model) -> str:
    return hashlib.sha256(model.flat_view().tobytes()).hexdigest()[:16]


@dataclass
class Worker:
    cfg: WorkerConfig
    model: Model
    sampler: object
    aug_stream: RngStream
    opt: OptState


def make_workers(dataset: LabeledDataset, configs, model_text: str,
                 model_seed: int, train_cfg: TrainConfig) -> list:
    """Identically initialized actors; only seeds distinguish them."""
    workers = []
    for cfg in configs:
        model = make_model(model_text, dataset.images.shape[1:],
                           dataset.class_count, seed=model_seed,
                           ghost_size=train_cfg.ghost_size)
        workers.append(Worker(cfg=cfg, model=model,
                              sampler=sampler_for(
                                  cfg, dataset.labels.shape[0],
                                  train_cfg.with_replacement),
                              aug_stream=aug_stream_for(cfg),
                              opt=init_opt_state(model)))
    return workers


@dataclass
class StepAggregate:
    local_grads: list           # per-worker flat gradients, ascending id
    mean_grad: np.ndarray       # fixed-order fold of local_grads


def dist_step(workers, dataset: LabeledDataset, lr: float,
              train_cfg: TrainConfig) -> StepAggregate:
    """One synchronous step: local gradients, fixed-order mean, shared
    update on every worker."""
    sums = {param_checksum(w.model) for w in workers}
    if len(sums) != 1:
        raise EquivalenceFailure(
            f"worker parameters diverged before the step: {sorted(sums)}")
    grads = []
    for w in sorted(workers, key=lambda w: w.cfg.worker_id):
        _, images, labels = sample_batch(dataset, w.sampler,
                                         w.cfg.local_batch)
        big_images, big_labels = expand_batch(
            train_cfg.transform, images, labels, 1, w.aug_stream)
        _, grad = batch_grad(w.model, big_images, big_labels, mode="train")
        grads.append(grad)
    mean_grad = fold_mean(grads)
    for w in workers:
        sgd_step(w.model, mean_grad, w.opt, lr, train_cfg)
    return StepAggregate(local_grads=grads, mean_grad=mean_grad)


def dist_run(dataset: LabeledDataset, configs, model_text: str,
             model_seed: int, train_cfg: TrainConfig, steps: int):
    """Run the cluster for `steps`; returns (workers, report rows)."""
    workers = make_workers(dataset, configs, model_text, model_seed,
                           train_cfg)
    rows = []
    for step in range(steps):
        agg = dist_step(workers, dataset, train_cfg.base_lr, train_cfg)
        agg_norm = float(np.linalg.norm(agg.mean_grad))
        for w, grad in zip(workers, agg.local_grads):
            rows.append((step, w.cfg.worker_id,
                         float(np.linalg.norm(grad)), agg_norm,
                         param_checksum(w.model)))
    return workers, rows


def monolithic_reference(dataset: LabeledDataset, configs, model_text: str,
                         model_seed: int, train_cfg: TrainConfig,
                         steps: int):
    """Single-model replay of the cluster's arithmetic: per-group sampling,
    per-worker augmentation draws, chunk gradients folded in worker order.
    Returns (model, per-step checksums)."""
    configs = sorted(configs, key=lambda c: c.worker_id)
    group_ids = sorted({c.group_id for c in configs})
    group_rep = {g: next(c for c in configs if c.group_id == g)
                 for g in group_ids}
    samplers = {g: sampler_for(group_rep[g], dataset.labels.shape[0],
                               train_cfg.with_replacement)
                for g in group_ids}
    aug_streams = {c.worker_id: aug_stream_for(c) for c in configs}

    model = make_model(model_text, dataset.images.shape[1:],
                       dataset.class_count, seed=model_seed,
                       ghost_size=train_cfg.ghost_size)
    opt = init_opt_state(model)
    checksums = []
    for _ in range(steps):
        batches = {g: sample_batch(dataset, samplers[g],
                                   group_rep[g].local_batch)
                   for g in group_ids}
        grads = []
        for c in configs:
            _, images, labels = batches[c.group_id]
            big_images, big_labels = expand_batch(
                train_cfg.transform, images, labels, 1,
                aug_streams[c.worker_id])
            _, grad = batch_grad(model, big_images, big_labels, mode="train")
            grads.append(grad)
        sgd_step(model, fold_mean(grads), opt, train_cfg.base_lr, train_cfg)
        checksums.append(param_checksum(model))
    return model, checksums


def equivalence_report(dataset: LabeledDataset, configs, model_text: str,
                       model_seed: int, train_cfg: TrainConfig,
                       steps: int) -> dict:
    """Run cluster and reference; compare parameters step by step."""
    workers, rows = dist_run(dataset, configs, model_text, model_seed,
                             train_cfg, steps)
    _, ref_checksums = monolithic_reference(dataset, configs, model_text,
                                            model_seed, train_cfg, steps)
    worker0 = [r for r in rows if r[1] == 0]
    first_divergence = None
    for step, (row, ref) in enumerate(zip(worker0, ref_checksums)):
        if row[4] != ref:
            first_divergence = step
            break
    return {"bit_exact": first_divergence is None,
            "first_divergence_step": first_divergence,
            "steps": steps,
            "final_checksum": ref_checksums[-1] if ref_checksums else "",
            "rows": rows}


@dataclass
class IoReport:
    total_loads: int
    unique_loads: int
    steps: int
    workers: int


def io_dedup_report(dataset_n: int, configs, steps: int,
                    with_replacement: bool = False) -> IoReport:
    """Count actual sample fetches against distinct fetches per group.

    Workers in a group request the same indices, so one decode serves all
    M members; distinct loads are counted per (step, group).
    """
    configs = sorted(configs, key=lambda c: c.worker_id)
    group_ids = sorted({c.group_id for c in configs})
    members = {g: [c for c in configs if c.group_id == g] for g in group_ids}
    samplers = {g: sampler_for(members[g][0], dataset_n, with_replacement)
                for g in group_ids}
    total = 0
    unique = 0
    for _ in range(steps):
        for g in group_ids:
            idx = samplers[g].draw(members[g][0].local_batch)
            total += idx.shape[0] * len(members[g])
            unique += np.unique(idx).shape[0]
    return IoReport(total_loads=total, unique_loads=unique, steps=steps,
                    workers=len(configs))


def distsim_csv_rows(rows):
    out = [CSV_HEADER]
    for step, worker, local_norm, agg_norm, checksum in rows:
        out.append(f"{step},{worker},{local_norm:.12g},{agg_norm:.12g},"
                   f"{checksum}")
    return out
