"""The pretraining loop.

Per step, in order: build weak (teacher) and contrastive (student) views,
embed and normalize both paths, compute the relational loss against the
queue, take an SGD step on the student, EMA-update the teacher, and finally
enqueue the teacher embeddings. Until the queue is full the loss is skipped
and only the queue is filled.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .augment import make_batch_views
from .checkpoint import Checkpoint, save_checkpoint
from .config import ExperimentConfig, lr_at
from .data import UNLABELED, DatasetSpec, Manifest, batch_indices, open_split
from .evaluation import extract_features, knn_predict, topk_accuracy
from .exceptions import ConfigError, IngestError, NumericError
from .models import StudentTeacherPair, forward_embed, init_pair, l2_normalize, predictor_forward
from .relational import (
    MemoryQueue, cosine_loss, ema_update, entropy, info_nce_loss, relation_distribution, relational_loss,
)

logger = logging.getLogger(__name__)


@dataclass
class TrainState:
    pair: StudentTeacherPair
    queue: MemoryQueue
    optimizer: torch.optim.Optimizer
    epoch: int = 0
    global_step: int = 0


@dataclass
class TrainResult:
    state: TrainState
    config: ExperimentConfig
    history: list = field(default_factory=list)
    warnings: list = field(default_factory=list)
    checkpoint: Path | None = None


def make_optimizer(student: torch.nn.Module, config: ExperimentConfig) -> torch.optim.SGD:
    """SGD with momentum; weight decay on weight matrices/kernels only, not biases or BN affines."""
    decay, no_decay = [], []
    for _, p in student.named_parameters():
        if not p.requires_grad:
            continue
        (decay if p.ndim > 1 else no_decay).append(p)
    return torch.optim.SGD(
        [{"params": decay, "weight_decay": config.weight_decay}, {"params": no_decay, "weight_decay": 0.0}],
        lr=0.0, momentum=config.sgd_momentum,
    )


def init_state(config: ExperimentConfig) -> TrainState:
    predictor = config.predictor_hidden if config.objective == "byol_style" else None
    pair = init_pair(config.backbone, config.head, config.seed, config.ema_momentum, predictor)
    pair.student.to(config.device)
    pair.teacher.to(config.device)
    queue = MemoryQueue(config.queue_capacity, config.head.output_dim, device=config.device)
    return TrainState(pair, queue, make_optimizer(pair.student, config))


def _objective_loss(state: TrainState, z_t, z_s, config: ExperimentConfig):
    """Returns ``(loss, teacher_entropy)``; entropy is ``None`` for non-relational objectives."""
    if config.objective == "ressl":
        loss, p_t = relational_loss(z_t, z_s, state.queue, config.temps, return_teacher=True)
        return loss, float(entropy(p_t).mean())
    if config.objective == "info_nce":
        loss = torch.stack([info_nce_loss(z, z_t, state.queue, config.info_nce_tau) for z in z_s]).mean()
    else:
        loss = torch.stack([cosine_loss(predictor_forward(state.pair.student, z), z_t) for z in z_s]).mean()
    with torch.no_grad():
        h = float(entropy(relation_distribution(z_t, state.queue, config.tau_t)).mean())
    return loss, h


def train_step(state: TrainState, batch, config: ExperimentConfig, steps_in_epoch: int,
               policies=None, views=None) -> tuple[TrainState, dict]:
    """One optimisation step; ``views`` may supply precomputed ``(teacher, [students])`` tensors."""
    pair = state.pair
    if views is None:
        teacher_policy, student_policy = policies or config.policies()
        views = make_batch_views(batch.images, batch.ids, teacher_policy, student_policy,
                                 config.multicrop_sides, config.seed, state.epoch)
    x_t, x_s = views
    x_t = x_t.to(config.device, non_blocking=True)
    x_s = [x.to(config.device, non_blocking=True) for x in x_s]
    lr = lr_at(state.global_step, config, steps_in_epoch)
    for group in state.optimizer.param_groups:
        group["lr"] = lr

    pair.student.train()
    pair.teacher.train()
    with torch.no_grad():
        z_t = l2_normalize(forward_embed(pair.teacher, x_t, config.bn_groups))

    metrics = {"step": state.global_step, "epoch": state.epoch, "lr": lr}
    if state.queue.full:
        z_s = [l2_normalize(forward_embed(pair.student, x, 1)) for x in x_s]
        loss, h_t = _objective_loss(state, z_t, z_s, config)
        if not torch.isfinite(loss):
            raise NumericError(
                f"non-finite loss {loss.item()} at step {state.global_step} (epoch {state.epoch}, lr {lr})"
            )
        state.optimizer.zero_grad(set_to_none=True)
        loss.backward()
        state.optimizer.step()
        metrics.update(loss=loss.item(), teacher_entropy=h_t, warmup=False)
    else:
        metrics.update(loss=0.0, teacher_entropy=None, warmup=True)
    ema_update(pair)
    state.queue.enqueue(z_t)
    state.global_step += 1
    return state, metrics


class _EpochViews(torch.utils.data.Dataset):
    """Augmented views for one epoch's batches, so a DataLoader can build them in worker processes."""

    def __init__(self, dataset, order, policies, config: ExperimentConfig, epoch: int):
        self.dataset, self.order, self.policies = dataset, order, policies
        self.config, self.epoch = config, epoch

    def __len__(self):
        return len(self.order)

    def __getitem__(self, i):
        batch = self.dataset.take(self.order[i])
        views = make_batch_views(batch.images, batch.ids, *self.policies, self.config.multicrop_sides,
                                 self.config.seed, self.epoch)
        return batch, views


def _epoch_loader(dataset, order, policies, config: ExperimentConfig, epoch: int):
    views = _EpochViews(dataset, order, policies, config, epoch)
    if config.num_workers == 0:
        return (views[i] for i in range(len(views)))
    return torch.utils.data.DataLoader(views, batch_size=None, shuffle=False, num_workers=config.num_workers,
                                       collate_fn=lambda item: item, pin_memory=config.device != "cpu")


def _normalization_from(data, manifest: Manifest | None) -> dict:
    if manifest is not None and manifest.channel_mean:
        return {"mean": list(manifest.channel_mean), "std": list(manifest.channel_std)}
    pix = np.asarray(data.images, dtype=np.float64).reshape(-1, 3) / 255.0
    return {"mean": pix.mean(0).tolist(), "std": np.maximum(pix.std(0), 1e-6).tolist()}


class Trainer:
    """Runs pretraining for one config, writing metrics and checkpoints under ``out_dir``.

    ``dataset`` overrides the config's dataset with any object exposing
    ``__len__``/``take``/``images``. ``monitor`` is an optional
    ``(memory, test)`` pair of labeled datasets for the kNN monitor.
    """

    def __init__(self, config: ExperimentConfig, out_dir=None, dataset=None, monitor=None):
        manifest = None
        if dataset is None:
            if config.dataset is None:
                raise ConfigError("config has no dataset and none was passed")
            dataset, manifest = open_split(config.dataset)
        if config.normalization is None:
            config = config.override(normalization=_normalization_from(dataset, manifest))
        self.config = config
        self.dataset = dataset
        self.out_dir = None if out_dir is None else Path(out_dir)
        self.monitor = monitor
        if self.monitor is None and config.knn_every and config.dataset is not None:
            self.monitor = self._default_monitor(config.dataset)
        self.steps_in_epoch = len(dataset) // config.batch_size
        if self.steps_in_epoch == 0:
            raise ConfigError(f"batch_size {config.batch_size} exceeds dataset size {len(dataset)}")
        self.policies = config.policies()

    @staticmethod
    def _default_monitor(spec: DatasetSpec):
        try:
            memory = open_split(spec.with_split("train"), verify=False)[0]
            test = open_split(spec.with_split("test"), verify=False)[0]
        except IngestError as exc:
            logger.warning("kNN monitor disabled: %s", exc)
            return None
        return memory, test

    # -- persistence ------------------------------------------------------
    @property
    def metrics_path(self) -> Path | None:
        return None if self.out_dir is None else self.out_dir / "metrics.jsonl"

    def _metadata(self, state: TrainState, extra=None) -> dict:
        meta = {
            "config": self.config.to_dict(),
            "config_hash": self.config.hash(),
            "epoch": state.epoch,
            "step": state.global_step,
            "steps_per_epoch": self.steps_in_epoch,
        }
        meta.update(extra or {})
        return meta

    def save(self, state: TrainState, path, extra=None) -> Path:
        return save_checkpoint(
            path,
            metadata=self._metadata(state, extra),
            student=state.pair.student.state_dict(),
            teacher=state.pair.teacher.state_dict(),
            optimizer=state.optimizer.state_dict(),
            queue=state.queue.state_dict(),
            rng={"torch": torch.random.get_rng_state()},
        )

    def restore(self, path) -> TrainState:
        ckpt = Checkpoint(path)
        if ckpt.metadata.get("config_hash") != self.config.hash():
            raise ConfigError(f"checkpoint {path} was written by a different config")
        state = init_state(self.config)
        state.pair.student.load_state_dict(ckpt.student())
        state.pair.teacher.load_state_dict(ckpt.teacher())
        state.optimizer.load_state_dict(ckpt.optimizer())
        state.queue.load_state_dict(ckpt.queue())
        rng = ckpt.rng()
        if rng is not None:
            torch.random.set_rng_state(rng["torch"])
        state.epoch = ckpt.metadata["epoch"]
        state.global_step = ckpt.metadata["step"]
        return state

    def _emit(self, record: dict, history: list) -> None:
        history.append(record)
        if self.metrics_path is not None:
            with open(self.metrics_path, "a") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")

    def _truncate_metrics(self, state: TrainState) -> list:
        kept = []
        if self.metrics_path is None or not self.metrics_path.exists():
            return kept
        for line in self.metrics_path.read_text().splitlines():
            rec = json.loads(line)
            if rec["kind"] == "step" and rec["step"] >= state.global_step:
                continue
            if rec["kind"] in ("epoch", "warning") and rec["epoch"] >= state.epoch:
                continue
            kept.append(rec)
        self.metrics_path.write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in kept))
        return kept

    def _rotate(self, state: TrainState) -> None:
        ckpt_dir = self.out_dir / "checkpoints"
        self.save(state, ckpt_dir / f"epoch_{state.epoch:04d}.ckpt")
        epochs = sorted(ckpt_dir.glob("epoch_*.ckpt"))
        for old in epochs[: -self.config.keep_checkpoints]:
            old.unlink()

    # -- monitoring -------------------------------------------------------
    def knn_top1(self, state: TrainState) -> float | None:
        if self.monitor is None:
            return None
        memory, test = self.monitor
        mean, std = self.config.normalization["mean"], self.config.normalization["std"]
        side = self.config.image_side
        backbone = state.pair.teacher.backbone
        keep = memory.labels != UNLABELED
        mem_x = extract_features(backbone, memory, side, mean, std)[keep]
        test_x = extract_features(backbone, test, side, mean, std)
        classes = int(max(memory.labels.max(), test.labels.max())) + 1
        k = min(self.config.knn_k, len(mem_x))
        scores = knn_predict(test_x, mem_x, memory.labels[keep], classes, k, self.config.knn_temperature)
        return topk_accuracy(scores, np.asarray(test.labels), 1)

    def collapse_check(self, epoch_records: list, epoch: int) -> dict | None:
        """Warn when the teacher entropy over the last quarter of an epoch sits at either extreme.

        Near zero: the target has become one-hot on a single queue entry. Near
        ``log K``: every queue entry looks alike to the teacher (constant embeddings).
        """
        ents = [r["teacher_entropy"] for r in epoch_records if r.get("teacher_entropy") is not None]
        if not ents:
            return None
        tail = ents[-max(1, len(ents) // 4):]
        mean = float(np.mean(tail))
        log_k = math.log(self.config.queue_capacity)
        ratio = mean / log_k
        if ratio < self.config.collapse_low or ratio > self.config.collapse_high:
            msg = (f"possible collapse in epoch {epoch}: teacher entropy {mean:.4f} is "
                   f"{ratio:.3f} x log K (healthy range {self.config.collapse_low}..{self.config.collapse_high})")
            logger.warning(msg)
            return {"kind": "warning", "epoch": epoch, "warning": "collapse",
                    "teacher_entropy": mean, "entropy_ratio": ratio, "message": msg}
        return None

    # -- main loop --------------------------------------------------------
    def run(self, resume: bool = False, max_steps: int | None = None, progress=None) -> TrainResult:
        config = self.config
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            config.save(self.out_dir / "config.yaml")
        last = None if self.out_dir is None else self.out_dir / "last.ckpt"
        if resume and last is not None and last.exists():
            state = self.restore(last)
            history = self._truncate_metrics(state)
            logger.info("resumed from %s at step %d", last, state.global_step)
        else:
            state = init_state(config)
            history = []
            if self.metrics_path is not None and self.metrics_path.exists():
                self.metrics_path.unlink()
        result = TrainResult(state, config, history)
        best = -1.0
        total = config.epochs * self.steps_in_epoch
        stop_at = total if max_steps is None else min(total, max_steps)

        try:
            while state.global_step < stop_at:
                epoch = state.epoch
                offset = state.global_step - epoch * self.steps_in_epoch
                order = list(batch_indices(len(self.dataset), config.batch_size, config.seed + epoch, True))
                epoch_records = [r for r in history if r["kind"] == "step" and r["epoch"] == epoch]
                for batch, views in _epoch_loader(self.dataset, order[offset:], self.policies, config, epoch):
                    if state.global_step >= stop_at:
                        break
                    try:
                        state, metrics = train_step(state, batch, config, self.steps_in_epoch, views=views)
                    except NumericError:
                        self._snapshot(state, batch)
                        raise
                    record = {"kind": "step", **metrics}
                    self._emit(record, history)
                    epoch_records.append(record)
                    if progress is not None:
                        progress(record)
                if state.global_step - epoch * self.steps_in_epoch < self.steps_in_epoch:
                    break  # stopped mid-epoch
                state.epoch += 1
                losses = [r["loss"] for r in epoch_records if not r.get("warmup")]
                ents = [r["teacher_entropy"] for r in epoch_records if r.get("teacher_entropy") is not None]
                rec = {"kind": "epoch", "epoch": epoch,
                       "loss_mean": float(np.mean(losses)) if losses else None,
                       "teacher_entropy_mean": float(np.mean(ents)) if ents else None}
                if config.knn_every and (epoch + 1) % config.knn_every == 0:
                    rec["knn_top1"] = self.knn_top1(state)
                warning = self.collapse_check(epoch_records, epoch)
                if warning is not None:
                    result.warnings.append(warning)
                    self._emit(warning, history)
                self._emit(rec, history)
                if self.out_dir is not None:
                    self._rotate(state)
                    self.save(state, last)
                    if rec.get("knn_top1") is not None and rec["knn_top1"] > best:
                        best = rec["knn_top1"]
                        self.save(state, self.out_dir / "checkpoints" / "best.ckpt", {"knn_top1": best})
        except KeyboardInterrupt:
            if last is not None:
                self.save(state, last)
            raise
        if self.out_dir is not None:
            self.save(state, last)
            if state.global_step >= total:
                result.checkpoint = self.save(state, self.out_dir / "final.ckpt")
            else:
                result.checkpoint = last
        result.warnings = [r for r in history if r["kind"] == "warning"]
        return result

    def _snapshot(self, state: TrainState, batch) -> None:
        if self.out_dir is None:
            return
        snap = {"step": state.global_step, "epoch": state.epoch, "batch_ids": [int(i) for i in batch.ids],
                "lr": lr_at(state.global_step, self.config, self.steps_in_epoch),
                "student_param_norms": {n: p.detach().norm().item() for n, p in state.pair.student.named_parameters()}}
        (self.out_dir / "nan_snapshot.json").write_text(json.dumps(snap, indent=2))
        self.save(state, self.out_dir / "nan_snapshot.ckpt")


def train(config: ExperimentConfig, out_dir, resume: bool = False, max_steps: int | None = None,
          dataset=None) -> TrainResult:
    return Trainer(config, out_dir, dataset=dataset).run(resume=resume, max_steps=max_steps)


def read_metrics(path) -> list:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]

