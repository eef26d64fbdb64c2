"""Stage-wise training: schedules, freeze sets, text-feature caching,
checkpointing, and seeded reproducibility.

Stage 1 trains only the prompt tokens on visible batches and caches the
per-identity text features on completion. Stage 2 trains only the shared
encoder on infrared batches against the cached text features. Stage 3 trains
the modality-specific encoders, text encoder, prompts, and classifier with
the shared encoder frozen, recomputing the full text-feature table each step.

All data-dependent randomness is derived from (seed, stage, epoch, index),
so training interrupted at an epoch boundary and resumed from a checkpoint
is bit-identical to an uninterrupted run on one platform.
"""

from __future__ import annotations

import copy
import math
from bisect import bisect_right
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import losses
from .data import AugmentationConfig, CrossModalPKSampler, augment, sample_rng
from .errors import CheckpointError, TrainingDiverged, ValidationError
from .losses import HsaWeights, Stage3Batch
from .model import Stage, ThreeStreamModel, model_from_metadata

CHECKPOINT_KIND = "vireid-checkpoint"
CHECKPOINT_VERSION = 1

_STAGE_CODE = {Stage.TSG: 1, Stage.IFE: 2, Stage.HSA: 3}


@dataclass(frozen=True)
class Schedule:
    """Learning-rate schedule: linear warmup, then cosine decay to zero or
    stepwise decay at milestones."""

    kind: str = "warmup_cosine"
    base_lr: float = 3e-4
    warmup_start_lr: float = 1e-5
    warmup_epochs: int = 5
    total_epochs: int = 120
    milestones: tuple = ()
    decay: float = 0.1

    def validate(self):
        if self.kind not in ("warmup_cosine", "warmup_step"):
            raise ValidationError(f"unknown schedule kind {self.kind!r}")
        if self.base_lr <= 0 or self.warmup_start_lr <= 0:
            raise ValidationError("learning rates must be positive everywhere")
        if self.warmup_epochs < 0 or self.total_epochs <= 0:
            raise ValidationError("epoch counts must be non-negative / positive")
        if self.kind == "warmup_cosine" and self.warmup_epochs >= self.total_epochs:
            raise ValidationError("cosine schedule needs warmup_epochs < total_epochs")
        if list(self.milestones) != sorted(set(self.milestones)):
            raise ValidationError(f"milestones must be strictly increasing, got {self.milestones}")
        if not 0 < self.decay <= 1:
            raise ValidationError(f"decay must be in (0, 1], got {self.decay}")


def lr_at(schedule: Schedule, epoch: int, step_fraction: float = 0.0) -> float:
    """Learning rate at a (possibly fractional) epoch position."""
    e = epoch + step_fraction
    if e < schedule.warmup_epochs:
        span = schedule.base_lr - schedule.warmup_start_lr
        return schedule.warmup_start_lr + span * e / schedule.warmup_epochs
    if schedule.kind == "warmup_cosine":
        progress = (e - schedule.warmup_epochs) / (schedule.total_epochs - schedule.warmup_epochs)
        return schedule.base_lr * 0.5 * (1.0 + math.cos(math.pi * min(progress, 1.0)))
    return schedule.base_lr * schedule.decay ** bisect_right(list(schedule.milestones), epoch)


@dataclass
class StagePlan:
    """Per-stage training recipe."""

    stage: Stage
    epochs: int
    schedule: Schedule
    seed: int = 0
    weight_decay: float = 5e-4
    unique_identity_denominator: bool = False
    hsa_weights: HsaWeights = HsaWeights()
    text_refresh_every: int = 1

    def validate(self):
        self.stage = Stage(self.stage)
        if self.epochs <= 0:
            raise ValidationError(f"epochs must be positive, got {self.epochs}")
        self.schedule.validate()
        if self.weight_decay < 0:
            raise ValidationError("weight_decay must be >= 0")
        if self.text_refresh_every < 1:
            raise ValidationError("text_refresh_every must be >= 1")


@dataclass
class TrainingData:
    """Samples plus the batch sampler and augmentation recipe."""

    samples: list
    sampler: CrossModalPKSampler
    augmentation: AugmentationConfig
    num_identities: int


def make_training_data(samples, num_ids_per_batch: int, instances_per_modality: int,
                       seed: int, augmentation: AugmentationConfig) -> TrainingData:
    augmentation.validate()
    sampler = CrossModalPKSampler(samples, num_ids_per_batch, instances_per_modality, seed=seed)
    return TrainingData(samples=list(samples), sampler=sampler, augmentation=augmentation,
                        num_identities=len(sampler.identities))


@dataclass
class CheckpointRecord:
    """Everything needed to resume bit-identically: parameters, optimizer
    moments, stage position, rng states, and the stage-1 text cache."""

    stage: str
    epoch: int  # completed epochs within the stage
    model_state: dict
    model_metadata: dict
    optimizer_state: dict | None = None
    text_cache: torch.Tensor | None = None
    config_hash: str | None = None
    rng: dict = field(default_factory=dict)


def _capture_rng() -> dict:
    return {"torch": torch.get_rng_state(), "numpy": np.random.get_state()}


def _restore_rng(rng: dict) -> None:
    if "torch" in rng:
        torch.set_rng_state(torch.as_tensor(rng["torch"], dtype=torch.uint8))
    if "numpy" in rng:
        np.random.set_state(rng["numpy"])


def checkpoint_save(record: CheckpointRecord, path) -> str:
    if not str(path):
        raise OSError("empty checkpoint path")
    payload = {
        "kind": CHECKPOINT_KIND,
        "version": CHECKPOINT_VERSION,
        "stage": record.stage,
        "epoch": record.epoch,
        "model_state": record.model_state,
        "model_metadata": record.model_metadata,
        "optimizer_state": record.optimizer_state,
        "text_cache": record.text_cache,
        "config_hash": record.config_hash,
        "rng": record.rng,
    }
    torch.save(payload, str(path))
    return str(path)


def checkpoint_load(path, expected_config_hash: str | None = None) -> CheckpointRecord:
    if not str(path):
        raise OSError("empty checkpoint path")
    payload = torch.load(str(path), map_location="cpu", weights_only=False)
    if not isinstance(payload, dict) or payload.get("kind") != CHECKPOINT_KIND:
        raise CheckpointError(f"{path} is not a training checkpoint")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"checkpoint version {payload.get('version')} unsupported "
            f"(expected {CHECKPOINT_VERSION})")
    record = CheckpointRecord(
        stage=payload["stage"], epoch=payload["epoch"], model_state=payload["model_state"],
        model_metadata=payload["model_metadata"], optimizer_state=payload["optimizer_state"],
        text_cache=payload["text_cache"], config_hash=payload["config_hash"],
        rng=payload.get("rng", {}))
    if expected_config_hash is not None and record.config_hash is not None \
            and record.config_hash != expected_config_hash:
        raise CheckpointError(
            f"checkpoint was written under config {record.config_hash}, "
            f"current config is {expected_config_hash}")
    return record


def restore_model(record: CheckpointRecord) -> ThreeStreamModel:
    model = model_from_metadata(record.model_metadata)
    model.load_state_dict(record.model_state)
    return model


def initial_checkpoint(model: ThreeStreamModel, config_hash: str | None = None) -> CheckpointRecord:
    """Record of an untrained model (the no-stages ablation baseline)."""
    return CheckpointRecord(stage="none", epoch=0, model_state=_snapshot(model),
                            model_metadata=model.archive_metadata(),
                            config_hash=config_hash, rng=_capture_rng())


def _snapshot(model) -> dict:
    return {k: v.detach().clone() for k, v in model.state_dict().items()}


def build_stage_optimizer(model: ThreeStreamModel, plan: StagePlan):
    """Adam over exactly the stage's trainable set; weight decay applies to
    encoder/classifier parameters, never to prompt tokens."""
    trainable = model.set_stage_trainable(plan.stage)
    decay, no_decay = [], []
    for name, param in model.named_parameters():
        if name not in trainable:
            continue
        (no_decay if name.startswith("prompt_bank.") else decay).append(param)
    groups = []
    if decay:
        groups.append({"params": decay, "weight_decay": plan.weight_decay})
    if no_decay:
        groups.append({"params": no_decay, "weight_decay": 0.0})
    if not any(p.numel() for g in groups for p in g["params"]):
        return None
    return torch.optim.Adam(groups, lr=plan.schedule.base_lr, betas=(0.9, 0.999))


def load_image_batch(data: TrainingData, indices, plan: StagePlan, epoch: int):
    """Augmented image tensor (B, 3, H, W) and labels for sample indices.

    Augmentation randomness is keyed by (seed, stage, epoch, sample index) so
    batches are reproducible regardless of interruption or prefetch order.
    """
    stage_code = _STAGE_CODE[plan.stage]
    arrays, labels = [], []
    for idx in indices:
        s = data.samples[idx]
        rng = sample_rng(plan.seed, stage_code, int(epoch), int(idx))
        arrays.append(augment(s, data.augmentation, rng))
        labels.append(s.identity)
    images = torch.from_numpy(np.stack(arrays)).permute(0, 3, 1, 2).contiguous()
    return images, torch.tensor(labels, dtype=torch.long)


def _check_finite(loss, plan, epoch, step, terms=None):
    if not torch.isfinite(loss):
        detail = "" if terms is None else " terms=" + str(
            {k: float(v.detach()) for k, v in terms.items()})
        raise TrainingDiverged(
            f"stage {plan.stage.value} epoch {epoch} step {step}: non-finite loss{detail}")


def _run_stage(model, data, plan, step_fn, *, run_dir=None, resume=None,
               log_fn=None, config_hash=None, extra_record=None):
    """Shared epoch/step loop: freeze bookkeeping, lr setting, divergence
    checks, per-epoch checkpoints."""
    plan.validate()
    optimizer = build_stage_optimizer(model, plan)
    start_epoch = 0
    if resume is not None:
        if resume.stage != plan.stage.value:
            raise CheckpointError(
                f"checkpoint is for stage {resume.stage!r}, expected {plan.stage.value!r}")
        model.load_state_dict(resume.model_state)
        if optimizer is not None and resume.optimizer_state is not None:
            optimizer.load_state_dict(resume.optimizer_state)
        if resume.rng:
            _restore_rng(resume.rng)
        start_epoch = resume.epoch
    stage_dir = None
    if run_dir is not None:
        stage_dir = Path(run_dir) / f"stage{_STAGE_CODE[plan.stage]}"
        stage_dir.mkdir(parents=True, exist_ok=True)

    def snapshot_record(epoch_done):
        return CheckpointRecord(
            stage=plan.stage.value, epoch=epoch_done, model_state=_snapshot(model),
            model_metadata=model.archive_metadata(),
            optimizer_state=copy.deepcopy(optimizer.state_dict()) if optimizer is not None else None,
            config_hash=config_hash, rng=_capture_rng(),
            **(extra_record() if extra_record else {}))

    record = None
    for epoch in range(start_epoch, plan.epochs):
        batches = data.sampler.batches(epoch)
        steps = len(batches)
        for step, batch in enumerate(batches):
            lr = lr_at(plan.schedule, epoch, step / steps)
            if optimizer is not None:
                for group in optimizer.param_groups:
                    group["lr"] = lr
                optimizer.zero_grad(set_to_none=True)
            loss, terms = step_fn(batch, epoch, step)
            _check_finite(loss, plan, epoch, step, terms)
            if optimizer is not None:
                loss.backward()
                optimizer.step()
            if log_fn is not None:
                log_fn({"stage": plan.stage.value, "epoch": epoch, "step": step,
                        "lr": lr, "loss": float(loss.detach()),
                        **{f"loss_{k}": float(v.detach()) for k, v in (terms or {}).items()}})
        record = snapshot_record(epoch + 1)
        if stage_dir is not None:
            checkpoint_save(record, stage_dir / f"epoch_{epoch + 1:04d}.ckpt")
    if record is None:  # resumed at the final epoch; nothing left to run
        record = snapshot_record(plan.epochs)
    return record


def run_stage_tsg(model: ThreeStreamModel, data: TrainingData, plan: StagePlan, *,
                  run_dir=None, resume=None, log_fn=None, config_hash=None) -> CheckpointRecord:
    """Stage 1: learn prompt tokens on visible batches; everything else is
    frozen. Caches the full text-feature table on completion."""
    scale = float(model.logit_scale)

    def step_fn(batch, epoch, step):
        images, labels = load_image_batch(data, batch.visible_indices, plan, epoch)
        with torch.no_grad():
            _, img_norm = model.visible_features(images)
        text = model.text_features(labels)
        i2t = losses.contrastive_i2t(img_norm, text, labels, scale,
                                     plan.unique_identity_denominator)
        t2i = losses.contrastive_t2i(img_norm, text, labels, scale)
        return i2t + t2i, {"v2t": i2t, "t2v": t2i}

    record = _run_stage(model, data, plan, step_fn, run_dir=run_dir, resume=resume,
                        log_fn=log_fn, config_hash=config_hash)
    with torch.no_grad():
        record.text_cache = model.all_text_features().detach().clone()
    if run_dir is not None:
        stage_dir = Path(run_dir) / "stage1"
        torch.save(record.text_cache, stage_dir / "text_cache.pt")
        checkpoint_save(record, stage_dir / f"epoch_{plan.epochs:04d}.ckpt")
    return record


def run_stage_ife(model: ThreeStreamModel, data: TrainingData, plan: StagePlan,
                  text_cache: torch.Tensor, *, run_dir=None, resume=None, log_fn=None,
                  config_hash=None) -> CheckpointRecord:
    """Stage 2: train only the shared encoder on infrared batches against the
    cached stage-1 text features."""
    if text_cache is None:
        raise ValidationError("stage 2 requires the stage-1 text feature cache")
    if text_cache.shape[0] != model.num_identities:
        raise ValidationError(
            f"text cache has {text_cache.shape[0]} rows for {model.num_identities} identities")
    scale = float(model.logit_scale)
    cache = text_cache.detach()

    def step_fn(batch, epoch, step):
        images, labels = load_image_batch(data, batch.infrared_indices, plan, epoch)
        with torch.no_grad():
            hidden = model.infrared_encoder(images)
        raw = model.shared_encoder(hidden)
        normed = torch.nn.functional.normalize(raw, dim=1)
        text = cache[labels]
        r2t = losses.contrastive_i2t(normed, text, labels, scale,
                                     plan.unique_identity_denominator)
        t2r = losses.contrastive_t2i(normed, text, labels, scale)
        return r2t + t2r, {"r2t": r2t, "t2r": t2r}

    return _run_stage(model, data, plan, step_fn, run_dir=run_dir, resume=resume,
                      log_fn=log_fn, config_hash=config_hash,
                      extra_record=lambda: {"text_cache": cache.clone()})


def run_stage_hsa(model: ThreeStreamModel, data: TrainingData, plan: StagePlan, *,
                  run_dir=None, resume=None, log_fn=None, config_hash=None) -> CheckpointRecord:
    """Stage 3: fine-tune both modality branches, the text encoder, prompts,
    and classifier with the shared encoder frozen. The text-feature table is
    recomputed every ``text_refresh_every`` steps (cache resets per epoch)."""
    scale = float(model.logit_scale)
    weights = plan.hsa_weights
    cached_text = {"value": None}

    def step_fn(batch, epoch, step):
        v_images, v_labels = load_image_batch(data, batch.visible_indices, plan, epoch)
        r_images, r_labels = load_image_batch(data, batch.infrared_indices, plan, epoch)
        v_raw, v_norm = model.visible_features(v_images)
        r_raw, r_norm = model.infrared_features(r_images)
        if step % plan.text_refresh_every == 0:
            all_text = model.all_text_features()
            cached_text["value"] = all_text.detach()
        else:
            all_text = cached_text["value"]
        logits_v = model.classify(v_raw)
        logits_r = model.classify(r_raw)
        batch3 = Stage3Batch(visible_feats=v_norm, infrared_feats=r_norm,
                             visible_raw=v_raw, infrared_raw=r_raw,
                             visible_labels=v_labels, infrared_labels=r_labels)
        terms = losses.hsa_loss_terms(batch3, all_text, logits_v, logits_r, weights,
                                      scale, num_identities=model.num_identities)
        total = (weights.lambda1 * terms["ce_v2t"] + weights.lambda2 * terms["ce_r2t"]
                 + terms["id"] + terms["wrt"])
        return total, terms

    return _run_stage(model, data, plan, step_fn, run_dir=run_dir, resume=resume,
                      log_fn=log_fn, config_hash=config_hash)


STAGE_RUNNERS = {Stage.TSG: run_stage_tsg, Stage.IFE: run_stage_ife, Stage.HSA: run_stage_hsa}
