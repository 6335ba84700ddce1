"""Two-stage optimisation: single-person pretraining, then frozen-backbone QGAB training."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .data_pipeline import BatchSampler, DatasetManifest, TrainBatch
from .errors import CheckpointError, ConfigError, ContractError, TrainingAborted
from .losses import LossBundle, LossWeights, id_loss, mps_loss, total_loss
from .model_core import (
    BackboneConfig,
    PISNet,
    apply_corruption,
    corruption_plan,
    embed,
    gram_forward,
    qgab_forward,
    stack_plans,
)

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "pisnet-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    batch_size: int = 64
    base_lr: float = 0.00035
    lr_decay: float = 0.1
    decay_epoch: int = 20
    total_epochs: int = 60
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    stage: str = "qgab"
    momentum: float = 0.9
    weight_decay: float = 0.0
    use_gram: bool = True
    use_mpsl: bool = True
    guidance_channels: int = None
    head_scale: float = 16.0  # None: raw embeddings into the ID head
    head_lr_scale: float = 1.0  # ID head learning rate relative to the attention block
    steps_per_epoch: int = None  # None: one pass over the training galleries
    pretrain_epochs: int = 20
    pretrain_lr: float = None  # None: base_lr
    pretrain_decay_epoch: int = 20
    pretrain_batch_size: int = 64
    image_size: tuple = (64, 32)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        if isinstance(self.backbone, dict):
            bb = dict(self.backbone)
            for k in ("channels", "strides"):
                if k in bb:
                    bb[k] = tuple(bb[k])
            self.backbone = BackboneConfig(**bb)
        self.image_size = tuple(self.image_size)
        if self.stage not in ("pretrain", "qgab"):
            raise ConfigError(f"unknown stage {self.stage!r}")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be at least 2")
        if self.decay_epoch >= self.total_epochs:
            raise ConfigError("decay_epoch must be smaller than total_epochs")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


def learning_rate(cfg: TrainConfig, epoch: int, stage: str = "qgab") -> float:
    """Staircase schedule ``base * decay ** (epoch // decay_epoch)``."""
    if stage == "pretrain":
        base = cfg.base_lr if cfg.pretrain_lr is None else cfg.pretrain_lr
        return base * cfg.lr_decay ** (epoch // cfg.pretrain_decay_epoch)
    return cfg.base_lr * cfg.lr_decay ** (epoch // cfg.decay_epoch)


def param_digest(module: torch.nn.Module) -> str:
    """SHA-256 over every parameter and buffer, in state-dict order."""
    h = hashlib.sha256()
    for name, t in module.state_dict().items():
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


class MetricsLog:
    """Line-delimited JSON metrics, kept in memory and optionally on disk."""

    def __init__(self, path=None, append=False):
        self.records = []
        self.path = Path(path) if path else None
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            if not append:
                self.path.write_text("")

    def write(self, **record):
        self.records.append(record)
        if self.path:
            with self.path.open("a") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# Features
# ---------------------------------------------------------------------------

def load_images(manifest: DatasetManifest, indices, size) -> torch.Tensor:
    return torch.from_numpy(np.stack([manifest.load_image(i, size) for i in indices]))


class FeatureBank:
    """Backbone maps for a fixed set of manifest entries.

    Only valid while the backbone stays frozen; training of the attention
    block reads maps from here instead of re-running the backbone.
    """

    def __init__(self, model: PISNet, manifest: DatasetManifest, indices, size, chunk=256):
        self.indices = list(indices)
        self.pos = {i: k for k, i in enumerate(self.indices)}
        was_training = model.backbone.training
        model.backbone.eval()
        maps = []
        with torch.no_grad():
            for s in range(0, len(self.indices), chunk):
                maps.append(model.features(load_images(manifest, self.indices[s:s + chunk], size)))
        model.backbone.train(was_training)
        self.maps = torch.cat(maps) if maps else torch.empty(0)

    def __getitem__(self, entry_indices) -> torch.Tensor:
        return self.maps[torch.tensor([self.pos[i] for i in entry_indices], dtype=torch.long)]


# ---------------------------------------------------------------------------
# Stage 1: backbone pretraining
# ---------------------------------------------------------------------------

def train_classes(manifest: DatasetManifest) -> tuple:
    ids = sorted({manifest.entries[i].ids[0] for i in manifest.select("train")
                  if manifest.entries[i].kind == "single"})
    return tuple(ids)


def build_model(cfg: TrainConfig, class_ids) -> PISNet:
    torch.manual_seed(cfg.seed)
    model = PISNet(len(class_ids), cfg.backbone, cfg.guidance_channels, cfg.head_scale)
    model.class_ids = tuple(class_ids)
    return model


def pretrain_backbone(manifest: DatasetManifest, cfg: TrainConfig, model: PISNet = None,
                      metrics: MetricsLog = None) -> PISNet:
    """Train backbone and ID head with cross-entropy on single-person train crops."""
    class_ids = train_classes(manifest)
    if len(class_ids) < 2:
        raise ConfigError(f"pretraining needs at least 2 training identities, found {len(class_ids)}")
    metrics = metrics or MetricsLog()
    model = model or build_model(cfg, class_ids)
    model.backbone.unfreeze()
    label_of = {p: k for k, p in enumerate(class_ids)}
    idx = [i for i in manifest.select("train") if manifest.entries[i].kind == "single"]
    images = load_images(manifest, idx, cfg.image_size)
    labels = torch.tensor([label_of[manifest.entries[i].ids[0]] for i in idx])
    params = list(model.backbone.parameters()) + list(model.classifier.parameters())
    opt = torch.optim.SGD(params, lr=learning_rate(cfg, 0, "pretrain"),
                          momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    rng = np.random.default_rng(cfg.seed)
    step = 0
    for epoch in range(cfg.pretrain_epochs):
        lr = learning_rate(cfg, epoch, "pretrain")
        for g in opt.param_groups:
            g["lr"] = lr
        model.backbone.train()
        perm = torch.from_numpy(rng.permutation(len(idx)))
        correct, seen, total = 0, 0, 0.0
        for s in range(0, len(idx), cfg.pretrain_batch_size):
            b = perm[s:s + cfg.pretrain_batch_size]
            if len(b) < 2:  # batch norm needs two samples
                continue
            logits = model.logits(embed(model.features(images[b])))
            loss = id_loss(logits, labels[b])
            if not torch.isfinite(loss):
                raise TrainingAborted("l_id", {"l_id": float(loss), "epoch": epoch, "step": step})
            opt.zero_grad()
            loss.backward()
            opt.step()
            correct += int((logits.argmax(1) == labels[b]).sum())
            seen += len(b)
            total += float(loss.detach()) * len(b)
            step += 1
        metrics.write(stage="pretrain", epoch=epoch, step=step, l_id=total / max(seen, 1),
                      acc=correct / max(seen, 1), lr=lr)
    model.backbone.eval()
    model.backbone_trained = True
    return model


# ---------------------------------------------------------------------------
# Stage 2: attention training
# ---------------------------------------------------------------------------

@dataclass
class TrainState:
    model: PISNet
    optimizer: torch.optim.Optimizer
    cfg: TrainConfig
    rng: np.random.Generator
    epoch: int = 0
    step: int = 0
    bank: FeatureBank = None
    metrics: MetricsLog = field(default_factory=MetricsLog)


def _qgab_optimizer(model: PISNet, cfg: TrainConfig):
    groups = [
        {"params": list(model.qgab.parameters()), "lr_scale": 1.0},
        {"params": list(model.classifier.parameters()), "lr_scale": cfg.head_lr_scale},
    ]
    return torch.optim.SGD(groups, lr=cfg.base_lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)


def init_state(model: PISNet, cfg: TrainConfig, metrics: MetricsLog = None) -> TrainState:
    if not model.backbone_trained:
        raise ContractError("the attention stage needs a pretrained backbone")
    model.backbone.freeze()
    return TrainState(model, _qgab_optimizer(model, cfg), cfg, np.random.default_rng(cfg.seed),
                      metrics=metrics or MetricsLog())


def batch_losses(model: PISNet, bank: FeatureBank, batch: TrainBatch, cfg: TrainConfig) -> LossBundle:
    """Forward pass of one MPSL-aware batch; returns tensor-valued components."""
    g = bank[batch.galleries]
    qa = bank[batch.query_a]
    label_of = {p: k for k, p in enumerate(model.class_ids)}
    labels = torch.tensor([label_of[p] for p in batch.ids_a])

    refined_a, _ = qgab_forward(g, qa, model.qgab)
    feat_a = embed(refined_a)
    l_g = id_loss(model.logits(feat_a), labels)
    zero = feat_a.new_zeros(())
    l_q = l_m = zero
    if cfg.use_gram:
        src = bank[batch.sources]
        owner, index = stack_plans(
            [corruption_plan(lay, qa.shape[-2:], g.shape[-2:]) for lay in batch.layouts]
        )
        corrupted = apply_corruption(qa, src, owner, index)
        reversed_q = gram_forward(refined_a, corrupted, model.qgab)
        l_q = id_loss(model.logits(embed(reversed_q)), labels)
    if cfg.use_mpsl:
        refined_b, _ = qgab_forward(g, bank[batch.query_b], model.qgab)
        l_m = mps_loss(feat_a, embed(refined_b), embed(qa), cfg.weights).mean()
    for name, value in (("l_g", l_g), ("l_q", l_q), ("l_m", l_m)):
        if not torch.isfinite(value):
            raise TrainingAborted(name, {k: float(torch.as_tensor(v).detach())
                                         for k, v in (("l_g", l_g), ("l_q", l_q), ("l_m", l_m))})
    return total_loss(l_g, l_q, l_m, cfg.weights)


def train_step(batch: TrainBatch, state: TrainState) -> tuple:
    """One optimizer step on ``batch``; returns ``(LossBundle, state)``."""
    model = state.model
    if not model.backbone.frozen:
        raise ContractError("backbone must be frozen during the attention stage")
    lr = learning_rate(state.cfg, state.epoch)
    for g in state.optimizer.param_groups:
        g["lr"] = lr * g.get("lr_scale", 1.0)
    bundle = batch_losses(model, state.bank, batch, state.cfg)
    if not torch.isfinite(bundle.l_final):
        raise TrainingAborted("l_final", bundle.as_floats())
    state.optimizer.zero_grad()
    bundle.l_final.backward()
    state.optimizer.step()
    state.step += 1
    state.metrics.write(epoch=state.epoch, step=state.step, lr=lr, **bundle.as_floats())
    return bundle, state


def steps_per_epoch(sampler: BatchSampler, cfg: TrainConfig) -> int:
    if cfg.steps_per_epoch:
        return cfg.steps_per_epoch
    return max(1, math.ceil(len(sampler.layout_pool) / cfg.batch_size))


def train_qgab(manifest: DatasetManifest, model: PISNet, cfg: TrainConfig, state: TrainState = None,
               metrics: MetricsLog = None, until_epoch: int = None, on_epoch_end=None) -> TrainState:
    """Train the attention block and ID head with the backbone frozen.

    Resumes from ``state`` when given. ``until_epoch`` stops early (used to
    split a run for checkpoint/resume); ``on_epoch_end(state)`` is called
    after every completed epoch.
    """
    if cfg.stage != "qgab":
        raise ConfigError("train_qgab needs cfg.stage == 'qgab'")
    state = state or init_state(model, cfg, metrics)
    model = state.model
    if not model.backbone.frozen:
        raise ContractError("backbone must be frozen during the attention stage")
    sampler = BatchSampler(manifest, "train")
    if state.bank is None:
        needed = sorted(set(sampler.all_singles) | set(sampler.layout_pool))
        state.bank = FeatureBank(model, manifest, needed, cfg.image_size)
    n_steps = steps_per_epoch(sampler, cfg)
    stop = cfg.total_epochs if until_epoch is None else min(until_epoch, cfg.total_epochs)
    model.qgab.train()
    while state.epoch < stop:
        for _ in range(n_steps):
            train_step(sampler.sample(cfg.batch_size, state.rng), state)
        state.epoch += 1
        if on_epoch_end is not None:
            on_epoch_end(state)
    if state.epoch >= cfg.total_epochs:
        model.qgab_trained = True
    return state


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(state: TrainState, path) -> Path:
    """Write ``state`` atomically (temp file + rename)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    m = state.model
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": json.dumps(state.cfg.to_dict(), sort_keys=True),
        "class_ids": list(m.class_ids),
        "flags": {"backbone_trained": m.backbone_trained, "qgab_trained": m.qgab_trained,
                  "frozen": m.backbone.frozen},
        "backbone": m.backbone.state_dict(),
        "qgab": m.qgab.state_dict(),
        "classifier": m.classifier.state_dict(),
        "optimizer": state.optimizer.state_dict() if state.optimizer is not None else None,
        "epoch": state.epoch,
        "step": state.step,
        "rng": json.dumps(state.rng.bit_generator.state, sort_keys=True),
    }
    tmp = path.with_name(path.name + ".tmp")
    torch.save(payload, tmp)
    os.replace(tmp, path)
    return path


def load_checkpoint(path) -> TrainState:
    path = Path(path)
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not a pisnet checkpoint")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"checkpoint version {payload.get('version')} != supported {CHECKPOINT_VERSION}"
        )
    try:
        cfg = TrainConfig.from_dict(json.loads(payload["config"]))
        model = PISNet(len(payload["class_ids"]), cfg.backbone, cfg.guidance_channels, cfg.head_scale)
        model.class_ids = tuple(payload["class_ids"])
        model.backbone.load_state_dict(payload["backbone"])
        model.qgab.load_state_dict(payload["qgab"])
        model.classifier.load_state_dict(payload["classifier"])
        flags = payload["flags"]
        model.backbone_trained = bool(flags["backbone_trained"])
        model.qgab_trained = bool(flags["qgab_trained"])
        if flags["frozen"]:
            model.backbone.freeze()
        else:
            model.backbone.eval()
        optimizer = None
        if payload["optimizer"] is not None:
            optimizer = _qgab_optimizer(model, cfg)
            optimizer.load_state_dict(payload["optimizer"])
        rng = np.random.default_rng()
        rng.bit_generator.state = json.loads(payload["rng"])
    except (KeyError, TypeError, ValueError, RuntimeError) as exc:
        raise CheckpointError(f"{path}: inconsistent checkpoint contents: {exc}") from exc
    return TrainState(model, optimizer, cfg, rng, epoch=int(payload["epoch"]), step=int(payload["step"]))


def pretrain_state(model: PISNet, cfg: TrainConfig) -> TrainState:
    """Wrap a freshly pretrained model so it can be checkpointed."""
    return TrainState(model, None, cfg, np.random.default_rng(cfg.seed))
