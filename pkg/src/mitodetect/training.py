"""Fold-wise training with early stopping and top-k checkpoint retention."""

from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Callable

import numpy as np
import torch
from torch import nn

from .augmentation import AugmentPolicy, normalize, resize, train_transform, val_transform, worker_seed
from .data_model import DatasetManifest, PatchRecord
from .geometry import DiskTargetSpec, render_disk_mask
from .lora import adapter_state_dict, lora_layers
from .losses import ComboLossWeights, FocalParams, combo_seg_loss, dice_coefficient, focal_loss
from .sampling import inverse_frequency_weights, plan_fraction_batches, weighted_draws
from .splitting import FoldPlan

log = logging.getLogger(__name__)

IMPROVEMENT_EPS = 1e-8


class TrainingError(RuntimeError):
    pass


@dataclass
class OptimizerConfig:
    name: str = "adamw"
    lr: float = 4e-4
    weight_decay: float = 0.01


@dataclass
class TrainConfig:
    track: str = "detection"
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    max_epochs: int = 200
    patience: int = 20
    top_k_checkpoints: int = 3
    batch_size: int = 8
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.optimizer, dict):
            self.optimizer = OptimizerConfig(**self.optimizer)
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.top_k_checkpoints < 1:
            raise ValueError("top_k_checkpoints must be >= 1")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")

    @classmethod
    def for_track(cls, track: str, **overrides) -> "TrainConfig":
        if track == "detection":
            base = dict(optimizer=OptimizerConfig("adamw", 4e-4, 0.01), patience=20, batch_size=8)
        elif track == "classification":
            base = dict(optimizer=OptimizerConfig("adam", 5e-5, 1e-5), patience=10, batch_size=16)
        else:
            raise ValueError(f"unknown track {track!r}")
        base.update(overrides)
        return cls(track=track, **base)

    def to_json(self) -> dict:
        return asdict(self)


@dataclass
class LossSpec:
    kind: str = "combo"  # "combo" for segmentation, "focal" for classification
    weights: ComboLossWeights = field(default_factory=ComboLossWeights)
    focal: FocalParams = field(default_factory=FocalParams)
    smooth: float = 1.0

    @classmethod
    def for_track(cls, track: str) -> "LossSpec":
        return cls(kind="combo" if track == "detection" else "focal")

    def __call__(self, probs: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
        if self.kind == "combo":
            return combo_seg_loss(probs, targets, self.weights, self.focal, self.smooth)[0]
        if self.kind == "focal":
            return focal_loss(probs, targets, self.focal)
        raise ValueError(f"unknown loss kind {self.kind!r}")


@dataclass
class SamplerSpec:
    kind: str = "fraction"  # "fraction" (Track 1) or "weighted" (Track 2)
    min_positive_fraction: float = 0.4

    @classmethod
    def for_track(cls, track: str) -> "SamplerSpec":
        return cls(kind="fraction" if track == "detection" else "weighted")


@dataclass
class CheckpointEntry:
    fold: int
    epoch: int
    val_loss: float
    path: str | None = None
    state: dict | None = field(default=None, repr=False, compare=False)

    def to_json(self) -> dict:
        return {"fold": self.fold, "epoch": self.epoch, "val_loss": self.val_loss, "path": self.path}

    def load_state(self) -> dict:
        if self.state is None:
            if self.path is None:
                raise TrainingError(f"checkpoint fold={self.fold} epoch={self.epoch} has no state")
            self.state = torch.load(self.path, map_location="cpu", weights_only=False)["state"]
        return self.state


@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    val_loss: float


@dataclass
class RunLedger:
    fold: int = 0
    epochs: list[EpochLog] = field(default_factory=list)
    checkpoints: list[CheckpointEntry] = field(default_factory=list)
    stop_reason: str | None = None
    best_epoch: int | None = None

    @property
    def best_val_loss(self) -> float:
        return min(e.val_loss for e in self.epochs)

    def to_json(self) -> dict:
        return {
            "fold": self.fold,
            "epochs": [asdict(e) for e in self.epochs],
            "checkpoints": [c.to_json() for c in self.checkpoints],
            "stop_reason": self.stop_reason,
            "best_epoch": self.best_epoch,
        }

    @classmethod
    def from_json(cls, d: dict) -> "RunLedger":
        return cls(
            d["fold"],
            [EpochLog(**e) for e in d["epochs"]],
            [CheckpointEntry(**c) for c in d["checkpoints"]],
            d.get("stop_reason"),
            d.get("best_epoch"),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "RunLedger":
        return cls.from_json(json.loads(Path(path).read_text()))


class EarlyStopping:
    """Counts epochs without a strict decrease (> 1e-8) of the monitored loss."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = math.inf
        self.best_epoch: int | None = None
        self.streak = 0

    def step(self, epoch: int, value: float) -> bool:
        """Record one epoch; return True when training should stop."""
        if value < self.best - IMPROVEMENT_EPS:
            self.best, self.best_epoch, self.streak = value, epoch, 0
        else:
            self.streak += 1
        return self.streak >= self.patience


class CheckpointRegistry:
    """Keeps exactly the ``k`` lowest-loss epochs seen so far.

    On equal loss the earlier epoch wins. Evicted checkpoint files are deleted.
    """

    def __init__(self, k: int, fold: int = 0, directory: Path | None = None):
        self.k = k
        self.fold = fold
        self.directory = directory
        self.entries: list[CheckpointEntry] = []

    def _qualifies(self, val_loss: float) -> bool:
        return len(self.entries) < self.k or val_loss < self.entries[-1].val_loss

    def offer(self, epoch: int, val_loss: float, snapshot: Callable[[], dict], meta: dict | None = None) -> bool:
        if not self._qualifies(val_loss):
            return False
        entry = CheckpointEntry(self.fold, epoch, val_loss, state=snapshot())
        if self.directory is not None:
            self.directory.mkdir(parents=True, exist_ok=True)
            entry.path = str(self.directory / f"fold{self.fold}_epoch{epoch:04d}.pt")
            torch.save({"state": entry.state, "fold": self.fold, "epoch": epoch,
                        "val_loss": val_loss, **(meta or {})}, entry.path)
        self.entries.append(entry)
        self.entries.sort(key=lambda e: (e.val_loss, e.epoch))
        for dropped in self.entries[self.k:]:
            if dropped.path:
                Path(dropped.path).unlink(missing_ok=True)
        del self.entries[self.k:]
        return True


def model_snapshot(model: nn.Module) -> dict:
    """Adapter tensors for LoRA-wrapped models, full state otherwise."""
    if lora_layers(model):
        return adapter_state_dict(model)
    return copy.deepcopy(model.state_dict())


def restore_snapshot(model: nn.Module, state: dict) -> None:
    model.load_state_dict(state, strict=not lora_layers(model))


def make_optimizer(model: nn.Module, cfg: OptimizerConfig) -> torch.optim.Optimizer:
    params = [p for p in model.parameters() if p.requires_grad]
    if not params:
        raise TrainingError("model has no trainable parameters")
    name = cfg.name.lower()
    if name == "adamw":
        return torch.optim.AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    if name == "adam":
        return torch.optim.Adam(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    if name == "sgd":
        return torch.optim.SGD(params, lr=cfg.lr, weight_decay=cfg.weight_decay, momentum=0.9)
    raise ValueError(f"unknown optimizer {cfg.name!r}")


def fit(
    model: nn.Module,
    train_epoch: Callable[[int], float],
    validate: Callable[[int], float],
    config: TrainConfig,
    fold: int = 0,
    run_dir: str | Path | None = None,
    checkpoint_meta: dict | None = None,
    stop_when: Callable[[int], bool] | None = None,
) -> RunLedger:
    """Generic epoch loop: early stopping, top-k retention, best-state restore.

    ``train_epoch(epoch)`` runs one epoch and returns the mean train loss;
    ``validate(epoch)`` returns the validation loss. Epochs count from 1.
    ``stop_when(epoch)``, if given, ends training early once it returns True.
    """
    run_dir = Path(run_dir) if run_dir is not None else None
    ledger = RunLedger(fold=fold)
    stopper = EarlyStopping(config.patience)
    registry = CheckpointRegistry(
        config.top_k_checkpoints, fold, run_dir / "checkpoints" if run_dir else None
    )
    best_state = None
    for epoch in range(1, config.max_epochs + 1):
        train_loss = float(train_epoch(epoch))
        val_loss = float(validate(epoch))
        if not (math.isfinite(train_loss) and math.isfinite(val_loss)):
            ledger.stop_reason = f"non-finite loss at epoch {epoch}"
            raise TrainingError(
                f"fold {fold} epoch {epoch}: train_loss={train_loss} val_loss={val_loss}"
            )
        ledger.epochs.append(EpochLog(epoch, train_loss, val_loss))
        stop = stopper.step(epoch, val_loss)
        if stopper.best_epoch == epoch:
            best_state = model_snapshot(model)
        registry.offer(epoch, val_loss, lambda: model_snapshot(model), checkpoint_meta)
        ledger.checkpoints = list(registry.entries)
        ledger.best_epoch = stopper.best_epoch
        log.debug("fold %d epoch %d train %.5f val %.5f", fold, epoch, train_loss, val_loss)
        if run_dir is not None:
            ledger.save(run_dir / "ledger.json")
        if stop:
            ledger.stop_reason = f"early stopping: no improvement for {config.patience} epochs"
            break
        if stop_when is not None and stop_when(epoch):
            ledger.stop_reason = f"stop condition met at epoch {epoch}"
            break
    else:
        ledger.stop_reason = f"reached max_epochs={config.max_epochs}"
    if best_state is not None:
        restore_snapshot(model, best_state)
    if run_dir is not None:
        ledger.save(run_dir / "ledger.json")
    return ledger


# --------------------------------------------------------------------------
# data preparation
# --------------------------------------------------------------------------

def _to_chw(image: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(image.transpose(2, 0, 1))).float()


def detection_tensors(
    records: list[PatchRecord], disk: DiskTargetSpec = DiskTargetSpec(), policy: AugmentPolicy | None = None,
    rng: np.random.Generator | None = None,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Stack normalised images ``(N,3,H,W)`` and disk masks ``(N,1,H,W)``."""
    xs, ys = [], []
    for rec in records:
        if policy is not None:
            rec = train_transform(rec, policy, rng)
        img = rec.load_image()
        xs.append(_to_chw(normalize(img)))
        mask = render_disk_mask(rec.centroids or [], disk, shape=img.shape[:2])
        ys.append(torch.from_numpy(mask).float()[None])
    return torch.stack(xs), torch.stack(ys)


def classification_tensors(
    records: list[PatchRecord], size: int, policy: AugmentPolicy | None = None,
    rng: np.random.Generator | None = None,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Stack images ``(N,3,size,size)`` and labels ``(N,1)``.

    Without a policy the deterministic validation transform is used.
    """
    xs = []
    for rec in records:
        if policy is not None:
            out = train_transform(rec, policy, rng)
            img = normalize(resize(out.image, (size, size))[0])
        else:
            img = val_transform(rec, size).image
        xs.append(_to_chw(img))
    ys = torch.tensor([[float(r.class_label)] for r in records])
    return torch.stack(xs), ys


def _batched_loss(model, loss_fn, x, y, batch_size) -> float:
    model.eval()
    total, n = 0.0, 0
    with torch.no_grad():
        for i in range(0, len(x), batch_size):
            xb, yb = x[i:i + batch_size], y[i:i + batch_size]
            total += float(loss_fn(torch.sigmoid(model(xb)), yb)) * len(xb)
            n += len(xb)
    return total / n


def train_fold(
    manifest: DatasetManifest,
    fold_index: int,
    fold_plan: FoldPlan,
    model: nn.Module,
    train_config: TrainConfig,
    loss_spec: LossSpec | None = None,
    sampler_spec: SamplerSpec | None = None,
    augment: AugmentPolicy | None = None,
    run_dir: str | Path | None = None,
    disk: DiskTargetSpec = DiskTargetSpec(),
    input_size: int | None = None,
    checkpoint_meta: dict | None = None,
    stop_when: Callable[[int], bool] | None = None,
) -> RunLedger:
    """Train ``model`` on one fold of ``fold_plan``; returns the run ledger.

    The model ends up holding the weights of its best validation epoch.
    """
    track = train_config.track
    if track != manifest.track:
        raise TrainingError(f"config track {track!r} does not match manifest track {manifest.track!r}")
    if not 0 <= fold_index < len(fold_plan.folds):
        raise TrainingError(f"fold {fold_index} not in plan with {len(fold_plan.folds)} folds")
    loss_spec = loss_spec or LossSpec.for_track(track)
    sampler_spec = sampler_spec or SamplerSpec.for_track(track)
    train_ids, val_ids = fold_plan.folds[fold_index]
    if not train_ids or not val_ids:
        raise TrainingError(f"fold {fold_index}: empty train or val split")

    train_recs = manifest.subset(train_ids)
    val_recs = manifest.subset(val_ids)
    by_id = {r.patch_id: i for i, r in enumerate(train_recs)}
    bs = train_config.batch_size
    torch.manual_seed(train_config.seed)

    if track == "detection":
        def tensors(recs, policy=None, rng=None):
            return detection_tensors(recs, disk, policy, rng)
    else:
        size = input_size or getattr(getattr(model, "config", None), "image_size", 224)

        def tensors(recs, policy=None, rng=None):
            return classification_tensors(recs, size, policy, rng)

    x_val, y_val = tensors(val_recs)
    x_train, y_train = (None, None) if augment is not None else tensors(train_recs)
    optimizer = make_optimizer(model, train_config.optimizer)

    def epoch_batches(epoch: int) -> list[list[int]]:
        seed = train_config.seed * 100_003 + epoch
        if sampler_spec.kind == "fraction":
            plan = plan_fraction_batches(
                [(r.patch_id, r.is_positive) for r in train_recs], bs, sampler_spec.min_positive_fraction, seed
            )
            return [[by_id[p] for p in b] for b in plan.batches]
        if sampler_spec.kind == "weighted":
            weights = inverse_frequency_weights({r.patch_id: r.class_label for r in train_recs})
            draws = weighted_draws(weights, len(train_recs), seed)
            idx = [by_id[p] for p in draws]
            return [idx[i:i + bs] for i in range(0, len(idx), bs)]
        if sampler_spec.kind == "shuffle":
            idx = list(np.random.default_rng(seed).permutation(len(train_recs)))
            return [idx[i:i + bs] for i in range(0, len(idx), bs)]
        raise ValueError(f"unknown sampler kind {sampler_spec.kind!r}")

    def train_epoch(epoch: int) -> float:
        xt, yt = x_train, y_train
        if augment is not None:
            rng = np.random.default_rng(worker_seed(train_config.seed, 0, epoch))
            xt, yt = tensors(train_recs, augment, rng)
        model.train()
        total, n = 0.0, 0
        for batch in epoch_batches(epoch):
            xb, yb = xt[batch], yt[batch]
            optimizer.zero_grad()
            loss = loss_spec(torch.sigmoid(model(xb)), yb)
            if not torch.isfinite(loss):
                raise TrainingError(f"fold {fold_index} epoch {epoch}: non-finite training loss {loss.item()}")
            loss.backward()
            optimizer.step()
            total += loss.item() * len(batch)
            n += len(batch)
        return total / n

    def validate(epoch: int) -> float:
        return _batched_loss(model, loss_spec, x_val, y_val, bs)

    return fit(model, train_epoch, validate, train_config, fold_index, run_dir, checkpoint_meta, stop_when)


def select_ensemble(ledgers: list[RunLedger], k: int = 3) -> list[CheckpointEntry]:
    """The ``k`` retained checkpoints with the lowest val loss across folds.

    Ties are broken by ``(fold, epoch)`` ascending.
    """
    pool = [c for ledger in ledgers for c in ledger.checkpoints]
    if len(pool) < k:
        raise TrainingError(f"need {k} checkpoints, only {len(pool)} retained")
    return sorted(pool, key=lambda c: (c.val_loss, c.fold, c.epoch))[:k]


@torch.no_grad()
def segmentation_dice(model: nn.Module, images: torch.Tensor, masks: torch.Tensor, threshold: float = 0.5) -> float:
    """Hard Dice of thresholded predictions pooled over all pixels."""
    model.eval()
    pred = torch.sigmoid(model(images)) >= threshold
    return dice_coefficient(pred, masks)


@torch.no_grad()
def classification_accuracy(model: nn.Module, images: torch.Tensor, labels: torch.Tensor) -> float:
    model.eval()
    pred = (torch.sigmoid(model(images)) >= 0.5).float()
    return float((pred == labels).float().mean())
