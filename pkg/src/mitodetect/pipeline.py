"""Glue between configs, run directories and the library operations."""

from __future__ import annotations

import json
import logging
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .augmentation import val_resize_crop
from .config import RunConfig
from .data_model import DatasetManifest, PatchRecord
from .evaluation import write_classification_predictions
from .geometry import Detection, write_detections
from .inference import Normalize, ensemble_predict, predict_detections
from .lora import merge, wrap
from .models import build_seg_model, build_toy_vit
from .splitting import FoldPlan
from .training import (
    RunLedger,
    TrainingError,
    classification_accuracy,
    classification_tensors,
    detection_tensors,
    restore_snapshot,
    segmentation_dice,
    select_ensemble,
    train_fold,
)

log = logging.getLogger(__name__)


def build_model(config: RunConfig) -> nn.Module:
    if config.track == "detection":
        return build_seg_model(config.model)
    model = build_toy_vit(config.model)
    if config.lora is not None:
        wrap(model, config.lora)
    return model


def fold_dir(run_root: str | Path, fold: int) -> Path:
    return Path(run_root) / f"fold{fold}"


def run_training(
    config: RunConfig, manifest: DatasetManifest, plan: FoldPlan, fold: int, run_dir: str | Path
) -> RunLedger:
    """Train one fold into ``run_dir`` (config snapshot, ledger, checkpoints, metrics)."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    config.save(run_dir / "config.json")
    model = build_model(config)
    ledger = train_fold(
        manifest, fold, plan, model, config.train, config.loss, config.sampler,
        augment=config.augment, run_dir=run_dir, disk=config.disk,
        checkpoint_meta={"track": config.track},
    )
    metrics_dir = run_dir / "metrics"
    metrics_dir.mkdir(exist_ok=True)
    summary = {
        "fold": fold,
        "best_epoch": ledger.best_epoch,
        "best_val_loss": ledger.best_val_loss,
        "epochs_run": len(ledger.epochs),
        "stop_reason": ledger.stop_reason,
    }
    (metrics_dir / "summary.json").write_text(json.dumps(summary, indent=1) + "\n")
    return ledger


def discover_runs(paths: list[str | Path]) -> list[Path]:
    """Expand run roots into fold directories holding a ledger."""
    found = []
    for p in map(Path, paths):
        if (p / "ledger.json").is_file():
            found.append(p)
        elif p.is_dir():
            found.extend(sorted(d for d in p.iterdir() if (d / "ledger.json").is_file()))
    return found


def _model_from_state(config: RunConfig, state: dict) -> nn.Module:
    model = build_model(config)
    restore_snapshot(model, state)
    if config.track == "classification" and config.lora is not None:
        merge(model)
    model.eval()
    return model


def load_ensemble(run_dirs: list[Path]) -> tuple[RunConfig, list[nn.Module]]:
    """Detection: global top-k checkpoints across folds. Classification: each fold's best."""
    if not run_dirs:
        raise FileNotFoundError("no trained run directories found")
    config = RunConfig.load(run_dirs[0] / "config.json")
    ledgers = [RunLedger.load(d / "ledger.json") for d in run_dirs]
    if config.track == "detection":
        chosen = select_ensemble(ledgers, config.ensemble_k)
    else:
        chosen = []
        for ledger in ledgers:
            if not ledger.checkpoints:
                raise TrainingError(f"fold {ledger.fold}: no retained checkpoints")
            chosen.append(min(ledger.checkpoints, key=lambda c: (c.val_loss, c.epoch)))
    models = [_model_from_state(config, c.load_state()) for c in chosen]
    log.info("ensemble of %d models: %s", len(models), [(c.fold, c.epoch) for c in chosen])
    return config, models


def _pixels(image: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(image.transpose(2, 0, 1))).float() / 255.0


def predict_records(
    config: RunConfig,
    models: list[nn.Module],
    records: list[PatchRecord],
    out_path: str | Path,
    use_tta: bool = False,
) -> dict:
    """Write the track's prediction file; returns the predictions in memory."""
    norm = Normalize()
    if config.track == "detection":
        pp = config.postprocess
        dets: dict[str, list[Detection]] = {}
        for rec in records:
            dets[rec.patch_id] = predict_detections(
                models, _pixels(rec.load_image()), pp.threshold, pp.min_area_px, norm
            )
        write_detections(out_path, dets)
        return dets
    size = config.model.image_size
    policy = config.tta if use_tta else None
    rows = []
    for rec in records:
        image = _pixels(val_resize_crop(rec.load_image(), size)[0])
        prob = float(ensemble_predict(models, image, "classification", policy, norm))
        rows.append((rec.patch_id, prob, rec.domain_id))
    write_classification_predictions(out_path, rows)
    return {pid: prob for pid, prob, _ in rows}


def select_records(manifest: DatasetManifest, plan: FoldPlan | None, which: str) -> list[PatchRecord]:
    if which == "all":
        return list(manifest)
    if plan is None:
        raise ValueError(f"--ids {which} needs a fold plan")
    if which == "test":
        ids = plan.test_ids
    elif which.startswith("val"):
        ids = plan.folds[int(which[3:])][1]
    else:
        raise ValueError(f"unknown id selection {which!r}")
    return manifest.subset(ids)


def train_metrics(config: RunConfig, model: nn.Module, records: list[PatchRecord]) -> dict:
    """Dice (detection) or accuracy (classification) on ``records``."""
    if config.track == "detection":
        x, y = detection_tensors(records, config.disk)
        return {"dice": segmentation_dice(model, x, y)}
    x, y = classification_tensors(records, config.model.image_size)
    return {"accuracy": classification_accuracy(model, x, y)}
