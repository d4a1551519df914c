"""Run configuration: one JSON file that fully determines a training run."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

from .augmentation import AugmentPolicy
from .geometry import DEFAULT_MATCH_RADIUS, DEFAULT_MIN_AREA, DiskTargetSpec
from .inference import TtaPolicy
from .lora import LoraConfig
from .losses import ComboLossWeights, FocalParams
from .models import SegModelConfig, VitConfig
from .training import LossSpec, SamplerSpec, TrainConfig


@dataclass
class PostprocessConfig:
    threshold: float = 0.5
    min_area_px: int = DEFAULT_MIN_AREA
    match_radius_px: float = DEFAULT_MATCH_RADIUS


@dataclass
class RunConfig:
    track: str
    train: TrainConfig
    model: SegModelConfig | VitConfig
    loss: LossSpec
    sampler: SamplerSpec
    augment: AugmentPolicy | None = None
    lora: LoraConfig | None = None
    tta: TtaPolicy | None = None
    disk: DiskTargetSpec = field(default_factory=DiskTargetSpec)
    postprocess: PostprocessConfig = field(default_factory=PostprocessConfig)
    ensemble_k: int = 3
    manifest: str | None = None
    plan: str | None = None
    run_root: str | None = None

    @classmethod
    def for_track(cls, track: str) -> "RunConfig":
        if track == "detection":
            return cls(
                track=track,
                train=TrainConfig.for_track(track),
                model=SegModelConfig(),
                loss=LossSpec.for_track(track),
                sampler=SamplerSpec.for_track(track),
            )
        if track == "classification":
            return cls(
                track=track,
                train=TrainConfig.for_track(track),
                model=VitConfig(),
                loss=LossSpec.for_track(track),
                sampler=SamplerSpec.for_track(track),
                augment=AugmentPolicy.classification(),
                lora=LoraConfig(),
                tta=TtaPolicy(),
            )
        raise ValueError(f"unknown track {track!r}")

    @property
    def seed(self) -> int:
        return self.train.seed

    def to_json(self) -> dict:
        return {
            "track": self.track,
            "train": self.train.to_json(),
            "model": asdict(self.model),
            "loss": {"kind": self.loss.kind, "weights": asdict(self.loss.weights),
                     "focal": asdict(self.loss.focal), "smooth": self.loss.smooth},
            "sampler": asdict(self.sampler),
            "augment": None if self.augment is None else self.augment.to_json(),
            "lora": None if self.lora is None else self.lora.to_json(),
            "tta": None if self.tta is None else self.tta.to_json(),
            "disk": asdict(self.disk),
            "postprocess": asdict(self.postprocess),
            "ensemble_k": self.ensemble_k,
            "manifest": self.manifest,
            "plan": self.plan,
            "run_root": self.run_root,
        }

    @classmethod
    def from_json(cls, d: dict) -> "RunConfig":
        """Missing sections fall back to the track defaults."""
        base = cls.for_track(d["track"])
        if "train" in d:
            base.train = TrainConfig(**d["train"])
        if "model" in d:
            model_cls = SegModelConfig if base.track == "detection" else VitConfig
            base.model = model_cls(**d["model"])
        if "loss" in d:
            ld = d["loss"]
            base.loss = LossSpec(ld.get("kind", base.loss.kind), ComboLossWeights(**ld.get("weights", {})),
                                 FocalParams(**ld.get("focal", {})), ld.get("smooth", 1.0))
        if "sampler" in d:
            base.sampler = SamplerSpec(**d["sampler"])
        if "augment" in d:
            base.augment = AugmentPolicy.from_json(d["augment"])
        if "lora" in d:
            base.lora = None if d["lora"] is None else LoraConfig(**d["lora"])
        if "tta" in d:
            base.tta = None if d["tta"] is None else TtaPolicy.from_json(d["tta"])
        if "disk" in d:
            base.disk = DiskTargetSpec(**d["disk"])
        if "postprocess" in d:
            base.postprocess = PostprocessConfig(**d["postprocess"])
        for key in ("ensemble_k", "manifest", "plan", "run_root"):
            if key in d:
                setattr(base, key, d[key])
        return base

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        return cls.from_json(json.loads(Path(path).read_text()))
